mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{bench, first_batch, model_config, toy_model};
use mmfuse::bind::{Binder, GradSet};
use mmfuse::fusion::Strategy;
use mmfuse::model::Model;
use mmfuse::registry::Tag;
use mmfuse::synthbench::gen_dataset;
use mmfuse::tensor::optim::AdamConfig;
use mmfuse::tensor::Graph;
use mmfuse::trainer::{fit, make_batch, masked_step, sequential_step, OptState, TrainConfig};

fn tags(model: &Model<f32>) -> BTreeMap<String, Tag> {
    model
        .registry
        .iter()
        .map(|(n, e)| (n.to_string(), e.tag.clone()))
        .collect()
}

#[test]
fn hundred_sequential_steps_touch_only_their_targets() {
    let (spec, mut model) = toy_model(3, Strategy::SelfGated);
    let data = gen_dataset(&spec).unwrap();
    let names = model.modality_names();
    let tag_of = tags(&model);
    let initial = model.registry.checksums();
    let mut opt = OptState::default();
    let adam = AdamConfig::default();
    for step in 0..100 {
        let m = &names[step % names.len()];
        let start = (step * 8) % (data.train.len() - 8);
        let idx: Vec<usize> = (start..start + 8).collect();
        let batch = make_batch(&spec, &names, &data.train, &idx, &[]).unwrap();
        let before = model.registry.checksums();
        sequential_step(&mut model, &mut opt, &batch, m, &adam).unwrap();
        let after = model.registry.checksums();
        for (name, sum) in &after {
            let target =
                matches!(&tag_of[name], Tag::Modality(t) if t == m) || tag_of[name] == Tag::Fusion;
            if !target {
                assert_eq!(sum, &before[name], "step {step} on {m} changed {name}");
            }
        }
        assert_ne!(
            after["fusion.pi.weight"], before["fusion.pi.weight"],
            "fusion did not move on step {step} ({m})"
        );
    }
    let end = model.registry.checksums();
    for (name, tag) in &tag_of {
        if matches!(tag, Tag::Frozen | Tag::Shared) {
            assert_eq!(end[name], initial[name], "{name}");
        }
    }
}

#[test]
fn masked_binder_grads_only_the_requested_modality() {
    let (spec, model) = toy_model(3, Strategy::SelfGated);
    let (_, batch) = first_batch(&spec, &model, 4);
    for m in model.modality_names() {
        let mut g = Graph::new();
        let mut b = Binder::new(&model.registry, GradSet::tags([Tag::Modality(m.clone())]));
        let out = model.forward(&mut g, &mut b, &batch).unwrap();
        let loss = g.cross_entropy(out.logits, &batch.targets).unwrap();
        let grads = g.backward(loss).unwrap();
        let leaves = b.grad_leaves(&g);
        assert!(!leaves.is_empty());
        for (name, var) in leaves {
            assert!(
                name.starts_with(&format!("{m}.")),
                "{name} carried a gradient on {m}'s pass"
            );
            assert!(grads.get(var).is_some());
        }
    }
}

#[test]
fn joint_and_sequential_updates_differ() {
    let (spec, model) = toy_model(3, Strategy::SelfGated);
    let (_, batch) = first_batch(&spec, &model, 8);
    let adam = AdamConfig::default();

    let mut seq = model.clone();
    let mut opt = OptState::default();
    for m in seq.modality_names() {
        sequential_step(&mut seq, &mut opt, &batch, &m, &adam).unwrap();
    }

    let mut joint = model.clone();
    let mut opt = OptState::default();
    let mut all: BTreeSet<Tag> = joint
        .modality_names()
        .into_iter()
        .map(Tag::Modality)
        .collect();
    all.insert(Tag::Fusion);
    masked_step(&mut joint, &mut opt, &batch, &all, &adam).unwrap();

    let differs = seq
        .registry
        .iter()
        .filter(|(_, e)| e.trainable)
        .any(|(n, e)| !e.tensor.bit_eq(joint.registry.get(n).unwrap()));
    assert!(differs);
}

#[test]
fn fit_keeps_frozen_tensors_and_deactivates_monotonically() {
    let spec = bench(3, 96, 32, 4);
    let data = gen_dataset(&spec).unwrap();
    let mut model = Model::<f32>::new(model_config(&spec, 3, Strategy::SelfGated, 32, 4)).unwrap();
    let frozen_before: BTreeMap<_, _> = model
        .frozen_names()
        .into_iter()
        .map(|n| {
            let sum = model.registry.get(&n).unwrap().checksum();
            (n, sum)
        })
        .collect();
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 16,
        early_exit: true,
        tau: 3.0,
        ..TrainConfig::default()
    };
    let report = fit(&mut model, &spec, &data.train, &data.test, &cfg).unwrap();
    for (n, sum) in &frozen_before {
        assert_eq!(&model.registry.get(n).unwrap().checksum(), sum, "{n}");
    }
    for pair in report.epochs.windows(2) {
        let later: BTreeSet<_> = pair[1].active.iter().collect();
        let earlier: BTreeSet<_> = pair[0].active.iter().collect();
        assert!(later.is_subset(&earlier));
    }
    // A large tau makes every modality exit at the first check.
    assert!(
        report.exit_epochs.values().all(|e| *e == Some(2)),
        "{:?}",
        report.exit_epochs
    );
    assert!(report.fusion_only_steps > 0);
    // One gradient summary per epoch a modality actually trained.
    for h in report.history.modalities.values() {
        assert_eq!(h.gbar.len(), 2);
    }
}
