mod common;

use common::{bench, first_batch, model_config, toy_model};
use mmfuse::bind::{Binder, GradSet};
use mmfuse::fusion::{fuse_self_gated, fusion_create, moe_mix, token_budget, Strategy};
use mmfuse::model::{Batch, Model};
use mmfuse::reasoner::{reasoner_flops, sequence_length};
use mmfuse::synthbench::QUESTION_LEN;
use mmfuse::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: &[usize], std: f64, seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn measured_token_counts_follow_the_budget() {
    for n in 2..=6 {
        let spec = bench(n, 4, 4, 3);
        for strategy in Strategy::ALL {
            let model = Model::<f32>::new(model_config(&spec, n, strategy, 16, 3)).unwrap();
            let (_, batch) = first_batch(&spec, &model, 2);
            let mut g = Graph::new();
            let mut b = Binder::new(&model.registry, GradSet::None);
            let out = model.forward(&mut g, &mut b, &batch).unwrap();
            let budget = token_budget(strategy, n, 4);
            assert_eq!(g.shape(out.fused), [2, budget, 16], "{strategy} n={n}");
            assert_eq!(out.provenance.len(), budget);
            assert_eq!(
                g.shape(out.assembled)[1],
                sequence_length(strategy, n, 4, QUESTION_LEN)
            );
        }
        assert_eq!(token_budget(Strategy::SelfGated, n, 4), 8);
        assert_eq!(token_budget(Strategy::Concat, n, 4), 4 * n);
    }
}

#[test]
fn reasoner_cost_is_flat_for_self_gated_and_grows_for_concat() {
    let cost = |n, s| reasoner_flops(n, 4, QUESTION_LEN, s, 32, 2, 8, 11);
    for n in 2..6 {
        assert_eq!(
            cost(n, Strategy::SelfGated),
            cost(n + 1, Strategy::SelfGated)
        );
        assert!(cost(n + 1, Strategy::Concat) > cost(n, Strategy::Concat));
    }
    assert!(cost(5, Strategy::Concat) > cost(5, Strategy::SelfGated));
}

#[test]
fn silent_supportive_streams_give_a_zero_gated_block() {
    let sup = vec!["audio".to_string(), "depth".to_string()];
    let (_, mut reg) =
        fusion_create::<f32>(Strategy::SelfGated, "video", &sup, 4, 16, 4, 4, 1).unwrap();
    *reg.get_mut("fusion.pi.bias").unwrap() = Tensor::zeros(&[16]);
    let q_major = randn(&[2, 4, 16], 1.0, 2);
    let mut g = Graph::new();
    let mut b = Binder::new(&reg, GradSet::None);
    let qv = g.constant(q_major.clone());
    let zeros: Vec<_> = (0..2)
        .map(|_| g.constant(Tensor::zeros(&[2, 4, 16])))
        .collect();
    let out = fuse_self_gated(&mut g, &mut b, qv, &zeros).unwrap();
    let v = g.value(out).data();
    for bi in 0..2 {
        let row = &v[bi * 8 * 16..(bi + 1) * 8 * 16];
        assert_eq!(&row[..64], &q_major.data()[bi * 64..(bi + 1) * 64]);
        assert!(row[64..].iter().all(|&x| x == 0.0));
    }
}

#[test]
fn moe_uses_exactly_one_expert_per_token() {
    let sup = vec!["audio".to_string(), "depth".to_string()];
    let (d, e) = (8, 4);
    let (_, reg) = fusion_create::<f32>(Strategy::MoE, "video", &sup, 3, d, 2, e, 5).unwrap();
    let streams: Vec<Tensor<f32>> = (0..2).map(|i| randn(&[2, 3, d], 1.0, 10 + i)).collect();
    let mut g = Graph::new();
    let mut b = Binder::new(&reg, GradSet::None);
    let vars: Vec<_> = streams.iter().map(|t| g.constant(t.clone())).collect();
    let (mixed, choice) = moe_mix(&mut g, &mut b, e, d, &vars).unwrap();
    assert_eq!(choice.len(), 6);

    let cat_rows: Vec<Vec<f32>> = (0..6)
        .map(|tok| {
            let mut row = streams[0].data()[tok * d..(tok + 1) * d].to_vec();
            row.extend_from_slice(&streams[1].data()[tok * d..(tok + 1) * d]);
            row
        })
        .collect();
    for (tok, row) in cat_rows.iter().enumerate() {
        let x = Tensor::new(vec![1, 2 * d], row.clone()).unwrap();
        let logits = x
            .matmul(reg.get("fusion.moe.gate.weight").unwrap())
            .unwrap();
        let gb = reg.get("fusion.moe.gate.bias").unwrap().data();
        let logits: Vec<f32> = logits.data().iter().zip(gb).map(|(a, b)| a + b).collect();
        let probs = Tensor::new(vec![e], logits).unwrap().softmax();
        let c = choice[tok];
        let y = x
            .matmul(reg.get("fusion.moe.experts.weight").unwrap())
            .unwrap();
        let eb = reg.get("fusion.moe.experts.bias").unwrap().data();
        let got = &g.value(mixed).data()[tok * d..(tok + 1) * d];
        for k in 0..d {
            let want = probs.data()[c] * (y.data()[c * d + k] + eb[c * d + k]);
            assert!((got[k] - want).abs() < 1e-5, "token {tok} channel {k}");
        }
        assert!(probs.data().iter().all(|&p| p <= probs.data()[c]));
    }
}

#[test]
fn bypass_with_one_supportive_matches_concat() {
    let (spec, concat) = toy_model(2, Strategy::Concat);
    let mut cfg = concat.config.clone();
    cfg.strategy = Strategy::Bypass;
    let bypass = Model::<f32>::new(cfg).unwrap();
    let (_, batch) = first_batch(&spec, &concat, 3);
    let run = |m: &Model<f32>| {
        let mut g = Graph::new();
        let mut b = Binder::new(&m.registry, GradSet::None);
        let out = m.forward(&mut g, &mut b, &batch).unwrap();
        (g.value(out.fused).clone(), g.value(out.logits).clone())
    };
    let (fc, lc) = run(&concat);
    let (fb, lb) = run(&bypass);
    assert!(fc.bit_eq(&fb));
    assert!(lc.bit_eq(&lb));
}

fn permute_batch(batch: &Batch<f32>, perm: &[usize]) -> Batch<f32> {
    let mut out = batch.clone();
    for (f_out, f_in) in out.features.iter_mut().zip(&batch.features) {
        let row = f_in.features.numel() / batch.size();
        let src = f_in.features.data();
        let data: Vec<f32> = perm
            .iter()
            .flat_map(|&p| src[p * row..(p + 1) * row].to_vec())
            .collect();
        f_out.features = Tensor::new(f_in.features.shape().to_vec(), data).unwrap();
    }
    let q = batch.q_len;
    out.tokens = perm
        .iter()
        .flat_map(|&p| batch.tokens[p * q..(p + 1) * q].to_vec())
        .collect();
    out.targets = perm.iter().map(|&p| batch.targets[p]).collect();
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn self_gate_shrinks_and_keeps_sign(values in prop::collection::vec(-20.0f64..20.0, 1..32)) {
        let n = values.len();
        let x = Tensor::<f64>::new(vec![n], values.clone()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.self_gate(xv).unwrap();
        for (a, b) in values.iter().zip(g.value(y).data()) {
            prop_assert!(b.abs() <= a.abs());
            prop_assert!(a * b >= 0.0);
        }
    }

    #[test]
    fn batch_rows_are_independent(seed in 0u64..1000) {
        let (spec, model) = toy_model(3, Strategy::SelfGated);
        let (_, batch) = first_batch(&spec, &model, 5);
        let mut perm: Vec<usize> = (0..5).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = permute_batch(&batch, &perm);
        let logits = |b: &Batch<f32>| {
            let mut g = Graph::new();
            let mut bind = Binder::new(&model.registry, GradSet::None);
            let out = model.forward(&mut g, &mut bind, b).unwrap();
            g.value(out.logits).clone()
        };
        let (a, c) = (logits(&batch), logits(&shuffled));
        let cls = a.shape()[1];
        for (i, &p) in perm.iter().enumerate() {
            let ra = &a.data()[p * cls..(p + 1) * cls];
            let rc = &c.data()[i * cls..(i + 1) * cls];
            for (x, y) in ra.iter().zip(rc) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }
    }
}
