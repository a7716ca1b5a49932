#![allow(dead_code)]

use mmfuse::backbone::BackboneDims;
use mmfuse::fusion::Strategy;
use mmfuse::model::{Batch, Model, ModelConfig};
use mmfuse::reasoner::{ReasonerDims, ReasonerInit};
use mmfuse::synthbench::{gen_dataset, BenchSpec, EqualPairs, ModalitySpec, SynthExample};
use mmfuse::trainer::make_batch;

pub const WIDTHS: [usize; 6] = [16, 24, 32, 20, 12, 28];
pub const NAMES: [&str; 6] = ["video", "audio", "depth", "flow", "norm", "touch"];

pub fn bench(n: usize, train: usize, test: usize, seed: u64) -> BenchSpec {
    BenchSpec {
        modalities: (0..n)
            .map(|i| ModalitySpec {
                name: NAMES[i].into(),
                feat_dim: WIDTHS[i],
                seq_len: 4,
            })
            .collect(),
        major: "video".into(),
        symbols: 5,
        sigma: 0.05,
        train_size: train,
        test_size: test,
        seed,
        equal_pairs: EqualPairs::Supportive,
    }
}

/// Model over the first `n` modalities of `spec`.
pub fn model_config(
    spec: &BenchSpec,
    n: usize,
    strategy: Strategy,
    d: usize,
    seed: u64,
) -> ModelConfig {
    ModelConfig {
        backbone: BackboneDims {
            d,
            layers: 2,
            heads: 4,
            tokens: 4,
        },
        rank: 4,
        modalities: spec.modalities[..n]
            .iter()
            .map(|m| (m.name.clone(), m.feat_dim))
            .collect(),
        major: "video".into(),
        strategy,
        experts: 4,
        reasoner: ReasonerDims {
            d,
            layers: 2,
            heads: 4,
            ffn_mult: 8,
            vocab: spec.vocab_size(),
            classes: spec.classes(),
        },
        reasoner_init: ReasonerInit::default(),
        train_classifier: false,
        instruction: true,
        seed,
    }
}

pub fn toy_model(n: usize, strategy: Strategy) -> (BenchSpec, Model<f32>) {
    let spec = bench(n, 64, 32, 5);
    let model = Model::new(model_config(&spec, n, strategy, 32, 5)).unwrap();
    (spec, model)
}

pub fn first_batch(
    spec: &BenchSpec,
    model: &Model<f32>,
    size: usize,
) -> (Vec<SynthExample>, Batch<f32>) {
    let data = gen_dataset(spec).unwrap();
    let idx: Vec<usize> = (0..size).collect();
    let batch = make_batch(spec, &model.modality_names(), &data.train, &idx, &[]).unwrap();
    (data.train, batch)
}
