//! The work behind each CLI command, callable from tests.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::backbone::BackboneDims;
use crate::bind::{Binder, GradSet};
use crate::error::{Error, Result};
use crate::fusion::Strategy;
use crate::harness::checkpoint::{read_checkpoint, restore, save_checkpoint, RestoreReport};
use crate::harness::config::RunConfig;
use crate::harness::metrics::{
    base_record, report_records, template_map, write_jsonl, MetricsRecord, SubsetScore,
};
use crate::model::{Model, ModelConfig};
use crate::reasoner::{ReasonerDims, ReasonerInit};
use crate::rng;
use crate::synthbench::{gen_dataset, split_easy_hard, BenchSpec, EqualPairs, ModalitySpec};
use crate::tensor::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::tensor::{Graph, Tensor};
use crate::trainer::{evaluate, fit, make_batch, score, Mode, TrainReport};

/// Environment variable naming the directory relative output paths live under.
pub const OUTPUT_ROOT_ENV: &str = "MMFUSE_OUTPUT_ROOT";
pub const CHECKPOINT_FILE: &str = "model.crma";
pub const METRICS_FILE: &str = "metrics.jsonl";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

pub fn run_dir(cfg: &RunConfig) -> PathBuf {
    let dir = Path::new(&cfg.output_dir);
    if dir.is_absolute() {
        dir.to_path_buf()
    } else {
        output_root().join(dir)
    }
}

pub struct InitFrom<'a> {
    pub checkpoint: &'a Path,
    pub force: bool,
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub report: TrainReport,
    pub records: Vec<MetricsRecord>,
    pub restored: Option<RestoreReport>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Trains `cfg` from scratch (or from `init`) and writes the checkpoint and
/// metrics into `dir`.
pub fn train_run(cfg: &RunConfig, dir: &Path, init: Option<InitFrom<'_>>) -> Result<TrainOutcome> {
    let data = gen_dataset(&cfg.bench)?;
    let mut model = Model::<f32>::new(cfg.model.clone())?;
    let restored = match init {
        Some(i) => Some(restore(
            &mut model,
            &read_checkpoint(i.checkpoint)?,
            i.force,
        )?),
        None => None,
    };
    let report = fit(&mut model, &cfg.bench, &data.train, &data.test, &cfg.train)?;
    let records = report_records(&cfg.name, &model, &report);
    std::fs::create_dir_all(dir)?;
    let checkpoint = dir.join(CHECKPOINT_FILE);
    let metrics = dir.join(METRICS_FILE);
    write_jsonl(&metrics, &records)?;
    save_checkpoint(&checkpoint, &model, &cfg.to_text())?;
    Ok(TrainOutcome {
        model,
        report,
        records,
        restored,
        checkpoint,
        metrics,
    })
}

/// Rebuilds the model stored in a checkpoint from its embedded configuration.
pub fn load_model(path: &Path) -> Result<(RunConfig, Model<f32>)> {
    let ckpt = read_checkpoint(path)?;
    let cfg = RunConfig::parse(&ckpt.config_text)?;
    let mut model = Model::new(cfg.model.clone())?;
    restore(&mut model, &ckpt, false)?;
    Ok((cfg, model))
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Modalities fed real features; the rest are zeroed. `None` = all.
    pub visible: Option<Vec<String>>,
    pub easy_hard: bool,
    /// Checkpoint whose predictions define easy/hard. Without one, the same
    /// model with only its major modality visible is the reference.
    pub reference: Option<PathBuf>,
    /// Benchmark to evaluate on instead of the checkpoint's own.
    pub bench: Option<BenchSpec>,
}

pub fn eval_model(
    run: &str,
    model: &Model<f32>,
    bench: &BenchSpec,
    opts: &EvalOptions,
) -> Result<MetricsRecord> {
    let names = model.modality_names();
    let hidden: Vec<String> = match &opts.visible {
        None => Vec::new(),
        Some(v) => {
            if let Some(bad) = v.iter().find(|m| !names.contains(m)) {
                return Err(Error::Unknown {
                    kind: "modality",
                    name: bad.clone(),
                });
            }
            names.iter().filter(|n| !v.contains(n)).cloned().collect()
        }
    };
    let data = gen_dataset(bench)?;
    let result = evaluate(model, bench, &data.test, &hidden)?;
    let mut rec = MetricsRecord {
        kind: "eval".into(),
        accuracy: Some(result.accuracy),
        per_template: template_map(&result.per_template),
        active: names
            .iter()
            .filter(|n| !hidden.contains(n))
            .cloned()
            .collect(),
        visible: opts.visible.clone(),
        ..base_record(run, model)
    };
    if opts.easy_hard {
        let reference = match &opts.reference {
            Some(path) => {
                let (_, ref_model) = load_model(path)?;
                evaluate(&ref_model, bench, &data.test, &[])?.predictions
            }
            None => {
                let others: Vec<String> = names
                    .iter()
                    .filter(|n| **n != model.config.major)
                    .cloned()
                    .collect();
                evaluate(model, bench, &data.test, &others)?.predictions
            }
        };
        let (easy, hard) = split_easy_hard(&reference, &data.test)?;
        let subset = |idx: &[usize]| SubsetScore {
            size: idx.len(),
            accuracy: score(&result.predictions, &data.test, Some(idx)).0,
        };
        rec.easy = Some(subset(&easy));
        rec.hard = Some(subset(&hard));
    }
    Ok(rec)
}

pub fn eval_checkpoint(path: &Path, opts: &EvalOptions) -> Result<MetricsRecord> {
    let (cfg, model) = load_model(path)?;
    let bench = opts.bench.clone().unwrap_or(cfg.bench);
    eval_model(&cfg.name, &model, &bench, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Fusion,
    Rank,
    Tokens,
    Mode,
    Prioritize,
    Order,
}

impl std::str::FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fusion" => Axis::Fusion,
            "rank" => Axis::Rank,
            "tokens" => Axis::Tokens,
            "mode" => Axis::Mode,
            "prioritize" => Axis::Prioritize,
            "order" => Axis::Order,
            _ => {
                return Err(Error::Unknown {
                    kind: "ablation axis",
                    name: s.to_string(),
                })
            }
        })
    }
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Fusion => "fusion",
            Axis::Rank => "rank",
            Axis::Tokens => "tokens",
            Axis::Mode => "mode",
            Axis::Prioritize => "prioritize",
            Axis::Order => "order",
        }
    }
}

pub const ABLATE_FUSION: [Strategy; 5] = [
    Strategy::Concat,
    Strategy::Linear,
    Strategy::MoE,
    Strategy::CrossAttention,
    Strategy::SelfGated,
];
pub const ABLATE_RANKS: [usize; 3] = [2, 4, 8];
pub const ABLATE_TOKENS: [usize; 3] = [2, 4, 8];

/// The configurations an axis sweeps, each labelled. Every variant shares
/// the base seed.
pub fn ablation_variants(base: &RunConfig, axis: Axis) -> Result<Vec<(String, RunConfig)>> {
    let vary = |label: String, f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c.name = format!("{}-{}-{}", base.name, axis.name(), label);
        c.output_dir = format!("{}/ablate-{}/{}", base.output_dir, axis.name(), label);
        (label, c)
    };
    let out = match axis {
        Axis::Fusion => ABLATE_FUSION
            .iter()
            .map(|&s| vary(s.to_string(), &|c| c.model.strategy = s))
            .collect(),
        Axis::Rank => ABLATE_RANKS
            .iter()
            .map(|&r| vary(format!("r{r}"), &|c| c.model.rank = r))
            .collect(),
        Axis::Tokens => ABLATE_TOKENS
            .iter()
            .map(|&t| vary(format!("t{t}"), &|c| c.model.backbone.tokens = t))
            .collect(),
        Axis::Mode => [Mode::Sequential, Mode::Joint]
            .iter()
            .map(|&m| vary(m.name().to_string(), &|c| c.train.mode = m))
            .collect(),
        Axis::Prioritize => base
            .model
            .names()
            .into_iter()
            .map(|m| vary(format!("major-{m}"), &|c| c.model.major = m.clone()))
            .collect(),
        Axis::Order => {
            let forward = if base.train.order.is_empty() {
                base.model.names()
            } else {
                base.train.order.clone()
            };
            let mut reversed = forward.clone();
            reversed.reverse();
            vec![
                vary(forward.join("-"), &|c| c.train.order = forward.clone()),
                vary(reversed.join("-"), &|c| c.train.order = reversed.clone()),
            ]
        }
    };
    for (_, c) in &out {
        c.model.validate()?;
        if c.model.rank >= c.model.backbone.d {
            return Err(Error::Config(format!(
                "ablation rank {} must be below width {}",
                c.model.rank, c.model.backbone.d
            )));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub accuracy: f64,
    pub per_template: Vec<Option<f64>>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub token_budget: usize,
    pub flops: u64,
    /// Per-epoch test accuracy.
    pub trajectory: Vec<Option<f64>>,
    /// Per-epoch mean training loss.
    pub losses: Vec<f64>,
}

pub fn run_ablation(base: &RunConfig, axis: Axis) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (label, cfg) in ablation_variants(base, axis)? {
        let out = train_run(&cfg, &run_dir(&cfg), None)?;
        let last = base_record(&cfg.name, &out.model);
        rows.push(AblationRow {
            variant: label,
            accuracy: out.report.final_eval.accuracy,
            per_template: out.report.final_eval.per_template.clone(),
            trainable_params: last.trainable_params,
            total_params: last.total_params,
            token_budget: last.token_budget,
            flops: last.flops,
            trajectory: out.report.epochs.iter().map(|e| e.accuracy).collect(),
            losses: out.report.epochs.iter().map(|e| e.loss).collect(),
        });
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<24} {:>7} {:>9} {:>9} {:>6} {:>9}\n",
        "variant", "acc%", "trainable", "total", "tokens", "flops"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<24} {:>7.1} {:>9} {:>9} {:>6} {:>9}\n",
            r.variant,
            100.0 * r.accuracy,
            r.trainable_params,
            r.total_params,
            r.token_budget,
            r.flops
        ));
    }
    s
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,accuracy,trainable_params,total_params,token_budget,flops\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant, r.accuracy, r.trainable_params, r.total_params, r.token_budget, r.flops
        ));
    }
    s
}

#[derive(Debug, Clone)]
pub struct GradcheckOutcome {
    pub report: GradCheckReport,
    /// Registry name of the worst element's tensor.
    pub worst_tensor: Option<String>,
    pub tensors: usize,
}

/// Configuration the `gradcheck` command differentiates: toy dimensions,
/// a major and two supportive modalities, self-gated fusion.
pub fn gradcheck_config() -> (ModelConfig, BenchSpec) {
    let modalities: Vec<ModalitySpec> = [("video", 16), ("audio", 24), ("depth", 32)]
        .into_iter()
        .map(|(n, f)| ModalitySpec {
            name: n.into(),
            feat_dim: f,
            seq_len: 4,
        })
        .collect();
    let bench = BenchSpec {
        modalities: modalities.clone(),
        major: "video".into(),
        symbols: 5,
        sigma: 0.05,
        train_size: 6,
        test_size: 1,
        seed: 11,
        equal_pairs: EqualPairs::Supportive,
    };
    let model = ModelConfig {
        backbone: BackboneDims {
            d: 32,
            layers: 2,
            heads: 4,
            tokens: 4,
        },
        rank: 4,
        modalities: modalities
            .iter()
            .map(|m| (m.name.clone(), m.feat_dim))
            .collect(),
        major: "video".into(),
        strategy: Strategy::SelfGated,
        experts: 4,
        reasoner: ReasonerDims {
            d: 32,
            layers: 2,
            heads: 4,
            ffn_mult: 8,
            vocab: bench.vocab_size(),
            classes: bench.classes(),
        },
        reasoner_init: ReasonerInit::default(),
        train_classifier: false,
        instruction: true,
        seed: 11,
    };
    (model, bench)
}

/// Finite-difference check of the cross-entropy loss with respect to every
/// trainable tensor, in 64-bit. LoRA `B` factors start at zero, which would
/// make every `A` gradient vanish, so they are first filled with small
/// random values.
pub fn gradcheck_full_model(
    model_cfg: ModelConfig,
    bench: &BenchSpec,
    cfg: &GradCheckConfig,
) -> Result<GradcheckOutcome> {
    let mut model = Model::<f64>::new(model_cfg)?;
    let mut r = rng::stream(model.config.seed, "gradcheck");
    let lora_b: Vec<String> = model
        .registry
        .names()
        .filter(|n| n.contains(".lora.") && n.ends_with(".b"))
        .map(str::to_string)
        .collect();
    for name in &lora_b {
        let t = model.registry.get_mut(name)?;
        *t = Tensor::randn(t.shape(), 0.05, &mut r);
    }
    let data = gen_dataset(bench)?;
    let idx: Vec<usize> = (0..data.train.len()).collect();
    let batch = make_batch(bench, &model.modality_names(), &data.train, &idx, &[])?.cast::<f64>();
    let names: Vec<String> = model
        .registry
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    let inputs: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| model.registry.get(n).cloned())
        .collect::<Result<_>>()?;
    let report = grad_check(
        |g: &mut Graph<f64>, vars| {
            let mut b = Binder::new(&model.registry, GradSet::None);
            for (n, v) in names.iter().zip(vars) {
                b.preset(n, *v);
            }
            let out = model.forward(g, &mut b, &batch)?;
            g.cross_entropy(out.logits, &batch.targets)
        },
        &inputs,
        cfg,
    )?;
    Ok(GradcheckOutcome {
        worst_tensor: report.worst.map(|(t, _)| names[t].clone()),
        report,
        tensors: names.len(),
    })
}
