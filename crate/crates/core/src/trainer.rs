//! Modality-sequential training with per-modality masked Adam updates and
//! gradient-magnitude early exit.
//!
//! In sequential mode every minibatch runs one full forward/backward per
//! active modality, in the configured order, and each step updates only that
//! modality's adapter plus the fusion parameters. Joint mode runs a single
//! step that updates every trainable tensor of the active modalities, the
//! fusion parameters and the shared prefixes.
//!
//! After each epoch, a modality's epoch-mean gradient magnitude `g` is
//! compared against the mean of its earlier epochs:
//! `I = g_new / (tau * mean(g_prev))`. By default a modality stops updating
//! once `I <= 1`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::backbone::FeatureBatch;
use crate::bind::{Binder, GradSet};
use crate::error::{contract, Error, Result};
use crate::model::{argmax, Batch, Model};
use crate::registry::{ParamRegistry, Tag};
use crate::rng;
use crate::synthbench::{BenchSpec, Question, SynthExample, QUESTION_LEN, TEMPLATES};
use crate::tensor::optim::{adam_step, AdamConfig, AdamState};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sequential,
    Joint,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Sequential => "sequential",
            Mode::Joint => "joint",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Mode::Sequential),
            "joint" => Ok(Mode::Joint),
            _ => Err(Error::Unknown {
                kind: "training mode",
                name: s.to_string(),
            }),
        }
    }
}

/// Which side of 1 the indicator must fall on for a modality to exit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitRule {
    /// Exit once `I <= 1` (the gradient has decayed below `tau` times its
    /// running mean).
    Converged,
    /// Exit once `I > 1`.
    Rising,
}

impl ExitRule {
    pub fn name(self) -> &'static str {
        match self {
            ExitRule::Converged => "converged",
            ExitRule::Rising => "rising",
        }
    }

    pub fn fires(self, indicator: f64) -> bool {
        match self {
            ExitRule::Converged => indicator <= 1.0,
            ExitRule::Rising => indicator > 1.0,
        }
    }
}

impl std::str::FromStr for ExitRule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "converged" => Ok(ExitRule::Converged),
            "rising" => Ok(ExitRule::Rising),
            _ => Err(Error::Unknown {
                kind: "exit rule",
                name: s.to_string(),
            }),
        }
    }
}

/// Learning-rate multiplier over the run, after linear warmup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from 1 down to 0 at the last iteration.
    Cosine,
}

impl LrSchedule {
    pub fn name(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }

    /// Multiplier for 0-based iteration `it` of `total`, with `warmup`
    /// iterations of linear ramp-up first.
    pub fn factor(self, it: usize, total: usize, warmup: usize) -> f64 {
        if it < warmup {
            return (it + 1) as f64 / warmup as f64;
        }
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let span = total.saturating_sub(warmup).max(1) as f64;
                let progress = ((it - warmup) as f64 / span).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::Unknown {
                kind: "learning-rate schedule",
                name: s.to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub lr_schedule: LrSchedule,
    /// Iterations (minibatches) of linear learning-rate warmup.
    pub warmup_iters: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub tau: f64,
    pub mode: Mode,
    pub early_exit: bool,
    pub exit_rule: ExitRule,
    /// Epochs of history required before the indicator is checked.
    pub exit_warmup: usize,
    /// Per-iteration modality order; empty means configuration order.
    pub order: Vec<String>,
    /// Draw a fresh modality order every iteration instead.
    pub shuffle_order: bool,
    /// Unimodal pretext epochs per adapter before the main run.
    pub warm_start_epochs: usize,
    /// Evaluate on the test split after every epoch (otherwise only after
    /// the last one).
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            lr_schedule: LrSchedule::Cosine,
            warmup_iters: 100,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            tau: 0.9,
            mode: Mode::Sequential,
            early_exit: false,
            exit_rule: ExitRule::Converged,
            exit_warmup: 1,
            order: Vec::new(),
            shuffle_order: false,
            warm_start_epochs: 0,
            eval_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config("train.tau must be positive".into()));
        }
        if self.early_exit && self.epochs < 2 {
            return Err(Error::Config("early exit needs at least 2 epochs".into()));
        }
        if self.exit_warmup == 0 {
            return Err(Error::Config("train.exit_warmup must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ModalityHistory {
    /// Epoch-mean gradient magnitudes, one per epoch while active.
    pub gbar: Vec<f64>,
    /// Indicator per recorded epoch; `None` before the warmup is met.
    pub indicators: Vec<Option<f64>>,
    pub active: bool,
    pub exit_epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradHistory {
    pub tau: f64,
    pub modalities: BTreeMap<String, ModalityHistory>,
}

impl GradHistory {
    pub fn new(names: &[String], tau: f64) -> Self {
        Self {
            tau,
            modalities: names
                .iter()
                .map(|n| {
                    (
                        n.clone(),
                        ModalityHistory {
                            active: true,
                            ..Default::default()
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn active(&self, m: &str) -> bool {
        self.modalities.get(m).is_some_and(|h| h.active)
    }

    pub fn active_set(&self) -> Vec<String> {
        self.modalities
            .iter()
            .filter(|(_, h)| h.active)
            .map(|(n, _)| n.clone())
            .collect()
    }
}

/// `new / (tau * mean(history))`. A zero-mean history gives 0 when the new
/// magnitude is also 0, and infinity otherwise.
pub fn early_exit_indicator(history: &[f64], new: f64, tau: f64) -> Result<f64> {
    if history.is_empty() {
        return Err(contract(
            "early-exit indicator needs at least one prior epoch",
        ));
    }
    if !(tau > 0.0) {
        return Err(contract(format!("tau must be positive, got {tau}")));
    }
    let mean = history.iter().sum::<f64>() / history.len() as f64;
    let denom = tau * mean;
    if denom == 0.0 {
        return Ok(if new == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(new / denom)
}

/// Replays a recorded magnitude sequence through the exit rule and returns
/// the 1-based epoch at which the modality would have exited.
pub fn replay_exit(gbar: &[f64], tau: f64, warmup: usize, rule: ExitRule) -> Result<Option<usize>> {
    for j in warmup.max(1)..gbar.len() {
        let i = early_exit_indicator(&gbar[..j], gbar[j], tau)?;
        if rule.fires(i) {
            return Ok(Some(j + 1));
        }
    }
    Ok(None)
}

/// Mean absolute gradient over every trainable tensor tagged `m`.
pub fn grad_magnitude(
    registry: &ParamRegistry<f32>,
    grads: &BTreeMap<String, Tensor<f32>>,
    m: &str,
) -> Result<f64> {
    let names = registry.trainable_with_tag(&Tag::Modality(m.to_string()));
    if names.is_empty() {
        return Err(Error::Unknown {
            kind: "modality",
            name: m.to_string(),
        });
    }
    let (mut sum, mut count) = (0.0f64, 0usize);
    for n in names {
        let g = grads
            .get(&n)
            .ok_or_else(|| contract(format!("no gradient recorded for `{n}`")))?;
        sum += g.data().iter().map(|v| v.abs() as f64).sum::<f64>();
        count += g.numel();
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Gathers `indices` of `examples` into a batch in model modality order.
/// Modalities listed in `hidden` get all-zero features.
pub fn make_batch(
    spec: &BenchSpec,
    model_modalities: &[String],
    examples: &[SynthExample],
    indices: &[usize],
    hidden: &[String],
) -> Result<Batch<f32>> {
    let bsz = indices.len();
    let mut features = Vec::with_capacity(model_modalities.len());
    for name in model_modalities {
        let mi = spec.index_of(name)?;
        let (s, f) = (spec.modalities[mi].seq_len, spec.modalities[mi].feat_dim);
        let zero = hidden.iter().any(|h| h == name);
        let mut data = Vec::with_capacity(bsz * s * f);
        for &i in indices {
            if zero {
                data.resize(data.len() + s * f, 0.0);
            } else {
                data.extend_from_slice(examples[i].features[mi].data());
            }
        }
        features.push(FeatureBatch::new(
            name,
            Tensor::new(vec![bsz, s, f], data)?,
        )?);
    }
    let mut tokens = Vec::with_capacity(bsz * QUESTION_LEN);
    let mut targets = Vec::with_capacity(bsz);
    for &i in indices {
        tokens.extend_from_slice(&examples[i].tokens);
        targets.push(examples[i].answer);
    }
    Ok(Batch {
        features,
        tokens,
        q_len: QUESTION_LEN,
        targets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    /// Indexed like [`TEMPLATES`]; `None` when the template is absent.
    pub per_template: Vec<Option<f64>>,
}

/// Accuracy of `predictions` against `examples`, overall and per template,
/// optionally restricted to `subset`.
pub fn score(
    predictions: &[usize],
    examples: &[SynthExample],
    subset: Option<&[usize]>,
) -> (f64, Vec<Option<f64>>) {
    let all: Vec<usize>;
    let idx = match subset {
        Some(s) => s,
        None => {
            all = (0..examples.len()).collect();
            &all
        }
    };
    let mut hit = [0usize; 3];
    let mut tot = [0usize; 3];
    for &i in idx {
        let t = examples[i].question.template();
        tot[t] += 1;
        hit[t] += usize::from(predictions[i] == examples[i].answer);
    }
    let n: usize = tot.iter().sum();
    let overall = if n == 0 {
        f64::NAN
    } else {
        hit.iter().sum::<usize>() as f64 / n as f64
    };
    let per = (0..TEMPLATES.len())
        .map(|t| (tot[t] > 0).then(|| hit[t] as f64 / tot[t] as f64))
        .collect();
    (overall, per)
}

pub const EVAL_BATCH: usize = 250;

pub fn evaluate(
    model: &Model<f32>,
    spec: &BenchSpec,
    examples: &[SynthExample],
    hidden: &[String],
) -> Result<EvalResult> {
    let names = model.modality_names();
    let mut predictions = Vec::with_capacity(examples.len());
    let idx: Vec<usize> = (0..examples.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let batch = make_batch(spec, &names, examples, chunk, hidden)?;
        let mut g = Graph::new();
        let mut b = Binder::new(&model.registry, GradSet::None);
        let out = model.forward(&mut g, &mut b, &batch)?;
        predictions.extend(argmax(g.value(out.logits)));
    }
    let (accuracy, per_template) = score(&predictions, examples, None);
    Ok(EvalResult {
        predictions,
        accuracy,
        per_template,
    })
}

/// Per-tensor Adam moments, keyed by registry name.
#[derive(Debug, Clone, Default)]
pub struct OptState {
    pub states: BTreeMap<String, AdamState<f32>>,
}

pub struct StepOutcome {
    pub loss: f64,
    /// Gradient magnitude per modality whose tensors carried gradients.
    pub magnitudes: BTreeMap<String, f64>,
}

/// Forward, backward and masked update of every trainable tensor whose tag
/// is in `update`. Tensors outside `update` are untouched, including their
/// optimizer state.
pub fn masked_step(
    model: &mut Model<f32>,
    opt: &mut OptState,
    batch: &Batch<f32>,
    update: &BTreeSet<Tag>,
    adam: &AdamConfig,
) -> Result<StepOutcome> {
    let grad_set = GradSet::Tags(update.clone());
    let (loss, grads) = {
        let mut g = Graph::new();
        let mut b = Binder::new(&model.registry, grad_set.clone());
        let out = model.forward(&mut g, &mut b, batch)?;
        let loss = g.cross_entropy(out.logits, &batch.targets)?;
        let tape = g.backward(loss)?;
        let leaves: BTreeMap<String, _> = b.grad_leaves(&g).into_iter().collect();
        let mut grads = BTreeMap::new();
        for (name, entry) in model.registry.iter() {
            if !grad_set.wants(entry) {
                continue;
            }
            let grad = match leaves.get(name) {
                Some(v) => tape.get(*v).expect("leaf requires grad"),
                None => Tensor::zeros(entry.tensor.shape()),
            };
            grads.insert(name.to_string(), grad);
        }
        (g.value(loss).item() as f64, grads)
    };
    let mut magnitudes = BTreeMap::new();
    for tag in update {
        if let Tag::Modality(m) = tag {
            magnitudes.insert(m.clone(), grad_magnitude(&model.registry, &grads, m)?);
        }
    }
    for (name, grad) in &grads {
        let param = model.registry.get_mut(name)?;
        let state = opt
            .states
            .entry(name.clone())
            .or_insert_with(|| AdamState::new(param.numel()));
        adam_step(param, grad, state, adam)?;
    }
    Ok(StepOutcome { loss, magnitudes })
}

/// One step on modality `m`: updates tensors tagged `m` and fusion tensors.
pub fn sequential_step(
    model: &mut Model<f32>,
    opt: &mut OptState,
    batch: &Batch<f32>,
    m: &str,
    adam: &AdamConfig,
) -> Result<f64> {
    model.adapter(m)?;
    let update = BTreeSet::from([Tag::Modality(m.to_string()), Tag::Fusion]);
    Ok(masked_step(model, opt, batch, &update, adam)?.loss)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mode: Mode,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub per_template: Vec<Option<f64>>,
    /// Epoch-mean gradient magnitude of modalities that trained this epoch.
    pub gbar: BTreeMap<String, f64>,
    /// Indicator values computed at the end of this epoch.
    pub indicator: BTreeMap<String, f64>,
    /// Modalities still active after this epoch's exit checks.
    pub active: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub history: GradHistory,
    pub exit_epochs: BTreeMap<String, Option<usize>>,
    /// Optimizer steps that updated each modality's adapter.
    pub update_steps: BTreeMap<String, u64>,
    /// Steps taken with every modality exited (fusion only).
    pub fusion_only_steps: u64,
    pub final_eval: EvalResult,
}

fn modality_order(model: &Model<f32>, cfg: &TrainConfig) -> Result<Vec<String>> {
    let names = model.modality_names();
    if cfg.order.is_empty() {
        return Ok(names);
    }
    let mut sorted_cfg = cfg.order.clone();
    sorted_cfg.sort();
    let mut sorted_names = names.clone();
    sorted_names.sort();
    if sorted_cfg != sorted_names {
        return Err(Error::Config(format!(
            "train.order {:?} must be a permutation of the model modalities {names:?}",
            cfg.order
        )));
    }
    Ok(cfg.order.clone())
}

fn warm_start(
    model: &mut Model<f32>,
    opt: &mut OptState,
    spec: &BenchSpec,
    train: &[SynthExample],
    cfg: &TrainConfig,
) -> Result<()> {
    let names = model.modality_names();
    for m in &names {
        let mi = spec.index_of(m)?;
        let idx: Vec<usize> = (0..train.len())
            .filter(|&i| train[i].question == Question::Unimodal(mi))
            .collect();
        let update = BTreeSet::from([Tag::Modality(m.clone())]);
        for _ in 0..cfg.warm_start_epochs {
            for chunk in idx.chunks(cfg.batch_size) {
                let batch = make_batch(spec, &names, train, chunk, &[])?;
                masked_step(model, opt, &batch, &update, &cfg.adam)?;
            }
        }
    }
    Ok(())
}

/// Trains `model` on `train` and evaluates on `test`.
pub fn fit(
    model: &mut Model<f32>,
    spec: &BenchSpec,
    train: &[SynthExample],
    test: &[SynthExample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let order = modality_order(model, cfg)?;
    let names = model.modality_names();
    let mut opt = OptState::default();
    if cfg.warm_start_epochs > 0 {
        warm_start(model, &mut opt, spec, train, cfg)?;
    }
    let mut history = GradHistory::new(&names, cfg.tau);
    let mut update_steps: BTreeMap<String, u64> = names.iter().map(|n| (n.clone(), 0)).collect();
    let mut fusion_only_steps = 0u64;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut last_eval = None;
    let total_iters = cfg.epochs * train.len().div_ceil(cfg.batch_size);
    let mut iteration = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut perm: Vec<usize> = (0..train.len()).collect();
        perm.shuffle(&mut rng::indexed(cfg.seed, "train.shuffle", epoch as u64));
        let mut order_rng = rng::indexed(cfg.seed, "train.order", epoch as u64);
        let mut loss_sum = 0.0;
        let mut loss_n = 0usize;
        let mut mag_sum: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let active_now = history.active_set();
        let fusion_trains = model.fusion.has_params() || model.config.train_classifier;

        for chunk in perm.chunks(cfg.batch_size) {
            let adam = AdamConfig {
                lr: cfg.adam.lr
                    * cfg
                        .lr_schedule
                        .factor(iteration, total_iters, cfg.warmup_iters),
                ..cfg.adam
            };
            iteration += 1;
            let batch = make_batch(spec, &names, train, chunk, &[])?;
            let mut steps: Vec<BTreeSet<Tag>> = Vec::new();
            match cfg.mode {
                Mode::Sequential => {
                    let mut iter_order = order.clone();
                    if cfg.shuffle_order {
                        iter_order.shuffle(&mut order_rng);
                    }
                    for m in iter_order.iter().filter(|m| active_now.contains(m)) {
                        steps.push(BTreeSet::from([Tag::Modality(m.clone()), Tag::Fusion]));
                    }
                    if steps.is_empty() && fusion_trains {
                        steps.push(BTreeSet::from([Tag::Fusion]));
                    }
                }
                Mode::Joint => {
                    let mut set: BTreeSet<Tag> = active_now
                        .iter()
                        .map(|m| Tag::Modality(m.clone()))
                        .collect();
                    set.insert(Tag::Fusion);
                    set.insert(Tag::Shared);
                    steps.push(set);
                }
            }
            for update in steps {
                let out = masked_step(model, &mut opt, &batch, &update, &adam)?;
                loss_sum += out.loss;
                loss_n += 1;
                if out.magnitudes.is_empty() {
                    fusion_only_steps += 1;
                }
                for (m, g) in out.magnitudes {
                    *update_steps.get_mut(&m).expect("model modality") += 1;
                    let e = mag_sum.entry(m).or_insert((0.0, 0));
                    e.0 += g;
                    e.1 += 1;
                }
            }
        }

        let mut gbar = BTreeMap::new();
        let mut indicator = BTreeMap::new();
        for (m, (s, n)) in mag_sum {
            let g = s / n as f64;
            gbar.insert(m.clone(), g);
            let h = history.modalities.get_mut(&m).expect("model modality");
            let prior = h.gbar.clone();
            h.gbar.push(g);
            let mut ind = None;
            if cfg.early_exit && prior.len() >= cfg.exit_warmup {
                let i = early_exit_indicator(&prior, g, cfg.tau)?;
                indicator.insert(m.clone(), i);
                ind = Some(i);
                if cfg.exit_rule.fires(i) {
                    h.active = false;
                    h.exit_epoch = Some(epoch);
                }
            }
            h.indicators.push(ind);
        }

        let eval = if cfg.eval_every_epoch || epoch == cfg.epochs {
            Some(evaluate(model, spec, test, &[])?)
        } else {
            None
        };
        epochs.push(EpochRecord {
            epoch,
            mode: cfg.mode,
            loss: if loss_n == 0 {
                0.0
            } else {
                loss_sum / loss_n as f64
            },
            accuracy: eval.as_ref().map(|e| e.accuracy),
            per_template: eval
                .as_ref()
                .map(|e| e.per_template.clone())
                .unwrap_or_default(),
            gbar,
            indicator,
            active: history.active_set(),
        });
        if eval.is_some() {
            last_eval = eval;
        }
    }
    let final_eval = match last_eval {
        Some(e) => e,
        None => evaluate(model, spec, test, &[])?,
    };
    Ok(TrainReport {
        epochs,
        exit_epochs: history
            .modalities
            .iter()
            .map(|(n, h)| (n.clone(), h.exit_epoch))
            .collect(),
        history,
        update_steps,
        fusion_only_steps,
        final_eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indicator_examples() {
        let i = early_exit_indicator(&[1.0, 0.8, 0.5], 0.3, 0.9).unwrap();
        assert!((i - 0.4348).abs() < 1e-4);
        let c = early_exit_indicator(&[2.0, 2.0], 2.0, 0.9).unwrap();
        assert!((c - 1.0 / 0.9).abs() < 1e-12);
        assert!(early_exit_indicator(&[1.0], 1.0, 1e12).unwrap() < 1e-9);
        assert!(early_exit_indicator(&[], 1.0, 0.9).is_err());
    }

    #[test]
    fn replay_of_scripted_schedule() {
        let g = [1.0, 0.8, 0.5, 0.3];
        assert_eq!(
            replay_exit(&g, 0.9, 3, ExitRule::Converged).unwrap(),
            Some(4)
        );
        // With one epoch of warmup the second epoch already qualifies.
        assert_eq!(
            replay_exit(&g, 0.9, 1, ExitRule::Converged).unwrap(),
            Some(2)
        );
        assert_eq!(
            replay_exit(&[1.0, 1.0, 1.0], 0.9, 1, ExitRule::Converged).unwrap(),
            None
        );
        assert_eq!(
            replay_exit(&[1.0, 1.0], 0.9, 1, ExitRule::Rising).unwrap(),
            Some(2)
        );
    }

    #[test]
    fn grad_magnitude_examples() {
        let mut reg = ParamRegistry::<f32>::new();
        reg.insert("a.x", Tensor::zeros(&[2]), true, Tag::Modality("a".into()))
            .unwrap();
        reg.insert("fusion.w", Tensor::zeros(&[1]), true, Tag::Fusion)
            .unwrap();
        let mut grads = BTreeMap::new();
        grads.insert(
            "a.x".to_string(),
            Tensor::from_f64(&[2], &[3.0, -4.0]).unwrap(),
        );
        grads.insert(
            "fusion.w".to_string(),
            Tensor::from_f64(&[1], &[100.0]).unwrap(),
        );
        assert_eq!(grad_magnitude(&reg, &grads, "a").unwrap(), 3.5);
        grads.insert("a.x".to_string(), Tensor::zeros(&[2]));
        assert_eq!(grad_magnitude(&reg, &grads, "a").unwrap(), 0.0);
        assert!(grad_magnitude(&reg, &BTreeMap::new(), "a").is_err());
        assert!(grad_magnitude(&reg, &grads, "b").is_err());
    }
}
