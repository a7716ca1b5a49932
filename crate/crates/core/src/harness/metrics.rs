//! Line-delimited JSON metrics, one object per epoch.
//!
//! Records carry no wall-clock data, so a run's metrics file is a pure
//! function of its configuration. Field names are part of the schema; any
//! rename must bump [`SCHEMA_VERSION`].

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fusion::token_budget;
use crate::model::Model;
use crate::reasoner::reasoner_flops;
use crate::synthbench::{QUESTION_LEN, TEMPLATES};
use crate::trainer::{EpochRecord, TrainReport};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema: u32,
    pub run: String,
    /// `epoch` for training records, `eval` for evaluation records.
    pub kind: String,
    pub epoch: usize,
    pub mode: String,
    pub strategy: String,
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub per_template: BTreeMap<String, Option<f64>>,
    pub gbar: BTreeMap<String, f64>,
    pub indicator: BTreeMap<String, f64>,
    pub active: Vec<String>,
    pub trainable_params: usize,
    pub total_params: usize,
    pub token_budget: usize,
    /// Estimated multiply-accumulates per example in the reasoner.
    pub flops: u64,
    /// Whether the classifier fallback was trainable in this run.
    pub train_classifier: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub easy: Option<SubsetScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard: Option<SubsetScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub visible: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub size: usize,
    pub accuracy: f64,
}

pub fn template_map(per_template: &[Option<f64>]) -> BTreeMap<String, Option<f64>> {
    TEMPLATES
        .iter()
        .zip(per_template)
        .map(|(t, a)| (t.to_string(), *a))
        .collect()
}

/// Fields shared by every record of one model.
pub fn base_record(run: &str, model: &Model<f32>) -> MetricsRecord {
    let cfg = &model.config;
    let n = cfg.modalities.len();
    let t = cfg.backbone.tokens;
    let (trainable, total) = model.census();
    MetricsRecord {
        schema: SCHEMA_VERSION,
        run: run.to_string(),
        kind: "epoch".into(),
        epoch: 0,
        mode: String::new(),
        strategy: cfg.strategy.to_string(),
        loss: None,
        accuracy: None,
        per_template: BTreeMap::new(),
        gbar: BTreeMap::new(),
        indicator: BTreeMap::new(),
        active: Vec::new(),
        trainable_params: trainable,
        total_params: total,
        token_budget: token_budget(cfg.strategy, n, t),
        flops: reasoner_flops(
            n,
            t,
            QUESTION_LEN,
            cfg.strategy,
            cfg.backbone.d,
            cfg.reasoner.layers,
            cfg.reasoner.ffn_mult,
            cfg.reasoner.classes,
        ),
        train_classifier: cfg.train_classifier,
        easy: None,
        hard: None,
        visible: None,
    }
}

pub fn epoch_record(run: &str, model: &Model<f32>, e: &EpochRecord) -> MetricsRecord {
    MetricsRecord {
        epoch: e.epoch,
        mode: e.mode.name().into(),
        loss: Some(e.loss),
        accuracy: e.accuracy,
        per_template: template_map(&e.per_template),
        gbar: e.gbar.clone(),
        indicator: e.indicator.clone(),
        active: e.active.clone(),
        ..base_record(run, model)
    }
}

pub fn report_records(run: &str, model: &Model<f32>, report: &TrainReport) -> Vec<MetricsRecord> {
    report
        .epochs
        .iter()
        .map(|e| epoch_record(run, model, e))
        .collect()
}

pub fn to_jsonl(records: &[MetricsRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_jsonl(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(to_jsonl(records)?.as_bytes())?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

fn pct(v: Option<f64>) -> String {
    v.map(|a| format!("{:.1}", 100.0 * a))
        .unwrap_or_else(|| "-".into())
}

/// Fixed-width table with one row per record.
pub fn format_table(records: &[MetricsRecord]) -> String {
    let mut out = format!(
        "{:<24} {:>5} {:<10} {:>8} {:>7} {:>8} {:>7} {:>7} {:>9} {:>6} {:>9}\n",
        "run",
        "epoch",
        "mode",
        "loss",
        "acc%",
        "unimodal",
        "equal",
        "count",
        "trainable",
        "tokens",
        "flops"
    );
    for r in records {
        let t = |k: &str| pct(r.per_template.get(k).copied().flatten());
        out.push_str(&format!(
            "{:<24} {:>5} {:<10} {:>8} {:>7} {:>8} {:>7} {:>7} {:>9} {:>6} {:>9}\n",
            r.run,
            r.epoch,
            r.mode,
            r.loss
                .map(|l| format!("{l:.4}"))
                .unwrap_or_else(|| "-".into()),
            pct(r.accuracy),
            t("unimodal"),
            t("equal"),
            t("count"),
            r.trainable_params,
            r.token_budget,
            r.flops
        ));
    }
    out
}
