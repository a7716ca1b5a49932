//! Run configuration: a flat `key = value` text format with dotted sections.
//!
//! ```text
//! # comment
//! seed = 1
//! [model]
//! fusion = SelfGated
//! train.epochs = 8      # a full dotted key works anywhere
//! ```
//!
//! A `[section]` header prefixes every following key until the next header;
//! keys that already contain a dot are taken as written. Unknown keys,
//! duplicates and malformed values are reported with their line number.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::backbone::BackboneDims;
use crate::error::{Error, Result};
use crate::fusion::Strategy;
use crate::model::ModelConfig;
use crate::reasoner::{ReasonerDims, ReasonerInit};
use crate::synthbench::{BenchSpec, EqualPairs, ModalitySpec};
use crate::tensor::optim::AdamConfig;
use crate::trainer::TrainConfig;

const KEYS: &[&str] = &[
    "seed",
    "name",
    "output.dir",
    "bench.modalities",
    "bench.major",
    "bench.symbols",
    "bench.sigma",
    "bench.train_size",
    "bench.test_size",
    "bench.seed",
    "bench.equal_pairs",
    "model.d",
    "model.layers",
    "model.heads",
    "model.tokens",
    "model.rank",
    "model.modalities",
    "model.major",
    "model.fusion",
    "model.experts",
    "model.instruction",
    "reasoner.layers",
    "reasoner.heads",
    "reasoner.ffn_mult",
    "reasoner.weight_std",
    "reasoner.embed_std",
    "reasoner.classifier_std",
    "reasoner.train_classifier",
    "train.lr",
    "train.lr_schedule",
    "train.warmup_iters",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.epochs",
    "train.batch_size",
    "train.seed",
    "train.tau",
    "train.mode",
    "train.early_exit",
    "train.exit_rule",
    "train.exit_warmup",
    "train.order",
    "train.shuffle_order",
    "train.warm_start_epochs",
    "train.eval_every_epoch",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Run label; also the default output subdirectory.
    pub name: String,
    /// Output directory, resolved against the output root when relative.
    pub output_dir: String,
    pub bench: BenchSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

struct Raw {
    entries: BTreeMap<String, (usize, String)>,
}

impl Raw {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = strip_comment(line).trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| at(lineno, "section header is missing `]`"))?
                    .trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(at(lineno, format!("bad section name `{name}`")));
                }
                section = name.to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| at(lineno, format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            let full = if key.contains('.') || section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            if !KEYS.contains(&full.as_str()) {
                return Err(at(lineno, format!("unknown key `{full}`")));
            }
            if let Some((first, _)) = entries.get(&full) {
                return Err(at(lineno, format!("`{full}` already set on line {first}")));
            }
            entries.insert(full, (lineno, value.trim().to_string()));
        }
        Ok(Self { entries })
    }

    fn raw(&self, key: &str) -> Option<&(usize, String)> {
        self.entries.get(key)
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some((line, v)) => v
                .parse()
                .map_err(|e| at(*line, format!("{key}: cannot parse `{v}`: {e}"))),
        }
    }

    fn list(&self, key: &str) -> Option<(usize, Vec<String>)> {
        self.raw(key).map(|(line, v)| {
            let items = v
                .split(',')
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            (*line, items)
        })
    }

    fn line_of(&self, key: &str) -> Option<usize> {
        self.raw(key).map(|(l, _)| *l)
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    }
}

fn at(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

/// Attaches the line of `key` (when it was set explicitly) to a validation error.
fn locate(raw: &Raw, key: &str, e: Error) -> Error {
    match (raw.line_of(key), e) {
        (Some(line), Error::Config(msg)) => at(line, format!("{key}: {msg}")),
        (None, Error::Config(msg)) => Error::Config(format!("{key}: {msg}")),
        (_, e) => e,
    }
}

fn default_bench_modalities() -> Vec<ModalitySpec> {
    [("video", 16), ("audio", 24), ("depth", 32)]
        .into_iter()
        .map(|(n, f)| ModalitySpec {
            name: n.into(),
            feat_dim: f,
            seq_len: 4,
        })
        .collect()
}

fn parse_bench_modalities(line: usize, items: &[String]) -> Result<Vec<ModalitySpec>> {
    items
        .iter()
        .map(|item| {
            let parts: Vec<&str> = item.split(':').map(str::trim).collect();
            let num = |s: &str| {
                s.parse::<usize>().map_err(|_| {
                    at(
                        line,
                        format!("bench.modalities: `{s}` in `{item}` is not an integer"),
                    )
                })
            };
            match parts.as_slice() {
                [n, f] => Ok(ModalitySpec {
                    name: n.to_string(),
                    feat_dim: num(f)?,
                    seq_len: 4,
                }),
                [n, f, s] => Ok(ModalitySpec {
                    name: n.to_string(),
                    feat_dim: num(f)?,
                    seq_len: num(s)?,
                }),
                _ => Err(at(
                    line,
                    format!("bench.modalities: expected `name:width[:length]`, got `{item}`"),
                )),
            }
        })
        .collect()
}

fn parse_equal_pairs(line: usize, value: &str) -> Result<EqualPairs> {
    match value {
        "supportive" => Ok(EqualPairs::Supportive),
        "all" => Ok(EqualPairs::All),
        _ => value
            .split(',')
            .map(|p| {
                p.trim()
                    .split_once('-')
                    .map(|(a, b)| (a.trim().to_string(), b.trim().to_string()))
                    .ok_or_else(|| {
                        at(
                            line,
                            format!("bench.equal_pairs: expected `supportive`, `all` or `a-b, c-d`, got `{p}`"),
                        )
                    })
            })
            .collect::<Result<_>>()
            .map(EqualPairs::Explicit),
    }
}

fn render_equal_pairs(p: &EqualPairs) -> String {
    match p {
        EqualPairs::Supportive => "supportive".into(),
        EqualPairs::All => "all".into(),
        EqualPairs::Explicit(v) => v
            .iter()
            .map(|(a, b)| format!("{a}-{b}"))
            .collect::<Vec<_>>()
            .join(", "),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw = Raw::parse(text)?;
        let seed: u64 = raw.get("seed", 0)?;
        let name: String = raw.get("name", "run".to_string())?;
        let output_dir: String = raw.get("output.dir", name.clone())?;

        let bench_mods = match raw.list("bench.modalities") {
            Some((line, items)) => parse_bench_modalities(line, &items)?,
            None => default_bench_modalities(),
        };
        let model_names = match raw.list("model.modalities") {
            Some((_, items)) => items,
            None => bench_mods.iter().map(|m| m.name.clone()).collect(),
        };
        let mut widths = Vec::new();
        for m in &model_names {
            let spec = bench_mods.iter().find(|b| &b.name == m).ok_or_else(|| {
                locate(
                    &raw,
                    "model.modalities",
                    Error::Config(format!("modality `{m}` is not defined in bench.modalities")),
                )
            })?;
            widths.push((m.clone(), spec.feat_dim));
        }
        let major: String = raw.get(
            "model.major",
            model_names.first().cloned().unwrap_or_default(),
        )?;
        let equal_pairs = match raw.raw("bench.equal_pairs") {
            Some((line, v)) => parse_equal_pairs(*line, v)?,
            None => EqualPairs::Supportive,
        };
        let bench = BenchSpec {
            modalities: bench_mods,
            major: raw.get("bench.major", major.clone())?,
            symbols: raw.get("bench.symbols", 5)?,
            sigma: raw.get("bench.sigma", 0.05)?,
            train_size: raw.get("bench.train_size", 8000)?,
            test_size: raw.get("bench.test_size", 4000)?,
            seed: raw.get("bench.seed", seed)?,
            equal_pairs,
        };
        bench.validate().map_err(|e| locate(&raw, "bench", e))?;

        let backbone = BackboneDims {
            d: raw.get("model.d", 32)?,
            layers: raw.get("model.layers", 2)?,
            heads: raw.get("model.heads", 4)?,
            tokens: raw.get("model.tokens", 4)?,
        };
        let strategy: Strategy = raw.get("model.fusion", Strategy::SelfGated)?;
        let model = ModelConfig {
            backbone,
            rank: raw.get("model.rank", 4)?,
            modalities: widths,
            major,
            strategy,
            experts: raw.get("model.experts", 4)?,
            reasoner: ReasonerDims {
                d: backbone.d,
                layers: raw.get("reasoner.layers", 2)?,
                heads: raw.get("reasoner.heads", backbone.heads)?,
                ffn_mult: raw.get("reasoner.ffn_mult", 8)?,
                vocab: bench.vocab_size(),
                classes: bench.classes(),
            },
            reasoner_init: ReasonerInit {
                weight_std: raw.get("reasoner.weight_std", ReasonerInit::default().weight_std)?,
                embed_std: raw.get("reasoner.embed_std", ReasonerInit::default().embed_std)?,
                classifier_std: raw.get(
                    "reasoner.classifier_std",
                    ReasonerInit::default().classifier_std,
                )?,
            },
            train_classifier: raw.get("reasoner.train_classifier", false)?,
            instruction: raw.get("model.instruction", true)?,
            seed,
        };
        model.validate().map_err(|e| locate(&raw, "model", e))?;
        if model.rank == 0 || model.rank >= backbone.d {
            return Err(locate(
                &raw,
                "model.rank",
                Error::Config(format!("rank must lie in 1..{}", backbone.d)),
            ));
        }

        let defaults = TrainConfig::default();
        let train = TrainConfig {
            adam: AdamConfig {
                lr: raw.get("train.lr", defaults.adam.lr)?,
                beta1: raw.get("train.beta1", defaults.adam.beta1)?,
                beta2: raw.get("train.beta2", defaults.adam.beta2)?,
                eps: raw.get("train.eps", defaults.adam.eps)?,
            },
            lr_schedule: raw.get("train.lr_schedule", defaults.lr_schedule)?,
            warmup_iters: raw.get("train.warmup_iters", defaults.warmup_iters)?,
            epochs: raw.get("train.epochs", defaults.epochs)?,
            batch_size: raw.get("train.batch_size", defaults.batch_size)?,
            seed: raw.get("train.seed", seed)?,
            tau: raw.get("train.tau", defaults.tau)?,
            mode: raw.get("train.mode", defaults.mode)?,
            early_exit: raw.get("train.early_exit", defaults.early_exit)?,
            exit_rule: raw.get("train.exit_rule", defaults.exit_rule)?,
            exit_warmup: raw.get("train.exit_warmup", defaults.exit_warmup)?,
            order: raw.list("train.order").map(|(_, v)| v).unwrap_or_default(),
            shuffle_order: raw.get("train.shuffle_order", defaults.shuffle_order)?,
            warm_start_epochs: raw.get("train.warm_start_epochs", defaults.warm_start_epochs)?,
            eval_every_epoch: raw.get("train.eval_every_epoch", defaults.eval_every_epoch)?,
        };
        train.validate().map_err(|e| locate(&raw, "train", e))?;
        if !train.order.is_empty() {
            let mut sorted = train.order.clone();
            sorted.sort();
            let mut names = model.names();
            names.sort();
            if sorted != names {
                return Err(locate(
                    &raw,
                    "train.order",
                    Error::Config(format!(
                        "must be a permutation of the model modalities {:?}",
                        model.names()
                    )),
                ));
            }
        }
        if name.is_empty() || name.contains(['/', '\\']) {
            return Err(locate(
                &raw,
                "name",
                Error::Config("must be a non-empty plain name".into()),
            ));
        }
        Ok(Self {
            seed,
            name,
            output_dir,
            bench,
            model,
            train,
        })
    }

    /// Canonical text: every key, fixed order. Parsing it yields `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let b = &self.bench;
        let m = &self.model;
        let t = &self.train;
        let join = |v: &[String]| v.join(", ");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "name = {}", self.name);
        let _ = writeln!(s, "output.dir = {}", self.output_dir);
        let mods: Vec<String> = b
            .modalities
            .iter()
            .map(|x| format!("{}:{}:{}", x.name, x.feat_dim, x.seq_len))
            .collect();
        let _ = writeln!(s, "bench.modalities = {}", join(&mods));
        let _ = writeln!(s, "bench.major = {}", b.major);
        let _ = writeln!(s, "bench.symbols = {}", b.symbols);
        let _ = writeln!(s, "bench.sigma = {}", b.sigma);
        let _ = writeln!(s, "bench.train_size = {}", b.train_size);
        let _ = writeln!(s, "bench.test_size = {}", b.test_size);
        let _ = writeln!(s, "bench.seed = {}", b.seed);
        let _ = writeln!(
            s,
            "bench.equal_pairs = {}",
            render_equal_pairs(&b.equal_pairs)
        );
        s.push_str(&model_text(m));
        let _ = writeln!(s, "train.lr = {}", t.adam.lr);
        let _ = writeln!(s, "train.lr_schedule = {}", t.lr_schedule.name());
        let _ = writeln!(s, "train.warmup_iters = {}", t.warmup_iters);
        let _ = writeln!(s, "train.beta1 = {}", t.adam.beta1);
        let _ = writeln!(s, "train.beta2 = {}", t.adam.beta2);
        let _ = writeln!(s, "train.eps = {}", t.adam.eps);
        let _ = writeln!(s, "train.epochs = {}", t.epochs);
        let _ = writeln!(s, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(s, "train.seed = {}", t.seed);
        let _ = writeln!(s, "train.tau = {}", t.tau);
        let _ = writeln!(s, "train.mode = {}", t.mode.name());
        let _ = writeln!(s, "train.early_exit = {}", t.early_exit);
        let _ = writeln!(s, "train.exit_rule = {}", t.exit_rule.name());
        let _ = writeln!(s, "train.exit_warmup = {}", t.exit_warmup);
        if !t.order.is_empty() {
            let _ = writeln!(s, "train.order = {}", join(&t.order));
        }
        let _ = writeln!(s, "train.shuffle_order = {}", t.shuffle_order);
        let _ = writeln!(s, "train.warm_start_epochs = {}", t.warm_start_epochs);
        let _ = writeln!(s, "train.eval_every_epoch = {}", t.eval_every_epoch);
        s
    }
}

/// Model-identity lines (everything that fixes tensor names and shapes or
/// the frozen weights' distribution), excluding the seed.
fn model_text(m: &ModelConfig) -> String {
    let mut s = String::new();
    let bb = &m.backbone;
    let names: Vec<String> = m.names();
    let _ = writeln!(s, "model.d = {}", bb.d);
    let _ = writeln!(s, "model.layers = {}", bb.layers);
    let _ = writeln!(s, "model.heads = {}", bb.heads);
    let _ = writeln!(s, "model.tokens = {}", bb.tokens);
    let _ = writeln!(s, "model.rank = {}", m.rank);
    let _ = writeln!(s, "model.modalities = {}", names.join(", "));
    let _ = writeln!(s, "model.major = {}", m.major);
    let _ = writeln!(s, "model.fusion = {}", m.strategy);
    let _ = writeln!(s, "model.experts = {}", m.experts);
    let _ = writeln!(s, "model.instruction = {}", m.instruction);
    let r = &m.reasoner;
    let _ = writeln!(s, "reasoner.layers = {}", r.layers);
    let _ = writeln!(s, "reasoner.heads = {}", r.heads);
    let _ = writeln!(s, "reasoner.ffn_mult = {}", r.ffn_mult);
    let _ = writeln!(s, "reasoner.weight_std = {}", m.reasoner_init.weight_std);
    let _ = writeln!(s, "reasoner.embed_std = {}", m.reasoner_init.embed_std);
    let _ = writeln!(
        s,
        "reasoner.classifier_std = {}",
        m.reasoner_init.classifier_std
    );
    let _ = writeln!(s, "reasoner.train_classifier = {}", m.train_classifier);
    s
}

/// SHA-256 over the model identity: the model lines plus each modality's
/// feature width and the vocabulary and class counts.
pub fn model_digest(m: &ModelConfig) -> [u8; 32] {
    let mut text = model_text(m);
    for (n, f) in &m.modalities {
        let _ = writeln!(text, "width.{n} = {f}");
    }
    let _ = writeln!(text, "vocab = {}", m.reasoner.vocab);
    let _ = writeln!(text, "classes = {}", m.reasoner.classes);
    Sha256::digest(text.as_bytes()).into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_round_trip() {
        let cfg = RunConfig::parse("seed = 3\n").unwrap();
        assert_eq!(cfg.model.names(), ["video", "audio", "depth"]);
        assert_eq!(cfg.model.major, "video");
        assert_eq!(cfg.bench.seed, 3);
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(again.to_text(), cfg.to_text());
    }

    #[test]
    fn sections_prefix_keys() {
        let text = "[train]\nepochs = 3\nmodel.rank = 2\n[model]\nfusion = Concat # trailing\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.rank, 2);
        assert_eq!(cfg.model.strategy, Strategy::Concat);
    }

    #[test]
    fn diagnostics_carry_line_and_key() {
        let err = RunConfig::parse("seed = 1\ntrain.epochs = many\n")
            .unwrap_err()
            .to_string();
        assert!(
            err.contains("line 2") && err.contains("train.epochs"),
            "{err}"
        );
        let err = RunConfig::parse("\n\nbogus = 1\n").unwrap_err().to_string();
        assert!(err.contains("line 3") && err.contains("bogus"), "{err}");
        let err = RunConfig::parse("seed = 1\nseed = 2\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn missing_modality_is_named() {
        let text = "bench.modalities = video:16, audio:24\nmodel.modalities = video, thermal\n";
        let err = RunConfig::parse(text).unwrap_err().to_string();
        assert!(err.contains("thermal") && err.contains("line 2"), "{err}");
    }

    #[test]
    fn digest_ignores_training_settings() {
        let a = RunConfig::parse("train.epochs = 2\nseed = 1\n").unwrap();
        let b = RunConfig::parse("train.epochs = 5\nseed = 9\n").unwrap();
        let c = RunConfig::parse("model.rank = 2\n").unwrap();
        assert_eq!(model_digest(&a.model), model_digest(&b.model));
        assert_ne!(model_digest(&a.model), model_digest(&c.model));
    }
}
