//! Synthetic compositional multimodal QA.
//!
//! Every example draws one latent symbol per modality. A frozen per-modality
//! encoder turns the symbol into `S` feature vectors: the symbol's unit-norm
//! codebook row at every position plus Gaussian noise that is mixed across
//! positions by a fixed matrix with unit-norm rows (so each position keeps
//! noise std `sigma`, and `sigma = 0` reproduces the codebook exactly).
//!
//! Question templates:
//! * `Unimodal(m)`: which symbol does modality `m` carry?
//! * `Equal(a, b)`: do modalities `a` and `b` carry the same symbol?
//! * `Count(x)`: how many modalities carry symbol `x`?
//!
//! Token vocabulary: `0` pad, `1..=3` templates, then one token per modality,
//! then one per symbol. Answer classes: symbols `0..K`, then yes, no, then
//! counts `0..=n`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const QUESTION_LEN: usize = 3;
pub const TEMPLATES: [&str; 3] = ["unimodal", "equal", "count"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalitySpec {
    pub name: String,
    pub feat_dim: usize,
    pub seq_len: usize,
}

/// Which modality pairs `Equal` questions may ask about.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EqualPairs {
    /// Pairs that exclude the major modality.
    Supportive,
    All,
    Explicit(Vec<(String, String)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchSpec {
    pub modalities: Vec<ModalitySpec>,
    /// Used only to resolve [`EqualPairs::Supportive`].
    pub major: String,
    pub symbols: usize,
    pub sigma: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
    pub equal_pairs: EqualPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Question {
    Unimodal(usize),
    Equal(usize, usize),
    Count(usize),
}

impl Question {
    pub fn template(&self) -> usize {
        match self {
            Question::Unimodal(_) => 0,
            Question::Equal(..) => 1,
            Question::Count(_) => 2,
        }
    }

    /// True for templates that need more than one modality.
    pub fn is_cross_modal(&self) -> bool {
        !matches!(self, Question::Unimodal(_))
    }
}

#[derive(Debug, Clone)]
pub struct SynthExample {
    pub latents: Vec<usize>,
    /// Per modality, `[S_m, f_m]`.
    pub features: Vec<Tensor<f32>>,
    pub question: Question,
    pub tokens: [usize; QUESTION_LEN],
    pub answer: usize,
}

#[derive(Debug, Clone)]
pub struct FrozenEncoder {
    /// `[K, f]`, unit-norm rows.
    pub codebook: Tensor<f32>,
    /// `[S, S]`, unit-norm rows.
    pub mixing: Tensor<f32>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<SynthExample>,
    pub test: Vec<SynthExample>,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn unit_rows(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let row: Vec<f64> = (0..cols).map(|_| normal(rng)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        data.extend(row.iter().map(|v| (v / norm) as f32));
    }
    Tensor::new(vec![rows, cols], data).expect("sized above")
}

impl BenchSpec {
    pub fn n(&self) -> usize {
        self.modalities.len()
    }

    pub fn vocab_size(&self) -> usize {
        1 + TEMPLATES.len() + self.n() + self.symbols
    }

    pub fn classes(&self) -> usize {
        self.symbols + 2 + self.n() + 1
    }

    pub fn yes(&self) -> usize {
        self.symbols
    }

    pub fn no(&self) -> usize {
        self.symbols + 1
    }

    pub fn count_class(&self, c: usize) -> usize {
        self.symbols + 2 + c
    }

    pub fn modality_token(&self, m: usize) -> usize {
        1 + TEMPLATES.len() + m
    }

    pub fn symbol_token(&self, x: usize) -> usize {
        1 + TEMPLATES.len() + self.n() + x
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.modalities
            .iter()
            .position(|m| m.name == name)
            .ok_or_else(|| Error::Unknown {
                kind: "modality",
                name: name.to_string(),
            })
    }

    pub fn validate(&self) -> Result<()> {
        if self.symbols < 2 {
            return Err(Error::Config("bench.symbols must be at least 2".into()));
        }
        if self.modalities.is_empty() {
            return Err(Error::Config(
                "benchmark needs at least one modality".into(),
            ));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.feat_dim == 0 || m.seq_len == 0 {
                return Err(Error::Config(format!(
                    "modality `{}` needs positive width and length",
                    m.name
                )));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::Config(format!("modality `{}` listed twice", m.name)));
            }
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(
                "bench.sigma must be finite and non-negative".into(),
            ));
        }
        self.pairs()?;
        Ok(())
    }

    /// Resolved `Equal` pairs as modality indices.
    pub fn pairs(&self) -> Result<Vec<(usize, usize)>> {
        let n = self.n();
        let all = || (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)));
        Ok(match &self.equal_pairs {
            EqualPairs::All => all().collect(),
            EqualPairs::Supportive => {
                let major = self.modalities.iter().position(|m| m.name == self.major);
                all()
                    .filter(|&(i, j)| Some(i) != major && Some(j) != major)
                    .collect()
            }
            EqualPairs::Explicit(pairs) => pairs
                .iter()
                .map(|(a, b)| {
                    let (i, j) = (self.index_of(a)?, self.index_of(b)?);
                    if i == j {
                        return Err(Error::Config(format!(
                            "equal pair `{a}:{b}` repeats a modality"
                        )));
                    }
                    Ok((i.min(j), i.max(j)))
                })
                .collect::<Result<_>>()?,
        })
    }

    /// Questions drawn per template, in sampling order.
    pub fn question_space(&self) -> Result<Vec<Vec<Question>>> {
        let unimodal = (0..self.n()).map(Question::Unimodal).collect();
        let equal = self
            .pairs()?
            .into_iter()
            .map(|(a, b)| Question::Equal(a, b))
            .collect();
        let count = (0..self.symbols).map(Question::Count).collect();
        Ok(vec![unimodal, equal, count])
    }

    pub fn encoders(&self) -> Vec<FrozenEncoder> {
        self.modalities
            .iter()
            .map(|m| {
                let mut rng = rng::stream(self.seed, &format!("encoder.{}", m.name));
                FrozenEncoder {
                    codebook: unit_rows(self.symbols, m.feat_dim, &mut rng),
                    mixing: unit_rows(m.seq_len, m.seq_len, &mut rng),
                }
            })
            .collect()
    }

    pub fn tokens(&self, q: &Question) -> [usize; QUESTION_LEN] {
        match *q {
            Question::Unimodal(m) => [1, self.modality_token(m), PAD],
            Question::Equal(a, b) => [2, self.modality_token(a), self.modality_token(b)],
            Question::Count(x) => [3, self.symbol_token(x), PAD],
        }
    }
}

/// Gold answer class for `question` given per-modality `latents`.
pub fn oracle(spec: &BenchSpec, latents: &[usize], question: &Question) -> Result<usize> {
    let n = latents.len();
    let bad = || {
        contract(format!(
            "malformed question {question:?} for {n} modalities"
        ))
    };
    Ok(match *question {
        Question::Unimodal(m) => *latents.get(m).ok_or_else(bad)?,
        Question::Equal(a, b) => {
            if a == b || a >= n || b >= n {
                return Err(bad());
            }
            if latents[a] == latents[b] {
                spec.yes()
            } else {
                spec.no()
            }
        }
        Question::Count(x) => {
            if x >= spec.symbols {
                return Err(bad());
            }
            spec.count_class(latents.iter().filter(|&&s| s == x).count())
        }
    })
}

fn gen_example(
    spec: &BenchSpec,
    encoders: &[FrozenEncoder],
    space: &[Vec<Question>],
    split: &str,
    index: u64,
) -> Result<SynthExample> {
    let mut rng = rng::indexed(spec.seed, split, index);
    let k = spec.symbols;
    let latents: Vec<usize> = (0..spec.n()).map(|_| rng.random_range(0..k)).collect();
    let mut features = Vec::with_capacity(spec.n());
    for (m, enc) in spec.modalities.iter().zip(encoders) {
        let (s, f) = (m.seq_len, m.feat_dim);
        let row = &enc.codebook.data()[latents[features.len()] * f..][..f];
        let noise: Vec<f64> = (0..s * f).map(|_| normal(&mut rng) * spec.sigma).collect();
        let mix = enc.mixing.data();
        let mut data = Vec::with_capacity(s * f);
        for p in 0..s {
            for c in 0..f {
                let mut v = 0.0f64;
                for q in 0..s {
                    v += mix[p * s + q] as f64 * noise[q * f + c];
                }
                data.push(row[c] + v as f32);
            }
        }
        features.push(Tensor::new(vec![s, f], data)?);
    }
    // Skip templates with no questions (e.g. Equal with fewer than two
    // eligible modalities).
    let live: Vec<&Vec<Question>> = space.iter().filter(|v| !v.is_empty()).collect();
    let bucket = live[rng.random_range(0..live.len())];
    let question = bucket[rng.random_range(0..bucket.len())];
    let answer = oracle(spec, &latents, &question)?;
    Ok(SynthExample {
        latents,
        features,
        question,
        tokens: spec.tokens(&question),
        answer,
    })
}

/// Generates both splits. Each example is a pure function of
/// `(seed, split, index)`.
pub fn gen_dataset(spec: &BenchSpec) -> Result<Dataset> {
    spec.validate()?;
    let encoders = spec.encoders();
    let space = spec.question_space()?;
    let split = |name: &str, size: usize| -> Result<Vec<SynthExample>> {
        (0..size as u64)
            .map(|i| gen_example(spec, &encoders, &space, name, i))
            .collect()
    };
    Ok(Dataset {
        train: split("train", spec.train_size)?,
        test: split("test", spec.test_size)?,
    })
}

/// Best achievable accuracy per template when only the `visible` modalities
/// can be observed, assuming visible symbols decode perfectly. Computed by
/// enumerating all `K^n` latent assignments for every question of the
/// template (questions weighted uniformly, as they are sampled).
pub fn unimodal_bayes_accuracy(spec: &BenchSpec, visible: &[bool]) -> Result<[f64; 3]> {
    let n = spec.n();
    if visible.len() != n {
        return Err(contract(format!(
            "visibility mask has {} entries for {n} modalities",
            visible.len()
        )));
    }
    let k = spec.symbols;
    let total = k
        .checked_pow(n as u32)
        .filter(|&t| t <= 10_000_000)
        .ok_or_else(|| contract("latent grid too large to enumerate".to_string()))?;
    let space = spec.question_space()?;
    let mut out = [f64::NAN; 3];
    for (ti, questions) in space.iter().enumerate() {
        if questions.is_empty() {
            continue;
        }
        let mut acc_sum = 0.0;
        for q in questions {
            // Group assignments by their visible part; the Bayes decision
            // answers the most frequent gold class within each group.
            let mut groups: BTreeMap<Vec<usize>, BTreeMap<usize, usize>> = BTreeMap::new();
            let mut latents = vec![0usize; n];
            for code in 0..total {
                let mut c = code;
                for l in latents.iter_mut() {
                    *l = c % k;
                    c /= k;
                }
                let key: Vec<usize> = latents
                    .iter()
                    .zip(visible)
                    .map(|(&l, &v)| if v { l } else { usize::MAX })
                    .collect();
                *groups
                    .entry(key)
                    .or_default()
                    .entry(oracle(spec, &latents, q)?)
                    .or_default() += 1;
            }
            let correct: usize = groups
                .values()
                .map(|h| h.values().copied().max().unwrap_or(0))
                .sum();
            acc_sum += correct as f64 / total as f64;
        }
        out[ti] = acc_sum / questions.len() as f64;
    }
    Ok(out)
}

/// Partitions test indices by whether the reference predicted correctly.
pub fn split_easy_hard(
    reference: &[usize],
    test: &[SynthExample],
) -> Result<(Vec<usize>, Vec<usize>)> {
    if reference.len() != test.len() {
        return Err(contract(format!(
            "{} reference predictions for {} test examples",
            reference.len(),
            test.len()
        )));
    }
    let (easy, hard) = (0..test.len()).partition(|&i| reference[i] == test[i].answer);
    Ok((easy, hard))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(n: usize) -> BenchSpec {
        let dims = [16, 24, 32, 20];
        BenchSpec {
            modalities: (0..n)
                .map(|i| ModalitySpec {
                    name: format!("m{i}"),
                    feat_dim: dims[i % 4],
                    seq_len: 4,
                })
                .collect(),
            major: "m0".into(),
            symbols: 5,
            sigma: 0.05,
            train_size: 200,
            test_size: 50,
            seed: 3,
            equal_pairs: EqualPairs::All,
        }
    }

    #[test]
    fn oracle_examples() {
        let s = spec(3);
        assert_eq!(
            oracle(&s, &[3, 3], &Question::Equal(0, 1)).unwrap(),
            s.yes()
        );
        assert_eq!(
            oracle(&s, &[1, 2, 1], &Question::Count(1)).unwrap(),
            s.count_class(2)
        );
        assert_eq!(oracle(&s, &[4, 0, 1], &Question::Unimodal(0)).unwrap(), 4);
        assert_eq!(oracle(&s, &[4, 3, 2], &Question::Unimodal(0)).unwrap(), 4);
        assert!(oracle(&s, &[1, 2], &Question::Equal(0, 0)).is_err());
        assert!(oracle(&s, &[1, 2], &Question::Count(9)).is_err());
    }

    #[test]
    fn bayes_equal_hidden_is_four_fifths() {
        let s = spec(2);
        let acc = unimodal_bayes_accuracy(&s, &[true, false]).unwrap();
        assert!((acc[1] - 0.8).abs() < 1e-12);
        assert!((acc[0] - (1.0 + 0.2) / 2.0).abs() < 1e-12);
        let full = unimodal_bayes_accuracy(&s, &[true, true]).unwrap();
        assert_eq!(full, [1.0, 1.0, 1.0]);
    }

    #[test]
    fn bayes_count_drops_with_hidden_modality() {
        let s = spec(3);
        let full = unimodal_bayes_accuracy(&s, &[true; 3]).unwrap();
        let part = unimodal_bayes_accuracy(&s, &[true, true, false]).unwrap();
        assert!(part[2] < full[2]);
        assert!((part[2] - 0.8).abs() < 1e-12);
        let major_only = unimodal_bayes_accuracy(&s, &[true, false, false]).unwrap();
        assert!((major_only[2] - 0.64).abs() < 1e-12);
    }

    #[test]
    fn noiseless_features_are_codebook_rows() {
        let mut s = spec(2);
        s.sigma = 0.0;
        let ds = gen_dataset(&s).unwrap();
        let enc = s.encoders();
        for ex in ds.train.iter().take(20) {
            for (m, f) in ex.features.iter().enumerate() {
                let w = s.modalities[m].feat_dim;
                let row = &enc[m].codebook.data()[ex.latents[m] * w..][..w];
                for p in f.data().chunks(w) {
                    assert_eq!(p, row);
                }
            }
        }
    }

    #[test]
    fn supportive_pairs_skip_major() {
        let mut s = spec(3);
        s.equal_pairs = EqualPairs::Supportive;
        assert_eq!(s.pairs().unwrap(), vec![(1, 2)]);
        s.equal_pairs = EqualPairs::Explicit(vec![("m2".into(), "m0".into())]);
        assert_eq!(s.pairs().unwrap(), vec![(0, 2)]);
    }

    #[test]
    fn partition_law() {
        let s = spec(2);
        let ds = gen_dataset(&s).unwrap();
        let gold: Vec<usize> = ds.test.iter().map(|e| e.answer).collect();
        let (easy, hard) = split_easy_hard(&gold, &ds.test).unwrap();
        assert!(hard.is_empty());
        assert_eq!(easy.len(), ds.test.len());
        let wrong: Vec<usize> = gold.iter().map(|&a| a + 1).collect();
        let (easy, hard) = split_easy_hard(&wrong, &ds.test).unwrap();
        assert_eq!(easy.len() + hard.len(), ds.test.len());
    }
}
