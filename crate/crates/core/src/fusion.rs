//! Fusion of supportive-modality query tokens with the major stream.
//!
//! | strategy        | output tokens | parameters                         |
//! |-----------------|---------------|------------------------------------|
//! | `SelfGated`     | 2T            | `pi`: affine `(n-1)d -> d`         |
//! | `Concat`        | nT            | none                               |
//! | `Bypass`        | nT            | none                               |
//! | `Linear`        | T             | token map `nT -> T` plus bias      |
//! | `MoE`           | 2T            | gate `(n-1)d -> E`, E affine experts |
//! | `CrossAttention`| 2T            | T prompts, one attention layer     |
//!
//! Supportive modalities enter in configuration order. That order is part
//! of the model identity because the channel-wise inputs are not symmetric.

use std::fmt;
use std::str::FromStr;

use crate::bind::Binder;
use crate::error::{contract, Error, Result};
use crate::registry::{ParamRegistry, Tag};
use crate::rng;
use crate::tensor::{Graph, Real, Tensor, Var};

pub const DEFAULT_EXPERTS: usize = 4;
pub const PROMPT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    SelfGated,
    Concat,
    Linear,
    MoE,
    CrossAttention,
    Bypass,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::SelfGated,
        Strategy::Concat,
        Strategy::Linear,
        Strategy::MoE,
        Strategy::CrossAttention,
        Strategy::Bypass,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::SelfGated => "SelfGated",
            Strategy::Concat => "Concat",
            Strategy::Linear => "Linear",
            Strategy::MoE => "MoE",
            Strategy::CrossAttention => "CrossAttention",
            Strategy::Bypass => "Bypass",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "fusion strategy",
                name: s.to_string(),
            })
    }
}

/// Number of fused tokens handed to the reasoner for `n` modalities.
pub fn token_budget(strategy: Strategy, n: usize, t: usize) -> usize {
    if n <= 1 {
        return t;
    }
    match strategy {
        Strategy::Concat | Strategy::Bypass => n * t,
        Strategy::SelfGated | Strategy::MoE | Strategy::CrossAttention => 2 * t,
        Strategy::Linear => t,
    }
}

/// Where a fused token came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Modality(String),
    /// Mixture of supportive modalities.
    Supportive,
    /// Mixture of every modality.
    All,
}

pub struct FusedTokens {
    /// `[B, T_out, d]`
    pub tokens: Var,
    pub provenance: Vec<Provenance>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionModule {
    pub strategy: Strategy,
    pub major: String,
    pub supportive: Vec<String>,
    pub tokens: usize,
    pub d: usize,
    pub heads: usize,
    pub experts: usize,
}

impl FusionModule {
    pub fn modality_count(&self) -> usize {
        1 + self.supportive.len()
    }

    pub fn budget(&self) -> usize {
        token_budget(self.strategy, self.modality_count(), self.tokens)
    }

    /// True when the strategy owns trainable tensors for this modality count.
    pub fn has_params(&self) -> bool {
        !self.supportive.is_empty() && !matches!(self.strategy, Strategy::Concat | Strategy::Bypass)
    }

    /// Closed-form trainable scalar count.
    pub fn scalar_count(&self) -> usize {
        if !self.has_params() {
            return 0;
        }
        let (d, t, s) = (self.d, self.tokens, self.supportive.len());
        let n = self.modality_count();
        match self.strategy {
            Strategy::SelfGated => s * d * d + d,
            Strategy::Linear => t * n * t + t * d,
            Strategy::MoE => s * d * self.experts + self.experts + self.experts * (s * d * d + d),
            Strategy::CrossAttention => t * d + 4 * d * d,
            Strategy::Concat | Strategy::Bypass => 0,
        }
    }
}

fn fusion_insert<T: Real>(reg: &mut ParamRegistry<T>, name: &str, t: Tensor<T>) -> Result<()> {
    reg.insert(name, t, true, Tag::Fusion)
}

/// Builds the fusion module and its `fusion.*` parameters.
pub fn fusion_create<T: Real>(
    strategy: Strategy,
    major: &str,
    supportive: &[String],
    tokens: usize,
    d: usize,
    heads: usize,
    experts: usize,
    seed: u64,
) -> Result<(FusionModule, ParamRegistry<T>)> {
    if supportive.iter().any(|s| s == major) {
        return Err(Error::Config(format!(
            "major modality `{major}` also listed as supportive"
        )));
    }
    if strategy == Strategy::MoE && experts == 0 {
        return Err(Error::Config("MoE fusion needs at least one expert".into()));
    }
    let module = FusionModule {
        strategy,
        major: major.to_string(),
        supportive: supportive.to_vec(),
        tokens,
        d,
        heads,
        experts,
    };
    let mut reg = ParamRegistry::new();
    if !module.has_params() {
        return Ok((module, reg));
    }
    let mut rng = rng::stream(seed, &format!("fusion.{strategy}"));
    let s = supportive.len();
    let n = s + 1;
    let in_std = 1.0 / ((s * d) as f64).sqrt();
    match strategy {
        Strategy::SelfGated => {
            fusion_insert(
                &mut reg,
                "fusion.pi.weight",
                Tensor::randn(&[s * d, d], in_std, &mut rng),
            )?;
            fusion_insert(&mut reg, "fusion.pi.bias", Tensor::zeros(&[d]))?;
        }
        Strategy::Linear => {
            let std = 1.0 / ((n * tokens) as f64).sqrt();
            fusion_insert(
                &mut reg,
                "fusion.linear.weight",
                Tensor::randn(&[tokens, n * tokens], std, &mut rng),
            )?;
            fusion_insert(&mut reg, "fusion.linear.bias", Tensor::zeros(&[tokens, d]))?;
        }
        Strategy::MoE => {
            fusion_insert(
                &mut reg,
                "fusion.moe.gate.weight",
                Tensor::randn(&[s * d, experts], in_std, &mut rng),
            )?;
            fusion_insert(&mut reg, "fusion.moe.gate.bias", Tensor::zeros(&[experts]))?;
            fusion_insert(
                &mut reg,
                "fusion.moe.experts.weight",
                Tensor::randn(&[s * d, experts * d], in_std, &mut rng),
            )?;
            fusion_insert(
                &mut reg,
                "fusion.moe.experts.bias",
                Tensor::zeros(&[experts * d]),
            )?;
        }
        Strategy::CrossAttention => {
            let std = 1.0 / (d as f64).sqrt();
            fusion_insert(
                &mut reg,
                "fusion.xattn.prompts",
                Tensor::randn(&[tokens, d], PROMPT_STD, &mut rng),
            )?;
            for w in ["wq", "wk", "wv", "wo"] {
                fusion_insert(
                    &mut reg,
                    &format!("fusion.xattn.{w}"),
                    Tensor::randn(&[d, d], std, &mut rng),
                )?;
            }
        }
        Strategy::Concat | Strategy::Bypass => {
            unreachable!("parameter-free strategies return early")
        }
    }
    Ok((module, reg))
}

fn check_tokens<T: Real>(g: &Graph<T>, module: &FusionModule, q: Var, name: &str) -> Result<()> {
    let s = g.shape(q);
    if s.len() != 3 || s[1] != module.tokens || s[2] != module.d {
        return Err(contract(format!(
            "modality `{name}` tokens have shape {s:?}, expected [B, {}, {}]",
            module.tokens, module.d
        )));
    }
    Ok(())
}

/// `[q_V ; pi(concat_c(supportive)) * sigmoid(pi(...))]`.
pub fn fuse_self_gated<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    q_major: Var,
    supportive: &[Var],
) -> Result<Var> {
    if supportive.is_empty() {
        return Err(contract(
            "self-gated fusion needs at least one supportive modality; use Bypass",
        ));
    }
    let base = g.shape(q_major).to_vec();
    for &s in supportive {
        if g.shape(s) != base.as_slice() {
            return Err(Error::Shape {
                op: "fuse_self_gated",
                lhs: base,
                rhs: g.shape(s).to_vec(),
            });
        }
    }
    let cat = g.concat(supportive, 2)?;
    let w = b.var(g, "fusion.pi.weight")?;
    let bias = b.var(g, "fusion.pi.bias")?;
    let pre = g.matmul(cat, w)?;
    let pre = g.add_bias(pre, bias)?;
    let gated = g.self_gate(pre)?;
    g.concat(&[q_major, gated], 1)
}

/// Index of the largest entry in each row of width `e`.
fn argmax_rows<T: Real>(data: &[T], e: usize) -> Vec<usize> {
    data.chunks(e)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Per-token top-1 mixture of affine experts over the supportive channel
/// concat, weighted by the winning gate probability. Returns the mixed
/// tokens and the chosen expert per token.
pub fn moe_mix<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    experts: usize,
    d: usize,
    supportive: &[Var],
) -> Result<(Var, Vec<usize>)> {
    let cat = g.concat(supportive, 2)?;
    let (batch, t) = (g.shape(cat)[0], g.shape(cat)[1]);
    let gw = b.var(g, "fusion.moe.gate.weight")?;
    let gb = b.var(g, "fusion.moe.gate.bias")?;
    let logits = g.matmul(cat, gw)?;
    let logits = g.add_bias(logits, gb)?;
    let probs = g.softmax(logits);
    let choice = argmax_rows(g.value(probs).data(), experts);
    let mut mask = Tensor::<T>::zeros(&[batch, t, experts]);
    for (row, &c) in mask.data_mut().chunks_mut(experts).zip(&choice) {
        row[c] = T::one();
    }
    let mask = g.constant(mask);
    let weights = g.mul(probs, mask)?;

    let ew = b.var(g, "fusion.moe.experts.weight")?;
    let eb = b.var(g, "fusion.moe.experts.bias")?;
    let y = g.matmul(cat, ew)?;
    let y = g.add_bias(y, eb)?;
    let y = g.reshape(y, &[batch * t, experts, d])?;
    let w = g.reshape(weights, &[batch * t, 1, experts])?;
    let mixed = g.matmul(w, y)?;
    Ok((g.reshape(mixed, &[batch, t, d])?, choice))
}

/// Applies `module` to the major tokens and the supportive tokens (in
/// `module.supportive` order).
pub fn fuse<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    module: &FusionModule,
    q_major: Var,
    supportive: &[Var],
) -> Result<FusedTokens> {
    if supportive.len() != module.supportive.len() {
        return Err(contract(format!(
            "fusion expects {} supportive streams, got {}",
            module.supportive.len(),
            supportive.len()
        )));
    }
    check_tokens(g, module, q_major, &module.major)?;
    for (v, name) in supportive.iter().zip(&module.supportive) {
        check_tokens(g, module, *v, name)?;
    }
    let t = module.tokens;
    let major_prov = vec![Provenance::Modality(module.major.clone()); t];
    if supportive.is_empty() {
        return Ok(FusedTokens {
            tokens: q_major,
            provenance: major_prov,
        });
    }
    let fused_prov = |p: Provenance| {
        let mut v = major_prov.clone();
        v.extend(std::iter::repeat_n(p, t));
        v
    };
    let (tokens, provenance) = match module.strategy {
        Strategy::SelfGated => (
            fuse_self_gated(g, b, q_major, supportive)?,
            fused_prov(Provenance::Supportive),
        ),
        Strategy::Concat | Strategy::Bypass => {
            let mut all = vec![q_major];
            all.extend_from_slice(supportive);
            let mut prov = major_prov.clone();
            for name in &module.supportive {
                prov.extend(std::iter::repeat_n(Provenance::Modality(name.clone()), t));
            }
            (g.concat(&all, 1)?, prov)
        }
        Strategy::Linear => {
            let mut all = vec![q_major];
            all.extend_from_slice(supportive);
            let stacked = g.concat(&all, 1)?;
            let w = b.var(g, "fusion.linear.weight")?;
            let bias = b.var(g, "fusion.linear.bias")?;
            let mixed = g.matmul(w, stacked)?;
            let batch = g.shape(mixed)[0];
            let bias = g.broadcast_batch(bias, batch);
            (g.add(mixed, bias)?, vec![Provenance::All; t])
        }
        Strategy::MoE => {
            let (mixed, _) = moe_mix(g, b, module.experts, module.d, supportive)?;
            (
                g.concat(&[q_major, mixed], 1)?,
                fused_prov(Provenance::Supportive),
            )
        }
        Strategy::CrossAttention => {
            let mut all = vec![q_major];
            all.extend_from_slice(supportive);
            let stacked = g.concat(&all, 1)?;
            let batch = g.shape(stacked)[0];
            let prompts = b.var(g, "fusion.xattn.prompts")?;
            let prompts = g.broadcast_batch(prompts, batch);
            let wq = b.var(g, "fusion.xattn.wq")?;
            let wk = b.var(g, "fusion.xattn.wk")?;
            let wv = b.var(g, "fusion.xattn.wv")?;
            let wo = b.var(g, "fusion.xattn.wo")?;
            let q = g.matmul(prompts, wq)?;
            let k = g.matmul(stacked, wk)?;
            let v = g.matmul(stacked, wv)?;
            let o = g.attention(q, k, v, module.heads)?;
            let o = g.matmul(o, wo)?;
            (g.concat(&[q_major, o], 1)?, fused_prov(Provenance::All))
        }
    };
    debug_assert_eq!(provenance.len(), module.budget());
    Ok(FusedTokens { tokens, provenance })
}

/// Which prefix tokens precede the fused tokens, by registry name.
///
/// A single modality gets one prefix. `Concat` and `Bypass` keep one prefix
/// per modality. `SelfGated`, `MoE` and `CrossAttention` keep the major
/// prefix plus one shared prefix for the blended block, and `Linear`, which
/// blends everything, keeps only the shared one.
pub fn prefix_names(strategy: Strategy, major: &str, supportive: &[String]) -> Vec<String> {
    if supportive.is_empty() {
        return vec![format!("prefix.{major}")];
    }
    match strategy {
        Strategy::Concat | Strategy::Bypass => std::iter::once(major)
            .chain(supportive.iter().map(String::as_str))
            .map(|m| format!("prefix.{m}"))
            .collect(),
        Strategy::SelfGated | Strategy::MoE | Strategy::CrossAttention => {
            vec![format!("prefix.{major}"), "prefix.fused".to_string()]
        }
        Strategy::Linear => vec!["prefix.fused".to_string()],
    }
}

/// Creates the learnable `[1, d]` prefix vectors, tagged shared.
pub fn prefix_tokens<T: Real>(
    strategy: Strategy,
    major: &str,
    supportive: &[String],
    d: usize,
    seed: u64,
) -> Result<ParamRegistry<T>> {
    let mut reg = ParamRegistry::new();
    for name in prefix_names(strategy, major, supportive) {
        let mut rng = rng::stream(seed, &name);
        reg.insert(
            &name,
            Tensor::randn(&[1, d], PROMPT_STD, &mut rng),
            true,
            Tag::Shared,
        )?;
    }
    Ok(reg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bind::GradSet;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    #[test]
    fn budgets() {
        assert_eq!(token_budget(Strategy::SelfGated, 5, 32), 64);
        assert_eq!(token_budget(Strategy::Concat, 5, 32), 160);
        assert_eq!(token_budget(Strategy::SelfGated, 5, 4), 8);
        assert_eq!(token_budget(Strategy::Concat, 5, 4), 20);
        for s in Strategy::ALL {
            assert_eq!(token_budget(s, 1, 7), 7);
        }
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!("Gated".parse::<Strategy>().is_err());
    }

    #[test]
    fn gated_value_matches_hand_evaluation() {
        // Identity pi with one supportive channel exposes x * sigmoid(x).
        let mut reg = ParamRegistry::<f64>::new();
        let mut eye = Tensor::zeros(&[2, 2]);
        eye.data_mut()[0] = 1.0;
        eye.data_mut()[3] = 1.0;
        reg.insert("fusion.pi.weight", eye, true, Tag::Fusion)
            .unwrap();
        reg.insert("fusion.pi.bias", Tensor::zeros(&[2]), true, Tag::Fusion)
            .unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&reg, GradSet::None);
        let qv = g.constant(Tensor::zeros(&[1, 1, 2]));
        let s = g.constant(Tensor::from_f64(&[1, 1, 2], &[2.0, 0.0]).unwrap());
        let out = fuse_self_gated(&mut g, &mut b, qv, &[s]).unwrap();
        let v = g.value(out).data();
        assert!((v[2] - 1.761594).abs() < 1e-5);
        assert_eq!(v[3], 0.0);
    }

    #[test]
    fn empty_supportive_is_error() {
        let reg = ParamRegistry::<f64>::new();
        let mut g = Graph::new();
        let mut b = Binder::new(&reg, GradSet::None);
        let qv = g.constant(Tensor::zeros(&[1, 2, 4]));
        assert!(fuse_self_gated(&mut g, &mut b, qv, &[]).is_err());
    }

    #[test]
    fn scalar_counts_match_registry() {
        for s in Strategy::ALL {
            for n in 2..5 {
                let (m, reg) =
                    fusion_create::<f32>(s, "major", &names(n - 1), 4, 8, 2, 3, 1).unwrap();
                assert_eq!(
                    reg.count_trainable(&crate::registry::CensusFilter::All)
                        .scalars,
                    m.scalar_count(),
                    "{s} n={n}"
                );
            }
        }
    }

    #[test]
    fn prefix_layouts() {
        let sup = names(2);
        assert_eq!(prefix_names(Strategy::Concat, "v", &sup).len(), 3);
        assert_eq!(
            prefix_names(Strategy::SelfGated, "v", &sup),
            vec!["prefix.v".to_string(), "prefix.fused".to_string()]
        );
        assert_eq!(prefix_names(Strategy::Linear, "v", &sup).len(), 1);
        assert_eq!(prefix_names(Strategy::MoE, "v", &[]).len(), 1);
        let a = prefix_tokens::<f32>(Strategy::Concat, "v", &sup, 8, 5).unwrap();
        let b = prefix_tokens::<f32>(Strategy::Concat, "v", &sup, 8, 5).unwrap();
        assert_eq!(a.checksums(), b.checksums());
    }
}
