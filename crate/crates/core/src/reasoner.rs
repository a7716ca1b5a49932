//! Frozen answer head standing in for the language model.
//!
//! A small pre-norm transformer encoder with full attention and no positional
//! encoding runs over `[prefixes ; fused tokens ; language tokens]`, then a
//! final layer norm, mean pooling, and a linear classifier over the closed
//! answer vocabulary. Every tensor is frozen unless the classifier fallback
//! is switched on.

use crate::backbone::{feed_forward, layer_norm};
use crate::bind::Binder;
use crate::error::{contract, Error, Result};
use crate::fusion::{token_budget, Strategy};
use crate::registry::{ParamRegistry, Tag};
use crate::rng;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReasonerDims {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward hidden width is `ffn_mult * d`.
    pub ffn_mult: usize,
    pub vocab: usize,
    pub classes: usize,
}

/// Initial standard deviations. The frozen head must already separate
/// answers well, so its weights are far larger than the adapters'.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReasonerInit {
    pub weight_std: f64,
    pub embed_std: f64,
    pub classifier_std: f64,
}

impl Default for ReasonerInit {
    fn default() -> Self {
        Self {
            weight_std: 0.3,
            embed_std: 1.0,
            classifier_std: 1.0,
        }
    }
}

impl ReasonerDims {
    pub fn scalar_count(&self) -> usize {
        let (d, h) = (self.d, self.ffn_mult * self.d);
        let per_layer = 4 * d * d + (d * h + h) + (h * d + d) + 4 * d;
        self.layers * per_layer + 2 * d + self.vocab * d + d * self.classes + self.classes
    }
}

/// Builds `reasoner.*`. When `train_classifier` is set the classifier is
/// trainable and tagged with the fusion group so it updates on every step.
pub fn init_reasoner<T: Real>(
    seed: u64,
    dims: ReasonerDims,
    init: ReasonerInit,
    train_classifier: bool,
) -> Result<ParamRegistry<T>> {
    if dims.d == 0 || dims.heads == 0 || dims.d % dims.heads != 0 {
        return Err(Error::Config(format!(
            "reasoner width {} must be a positive multiple of {} heads",
            dims.d, dims.heads
        )));
    }
    let (d, h) = (dims.d, dims.ffn_mult * dims.d);
    let mut rng = rng::stream(seed, "reasoner");
    let mut reg = ParamRegistry::new();
    let frozen = |reg: &mut ParamRegistry<T>, name: String, t: Tensor<T>| {
        reg.insert(&name, t, false, Tag::Frozen)
    };
    frozen(
        &mut reg,
        "reasoner.embed".into(),
        Tensor::randn(&[dims.vocab, d], init.embed_std, &mut rng),
    )?;
    let std = init.weight_std;
    for i in 0..dims.layers {
        let p = format!("reasoner.layer{i}");
        for w in ["wq", "wk", "wv", "wo"] {
            frozen(
                &mut reg,
                format!("{p}.attn.{w}"),
                Tensor::randn(&[d, d], std, &mut rng),
            )?;
        }
        frozen(
            &mut reg,
            format!("{p}.ffn.w1"),
            Tensor::randn(&[d, h], std, &mut rng),
        )?;
        frozen(&mut reg, format!("{p}.ffn.b1"), Tensor::zeros(&[h]))?;
        frozen(
            &mut reg,
            format!("{p}.ffn.w2"),
            Tensor::randn(&[h, d], std, &mut rng),
        )?;
        frozen(&mut reg, format!("{p}.ffn.b2"), Tensor::zeros(&[d]))?;
        for ln in ["ln1", "ln2"] {
            frozen(&mut reg, format!("{p}.{ln}.gain"), Tensor::ones(&[d]))?;
            frozen(&mut reg, format!("{p}.{ln}.bias"), Tensor::zeros(&[d]))?;
        }
    }
    frozen(
        &mut reg,
        "reasoner.final_ln.gain".into(),
        Tensor::ones(&[d]),
    )?;
    frozen(
        &mut reg,
        "reasoner.final_ln.bias".into(),
        Tensor::zeros(&[d]),
    )?;
    let w = Tensor::randn(&[d, dims.classes], init.classifier_std, &mut rng);
    let b = Tensor::zeros(&[dims.classes]);
    let tag = if train_classifier {
        Tag::Fusion
    } else {
        Tag::Frozen
    };
    reg.insert(
        "reasoner.classifier.weight",
        w,
        train_classifier,
        tag.clone(),
    )?;
    reg.insert("reasoner.classifier.bias", b, train_classifier, tag)?;
    Ok(reg)
}

/// Looks up frozen embeddings for `ids` laid out `[batch, q_len]`.
pub fn embed_tokens<T: Real>(
    registry: &ParamRegistry<T>,
    ids: &[usize],
    batch: usize,
    q_len: usize,
) -> Result<Tensor<T>> {
    let table = registry.get("reasoner.embed")?;
    let (vocab, d) = (table.shape()[0], table.shape()[1]);
    if ids.len() != batch * q_len {
        return Err(contract(format!(
            "{} token ids for a [{batch}, {q_len}] batch",
            ids.len()
        )));
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= vocab {
            return Err(Error::Index {
                what: "token id",
                index: id,
                len: vocab,
            });
        }
        out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Tensor::new(vec![batch, q_len, d], out)
}

/// `[prefixes ; fused ; language]` along the token axis. Each prefix is a
/// `[1, d]` vector repeated over the batch; `lang` may be absent (`Q = 0`).
pub fn assemble_input<T: Real>(
    g: &mut Graph<T>,
    fused: Var,
    prefixes: &[Var],
    lang: Option<Var>,
) -> Result<Var> {
    let fs = g.shape(fused).to_vec();
    if fs.len() != 3 {
        return Err(contract(format!(
            "fused tokens must be [B, T, d], got {fs:?}"
        )));
    }
    let (batch, d) = (fs[0], fs[2]);
    let mut parts = Vec::with_capacity(prefixes.len() + 2);
    for &p in prefixes {
        if g.shape(p) != [1, d] {
            return Err(Error::Shape {
                op: "assemble_input prefix",
                lhs: vec![1, d],
                rhs: g.shape(p).to_vec(),
            });
        }
        parts.push(g.broadcast_batch(p, batch));
    }
    parts.push(fused);
    if let Some(l) = lang {
        let ls = g.shape(l);
        if ls.len() != 3 || ls[0] != batch || ls[2] != d {
            return Err(Error::Shape {
                op: "assemble_input language",
                lhs: fs,
                rhs: ls.to_vec(),
            });
        }
        if ls[1] > 0 {
            parts.push(l);
        }
    }
    g.concat(&parts, 1)
}

/// Answer logits `[B, C]` for an assembled `[B, N, d]` sequence.
pub fn predict<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    dims: &ReasonerDims,
    assembled: Var,
) -> Result<Var> {
    let mut h = assembled;
    for i in 0..dims.layers {
        let p = format!("reasoner.layer{i}");
        let a = layer_norm(g, b, h, &format!("{p}.ln1"))?;
        let wq = b.var(g, &format!("{p}.attn.wq"))?;
        let wk = b.var(g, &format!("{p}.attn.wk"))?;
        let wv = b.var(g, &format!("{p}.attn.wv"))?;
        let wo = b.var(g, &format!("{p}.attn.wo"))?;
        let q = g.matmul(a, wq)?;
        let k = g.matmul(a, wk)?;
        let v = g.matmul(a, wv)?;
        let o = g.attention(q, k, v, dims.heads)?;
        let o = g.matmul(o, wo)?;
        h = g.add(h, o)?;
        let a = layer_norm(g, b, h, &format!("{p}.ln2"))?;
        let f = feed_forward(g, b, a, &format!("{p}.ffn"))?;
        h = g.add(h, f)?;
    }
    let h = layer_norm(g, b, h, "reasoner.final_ln")?;
    let pooled = g.mean_axis(h, 1)?;
    let w = b.var(g, "reasoner.classifier.weight")?;
    let bias = b.var(g, "reasoner.classifier.bias")?;
    let logits = g.matmul(pooled, w)?;
    g.add_bias(logits, bias)
}

/// Number of prefix tokens for a strategy and modality count.
pub fn prefix_count(strategy: Strategy, n: usize) -> usize {
    if n <= 1 {
        return 1;
    }
    match strategy {
        Strategy::Concat | Strategy::Bypass => n,
        Strategy::SelfGated | Strategy::MoE | Strategy::CrossAttention => 2,
        Strategy::Linear => 1,
    }
}

/// Reasoner input length: prefixes, fused tokens, then `q_len` language tokens.
pub fn sequence_length(strategy: Strategy, n: usize, t: usize, q_len: usize) -> usize {
    prefix_count(strategy, n) + token_budget(strategy, n, t) + q_len
}

/// Multiply-accumulate estimate for one example through the reasoner:
/// per layer, `4 N d^2` for the projections, `2 N^2 d` for scores and the
/// weighted sum, and `2 N d h` for the feed-forward, plus the classifier.
pub fn reasoner_flops(
    n: usize,
    t: usize,
    q_len: usize,
    strategy: Strategy,
    d: usize,
    layers: usize,
    ffn_mult: usize,
    classes: usize,
) -> u64 {
    let seq = sequence_length(strategy, n, t, q_len) as u64;
    let (d, h) = (d as u64, (ffn_mult * d) as u64);
    let per_layer = 4 * seq * d * d + attention_macs(seq, d) + 2 * seq * d * h;
    layers as u64 * per_layer + d * classes as u64
}

/// The `N^2` part of one attention layer.
pub fn attention_macs(seq: u64, d: u64) -> u64 {
    2 * seq * seq * d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_lengths() {
        assert_eq!(sequence_length(Strategy::SelfGated, 3, 4, 3), 13);
        assert_eq!(sequence_length(Strategy::Concat, 3, 4, 3), 18);
        assert_eq!(sequence_length(Strategy::SelfGated, 3, 4, 0), 10);
    }

    #[test]
    fn flops_trend() {
        let f = |n, s| reasoner_flops(n, 4, 3, s, 32, 2, 8, 11);
        assert_eq!(f(2, Strategy::SelfGated), f(5, Strategy::SelfGated));
        assert!(f(5, Strategy::Concat) > f(5, Strategy::SelfGated));
        assert!(f(3, Strategy::Concat) > f(2, Strategy::Concat));
        assert_eq!(attention_macs(20, 32), 4 * attention_macs(10, 32));
    }

    #[test]
    fn census_formula() {
        let dims = ReasonerDims {
            d: 32,
            layers: 2,
            heads: 4,
            ffn_mult: 8,
            vocab: 12,
            classes: 11,
        };
        let reg = init_reasoner::<f32>(1, dims, ReasonerInit::default(), false).unwrap();
        let c = reg.count_all(&crate::registry::CensusFilter::All);
        assert_eq!(c.scalars, dims.scalar_count());
        assert_eq!(
            reg.count_trainable(&crate::registry::CensusFilter::All)
                .scalars,
            0
        );
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let dims = ReasonerDims {
            d: 8,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            vocab: 5,
            classes: 3,
        };
        let reg = init_reasoner::<f32>(1, dims, ReasonerInit::default(), false).unwrap();
        assert!(embed_tokens(&reg, &[0, 4], 1, 2).is_ok());
        assert!(embed_tokens(&reg, &[0, 5], 1, 2).is_err());
    }
}
