//! Frozen shared query transformer.
//!
//! Each block runs pre-norm self-attention over the query tokens (with the
//! modality's low-rank updates on the query and value projections),
//! cross-attention from the queries to the aligned modality features, and a
//! GELU feed-forward, each with a residual connection. Features carry no
//! positional encoding, so the output does not depend on their order.
//!
//! When question embeddings are supplied they join the query tokens in
//! self-attention (the "instruction-aware" variant); only the first `T`
//! positions are returned.

use crate::bind::Binder;
use crate::error::{contract, Error, Result};
use crate::mmqa::{align_features, MMQAdapter};
use crate::registry::{ParamRegistry, Tag};
use crate::rng;
use crate::tensor::{Graph, Real, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneDims {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
}

impl BackboneDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.heads == 0 || self.tokens == 0 {
            return Err(Error::Config(format!(
                "backbone dims must be positive: {self:?}"
            )));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.d < 2 {
            return Err(Error::Config("hidden width must be at least 2".into()));
        }
        Ok(())
    }

    /// Scalars per block: four self-attention and four cross-attention
    /// `d x d` projections, a `d -> 4d -> d` feed-forward with biases, and
    /// three layer norms.
    pub fn scalars_per_layer(&self) -> usize {
        let d = self.d;
        16 * d * d + 11 * d
    }

    /// Total scalars including the output layer norm.
    pub fn scalar_count(&self) -> usize {
        self.layers * self.scalars_per_layer() + 2 * self.d
    }
}

/// A batch of one modality's raw encoder features, `[B, S, f]`.
#[derive(Debug, Clone)]
pub struct FeatureBatch<T> {
    pub modality: String,
    pub features: Tensor<T>,
}

impl<T: Real> FeatureBatch<T> {
    pub fn new(modality: &str, features: Tensor<T>) -> Result<Self> {
        if features.rank() != 3 {
            return Err(contract(format!(
                "feature batch for `{modality}` must be [B, S, f], got {:?}",
                features.shape()
            )));
        }
        Ok(Self {
            modality: modality.to_string(),
            features,
        })
    }

    pub fn batch(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.features.shape()[2]
    }
}

fn insert_ln<T: Real>(reg: &mut ParamRegistry<T>, prefix: &str, d: usize) -> Result<()> {
    reg.insert(
        &format!("{prefix}.gain"),
        Tensor::ones(&[d]),
        false,
        Tag::Frozen,
    )?;
    reg.insert(
        &format!("{prefix}.bias"),
        Tensor::zeros(&[d]),
        false,
        Tag::Frozen,
    )
}

/// Seeded random init of every backbone tensor (`std = 0.02`, unit layer-norm
/// gains, zero biases). All entries are frozen.
pub fn init_backbone<T: Real>(seed: u64, dims: BackboneDims) -> Result<ParamRegistry<T>> {
    dims.validate()?;
    let d = dims.d;
    let mut rng = rng::stream(seed, "backbone");
    let mut reg = ParamRegistry::new();
    for i in 0..dims.layers {
        let p = format!("backbone.layer{i}");
        for block in ["self", "cross"] {
            for w in ["wq", "wk", "wv", "wo"] {
                reg.insert(
                    &format!("{p}.{block}.{w}"),
                    Tensor::randn(&[d, d], INIT_STD, &mut rng),
                    false,
                    Tag::Frozen,
                )?;
            }
        }
        reg.insert(
            &format!("{p}.ffn.w1"),
            Tensor::randn(&[d, 4 * d], INIT_STD, &mut rng),
            false,
            Tag::Frozen,
        )?;
        reg.insert(
            &format!("{p}.ffn.b1"),
            Tensor::zeros(&[4 * d]),
            false,
            Tag::Frozen,
        )?;
        reg.insert(
            &format!("{p}.ffn.w2"),
            Tensor::randn(&[4 * d, d], INIT_STD, &mut rng),
            false,
            Tag::Frozen,
        )?;
        reg.insert(
            &format!("{p}.ffn.b2"),
            Tensor::zeros(&[d]),
            false,
            Tag::Frozen,
        )?;
        for ln in ["ln1", "ln2", "ln3"] {
            insert_ln(&mut reg, &format!("{p}.{ln}"), d)?;
        }
    }
    insert_ln(&mut reg, "backbone.final_ln", d)?;
    Ok(reg)
}

/// `x W + (x B) A`. The low-rank update is applied as two rank-`r` products
/// and never materialized as a dense `d x d` matrix.
pub fn lora_linear<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    lora: Option<(Var, Var)>,
) -> Result<Var> {
    let base = g.matmul(x, w)?;
    let Some((b, a)) = lora else {
        return Ok(base);
    };
    let (bs, as_) = (g.shape(b).to_vec(), g.shape(a).to_vec());
    if bs.len() != 2 || as_.len() != 2 || bs[1] != as_[0] || bs[0] != as_[1] {
        return Err(Error::Shape {
            op: "lora rank",
            lhs: bs,
            rhs: as_,
        });
    }
    let xb = g.matmul(x, b)?;
    let delta = g.matmul(xb, a)?;
    g.add(base, delta)
}

pub(crate) fn layer_norm<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    x: Var,
    prefix: &str,
) -> Result<Var> {
    let gain = b.var(g, &format!("{prefix}.gain"))?;
    let bias = b.var(g, &format!("{prefix}.bias"))?;
    g.layer_norm(x, gain, bias, LN_EPS)
}

pub(crate) fn feed_forward<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    x: Var,
    prefix: &str,
) -> Result<Var> {
    let w1 = b.var(g, &format!("{prefix}.w1"))?;
    let b1 = b.var(g, &format!("{prefix}.b1"))?;
    let w2 = b.var(g, &format!("{prefix}.w2"))?;
    let b2 = b.var(g, &format!("{prefix}.b2"))?;
    let h = g.matmul(x, w1)?;
    let h = g.add_bias(h, b1)?;
    let h = g.gelu(h);
    let h = g.matmul(h, w2)?;
    g.add_bias(h, b2)
}

/// Runs the backbone for one modality and returns `[B, T, d]` query tokens.
///
/// `instruction`, when given, is `[B, Q, d]` question embeddings that take
/// part in self-attention alongside the queries.
pub fn qformer_forward<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    dims: &BackboneDims,
    adapter: &MMQAdapter,
    feats: &FeatureBatch<T>,
    instruction: Option<Var>,
) -> Result<Var> {
    forward_impl(g, b, dims, adapter, feats, instruction, true)
}

/// Same as [`qformer_forward`] with every low-rank update removed; the
/// adapter contributes only its queries and feature alignment.
pub fn qformer_forward_frozen<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    dims: &BackboneDims,
    adapter: &MMQAdapter,
    feats: &FeatureBatch<T>,
    instruction: Option<Var>,
) -> Result<Var> {
    forward_impl(g, b, dims, adapter, feats, instruction, false)
}

fn forward_impl<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    dims: &BackboneDims,
    adapter: &MMQAdapter,
    feats: &FeatureBatch<T>,
    instruction: Option<Var>,
    with_lora: bool,
) -> Result<Var> {
    if adapter.modality.name != feats.modality {
        return Err(contract(format!(
            "adapter for `{}` given features of `{}`",
            adapter.modality.name, feats.modality
        )));
    }
    if adapter.d != dims.d || adapter.tokens != dims.tokens || adapter.layers != dims.layers {
        return Err(contract(format!(
            "adapter `{}` built for different backbone dims",
            adapter.modality.name
        )));
    }
    let (batch, d, t) = (feats.batch(), dims.d, dims.tokens);
    let z = align_features(g, b, adapter, feats)?;
    let queries = b.var(g, &adapter.param_name("queries"))?;
    let mut h = g.broadcast_batch(queries, batch);
    if let Some(instr) = instruction {
        let s = g.shape(instr);
        if s.len() != 3 || s[0] != batch || s[2] != d {
            return Err(Error::Shape {
                op: "qformer instruction",
                lhs: vec![batch, t, d],
                rhs: s.to_vec(),
            });
        }
        h = g.concat(&[h, instr], 1)?;
    }

    for i in 0..dims.layers {
        let p = format!("backbone.layer{i}");
        let lora =
            |g: &mut Graph<T>, b: &mut Binder<'_, T>, site: &str| -> Result<Option<(Var, Var)>> {
                if !with_lora {
                    return Ok(None);
                }
                let bm = b.var(g, &adapter.lora_name(i, site, "b"))?;
                let am = b.var(g, &adapter.lora_name(i, site, "a"))?;
                Ok(Some((bm, am)))
            };

        let a = layer_norm(g, b, h, &format!("{p}.ln1"))?;
        let wq = b.var(g, &format!("{p}.self.wq"))?;
        let wk = b.var(g, &format!("{p}.self.wk"))?;
        let wv = b.var(g, &format!("{p}.self.wv"))?;
        let wo = b.var(g, &format!("{p}.self.wo"))?;
        let lq = lora(g, b, "q")?;
        let lv = lora(g, b, "v")?;
        let q = lora_linear(g, a, wq, lq)?;
        let k = g.matmul(a, wk)?;
        let v = lora_linear(g, a, wv, lv)?;
        let o = g.attention(q, k, v, dims.heads)?;
        let o = g.matmul(o, wo)?;
        h = g.add(h, o)?;

        let a = layer_norm(g, b, h, &format!("{p}.ln2"))?;
        let wq = b.var(g, &format!("{p}.cross.wq"))?;
        let wk = b.var(g, &format!("{p}.cross.wk"))?;
        let wv = b.var(g, &format!("{p}.cross.wv"))?;
        let wo = b.var(g, &format!("{p}.cross.wo"))?;
        let q = g.matmul(a, wq)?;
        let k = g.matmul(z, wk)?;
        let v = g.matmul(z, wv)?;
        let o = g.attention(q, k, v, dims.heads)?;
        let o = g.matmul(o, wo)?;
        h = g.add(h, o)?;

        let a = layer_norm(g, b, h, &format!("{p}.ln3"))?;
        let f = feed_forward(g, b, a, &format!("{p}.ffn"))?;
        h = g.add(h, f)?;
    }
    if instruction.is_some() {
        h = g.narrow(h, 1, 0, t)?;
    }
    layer_norm(g, b, h, "backbone.final_ln")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bind::GradSet;
    use crate::mmqa::{mmqa_create, ModalityId, Role};
    use crate::registry::CensusFilter;

    fn dims() -> BackboneDims {
        BackboneDims {
            d: 32,
            layers: 2,
            heads: 4,
            tokens: 4,
        }
    }

    #[test]
    fn census_matches_formula() {
        let reg = init_backbone::<f32>(1, dims()).unwrap();
        assert_eq!(dims().scalars_per_layer(), 16_736);
        assert_eq!(
            reg.count_all(&CensusFilter::All).scalars,
            dims().scalar_count()
        );
        assert_eq!(reg.count_trainable(&CensusFilter::All).scalars, 0);
        // 8 projections + 4 ffn tensors + 6 norm tensors per layer, plus the output norm.
        assert_eq!(reg.len(), 2 * 18 + 2);
    }

    #[test]
    fn init_is_deterministic_and_checks_heads() {
        let a = init_backbone::<f32>(7, dims()).unwrap();
        let b = init_backbone::<f32>(7, dims()).unwrap();
        assert_eq!(a.checksums(), b.checksums());
        let bad = BackboneDims { d: 33, ..dims() };
        assert!(init_backbone::<f32>(7, bad).is_err());
    }

    #[test]
    fn lora_rank_mismatch_is_error() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones(&[2, 4]));
        let w = g.constant(Tensor::ones(&[4, 4]));
        let bm = g.constant(Tensor::zeros(&[4, 2]));
        let am = g.constant(Tensor::zeros(&[3, 4]));
        assert!(lora_linear(&mut g, x, w, Some((bm, am))).is_err());
    }

    #[test]
    fn output_shape_and_modality_check() {
        let mut reg = init_backbone::<f32>(1, dims()).unwrap();
        let m = ModalityId::new("audio", Role::Supportive);
        let (ad, areg) = mmqa_create::<f32>(m, 32, 4, 4, 2, 16, 3).unwrap();
        reg.absorb(areg).unwrap();
        let mut rng = rng::stream(0, "feats");
        let feats = FeatureBatch::new("audio", Tensor::randn(&[2, 5, 16], 1.0, &mut rng)).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&reg, GradSet::None);
        let out = qformer_forward(&mut g, &mut b, &dims(), &ad, &feats, None).unwrap();
        assert_eq!(g.shape(out), &[2, 4, 32]);

        let wrong = FeatureBatch::new("video", feats.features.clone()).unwrap();
        assert!(qformer_forward(&mut g, &mut b, &dims(), &ad, &wrong, None).is_err());
        let unaligned = FeatureBatch::new("audio", Tensor::zeros(&[2, 5, 20])).unwrap();
        assert!(qformer_forward(&mut g, &mut b, &dims(), &ad, &unaligned, None).is_err());
    }
}
