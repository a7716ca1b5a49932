//! Per-modality adapters: low-rank pairs at the self-attention query and value
//! projections of every backbone layer, learnable query tokens, and an affine
//! feature-alignment projection when the encoder width differs from `d`.
//!
//! Parameter names, all prefixed by the modality:
//!
//! ```text
//! {m}.queries                 [T, d]
//! {m}.lora.layer{i}.{q,v}.b   [d, r]   zero at creation
//! {m}.lora.layer{i}.{q,v}.a   [r, d]
//! {m}.align.weight            [f, d]   only when f != d
//! {m}.align.bias              [d]
//! ```

use std::fmt;

use crate::backbone::FeatureBatch;
use crate::bind::Binder;
use crate::error::{contract, Error, Result};
use crate::registry::{ParamRegistry, Tag};
use crate::rng;
use crate::tensor::{Graph, Real, Tensor, Var};

pub const QUERY_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Major,
    Supportive,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalityId {
    pub name: String,
    pub role: Role,
}

impl ModalityId {
    pub fn new(name: &str, role: Role) -> Self {
        Self {
            name: name.to_string(),
            role,
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

/// Shape metadata for one modality's adapter. The tensors themselves live in
/// the model's [`ParamRegistry`] under the names returned here.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MMQAdapter {
    pub modality: ModalityId,
    pub d: usize,
    pub rank: usize,
    pub tokens: usize,
    pub layers: usize,
    pub feat_dim: usize,
}

impl MMQAdapter {
    pub fn has_align(&self) -> bool {
        self.feat_dim != self.d
    }

    pub fn param_name(&self, leaf: &str) -> String {
        format!("{}.{leaf}", self.modality.name)
    }

    pub fn lora_name(&self, layer: usize, site: &str, factor: &str) -> String {
        format!("{}.lora.layer{layer}.{site}.{factor}", self.modality.name)
    }

    /// `L * 2 * 2dr + T*d + (f*d + d if aligned)`.
    pub fn scalar_count(&self) -> usize {
        adapter_scalar_count(self.d, self.rank, self.tokens, self.layers, self.feat_dim)
    }
}

pub fn adapter_scalar_count(d: usize, r: usize, t: usize, layers: usize, f: usize) -> usize {
    let lora = layers * 2 * 2 * d * r;
    let align = if f != d { f * d + d } else { 0 };
    lora + t * d + align
}

/// Creates one modality's adapter with `B = 0`, Gaussian `A` (std `1/sqrt(d)`),
/// queries at std 0.02, and an alignment projection (std `1/sqrt(f)`, zero
/// bias) when `f != d`.
pub fn mmqa_create<T: Real>(
    modality: ModalityId,
    d: usize,
    r: usize,
    tokens: usize,
    layers: usize,
    feat_dim: usize,
    seed: u64,
) -> Result<(MMQAdapter, ParamRegistry<T>)> {
    if r == 0 || r >= d {
        return Err(Error::Config(format!(
            "LoRA rank {r} must satisfy 0 < r < d = {d}"
        )));
    }
    if feat_dim == 0 || tokens == 0 {
        return Err(Error::Config(format!(
            "modality `{}` needs positive feature width and token count",
            modality.name
        )));
    }
    let ad = MMQAdapter {
        modality,
        d,
        rank: r,
        tokens,
        layers,
        feat_dim,
    };
    let tag = Tag::Modality(ad.modality.name.clone());
    let mut rng = rng::stream(seed, &format!("adapter.{}", ad.modality.name));
    let mut reg = ParamRegistry::new();
    reg.insert(
        &ad.param_name("queries"),
        Tensor::randn(&[tokens, d], QUERY_STD, &mut rng),
        true,
        tag.clone(),
    )?;
    let a_std = 1.0 / (d as f64).sqrt();
    for i in 0..layers {
        for site in ["q", "v"] {
            reg.insert(
                &ad.lora_name(i, site, "b"),
                Tensor::zeros(&[d, r]),
                true,
                tag.clone(),
            )?;
            reg.insert(
                &ad.lora_name(i, site, "a"),
                Tensor::randn(&[r, d], a_std, &mut rng),
                true,
                tag.clone(),
            )?;
        }
    }
    if ad.has_align() {
        let std = 1.0 / (feat_dim as f64).sqrt();
        reg.insert(
            &ad.param_name("align.weight"),
            Tensor::randn(&[feat_dim, d], std, &mut rng),
            true,
            tag.clone(),
        )?;
        reg.insert(&ad.param_name("align.bias"), Tensor::zeros(&[d]), true, tag)?;
    }
    Ok((ad, reg))
}

/// Maps `[B, S, f]` features to `[B, S, d]`; identity when `f == d`.
pub fn align_features<T: Real>(
    g: &mut Graph<T>,
    b: &mut Binder<'_, T>,
    adapter: &MMQAdapter,
    feats: &FeatureBatch<T>,
) -> Result<Var> {
    if feats.modality != adapter.modality.name {
        return Err(contract(format!(
            "adapter for `{}` given features of `{}`",
            adapter.modality.name, feats.modality
        )));
    }
    if feats.width() != adapter.feat_dim {
        return Err(Error::Shape {
            op: "align_features",
            lhs: feats.features.shape().to_vec(),
            rhs: vec![adapter.feat_dim, adapter.d],
        });
    }
    let z = g.constant(feats.features.clone());
    if !adapter.has_align() {
        return Ok(z);
    }
    let w = b.var(g, &adapter.param_name("align.weight"))?;
    let bias = b.var(g, &adapter.param_name("align.bias"))?;
    let y = g.matmul(z, w)?;
    g.add_bias(y, bias)
}
