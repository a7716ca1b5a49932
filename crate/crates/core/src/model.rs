//! Full model: frozen backbone, one adapter per modality, fusion, prefixes
//! and the frozen reasoner, all stored in one [`ParamRegistry`].

use crate::backbone::{init_backbone, qformer_forward, BackboneDims, FeatureBatch};
use crate::bind::Binder;
use crate::error::{contract, Error, Result};
use crate::fusion::{
    fuse, fusion_create, prefix_names, prefix_tokens, FusionModule, Provenance, Strategy,
};
use crate::mmqa::{mmqa_create, MMQAdapter, ModalityId, Role};
use crate::reasoner::{
    assemble_input, embed_tokens, init_reasoner, predict, ReasonerDims, ReasonerInit,
};
use crate::registry::{CensusFilter, ParamRegistry, Tag};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneDims,
    pub rank: usize,
    /// `(name, feature width)` in configuration order.
    pub modalities: Vec<(String, usize)>,
    pub major: String,
    pub strategy: Strategy,
    pub experts: usize,
    pub reasoner: ReasonerDims,
    pub reasoner_init: ReasonerInit,
    pub train_classifier: bool,
    /// Feed question embeddings into the backbone's self-attention.
    pub instruction: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn names(&self) -> Vec<String> {
        self.modalities.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Non-major modalities in configuration order.
    pub fn supportive(&self) -> Vec<String> {
        self.modalities
            .iter()
            .filter(|(n, _)| *n != self.major)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.modalities.is_empty() {
            return Err(Error::Config("model needs at least one modality".into()));
        }
        if !self.modalities.iter().any(|(n, _)| *n == self.major) {
            return Err(Error::Config(format!(
                "major modality `{}` is not among the model modalities",
                self.major
            )));
        }
        for (i, (n, _)) in self.modalities.iter().enumerate() {
            if self.modalities[..i].iter().any(|(o, _)| o == n) {
                return Err(Error::Config(format!("modality `{n}` listed twice")));
            }
            if n.is_empty()
                || !n.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                || n == "fused"
            {
                return Err(Error::Config(format!(
                    "modality name `{n}` must be a non-empty identifier other than `fused`"
                )));
            }
            if matches!(n.as_str(), "backbone" | "fusion" | "reasoner" | "prefix") {
                return Err(Error::Config(format!("modality name `{n}` is reserved")));
            }
        }
        if self.reasoner.d != self.backbone.d {
            return Err(Error::Config(
                "reasoner width must equal backbone width".into(),
            ));
        }
        Ok(())
    }
}

/// One minibatch in model modality order.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub features: Vec<FeatureBatch<T>>,
    /// Question token ids, `[B, q_len]` row-major.
    pub tokens: Vec<usize>,
    pub q_len: usize,
    pub targets: Vec<usize>,
}

impl<T: Real> Batch<T> {
    pub fn size(&self) -> usize {
        self.targets.len()
    }

    pub fn cast<U: Real>(&self) -> Batch<U> {
        Batch {
            features: self
                .features
                .iter()
                .map(|f| FeatureBatch {
                    modality: f.modality.clone(),
                    features: f.features.cast(),
                })
                .collect(),
            tokens: self.tokens.clone(),
            q_len: self.q_len,
            targets: self.targets.clone(),
        }
    }
}

pub struct ForwardOut {
    pub logits: Var,
    pub fused: Var,
    pub provenance: Vec<Provenance>,
    /// Reasoner input `[B, N, d]`.
    pub assembled: Var,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub registry: ParamRegistry<T>,
    pub adapters: Vec<MMQAdapter>,
    pub fusion: FusionModule,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let bb = config.backbone;
        let mut registry = init_backbone(seed, bb)?;
        let mut adapters = Vec::new();
        for (name, f) in &config.modalities {
            let role = if *name == config.major {
                Role::Major
            } else {
                Role::Supportive
            };
            let (ad, reg) = mmqa_create(
                ModalityId::new(name, role),
                bb.d,
                config.rank,
                bb.tokens,
                bb.layers,
                *f,
                seed,
            )?;
            registry.absorb(reg)?;
            adapters.push(ad);
        }
        let supportive = config.supportive();
        let (fusion, reg) = fusion_create(
            config.strategy,
            &config.major,
            &supportive,
            bb.tokens,
            bb.d,
            bb.heads,
            config.experts,
            seed,
        )?;
        registry.absorb(reg)?;
        registry.absorb(prefix_tokens(
            config.strategy,
            &config.major,
            &supportive,
            bb.d,
            seed,
        )?)?;
        registry.absorb(init_reasoner(
            seed,
            config.reasoner,
            config.reasoner_init,
            config.train_classifier,
        )?)?;
        Ok(Self {
            config,
            registry,
            adapters,
            fusion,
        })
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.config.names()
    }

    pub fn adapter(&self, name: &str) -> Result<&MMQAdapter> {
        self.adapters
            .iter()
            .find(|a| a.modality.name == name)
            .ok_or_else(|| Error::Unknown {
                kind: "modality",
                name: name.to_string(),
            })
    }

    pub fn prefix_names(&self) -> Vec<String> {
        prefix_names(
            self.config.strategy,
            &self.config.major,
            &self.config.supportive(),
        )
    }

    pub fn forward(
        &self,
        g: &mut Graph<T>,
        b: &mut Binder<'_, T>,
        batch: &Batch<T>,
    ) -> Result<ForwardOut> {
        let bsz = batch.size();
        if batch.features.len() != self.adapters.len() {
            return Err(contract(format!(
                "batch has {} modalities, model has {}",
                batch.features.len(),
                self.adapters.len()
            )));
        }
        let lang = g.constant(embed_tokens(
            &self.registry,
            &batch.tokens,
            bsz,
            batch.q_len,
        )?);
        let instruction = (self.config.instruction && batch.q_len > 0).then_some(lang);
        let mut major = None;
        let mut supportive = Vec::new();
        for (ad, feats) in self.adapters.iter().zip(&batch.features) {
            if feats.batch() != bsz {
                return Err(contract(format!(
                    "modality `{}` batch size mismatch",
                    feats.modality
                )));
            }
            let q = qformer_forward(g, b, &self.config.backbone, ad, feats, instruction)?;
            if ad.modality.role == Role::Major {
                major = Some(q);
            } else {
                supportive.push(q);
            }
        }
        let major = major.ok_or_else(|| contract("model has no major modality"))?;
        let fused = fuse(g, b, &self.fusion, major, &supportive)?;
        let prefixes = self
            .prefix_names()
            .iter()
            .map(|n| b.var(g, n))
            .collect::<Result<Vec<_>>>()?;
        let assembled = assemble_input(g, fused.tokens, &prefixes, Some(lang))?;
        let logits = predict(g, b, &self.config.reasoner, assembled)?;
        Ok(ForwardOut {
            logits,
            fused: fused.tokens,
            provenance: fused.provenance,
            assembled,
        })
    }

    /// Trainable and total scalar counts.
    pub fn census(&self) -> (usize, usize) {
        (
            self.registry.count_trainable(&CensusFilter::All).scalars,
            self.registry.count_all(&CensusFilter::All).scalars,
        )
    }

    /// Names of tensors that never train (backbone, reasoner).
    pub fn frozen_names(&self) -> Vec<String> {
        self.registry
            .iter()
            .filter(|(_, e)| e.tag == Tag::Frozen)
            .map(|(n, _)| n.to_string())
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            registry: self.registry.cast(),
            adapters: self.adapters.clone(),
            fusion: self.fusion.clone(),
        }
    }
}

/// Argmax per row of a `[B, C]` logits tensor.
pub fn argmax<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let c = logits.shape()[logits.rank() - 1];
    logits
        .data()
        .chunks(c)
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
