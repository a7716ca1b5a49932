//! Lazily maps registry parameters onto graph leaves for one forward pass.

use std::collections::{BTreeSet, HashMap};

use crate::error::Result;
use crate::registry::{ParamEntry, ParamRegistry, Tag};
use crate::tensor::{Graph, Real, Var};

/// Which registry parameters become gradient-carrying leaves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GradSet {
    None,
    /// Every trainable parameter.
    All,
    /// Trainable parameters whose tag is in the set.
    Tags(BTreeSet<Tag>),
}

impl GradSet {
    pub fn tags<I: IntoIterator<Item = Tag>>(tags: I) -> Self {
        GradSet::Tags(tags.into_iter().collect())
    }

    pub fn wants<T>(&self, entry: &ParamEntry<T>) -> bool {
        entry.trainable
            && match self {
                GradSet::None => false,
                GradSet::All => true,
                GradSet::Tags(s) => s.contains(&entry.tag),
            }
    }
}

pub struct Binder<'a, T> {
    registry: &'a ParamRegistry<T>,
    grads: GradSet,
    vars: HashMap<String, Var>,
}

impl<'a, T: Real> Binder<'a, T> {
    pub fn new(registry: &'a ParamRegistry<T>, grads: GradSet) -> Self {
        Self {
            registry,
            grads,
            vars: HashMap::new(),
        }
    }

    pub fn registry(&self) -> &'a ParamRegistry<T> {
        self.registry
    }

    /// Binds `name` to an existing graph node instead of a fresh leaf. Used
    /// by gradient checks, where the checker owns the perturbed inputs.
    pub fn preset(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn var(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let entry = self.registry.entry(name)?;
        let v = g.leaf(entry.tensor.clone(), self.grads.wants(entry));
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Bound `(name, var)` pairs that carry gradients, sorted by name.
    pub fn grad_leaves(&self, g: &Graph<T>) -> Vec<(String, Var)> {
        let mut out: Vec<(String, Var)> = self
            .vars
            .iter()
            .filter(|(_, &v)| g.requires_grad(v))
            .map(|(n, &v)| (n.clone(), v))
            .collect();
        out.sort();
        out
    }
}
