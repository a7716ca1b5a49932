//! Named parameter store shared by every model component.
//!
//! Dotted names double as the checkpoint key namespace. Each entry carries a
//! trainable flag and an ownership tag; optimizer masking and parameter
//! accounting are both driven by the tag.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Tag {
    /// Owned by one modality's adapter.
    Modality(String),
    /// Fusion-module parameters, updated on every modality's step.
    Fusion,
    /// Parameters shared across modalities (prefix tokens).
    Shared,
    /// Never updated.
    Frozen,
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tag::Modality(m) => f.write_str(m),
            Tag::Fusion => f.write_str("fusion"),
            Tag::Shared => f.write_str("shared"),
            Tag::Frozen => f.write_str("frozen"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
    pub tag: Tag,
}

/// Which parameters a census covers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CensusFilter {
    All,
    Tag(Tag),
}

impl CensusFilter {
    /// Parses `all`, `fusion`, `shared`, `frozen`, or a modality name present
    /// in `registry`.
    pub fn parse<T: Real>(s: &str, registry: &ParamRegistry<T>) -> Result<Self> {
        Ok(match s {
            "all" => CensusFilter::All,
            "fusion" => CensusFilter::Tag(Tag::Fusion),
            "shared" => CensusFilter::Tag(Tag::Shared),
            "frozen" => CensusFilter::Tag(Tag::Frozen),
            m if registry.modalities().iter().any(|x| x == m) => {
                CensusFilter::Tag(Tag::Modality(m.to_string()))
            }
            other => {
                return Err(Error::Unknown {
                    kind: "census tag",
                    name: other.to_string(),
                })
            }
        })
    }

    fn matches(&self, tag: &Tag) -> bool {
        match self {
            CensusFilter::All => true,
            CensusFilter::Tag(t) => t == tag,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct Census {
    pub tensors: usize,
    pub scalars: usize,
}

#[derive(Debug, Clone, Default)]
pub struct ParamRegistry<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

impl<T: Real> ParamRegistry<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: &str,
        tensor: Tensor<T>,
        trainable: bool,
        tag: Tag,
    ) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        if trainable && tag == Tag::Frozen {
            return Err(Error::Config(format!(
                "frozen parameter `{name}` marked trainable"
            )));
        }
        if let Tag::Modality(m) = &tag {
            if !name.starts_with(&format!("{m}.")) {
                return Err(Error::Config(format!(
                    "parameter `{name}` tagged `{m}` must be prefixed by its modality"
                )));
            }
        }
        self.entries.insert(
            name.to_string(),
            ParamEntry {
                tensor,
                trainable,
                tag,
            },
        );
        Ok(())
    }

    /// Moves every entry of `other` into `self`; names must not collide.
    pub fn absorb(&mut self, other: ParamRegistry<T>) -> Result<()> {
        for (name, e) in other.entries {
            self.insert(&name, e.tensor, e.trainable, e.tag)?;
        }
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries.get(name).ok_or_else(|| Error::Unknown {
            kind: "parameter",
            name: name.to_string(),
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.entry(name)?.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::Unknown {
                kind: "parameter",
                name: name.to_string(),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Names of trainable entries carrying `tag`.
    pub fn trainable_with_tag(&self, tag: &Tag) -> Vec<String> {
        self.iter()
            .filter(|(_, e)| e.trainable && &e.tag == tag)
            .map(|(n, _)| n.to_string())
            .collect()
    }

    /// Modality names appearing in tags, sorted.
    pub fn modalities(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .entries
            .values()
            .filter_map(|e| match &e.tag {
                Tag::Modality(m) => Some(m.clone()),
                _ => None,
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Trainable tensors and scalars matching `filter`.
    pub fn count_trainable(&self, filter: &CensusFilter) -> Census {
        self.census(filter, true)
    }

    /// All tensors and scalars (trainable or not) matching `filter`.
    pub fn count_all(&self, filter: &CensusFilter) -> Census {
        self.census(filter, false)
    }

    fn census(&self, filter: &CensusFilter, trainable_only: bool) -> Census {
        self.entries
            .values()
            .filter(|e| filter.matches(&e.tag) && (!trainable_only || e.trainable))
            .fold(Census::default(), |c, e| Census {
                tensors: c.tensors + 1,
                scalars: c.scalars + e.tensor.numel(),
            })
    }

    /// Checksums of every entry, in name order.
    pub fn checksums(&self) -> BTreeMap<String, [u8; 32]> {
        self.iter()
            .map(|(n, e)| (n.to_string(), e.tensor.checksum()))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamRegistry<U> {
        ParamRegistry {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast(),
                            trainable: e.trainable,
                            tag: e.tag.clone(),
                        },
                    )
                })
                .collect(),
        }
    }
}
