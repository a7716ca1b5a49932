//! Binary checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "CRMA" | version | config digest (32 bytes)
//! modality count | (name length, name bytes)*
//! config text length | config text bytes
//! entry count | (name length, name bytes, dtype u8, rank, dims*, data)*
//! ```
//!
//! Tensor data is always little-endian `f32` (dtype code 0), whatever
//! precision the model was trained in. The file is decoded completely
//! before a model is touched, so a damaged file never leaves a model
//! half-restored.

use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::config::model_digest;
use crate::model::Model;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CRMA";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
const MAX_RANK: u32 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub digest: [u8; 32],
    pub modalities: Vec<String>,
    /// Canonical text of the run configuration that produced the tensors.
    pub config_text: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// What [`restore`] did beyond plain copies.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RestoreReport {
    pub restored: usize,
    /// Tensors that grew with the modality list; the stored block was
    /// copied into the leading corner and the rest zero-filled.
    pub grown: Vec<String>,
    /// Model tensors absent from the checkpoint, left at initialization.
    pub fresh: Vec<String>,
}

pub fn encode(model: &Model<f32>, config_text: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&model_digest(&model.config));
    let names = model.modality_names();
    put_u32(&mut out, names.len());
    for n in &names {
        put_bytes(&mut out, n.as_bytes());
    }
    put_bytes(&mut out, config_text.as_bytes());
    put_u32(&mut out, model.registry.len());
    for (name, entry) in model.registry.iter() {
        put_bytes(&mut out, name.as_bytes());
        out.push(DTYPE_F32);
        let shape = entry.tensor.shape();
        put_u32(&mut out, shape.len());
        for &d in shape {
            put_u32(&mut out, d);
        }
        for v in entry.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes to a sibling temporary file first and renames it into place.
pub fn save_checkpoint(path: &Path, model: &Model<f32>, config_text: &str) -> Result<()> {
    let bytes = encode(model, config_text);
    let tmp = path.with_extension("crma.tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)?;
        let start = self.pos;
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Checkpoint {
            offset: start,
            msg: format!("{what} is not valid UTF-8"),
        })
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic, not a CRMA checkpoint"));
    }
    let version = r.u32("format version")? as u32;
    if version != FORMAT_VERSION {
        r.pos -= 4;
        return Err(r.fail(format!(
            "unsupported format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let digest: [u8; 32] = r.take(32, "config digest")?.try_into().expect("32 bytes");
    let n_mod = r.u32("modality count")?;
    let modalities = (0..n_mod)
        .map(|_| r.string("modality name"))
        .collect::<Result<Vec<_>>>()?;
    let config_text = r.string("config text")?;
    let n_entries = r.u32("entry count")?;
    let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
    for _ in 0..n_entries {
        let name = r.string("tensor name")?;
        if tensors.iter().any(|(n, _)| *n == name) {
            return Err(r.fail(format!("tensor `{name}` stored twice")));
        }
        let dtype = r.take(1, "dtype code")?[0];
        if dtype != DTYPE_F32 {
            r.pos -= 1;
            return Err(r.fail(format!(
                "tensor `{name}` has dtype code {dtype}; only 0 (f32) is stored"
            )));
        }
        let rank = r.u32("rank")?;
        if rank as u32 > MAX_RANK {
            return Err(r.fail(format!("tensor `{name}` claims rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| r.u32("dimension"))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.fail(format!("tensor `{name}` is too large")))?
            / 4;
        let raw = r.take(numel * 4, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(r.fail(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(Checkpoint {
        version,
        digest,
        modalities,
        config_text,
        tensors,
    })
}

/// Copies checkpoint tensors into `model`.
///
/// The stored modality order must be a prefix of the model's. When the model
/// has extra trailing modalities, the stored digest is compared against the
/// model configuration restricted to the stored modalities; tensors whose
/// shape grew with the modality list keep their stored block. A digest
/// mismatch is an error unless `force` is set; shape conflicts always are.
pub fn restore(model: &mut Model<f32>, ckpt: &Checkpoint, force: bool) -> Result<RestoreReport> {
    let names = model.modality_names();
    let k = ckpt.modalities.len();
    if k > names.len() || names[..k] != ckpt.modalities[..] {
        return Err(Error::Config(format!(
            "checkpoint modality order {:?} is not a prefix of the model order {names:?}",
            ckpt.modalities
        )));
    }
    let extending = k < names.len();
    let mut expected = model.config.clone();
    expected.modalities.truncate(k);
    if !force && model_digest(&expected) != ckpt.digest {
        return Err(Error::Config(
            "checkpoint config digest does not match this model (use --force to override)".into(),
        ));
    }

    let mut registry = model.registry.clone();
    let mut report = RestoreReport::default();
    for (name, stored) in &ckpt.tensors {
        let target = registry.get_mut(name).map_err(|_| Error::Unknown {
            kind: "checkpoint tensor",
            name: name.clone(),
        })?;
        if target.shape() == stored.shape() {
            target.data_mut().copy_from_slice(stored.data());
        } else if extending && fits_inside(stored.shape(), target.shape()) {
            *target = corner_copy(stored, target.shape());
            report.grown.push(name.clone());
        } else {
            return Err(Error::Shape {
                op: "checkpoint restore",
                lhs: target.shape().to_vec(),
                rhs: stored.shape().to_vec(),
            });
        }
        report.restored += 1;
    }
    report.fresh = registry
        .names()
        .filter(|n| !ckpt.tensors.iter().any(|(s, _)| s == n))
        .map(str::to_string)
        .collect();
    model.registry = registry;
    Ok(report)
}

fn fits_inside(small: &[usize], big: &[usize]) -> bool {
    small.len() == big.len() && small.iter().zip(big).all(|(s, b)| s <= b)
}

/// Zero tensor of `shape` with `src` in its leading corner.
fn corner_copy(src: &Tensor<f32>, shape: &[usize]) -> Tensor<f32> {
    let mut out = Tensor::zeros(shape);
    let rank = shape.len();
    if rank == 0 {
        return src.clone();
    }
    let inner = src.shape()[rank - 1];
    let rows = src.numel() / inner.max(1);
    for row in 0..rows {
        // Multi-index of this row in the source, re-linearised in the target.
        let mut rem = row;
        let mut offset = 0;
        let mut stride = shape[rank - 1];
        for axis in (0..rank - 1).rev() {
            let idx = rem % src.shape()[axis];
            rem /= src.shape()[axis];
            offset += idx * stride;
            stride *= shape[axis];
        }
        out.data_mut()[offset..offset + inner]
            .copy_from_slice(&src.data()[row * inner..(row + 1) * inner]);
    }
    out
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u32(out, b.len());
    out.extend_from_slice(b);
}
