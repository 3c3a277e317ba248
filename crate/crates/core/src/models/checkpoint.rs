use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{ArchSpec, StagedModel};
use crate::error::{Error, Result};
use crate::nn::{Group, Module};
use crate::tensor::{numel, DType, Element, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

/// One named tensor as raw little-endian bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Blob {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl Blob {
    pub fn encode<T: Element>(name: &str, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Self {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    pub fn decode<T: Element>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::DTypeMismatch {
                name: self.name.clone(),
                expected: T::DTYPE,
                got: self.dtype,
            });
        }
        let n = numel(&self.shape);
        if self.bytes.len() != n * self.dtype.size() {
            return Err(Error::DataLength {
                shape: self.shape.clone(),
                len: self.bytes.len() / self.dtype.size(),
            });
        }
        let data = self.bytes.chunks_exact(self.dtype.size()).map(T::read_le).collect();
        Tensor::new(&self.shape, data)
    }
}

/// In-memory checkpoint; the byte format lives in the companion crate.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    /// Architecture tag checked on load.
    pub arch: String,
    pub seed: u64,
    pub metrics: Vec<(String, f64)>,
    pub blobs: Vec<Blob>,
}

impl Checkpoint {
    /// Captures every parameter and buffer of `module`.
    pub fn capture<T: Element>(arch: &str, seed: u64, module: &impl Module<T>, metrics: Vec<(String, f64)>) -> Self {
        let mut blobs = Vec::new();
        module.visit(&mut |p| blobs.push(Blob::encode(&p.name, &p.tensor)));
        Self {
            version: CHECKPOINT_VERSION,
            arch: arch.to_string(),
            seed,
            metrics,
            blobs,
        }
    }

    pub fn blob(&self, name: &str) -> Option<&Blob> {
        self.blobs.iter().find(|b| b.name == name)
    }

    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    /// Overwrites every tensor of `module`; the blob set must match exactly.
    pub fn restore<T: Element>(&self, module: &mut impl Module<T>) -> Result<()> {
        let mut err = None;
        let mut seen = 0usize;
        module.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            let Some(blob) = self.blob(&p.name) else {
                err = Some(Error::MissingParam(p.name.clone()));
                return;
            };
            if blob.shape != p.tensor.shape() {
                err = Some(Error::ShapeMismatch {
                    op: "checkpoint restore",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: blob.shape.clone(),
                });
                return;
            }
            match blob.decode::<T>() {
                Ok(t) => {
                    p.tensor.data_mut().copy_from_slice(t.data());
                    seen += 1;
                }
                Err(e) => err = Some(e),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != self.blobs.len() {
            let extra = self
                .blobs
                .iter()
                .find(|b| module.params().iter().all(|p| p.name != b.name))
                .map(|b| b.name.clone())
                .unwrap_or_default();
            return Err(Error::UnexpectedParam(extra));
        }
        Ok(())
    }
}

impl<T: Element> StagedModel<T> {
    pub fn to_checkpoint(&self, seed: u64, metrics: Vec<(String, f64)>) -> Checkpoint {
        Checkpoint::capture(&self.arch.name, seed, self, metrics)
    }

    /// Rebuilds a model from a checkpoint, inferring the prefix, input
    /// channels and class count from the stored tensors.
    pub fn from_checkpoint(ckpt: &Checkpoint, group: Group) -> Result<Self> {
        let first = ckpt.blobs.first().ok_or_else(|| Error::MissingParam("<any>".into()))?;
        let prefix = first.name.split('.').next().unwrap_or_default().to_string();
        let head = ckpt
            .blob(&alloc::format!("{prefix}.head.weight"))
            .ok_or_else(|| Error::MissingParam(alloc::format!("{prefix}.head.weight")))?;
        let stem = ckpt
            .blob(&alloc::format!("{prefix}.stage1.stem.conv.weight"))
            .ok_or_else(|| Error::MissingParam(alloc::format!("{prefix}.stage1.stem.conv.weight")))?;
        if head.shape.len() != 2 || stem.shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "checkpoint head/stem",
                lhs: head.shape.clone(),
                rhs: stem.shape.clone(),
            });
        }
        let spec = ArchSpec::named(&ckpt.arch, head.shape[0])?.with_in_channels(stem.shape[1]);
        let mut model = Self::build(&spec, ckpt.seed, &prefix, group)?;
        ckpt.restore(&mut model)?;
        Ok(model)
    }

    /// Like [`StagedModel::from_checkpoint`] but insists on `arch`.
    pub fn from_checkpoint_as(ckpt: &Checkpoint, arch: &str, group: Group) -> Result<Self> {
        if ckpt.arch != arch {
            return Err(Error::ArchMismatch {
                expected: arch.to_string(),
                got: ckpt.arch.clone(),
            });
        }
        Self::from_checkpoint(ckpt, group)
    }
}
