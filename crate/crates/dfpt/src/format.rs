//! Checkpoint files: `DFPT` magic, little-endian `u32` version, then
//! length-prefixed records.
//!
//! ```text
//! magic "DFPT" | version u32
//! arch: str | seed u64
//! n_metrics u32 | (key: str, value f64)*
//! n_blobs u32 | (name: str, dtype u8, rank u32, dims u64*, len u64, bytes)*
//! str = len u32 + UTF-8
//! ```
//!
//! Synthetic datasets use the same container with blobs `images` (f32,
//! N×C×H×W) and `labels` (f32, N) and metric `classes`.

use std::fs;
use std::path::Path;

use dfpt_core::data::LabeledDataset;
use dfpt_core::models::{Blob, Checkpoint, CHECKPOINT_VERSION};
use dfpt_core::tensor::{DType, Tensor};

use crate::error::{IoError, Result};

pub const MAGIC: &[u8; 4] = b"DFPT";
const DATASET_TAG: &str = "dataset:";

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&ck.version.to_le_bytes());
    put_str(&mut out, &ck.arch);
    out.extend_from_slice(&ck.seed.to_le_bytes());
    out.extend_from_slice(&(ck.metrics.len() as u32).to_le_bytes());
    for (k, v) in &ck.metrics {
        put_str(&mut out, k);
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(ck.blobs.len() as u32).to_le_bytes());
    for b in &ck.blobs {
        put_str(&mut out, &b.name);
        out.push(b.dtype.code());
        out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
        for &d in &b.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(b.bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&b.bytes);
    }
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(IoError::Truncated {
                what,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &'static str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| IoError::MalformedRecord(format!("{what} overflows usize")))
    }

    fn str(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let bytes = self.take(n, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| IoError::Utf8(what))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| IoError::BadMagic {
        expected: MAGIC.to_vec(),
        found: bytes[..bytes.len().min(4)].to_vec(),
    })?;
    if magic != MAGIC {
        return Err(IoError::BadMagic {
            expected: MAGIC.to_vec(),
            found: magic.to_vec(),
        });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(IoError::UnsupportedVersion(version));
    }
    let arch = r.str("arch")?;
    let seed = r.u64("seed")?;
    let n_metrics = r.u32("metric count")?;
    let mut metrics = Vec::new();
    for _ in 0..n_metrics {
        let k = r.str("metric key")?;
        let v = f64::from_le_bytes(r.take(8, "metric value")?.try_into().expect("8 bytes"));
        metrics.push((k, v));
    }
    let n_blobs = r.u32("blob count")?;
    let mut blobs = Vec::new();
    for _ in 0..n_blobs {
        let name = r.str("blob name")?;
        let code = r.take(1, "dtype")?[0];
        let dtype = DType::from_code(code).ok_or(IoError::UnknownDType(code))?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.len("dims")).collect::<Result<Vec<_>>>()?;
        let len = r.len("blob length")?;
        let expected = shape.iter().try_fold(dtype.size(), |acc, &d| acc.checked_mul(d));
        if expected != Some(len) {
            return Err(IoError::MalformedRecord(format!(
                "blob `{name}`: {len} bytes for shape {shape:?}"
            )));
        }
        let bytes = r.take(len, "blob data")?.to_vec();
        blobs.push(Blob {
            name,
            dtype,
            shape,
            bytes,
        });
    }
    if r.pos != bytes.len() {
        return Err(IoError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(Checkpoint {
        version,
        arch,
        seed,
        metrics,
        blobs,
    })
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_bytes(path, &encode(ck))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&read_bytes(path)?)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(IoError::io(path))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(IoError::io(dir))?;
    }
    fs::write(path, bytes).map_err(IoError::io(path))
}

pub fn dataset_to_checkpoint(ds: &LabeledDataset) -> Result<Checkpoint> {
    let [c, h, w] = ds.image_shape;
    let images = Tensor::new(&[ds.len(), c, h, w], ds.images.clone())?;
    let labels: Tensor<f32> = Tensor::new(&[ds.len()], ds.labels.iter().map(|&l| l as f32).collect())?;
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        arch: format!("{DATASET_TAG}{}", ds.split),
        seed: 0,
        metrics: vec![("classes".into(), ds.classes as f64)],
        blobs: vec![Blob::encode("images", &images), Blob::encode("labels", &labels)],
    })
}

pub fn dataset_from_checkpoint(ck: &Checkpoint) -> Result<LabeledDataset> {
    let split = ck
        .arch
        .strip_prefix(DATASET_TAG)
        .ok_or_else(|| IoError::MalformedRecord(format!("`{}` is not a dataset file", ck.arch)))?;
    let missing = |what: &str| IoError::MalformedRecord(format!("dataset file lacks `{what}`"));
    let classes = ck.metric("classes").ok_or_else(|| missing("classes"))? as usize;
    let images: Tensor<f32> = ck.blob("images").ok_or_else(|| missing("images"))?.decode()?;
    let labels: Tensor<f32> = ck.blob("labels").ok_or_else(|| missing("labels"))?.decode()?;
    let s = images.shape();
    if s.len() != 4 {
        return Err(IoError::MalformedRecord(format!("images must be N×C×H×W, got {s:?}")));
    }
    if labels.numel() != s[0] {
        return Err(IoError::CountMismatch {
            images: s[0],
            labels: labels.numel(),
        });
    }
    let labels = labels
        .data()
        .iter()
        .map(|&l| {
            if l >= 0.0 && l.fract() == 0.0 {
                Ok(l as usize)
            } else {
                Err(IoError::MalformedRecord(format!("label {l} is not a class index")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset::new(images.data().to_vec(), [s[1], s[2], s[3]], labels, classes, split)?)
}

pub fn save_dataset(path: &Path, ds: &LabeledDataset) -> Result<()> {
    save(path, &dataset_to_checkpoint(ds)?)
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    dataset_from_checkpoint(&load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dfpt_core::data::{gen_synth, SynthSpec};
    use dfpt_core::models::{ArchSpec, StagedModel};
    use dfpt_core::nn::Group;

    fn ckpt() -> Checkpoint {
        let spec = ArchSpec::named("tiny-resnet-S", 10).unwrap();
        let m: StagedModel<f32> = StagedModel::build(&spec, 3, "student", Group::Psi).unwrap();
        m.to_checkpoint(3, vec![("test_top1".into(), 0.5)])
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = ckpt();
        let bytes = encode(&ck);
        assert_eq!(&bytes[..4], b"DFPT");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(decode(&bytes).unwrap(), ck);
        assert_eq!(encode(&decode(&bytes).unwrap()), bytes);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let bytes = encode(&ckpt());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(IoError::BadMagic { .. })));
        assert!(matches!(decode(b"DF"), Err(IoError::BadMagic { .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(decode(&v2), Err(IoError::UnsupportedVersion(2))));
        for cut in [9, 30, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(IoError::Truncated { .. })), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(IoError::TrailingBytes(1))));
    }

    #[test]
    fn dataset_round_trip() {
        let (train, _) = gen_synth(&SynthSpec {
            per_class: 4,
            size: 8,
            ..Default::default()
        })
        .unwrap();
        let ck = dataset_to_checkpoint(&train).unwrap();
        let back = dataset_from_checkpoint(&decode(&encode(&ck)).unwrap()).unwrap();
        assert_eq!(back, train);
        assert!(dataset_from_checkpoint(&ckpt()).is_err());
    }
}
