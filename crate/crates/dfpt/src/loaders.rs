//! IDX and CIFAR binary readers.

use std::path::{Path, PathBuf};

use dfpt_core::data::LabeledDataset;

use crate::error::{IoError, Result};
use crate::format::read_bytes;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

const CIFAR_PIXELS: usize = 3 * 32 * 32;

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    let s = bytes.get(at..at + 4).ok_or(IoError::Truncated {
        what,
        needed: at + 4,
        available: bytes.len(),
    })?;
    Ok(u32::from_be_bytes(s.try_into().expect("4 bytes")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0, "idx magic").map_err(|_| IoError::BadMagic {
        expected: expected.to_be_bytes().to_vec(),
        found: bytes.to_vec(),
    })?;
    if found != expected {
        return Err(IoError::BadMagic {
            expected: expected.to_be_bytes().to_vec(),
            found: found.to_be_bytes().to_vec(),
        });
    }
    Ok(())
}

fn exact_payload<'a>(bytes: &'a [u8], header: usize, len: usize, what: &'static str) -> Result<&'a [u8]> {
    let available = bytes.len() - header;
    if available < len {
        return Err(IoError::Truncated {
            what,
            needed: len,
            available,
        });
    }
    if available > len {
        return Err(IoError::TrailingBytes(available - len));
    }
    Ok(&bytes[header..])
}

/// Unsigned-byte image file: `(count, height, width, pixels / 255)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let n = be_u32(bytes, 4, "idx header")? as usize;
    let h = be_u32(bytes, 8, "idx header")? as usize;
    let w = be_u32(bytes, 12, "idx header")? as usize;
    let len = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| IoError::MalformedRecord(format!("idx dims {n}×{h}×{w} overflow")))?;
    let payload = exact_payload(bytes, 16, len, "idx pixels")?;
    Ok((n, h, w, payload.iter().map(|&b| f32::from(b) / 255.0).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let n = be_u32(bytes, 4, "idx header")? as usize;
    let payload = exact_payload(bytes, 8, n, "idx labels")?;
    Ok(payload.iter().map(|&b| usize::from(b)).collect())
}

/// Pairs an IDX image file with its label file.
pub fn load_idx(images: &Path, labels: &Path, classes: usize, split: &str) -> Result<LabeledDataset> {
    let (n, h, w, pixels) = parse_idx_images(&read_bytes(images)?)?;
    let labels = parse_idx_labels(&read_bytes(labels)?)?;
    if labels.len() != n {
        return Err(IoError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    Ok(LabeledDataset::new(pixels, [1, h, w], labels, classes, split)?)
}

/// Row layout of a CIFAR binary file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarLayout {
    /// One label byte per record.
    Cifar10,
    /// Coarse then fine label byte; the fine label is kept.
    Cifar100,
}

impl CifarLayout {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarLayout::Cifar10 => 1,
            CifarLayout::Cifar100 => 2,
        }
    }

    pub fn classes(self) -> usize {
        match self {
            CifarLayout::Cifar10 => 10,
            CifarLayout::Cifar100 => 100,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    /// File names of one split, in reading order.
    pub fn files(self, train: bool) -> Vec<String> {
        match (self, train) {
            (CifarLayout::Cifar10, true) => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            (CifarLayout::Cifar10, false) => vec!["test_batch.bin".into()],
            (CifarLayout::Cifar100, true) => vec!["train.bin".into()],
            (CifarLayout::Cifar100, false) => vec!["test.bin".into()],
        }
    }
}

/// Appends the records of one file to `images` / `labels`.
pub fn parse_cifar(bytes: &[u8], layout: CifarLayout, images: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<usize> {
    let rec = layout.record_len();
    if !bytes.len().is_multiple_of(rec) {
        return Err(IoError::MalformedRecord(format!(
            "{} bytes is not a whole number of {rec}-byte records",
            bytes.len()
        )));
    }
    let count = bytes.len() / rec;
    images.reserve(count * CIFAR_PIXELS);
    for row in bytes.chunks_exact(rec) {
        let (head, pixels) = row.split_at(layout.label_bytes());
        let label = usize::from(head[head.len() - 1]);
        if label >= layout.classes() {
            return Err(IoError::MalformedRecord(format!(
                "label {label} exceeds {} classes",
                layout.classes()
            )));
        }
        labels.push(label);
        images.extend(pixels.iter().map(|&b| f32::from(b) / 255.0));
    }
    Ok(count)
}

/// Reads one split from a directory holding the standard binary batches.
pub fn load_cifar_binary(dir: &Path, layout: CifarLayout, train: bool) -> Result<LabeledDataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in layout.files(train) {
        let path: PathBuf = dir.join(name);
        parse_cifar(&read_bytes(&path)?, layout, &mut images, &mut labels)?;
    }
    let split = if train { "train" } else { "test" };
    Ok(LabeledDataset::new(images, [3, 32, 32], labels, layout.classes(), split)?)
}
