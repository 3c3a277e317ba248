//! Labeled image sets, the synthetic generator and deterministic batching.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Images `count × C × H × W` in `[0, 1]` with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<f32>,
    /// `[C, H, W]`
    pub image_shape: [usize; 3],
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: String,
}

impl LabeledDataset {
    pub fn new(images: Vec<f32>, image_shape: [usize; 3], labels: Vec<usize>, classes: usize, split: &str) -> Result<Self> {
        let ds = Self {
            images,
            image_shape,
            labels,
            classes,
            split: split.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.len() * self.image_len() {
            return Err(Error::DatasetMismatch(alloc::format!(
                "{} pixel values for {} images of shape {:?}",
                self.images.len(),
                self.len(),
                self.image_shape
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: self.classes,
            });
        }
        if self.images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::DatasetMismatch("pixel value outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Stacks the listed samples into an `N × C × H × W` tensor.
    pub fn gather<T: Element>(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend(self.image(i).iter().map(|&v| T::of(v as f64)));
        }
        let [c, h, w] = self.image_shape;
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        // length is idx.len()·n by construction
        let t = Tensor::new(&[idx.len().max(1), c, h, w], data).unwrap_or_else(|_| Tensor::zeros(&[1, c, h, w]));
        (t, labels)
    }

    /// The whole set as a tensor.
    pub fn all<T: Element>(&self) -> (Tensor<T>, Vec<usize>) {
        let idx: Vec<usize> = (0..self.len()).collect();
        self.gather(&idx)
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for sub-stream `k`.
pub fn fold_seed(seed: u64, k: u64) -> u64 {
    mix64(seed ^ mix64(k.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub channels: usize,
    /// Scales noise, translation jitter and cross-class mixing.
    pub difficulty: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 250,
            size: 16,
            channels: 3,
            difficulty: 1.0,
            seed: 7,
        }
    }
}

const WAVES: usize = 4;

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.difficulty > 0.0) || !self.difficulty.is_finite() {
            return Err(Error::InvalidConfig(alloc::format!("difficulty must be positive, got {}", self.difficulty)));
        }
        if self.classes < 2 || self.per_class < 2 || self.size == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig("synthetic set needs ≥ 2 classes, ≥ 2 samples per class and nonzero extents".into()));
        }
        Ok(())
    }

    /// Smooth template of class `k`: a sum of low-frequency plane waves per
    /// channel, rescaled to `[0, 1]`. Depends only on the seed and `k`.
    pub fn template(&self, k: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(fold_seed(self.seed, k as u64));
        let s = self.size;
        let mut out = Vec::with_capacity(self.channels * s * s);
        for _ in 0..self.channels {
            let waves: Vec<(f64, f64, f64, f64)> = (0..WAVES)
                .map(|_| {
                    let fx = rng.gen_range(0..=3) as f64;
                    let fy = rng.gen_range(if fx == 0.0 { 1 } else { 0 }..=3) as f64;
                    let phase = rng.gen_range(0.0..core::f64::consts::TAU);
                    let amp = rng.gen_range(0.5..1.0);
                    (fx, fy, phase, amp)
                })
                .collect();
            let mut plane: Vec<f64> = (0..s * s)
                .map(|i| {
                    let (y, x) = ((i / s) as f64 / s as f64, (i % s) as f64 / s as f64);
                    waves
                        .iter()
                        .map(|&(fx, fy, ph, a)| a * libm::sin(core::f64::consts::TAU * (fx * x + fy * y) + ph))
                        .sum()
                })
                .collect();
            let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            plane.iter_mut().for_each(|v| *v = (*v - lo) / span);
            out.extend(plane.into_iter().map(|v| v as f32));
        }
        out
    }

    fn sample(&self, templates: &[Vec<f32>], k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        let s = self.size as isize;
        let d = self.difficulty;
        let max_shift = libm::floor(d * self.size as f64 / 8.0) as isize;
        let mut shift = || if max_shift > 0 { rng.gen_range(-max_shift..=max_shift) } else { 0 };
        let (dy, dx) = (shift(), shift());
        let other = (k + rng.gen_range(1..self.classes)) % self.classes;
        let mix = rng.gen_range(0.0..=0.4 * d.min(1.0));
        let std = 0.25 * d;
        let (t, o) = (&templates[k], &templates[other]);
        let mut out = Vec::with_capacity(t.len());
        for c in 0..self.channels as isize {
            for y in 0..s {
                for x in 0..s {
                    let src = ((c * s + (y - dy).rem_euclid(s)) * s + (x - dx).rem_euclid(s)) as usize;
                    let z: f64 = StandardNormal.sample(rng);
                    let v = (1.0 - mix) * t[src] as f64 + mix * o[src] as f64 + std * z;
                    out.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        out
    }
}

/// Template-plus-noise classes, split 80/20 per class into train and test.
pub fn gen_synth(spec: &SynthSpec) -> Result<(LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let templates: Vec<Vec<f32>> = (0..spec.classes).map(|k| spec.template(k)).collect();
    let shape = [spec.channels, spec.size, spec.size];
    let n_train = spec.per_class * 4 / 5;
    let (mut tr_x, mut tr_y, mut te_x, mut te_y) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed(spec.seed, u64::MAX));
    for i in 0..spec.per_class {
        for k in 0..spec.classes {
            let img = spec.sample(&templates, k, &mut rng);
            if i < n_train {
                tr_x.extend(img);
                tr_y.push(k);
            } else {
                te_x.extend(img);
                te_y.push(k);
            }
        }
    }
    Ok((
        LabeledDataset::new(tr_x, shape, tr_y, spec.classes, "train")?,
        LabeledDataset::new(te_x, shape, te_y, spec.classes, "test")?,
    ))
}

/// One mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Seeded per-epoch sample order.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(fold_seed(seed, epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Deterministic batch sequence for one epoch; the last partial batch is
/// kept. Augmentation is a random crop from a 4-pixel zero pad plus a
/// horizontal flip.
pub struct Batches<'a> {
    ds: &'a LabeledDataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    augment: Option<ChaCha8Rng>,
}

pub const CROP_PAD: usize = 4;

pub fn batches(ds: &LabeledDataset, batch_size: usize, seed: u64, epoch: usize, augment: bool) -> Result<Batches<'_>> {
    if batch_size == 0 || batch_size > ds.len() {
        return Err(Error::InvalidConfig(alloc::format!(
            "batch size {batch_size} must lie in 1..={}",
            ds.len()
        )));
    }
    Ok(Batches {
        ds,
        order: epoch_order(ds.len(), seed, epoch),
        pos: 0,
        batch_size,
        augment: augment.then(|| ChaCha8Rng::seed_from_u64(fold_seed(seed ^ 0xA5A5_A5A5, epoch as u64))),
    })
}

impl Batches<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn next_batch<T: Element>(&mut self) -> Option<Batch<T>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        let (mut images, labels) = self.ds.gather::<T>(&idx);
        if let Some(rng) = self.augment.as_mut() {
            let [c, h, w] = self.ds.image_shape;
            for chunk in images.data_mut().chunks_exact_mut(c * h * w) {
                let oy = rng.gen_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
                let ox = rng.gen_range(0..=2 * CROP_PAD) as isize - CROP_PAD as isize;
                let flip = rng.gen_bool(0.5);
                crop_flip(chunk, c, h, w, oy, ox, flip);
            }
        }
        Some(Batch {
            images,
            labels,
            indices: idx,
        })
    }
}

/// Shifts the image by `(oy, ox)` with zero fill, then optionally mirrors it.
pub fn crop_flip<T: Element>(img: &mut [T], c: usize, h: usize, w: usize, oy: isize, ox: isize, flip: bool) {
    let src = img.to_vec();
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { w - 1 - x } else { x } as isize + ox;
                let sy = y as isize + oy;
                let v = if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                    src[(ch * h + sy as usize) * w + sx as usize]
                } else {
                    T::zero()
                };
                img[(ch * h + y) * w + x] = v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(difficulty: f64) -> SynthSpec {
        SynthSpec {
            classes: 4,
            per_class: 10,
            size: 8,
            channels: 2,
            difficulty,
            seed: 3,
        }
    }

    #[test]
    fn generation_is_deterministic_and_split_80_20() {
        let (a, b) = gen_synth(&small(1.0)).unwrap();
        let (c, d) = gen_synth(&small(1.0)).unwrap();
        assert_eq!(a, c);
        assert_eq!(b, d);
        assert_eq!((a.len(), b.len()), (32, 8));
        assert!(a.images.iter().all(|v| (0.0..=1.0).contains(v)));
        let mut other = small(1.0);
        other.seed = 4;
        assert_ne!(gen_synth(&other).unwrap().0, a);
    }

    #[test]
    fn classes_have_distinct_templates() {
        let s = small(1.0);
        assert_ne!(s.template(0), s.template(1));
        assert_eq!(s.template(2), s.template(2));
    }

    #[test]
    fn nearest_template_is_perfect_in_the_easy_limit() {
        let s = small(1e-9);
        let (_, test) = gen_synth(&s).unwrap();
        let templates: Vec<Vec<f32>> = (0..s.classes).map(|k| s.template(k)).collect();
        for i in 0..test.len() {
            let img = test.image(i);
            let best = (0..s.classes)
                .min_by(|&a, &b| {
                    let da: f32 = img.iter().zip(&templates[a]).map(|(x, y)| (x - y) * (x - y)).sum();
                    let db: f32 = img.iter().zip(&templates[b]).map(|(x, y)| (x - y) * (x - y)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(best, test.labels[i]);
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(gen_synth(&small(0.0)).is_err());
        assert!(gen_synth(&small(f64::NAN)).is_err());
    }

    #[test]
    fn batches_cover_epoch_and_vary_by_epoch() {
        let (train, _) = gen_synth(&small(1.0)).unwrap();
        let mut it = batches(&train, 5, 11, 0, false).unwrap();
        let mut seen = Vec::new();
        let mut sizes = Vec::new();
        while let Some(b) = it.next_batch::<f32>() {
            sizes.push(b.labels.len());
            seen.extend(b.indices);
        }
        assert_eq!(sizes.iter().sum::<usize>(), train.len());
        assert_eq!(*sizes.last().unwrap(), 2);
        seen.sort();
        assert_eq!(seen, (0..train.len()).collect::<Vec<_>>());
        assert_eq!(epoch_order(32, 11, 0), epoch_order(32, 11, 0));
        assert_ne!(epoch_order(32, 11, 0), epoch_order(32, 11, 1));
        assert!(batches(&train, 0, 0, 0, false).is_err());
        assert!(batches(&train, 33, 0, 0, false).is_err());
    }

    #[test]
    fn augmentation_preserves_labels_and_range() {
        let (train, _) = gen_synth(&small(1.0)).unwrap();
        let mut a = batches(&train, 8, 1, 0, true).unwrap();
        let mut b = batches(&train, 8, 1, 0, true).unwrap();
        while let (Some(x), Some(y)) = (a.next_batch::<f32>(), b.next_batch::<f32>()) {
            assert_eq!(x, y);
            let want: Vec<usize> = x.indices.iter().map(|&i| train.labels[i]).collect();
            assert_eq!(x.labels, want);
            assert!(x.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn crop_flip_by_hand() {
        let mut img = [1.0f32, 2.0, 3.0, 4.0];
        crop_flip(&mut img, 1, 2, 2, 0, 0, true);
        assert_eq!(img, [2.0, 1.0, 4.0, 3.0]);
        let mut img = [1.0f32, 2.0, 3.0, 4.0];
        crop_flip(&mut img, 1, 2, 2, 1, 0, false);
        assert_eq!(img, [3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn label_out_of_range_rejected() {
        assert!(LabeledDataset::new(alloc::vec![0.0; 4], [1, 2, 2], alloc::vec![3], 3, "x").is_err());
        assert!(LabeledDataset::new(alloc::vec![0.0; 3], [1, 2, 2], alloc::vec![0], 3, "x").is_err());
    }
}
