use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{GradMap, Group, Kind, Module};
use crate::tensor::Element;

/// Momentum SGD with weight decay folded into the gradient:
/// `v ← μv + g + wd·p`, `p ← p − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
    pub steps: u64,
    /// Rescales the gradients of a step so their joint L2 norm is at most this.
    pub clip_norm: Option<f64>,
    pub buffers: BTreeMap<String, Vec<T>>,
}

impl<T: Element> SgdState<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            lr,
            steps: 0,
            clip_norm: None,
            buffers: BTreeMap::new(),
        }
    }

    /// Updates every weight of `module` that has a gradient in `grads`.
    /// `scale` multiplies the learning rate per group.
    pub fn step(&mut self, module: &mut impl Module<T>, grads: &GradMap<T>, scale: impl Fn(Group) -> f64) -> Result<()> {
        let mut err = None;
        let mut clip = T::one();
        if let Some(max) = self.clip_norm {
            let mut sq = 0.0;
            module.visit(&mut |p| {
                if let (Kind::Weight, Some(g)) = (p.kind, grads.get(&p.name)) {
                    sq += g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
                }
            });
            let norm = libm::sqrt(sq);
            if norm > max {
                clip = T::of(max / norm);
            }
        }
        let (mu, wd) = (T::of(self.momentum), T::of(self.weight_decay));
        module.visit_mut(&mut |p| {
            if err.is_some() || p.kind != Kind::Weight {
                return;
            }
            let Some(g) = grads.get(&p.name) else { return };
            if g.shape() != p.tensor.shape() {
                err = Some(Error::ShapeMismatch {
                    op: "sgd_step",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
                return;
            }
            let lr = T::of(self.lr * scale(p.group));
            let v = self
                .buffers
                .entry(p.name.clone())
                .or_insert_with(|| alloc::vec![T::zero(); g.numel()]);
            for ((w, vi), &gi) in p.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = mu * *vi + clip * gi + wd * *w;
                *w = *w - lr * *vi;
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        self.steps += 1;
        Ok(())
    }
}

/// `base · factor^(milestones passed)`; a milestone `m` has passed once
/// `epoch ≥ m`.
pub fn lr_at(base: f64, milestones: &[usize], factor: f64, epoch: usize) -> f64 {
    let passed = milestones.iter().filter(|&&m| epoch >= m).count();
    base * libm::pow(factor, passed as f64)
}
