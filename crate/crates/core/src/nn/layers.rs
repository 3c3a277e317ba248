use alloc::format;
use alloc::string::String;

use rand::Rng;

use super::init::{init, Init};
use super::{Ctx, Group, Module, Param};
use crate::error::{Error, Result};
use crate::tensor::{Element, Reduce, Tensor, Var};

/// Square-kernel 2-D convolution (cross-correlation, zero padding).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    /// `out_c × in_c × k × k`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Element> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        group: Group,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut w = Tensor::zeros(&[out_c, in_c, k, k]);
        // kaiming on a well-formed conv shape cannot fail
        let _ = init(&mut w, Init::KaimingNormal, rng);
        Self {
            weight: Param::weight(format!("{name}.weight"), group, w),
            bias: bias.then(|| Param::weight(format!("{name}.bias"), group, Tensor::zeros(&[out_c]))),
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.tensor.shape()[2]
    }

    /// `out_c·in_c·k²`, plus `out_c` with a bias.
    pub fn param_formula(in_c: usize, out_c: usize, k: usize, bias: bool) -> usize {
        out_c * in_c * k * k + if bias { out_c } else { 0 }
    }

    /// `⌊(in + 2·pad − k)/stride⌋ + 1`, `None` when degenerate.
    pub fn out_extent(&self, input: usize) -> Option<usize> {
        let span = input + 2 * self.pad;
        (span >= self.kernel()).then(|| (span - self.kernel()) / self.stride + 1)
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight);
        let b = self.bias.as_ref().map(|b| ctx.param(b));
        ctx.tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

impl<T: Element> Module<T> for Conv2d<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        self.bias.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        self.bias.visit_mut(f);
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(name: &str, group: Group, channels: usize) -> Self {
        Self {
            weight: Param::weight(format!("{name}.weight"), group, Tensor::ones(&[channels])),
            bias: Param::weight(format!("{name}.bias"), group, Tensor::zeros(&[channels])),
            running_mean: Param::buffer(format!("{name}.running_mean"), group, Tensor::zeros(&[channels])),
            running_var: Param::buffer(format!("{name}.running_var"), group, Tensor::ones(&[channels])),
            momentum: T::of(0.1),
            eps: T::of(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.numel()
    }

    /// Train mode normalizes by batch statistics and records them in `ctx`
    /// for [`Ctx::commit_running_stats`]; eval mode uses running statistics.
    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var, training: bool) -> Result<Var> {
        let gamma = ctx.param(&self.weight);
        let beta = ctx.param(&self.bias);
        if training {
            let (y, stats) = ctx.tape.batch_norm(x, gamma, beta, None, self.eps)?;
            if let Some(stats) = stats {
                let (m, v) = (self.running_mean.name.clone(), self.running_var.name.clone());
                ctx.record_stats(&m, &v, self.momentum, stats);
            }
            Ok(y)
        } else {
            let running = (self.running_mean.tensor.data(), self.running_var.tensor.data());
            let (y, _) = ctx.tape.batch_norm(x, gamma, beta, Some(running), self.eps)?;
            Ok(y)
        }
    }
}

impl<T: Element> Module<T> for BatchNorm2d<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
        f(&self.running_mean);
        f(&self.running_var);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
}

/// Affine map `y = x·Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Element> Linear<T> {
    pub fn new(name: &str, group: Group, in_f: usize, out_f: usize, rng: &mut impl Rng) -> Self {
        let mut w = Tensor::zeros(&[out_f, in_f]);
        let _ = init(&mut w, Init::KaimingNormal, rng);
        Self {
            weight: Param::weight(format!("{name}.weight"), group, w),
            bias: Param::weight(format!("{name}.bias"), group, Tensor::zeros(&[out_f])),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.in_features() {
            return Err(Error::ShapeMismatch {
                op: "linear",
                lhs: shape.to_vec(),
                rhs: self.weight.tensor.shape().to_vec(),
            });
        }
        let w = ctx.param(&self.weight);
        let b = ctx.param(&self.bias);
        let y = ctx.tape.matmul_bt(x, w)?;
        ctx.tape.add(y, b)
    }

    /// Renames every parameter, replacing the `from` prefix with `to`.
    pub fn renamed(&self, from: &str, to: &str, group: Group) -> Self {
        let rename = |p: &Param<T>| -> Param<T> {
            let name: String = match p.name.strip_prefix(from) {
                Some(rest) => format!("{to}{rest}"),
                None => p.name.clone(),
            };
            Param {
                name,
                group,
                kind: p.kind,
                tensor: p.tensor.clone(),
            }
        };
        Self {
            weight: rename(&self.weight),
            bias: rename(&self.bias),
        }
    }
}

impl<T: Element> Module<T> for Linear<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

pub fn relu<T: Element>(ctx: &mut Ctx<T>, x: Var) -> Var {
    ctx.tape.relu(x)
}

/// Spatial mean per channel: `(N, C, H, W) → (N, C)`.
pub fn global_avg_pool<T: Element>(ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
    if ctx.tape.shape(x).len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "global_avg_pool",
            lhs: ctx.tape.shape(x).to_vec(),
            rhs: alloc::vec![],
        });
    }
    ctx.tape.reduce(x, &[2, 3], Reduce::Mean, false)
}
