use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{init, relu, Conv2d, Ctx, Group, Init, Module, Param};
use crate::tensor::{Element, Var};

/// Shape of one prompt block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockShape {
    /// Channels `C` of the stage feature.
    pub channels: usize,
    /// Hidden width `D = ⌈C/r₁⌉`.
    pub hidden: usize,
    /// Convolved slice `⌊r₂·D⌋`.
    pub partial: usize,
    pub kernels: Vec<usize>,
}

impl BlockShape {
    pub fn new(channels: usize, r1: usize, r2: f64, kernels: &[usize]) -> Result<Self> {
        if r1 == 0 {
            return Err(Error::InvalidRatio(format!("r1 must be at least 1, got {r1}")));
        }
        if !(r2 > 0.0 && r2 <= 1.0) {
            return Err(Error::InvalidRatio(format!("r2 must lie in (0, 1], got {r2}")));
        }
        if kernels.is_empty() || kernels.iter().any(|&k| k % 2 == 0) {
            return Err(Error::InvalidConfig(format!("prompt kernels must be odd and nonempty, got {kernels:?}")));
        }
        let hidden = channels.div_ceil(r1);
        let partial = libm::floor(r2 * hidden as f64) as usize;
        if channels == 0 || partial == 0 {
            return Err(Error::TooFewChannels { channels, r1, r2 });
        }
        Ok(Self {
            channels,
            hidden,
            partial,
            kernels: kernels.to_vec(),
        })
    }

    /// `2·C·D + Σ k²·P² + n·D²` for `n` scale units.
    pub fn params(&self) -> usize {
        let (c, d, p) = (self.channels, self.hidden, self.partial);
        let spatial: usize = self.kernels.iter().map(|k| k * k * p * p).sum();
        2 * c * d + spatial + self.kernels.len() * d * d
    }

    /// Multiply-accumulates on an `h × w` feature.
    pub fn macs(&self, hw: usize) -> usize {
        hw * self.params()
    }
}

/// One scale unit: a partial conv followed by a point-wise conv.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleUnit<T> {
    pub partial: Conv2d<T>,
    pub pointwise: Conv2d<T>,
}

/// Down 1×1 → scale units → up 1×1. The up conv starts at zero so a fresh
/// block emits a zero prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBlock<T> {
    pub shape: BlockShape,
    pub down: Conv2d<T>,
    pub units: Vec<ScaleUnit<T>>,
    pub up: Conv2d<T>,
    /// ReLU after each point-wise conv.
    pub activation: bool,
}

impl<T: Element> PromptBlock<T> {
    pub fn new(name: &str, shape: BlockShape, activation: bool, rng: &mut impl Rng) -> Self {
        let (c, d, p) = (shape.channels, shape.hidden, shape.partial);
        let down = Conv2d::new(&format!("{name}.down"), Group::Phi, c, d, 1, 1, 0, false, rng);
        let units = shape
            .kernels
            .iter()
            .enumerate()
            .map(|(i, &k)| ScaleUnit {
                partial: Conv2d::new(&format!("{name}.unit{i}.partial"), Group::Phi, p, p, k, 1, k / 2, false, rng),
                pointwise: Conv2d::new(&format!("{name}.unit{i}.pointwise"), Group::Phi, d, d, 1, 1, 0, false, rng),
            })
            .collect();
        let mut up = Conv2d::new(&format!("{name}.up"), Group::Phi, d, c, 1, 1, 0, false, rng);
        // zeros never fails
        let _ = init(&mut up.weight.tensor, Init::Zeros, rng);
        Self {
            shape,
            down,
            units,
            up,
            activation,
        }
    }

    /// Convolves the first `P` channels and passes the rest through.
    pub fn partial_conv(&self, ctx: &mut Ctx<T>, conv: &Conv2d<T>, h: Var) -> Result<Var> {
        let (d, p) = (self.shape.hidden, self.shape.partial);
        if p == d {
            return conv.forward(ctx, h);
        }
        let head = ctx.tape.narrow(h, 1, 0, p)?;
        let rest = ctx.tape.narrow(h, 1, p, d - p)?;
        let head = conv.forward(ctx, head)?;
        ctx.tape.concat(&[head, rest], 1)
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let s = ctx.tape.shape(x);
        if s.len() != 4 || s[1] != self.shape.channels {
            return Err(Error::ChannelMismatch {
                expected: self.shape.channels,
                got: s.get(1).copied().unwrap_or(0),
            });
        }
        let mut h = self.down.forward(ctx, x)?;
        for unit in &self.units {
            h = self.partial_conv(ctx, &unit.partial, h)?;
            h = unit.pointwise.forward(ctx, h)?;
            if self.activation {
                h = relu(ctx, h);
            }
        }
        self.up.forward(ctx, h)
    }
}

impl<T: Element> Module<T> for PromptBlock<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.down.visit(f);
        for u in &self.units {
            u.partial.visit(f);
            u.pointwise.visit(f);
        }
        self.up.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.down.visit_mut(f);
        for u in &mut self.units {
            u.partial.visit_mut(f);
            u.pointwise.visit_mut(f);
        }
        self.up.visit_mut(f);
    }
}

/// `x̃ = F(x + prompt)` with `F` a chain of identity-initialized 1×1 convs.
/// With no convs `F` is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionBlock<T> {
    pub convs: Vec<Conv2d<T>>,
}

impl<T: Element> FusionBlock<T> {
    pub fn new(name: &str, channels: usize, count: usize, rng: &mut impl Rng) -> Self {
        let convs = (0..count)
            .map(|i| {
                let mut c = Conv2d::new(&format!("{name}.conv{i}"), Group::Phi, channels, channels, 1, 1, 0, false, rng);
                // square 1×1 by construction
                let _ = init(&mut c.weight.tensor, Init::Identity1x1, rng);
                c
            })
            .collect();
        Self { convs }
    }

    pub fn params(channels: usize, count: usize) -> usize {
        count * channels * channels
    }

    pub fn fuse(&self, ctx: &mut Ctx<T>, x: Var, prompt: Var) -> Result<Var> {
        if ctx.tape.shape(x) != ctx.tape.shape(prompt) {
            return Err(Error::ShapeMismatch {
                op: "fuse",
                lhs: ctx.tape.shape(x).to_vec(),
                rhs: ctx.tape.shape(prompt).to_vec(),
            });
        }
        let mut h = ctx.tape.add(x, prompt)?;
        for c in &self.convs {
            h = c.forward(ctx, h)?;
        }
        Ok(h)
    }
}

impl<T: Element> Module<T> for FusionBlock<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.convs.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.convs.visit_mut(f)
    }
}
