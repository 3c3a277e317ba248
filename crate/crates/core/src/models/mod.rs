//! Staged CNN backbones: a stack of stages `A_1..A_N` followed by a head
//! (global average pool + linear). The stem always counts as stage 1.

mod checkpoint;
mod zoo;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Blob, Checkpoint, CHECKPOINT_VERSION};
pub use zoo::{ArchSpec, BlockKind, StageSpec, ZOO};

use crate::error::{Error, Result};
use crate::nn::{global_avg_pool, relu, BatchNorm2d, Conv2d, Ctx, Group, Linear, Module, Param};
use crate::tensor::{Element, Tensor, Var};

/// Conv → BN → ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnRelu<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Element> ConvBnRelu<T> {
    fn new(name: &str, group: Group, in_c: usize, out_c: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(&format!("{name}.conv"), group, in_c, out_c, 3, stride, 1, false, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), group, out_c),
        }
    }

    fn forward(&self, ctx: &mut Ctx<T>, x: Var, training: bool) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y, training)?;
        Ok(relu(ctx, y))
    }
}

impl<T: Element> Module<T> for ConvBnRelu<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }
}

/// Two 3×3 convs with a residual connection; a 1×1 projection shortcut is
/// used when the shape changes.
#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub shortcut: Option<(Conv2d<T>, BatchNorm2d<T>)>,
}

impl<T: Element> BasicBlock<T> {
    fn new(name: &str, group: Group, in_c: usize, out_c: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = Conv2d::new(&format!("{name}.conv1"), group, in_c, out_c, 3, stride, 1, false, rng);
        let conv2 = Conv2d::new(&format!("{name}.conv2"), group, out_c, out_c, 3, 1, 1, false, rng);
        let shortcut = (stride != 1 || in_c != out_c).then(|| {
            (
                Conv2d::new(&format!("{name}.down.conv"), group, in_c, out_c, 1, stride, 0, false, rng),
                BatchNorm2d::new(&format!("{name}.down.bn"), group, out_c),
            )
        });
        Self {
            conv1,
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), group, out_c),
            conv2,
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), group, out_c),
            shortcut,
        }
    }

    fn forward(&self, ctx: &mut Ctx<T>, x: Var, training: bool) -> Result<Var> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.bn1.forward(ctx, y, training)?;
        let y = relu(ctx, y);
        let y = self.conv2.forward(ctx, y)?;
        let y = self.bn2.forward(ctx, y, training)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s, training)?
            }
            None => x,
        };
        let sum = ctx.tape.add(y, skip)?;
        Ok(relu(ctx, sum))
    }
}

impl<T: Element> Module<T> for BasicBlock<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        if let Some((c, b)) = &self.shortcut {
            c.visit(f);
            b.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
        if let Some((c, b)) = &mut self.shortcut {
            c.visit_mut(f);
            b.visit_mut(f);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Plain(ConvBnRelu<T>),
    Basic(BasicBlock<T>),
}

impl<T: Element> Module<T> for Layer<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match self {
            Layer::Plain(l) => l.visit(f),
            Layer::Basic(b) => b.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Layer::Plain(l) => l.visit_mut(f),
            Layer::Basic(b) => b.visit_mut(f),
        }
    }
}

/// One backbone stage `A_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage<T> {
    pub layers: Vec<Layer<T>>,
    pub out_channels: usize,
}

impl<T: Element> Stage<T> {
    /// Batch norms use batch statistics only when `training`.
    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var, training: bool) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Plain(l) => l.forward(ctx, h, training)?,
                Layer::Basic(b) => b.forward(ctx, h, training)?,
            };
        }
        Ok(h)
    }
}

impl<T: Element> Module<T> for Stage<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.layers.visit(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.visit_mut(f)
    }
}

/// `T = H ∘ B` with `B = {A_1..A_N}`.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedModel<T> {
    pub arch: ArchSpec,
    /// Name prefix shared by every parameter, e.g. `teacher`.
    pub prefix: String,
    pub group: Group,
    pub stages: Vec<Stage<T>>,
    pub head: Linear<T>,
}

/// Stage outputs `x_1..x_N` and logits.
#[derive(Debug, Clone)]
pub struct StagedOutput {
    pub stages: Vec<Var>,
    pub logits: Var,
}

impl<T: Element> StagedModel<T> {
    /// Deterministic construction and initialization from `seed`.
    pub fn build(spec: &ArchSpec, seed: u64, prefix: &str, group: Group) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::with_capacity(spec.num_stages());
        let stem = ConvBnRelu::new(&format!("{prefix}.stage1.stem"), group, spec.in_channels, spec.stem, 1, &mut rng);
        stages.push(Stage {
            layers: alloc::vec![Layer::Plain(stem)],
            out_channels: spec.stem,
        });
        let mut in_c = spec.stem;
        for (i, st) in spec.stages.iter().enumerate() {
            let mut layers = Vec::with_capacity(st.blocks);
            for b in 0..st.blocks {
                let name = format!("{prefix}.stage{}.block{b}", i + 2);
                let stride = if b == 0 { st.stride } else { 1 };
                let cin = if b == 0 { in_c } else { st.width };
                layers.push(match spec.block {
                    BlockKind::Basic => Layer::Basic(BasicBlock::new(&name, group, cin, st.width, stride, &mut rng)),
                    BlockKind::Plain => Layer::Plain(ConvBnRelu::new(&name, group, cin, st.width, stride, &mut rng)),
                });
            }
            stages.push(Stage {
                layers,
                out_channels: st.width,
            });
            in_c = st.width;
        }
        let head = Linear::new(&format!("{prefix}.head"), group, in_c, spec.classes, &mut rng);
        Ok(Self {
            arch: spec.clone(),
            prefix: prefix.into(),
            group,
            stages,
            head,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.out_channels).collect()
    }

    fn check_input(&self, ctx: &Ctx<T>, x: Var) -> Result<()> {
        let s = ctx.tape.shape(x);
        if s.len() != 4 || s[1] != self.arch.in_channels {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: s.to_vec(),
                rhs: alloc::vec![0, self.arch.in_channels, 0, 0],
            });
        }
        Ok(())
    }

    /// `H`: global pool then linear.
    pub fn head_forward(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let pooled = global_avg_pool(ctx, x)?;
        self.head.forward(ctx, pooled)
    }

    /// `x_i = A_i(x_{i−1})`, `z = H(x_N)`.
    pub fn forward_staged(&self, ctx: &mut Ctx<T>, x: Var, training: bool) -> Result<StagedOutput> {
        self.check_input(ctx, x)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for stage in &self.stages {
            h = stage.forward(ctx, h, training)?;
            outs.push(h);
        }
        let logits = self.head_forward(ctx, h)?;
        Ok(StagedOutput { stages: outs, logits })
    }

    /// Plain forward to logits.
    pub fn forward(&self, ctx: &mut Ctx<T>, x: Var, training: bool) -> Result<Var> {
        self.check_input(ctx, x)?;
        let mut h = x;
        for stage in &self.stages {
            h = stage.forward(ctx, h, training)?;
        }
        self.head_forward(ctx, h)
    }

    /// Eval-mode logits for a batch, without gradient tracking.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut ctx = Ctx::no_grad(false);
        let xv = ctx.input(x.clone());
        let z = self.forward(&mut ctx, xv, false)?;
        Ok(ctx.value(z).clone())
    }

    pub fn find(&self, name: &str) -> Option<&Param<T>> {
        self.params().into_iter().find(|p| p.name == name)
    }
}

impl<T: Element> Module<T> for StagedModel<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.stages.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stages.visit_mut(f);
        self.head.visit_mut(f);
    }
}
