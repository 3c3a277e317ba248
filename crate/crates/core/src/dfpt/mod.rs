//! Dual-forward path teacher: a frozen staged teacher with a second,
//! prompt-based forward path through the same stages.

mod prompt;

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use prompt::{BlockShape, FusionBlock, PromptBlock, ScaleUnit};

use crate::error::{Error, Result};
use crate::losses::{soften, SoftPrediction};
use crate::models::{StagedModel, StagedOutput};
use crate::nn::{Ctx, Group, Linear, Module, Param};
use crate::tensor::{Element, Tensor, Var};

/// Name prefix of every prompt-path parameter.
pub const PROMPT_PREFIX: &str = "prompt";

/// How gradients of prompt-path losses reach φ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientFlow {
    /// Back-propagate through the frozen stages.
    #[default]
    ThroughFrozen,
    /// Stop the gradient at every frozen stage output.
    DetachedBase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptConfig {
    /// Down-sampling rate per stage.
    pub r1: Vec<usize>,
    pub r2: f64,
    pub kernels: Vec<usize>,
    /// Prompt/fusion pairs after each stage; zero leaves the stage untouched.
    pub blocks: Vec<usize>,
    /// 1×1 convs per fusion block; zero turns fusion into a plain sum.
    pub fusion_convs: usize,
    /// Random head instead of a copy of the teacher head.
    pub fresh_head: bool,
    /// ReLU after each point-wise conv.
    pub activation: bool,
}

impl PromptConfig {
    /// One block per stage, `r₁ = 4`, `r₂ = 0.5`, kernels 3/5/7.
    pub fn for_stages(n: usize) -> Self {
        Self {
            r1: alloc::vec![4; n],
            r2: 0.5,
            kernels: alloc::vec![3, 5, 7],
            blocks: alloc::vec![1; n],
            fusion_convs: 1,
            fresh_head: false,
            activation: false,
        }
    }

    pub fn validate(&self, channels: &[usize]) -> Result<()> {
        let n = channels.len();
        if self.r1.len() != n || self.blocks.len() != n {
            return Err(Error::InvalidConfig(format!(
                "prompt config lists {} r1 entries and {} block counts for {n} stages",
                self.r1.len(),
                self.blocks.len()
            )));
        }
        for (&c, &r1) in channels.iter().zip(&self.r1) {
            BlockShape::new(c, r1, self.r2, &self.kernels)?;
        }
        Ok(())
    }

    /// Prompt-block and fusion-block parameter totals for stage widths
    /// `channels`.
    pub fn analytic_params(&self, channels: &[usize]) -> Result<(usize, usize)> {
        self.validate(channels)?;
        let mut prompts = 0;
        let mut fusion = 0;
        for ((&c, &r1), &b) in channels.iter().zip(&self.r1).zip(&self.blocks) {
            prompts += b * BlockShape::new(c, r1, self.r2, &self.kernels)?.params();
            fusion += b * FusionBlock::<f32>::params(c, self.fusion_convs);
        }
        Ok((prompts, fusion))
    }

    /// Prompt-block and fusion-block MAC totals; `spatial[i]` is the
    /// `h·w` of stage `i`'s output.
    pub fn analytic_macs(&self, channels: &[usize], spatial: &[usize]) -> Result<(usize, usize)> {
        self.validate(channels)?;
        let mut prompts = 0;
        let mut fusion = 0;
        for (i, (&c, &r1)) in channels.iter().zip(&self.r1).enumerate() {
            let b = self.blocks[i];
            prompts += b * BlockShape::new(c, r1, self.r2, &self.kernels)?.macs(spatial[i]);
            fusion += b * spatial[i] * FusionBlock::<f32>::params(c, self.fusion_convs);
        }
        Ok((prompts, fusion))
    }
}

/// The prompt/fusion pairs attached after one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePrompts<T> {
    pub pairs: Vec<(PromptBlock<T>, FusionBlock<T>)>,
}

impl<T: Element> Module<T> for StagePrompts<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for (p, fu) in &self.pairs {
            p.visit(f);
            fu.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for (p, fu) in &mut self.pairs {
            p.visit_mut(f);
            fu.visit_mut(f);
        }
    }
}

/// Prompt-path tape handles.
#[derive(Debug, Clone)]
pub struct PromptOutput {
    /// `x_i` before prompting.
    pub stages: Vec<Var>,
    /// `x̃_i`.
    pub fused: Vec<Var>,
    pub logits: Var,
}

/// Values of both paths for one batch.
#[derive(Debug, Clone)]
pub struct DualOutput<T> {
    pub logits_t: Tensor<T>,
    pub logits_p: Tensor<T>,
    pub p_t: Vec<SoftPrediction>,
    pub p_p: Vec<SoftPrediction>,
    pub features_t: Vec<Tensor<T>>,
    /// `x̃_i` on the prompt path.
    pub features_p: Vec<Tensor<T>>,
}

/// `θ` (teacher stages and head) plus `φ` (prompts, fusions, `H^φ`).
#[derive(Debug, Clone, PartialEq)]
pub struct DualForwardTeacher<T> {
    pub teacher: StagedModel<T>,
    pub prompts: Vec<StagePrompts<T>>,
    pub head: Linear<T>,
    pub config: PromptConfig,
}

impl<T: Element> DualForwardTeacher<T> {
    /// Wraps `teacher`, which is frozen; φ is initialized from `seed`.
    pub fn new(mut teacher: StagedModel<T>, config: PromptConfig, seed: u64) -> Result<Self> {
        if teacher.prefix == PROMPT_PREFIX {
            return Err(Error::InvalidConfig(format!("teacher prefix `{PROMPT_PREFIX}` is reserved")));
        }
        let channels = teacher.stage_channels();
        config.validate(&channels)?;
        teacher.visit_mut(&mut |p| p.group = Group::Theta);
        teacher.set_trainable(false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prompts = Vec::with_capacity(channels.len());
        for (i, &c) in channels.iter().enumerate() {
            let shape = BlockShape::new(c, config.r1[i], config.r2, &config.kernels)?;
            let pairs = (0..config.blocks[i])
                .map(|b| {
                    let name = format!("{PROMPT_PREFIX}.stage{}.p{b}", i + 1);
                    let block = PromptBlock::new(&name, shape.clone(), config.activation, &mut rng);
                    let fname = format!("{PROMPT_PREFIX}.stage{}.f{b}", i + 1);
                    (block, FusionBlock::new(&fname, c, config.fusion_convs, &mut rng))
                })
                .collect();
            prompts.push(StagePrompts { pairs });
        }
        let from = format!("{}.", teacher.prefix);
        let to = format!("{PROMPT_PREFIX}.");
        let head = if config.fresh_head {
            Linear::new(
                &format!("{PROMPT_PREFIX}.head"),
                Group::Phi,
                teacher.head.in_features(),
                teacher.head.out_features(),
                &mut rng,
            )
        } else {
            teacher.head.renamed(&from, &to, Group::Phi)
        };
        let mut head = head;
        head.set_trainable(true);
        Ok(Self {
            teacher,
            prompts,
            head,
            config,
        })
    }

    /// θ trainable (the fine-tuning variant) or frozen.
    pub fn set_teacher_trainable(&mut self, on: bool) {
        self.teacher.set_trainable(on);
    }

    pub fn num_stages(&self) -> usize {
        self.teacher.num_stages()
    }

    /// Original path: `x_i = A_i(x_{i−1})`, `z = H^θ(x_N)`, BN in eval mode.
    pub fn forward_original(&self, ctx: &mut Ctx<T>, x: Var) -> Result<StagedOutput> {
        self.teacher.forward_staged(ctx, x, false)
    }

    /// Prompt path: `x̃_i = F_i(x_i + P_i(x_i))`, `x_{i+1} = A_{i+1}(x̃_i)`,
    /// `z = H^φ(x̃_N)`.
    pub fn forward_prompt(&self, ctx: &mut Ctx<T>, x: Var, flow: GradientFlow) -> Result<PromptOutput> {
        let n = self.num_stages();
        let mut stages = Vec::with_capacity(n);
        let mut fused = Vec::with_capacity(n);
        let mut h = x;
        for (stage, prompts) in self.teacher.stages.iter().zip(&self.prompts) {
            let mut xi = stage.forward(ctx, h, false)?;
            if flow == GradientFlow::DetachedBase {
                xi = ctx.tape.detach(xi);
            }
            stages.push(xi);
            let mut xt = xi;
            for (block, fusion) in &prompts.pairs {
                let p = block.forward(ctx, xt)?;
                xt = fusion.fuse(ctx, xt, p)?;
            }
            fused.push(xt);
            h = xt;
        }
        let pooled = crate::nn::global_avg_pool(ctx, h)?;
        let logits = self.head.forward(ctx, pooled)?;
        Ok(PromptOutput { stages, fused, logits })
    }

    /// Both paths without gradient tracking, softened at `tau`.
    pub fn dual_forward(&self, x: &Tensor<T>, tau: f64) -> Result<DualOutput<T>> {
        let mut ct = Ctx::no_grad(false);
        let xt = ct.input(x.clone());
        let orig = self.forward_original(&mut ct, xt)?;
        let mut cp = Ctx::no_grad(false);
        let xp = cp.input(x.clone());
        let prm = self.forward_prompt(&mut cp, xp, GradientFlow::ThroughFrozen)?;
        let logits_t = ct.value(orig.logits).clone();
        let logits_p = cp.value(prm.logits).clone();
        Ok(DualOutput {
            p_t: soften_batch(&logits_t, tau)?,
            p_p: soften_batch(&logits_p, tau)?,
            features_t: orig.stages.iter().map(|&v| ct.value(v).clone()).collect(),
            features_p: prm.fused.iter().map(|&v| cp.value(v).clone()).collect(),
            logits_t,
            logits_p,
        })
    }

    /// θ and φ parameter lists.
    pub fn param_groups(&self) -> (Vec<&Param<T>>, Vec<&Param<T>>) {
        let mut phi = Vec::new();
        self.visit_phi(&mut |p| phi.push(p));
        (self.teacher.params(), phi)
    }

    fn visit_phi<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.prompts.visit(f);
        self.head.visit(f);
    }

    /// Every φ tensor, for persistence alongside the teacher checkpoint.
    pub fn phi(&self) -> PhiView<'_, T> {
        PhiView(self)
    }

    pub fn phi_mut(&mut self) -> PhiViewMut<'_, T> {
        PhiViewMut(self)
    }

    /// Architecture tag for prompt-path checkpoints.
    pub fn arch_tag(&self) -> alloc::string::String {
        let c = &self.config;
        let join = |v: &[usize]| v.iter().map(|x| format!("{x}")).collect::<Vec<_>>().join(",");
        format!(
            "prompt({};r1={};r2={};k={};blocks={};fusion={};fresh_head={};act={})",
            self.teacher.arch.name,
            join(&c.r1),
            c.r2,
            join(&c.kernels),
            join(&c.blocks),
            c.fusion_convs,
            c.fresh_head,
            c.activation
        )
    }
}

impl<T: Element> Module<T> for DualForwardTeacher<T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.teacher.visit(f);
        self.visit_phi(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.teacher.visit_mut(f);
        self.prompts.visit_mut(f);
        self.head.visit_mut(f);
    }
}

/// φ alone as a module.
pub struct PhiView<'a, T>(&'a DualForwardTeacher<T>);

impl<T: Element> Module<T> for PhiView<'_, T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.0.visit_phi(f)
    }

    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Param<T>)) {}
}

pub struct PhiViewMut<'a, T>(&'a mut DualForwardTeacher<T>);

impl<T: Element> Module<T> for PhiViewMut<'_, T> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.0.visit_phi(f)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.0.prompts.visit_mut(f);
        self.0.head.visit_mut(f);
    }
}

/// Softens each row of a `(batch, classes)` logit tensor.
pub fn soften_batch<T: Element>(logits: &Tensor<T>, tau: f64) -> Result<Vec<SoftPrediction>> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "soften_batch",
            lhs: shape.to_vec(),
            rhs: alloc::vec![0, 0],
        });
    }
    logits
        .data()
        .chunks_exact(shape[1])
        .map(|row| {
            let z: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            soften(&z, tau)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchSpec;
    use crate::nn::Kind;
    use rand::Rng;

    fn teacher<T: Element>() -> StagedModel<T> {
        let spec = ArchSpec::named("tiny-resnet-T", 10).unwrap();
        StagedModel::build(&spec, 1, "teacher", Group::Theta).unwrap()
    }

    fn dual<T: Element>() -> DualForwardTeacher<T> {
        DualForwardTeacher::new(teacher(), PromptConfig::for_stages(3), 2).unwrap()
    }

    fn input(seed: u64, n: usize) -> Tensor<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[n, 3, 16, 16], |_| r.gen_range(0.0..1.0))
    }

    #[test]
    fn identity_start_is_bit_exact() {
        let d = dual::<f32>();
        for s in 0..5 {
            let out = d.dual_forward(&input(s, 3), 4.0).unwrap();
            assert!(out.logits_p.bit_eq(&out.logits_t));
            for (a, b) in out.features_p.iter().zip(&out.features_t) {
                assert!(a.bit_eq(b));
            }
        }
    }

    #[test]
    fn param_groups_partition() {
        let d = dual::<f32>();
        let (theta, phi) = d.param_groups();
        assert_eq!(theta.len() + phi.len(), d.params().len());
        assert!(theta.iter().all(|p| p.group == Group::Theta && !p.tensor.requires_grad()));
        assert!(phi.iter().all(|p| p.group == Group::Phi && p.name.starts_with("prompt.")));
        // 3 stages × (down + 3×2 unit convs + up + 1 fusion) + head weight/bias
        assert_eq!(phi.len(), 3 * (1 + 6 + 1 + 1) + 2);
        assert!(phi.iter().all(|p| p.kind == Kind::Weight));
    }

    #[test]
    fn analytic_phi_count_matches_enumeration() {
        let d = dual::<f32>();
        let (prompts, fusion) = d.config.analytic_params(&d.teacher.stage_channels()).unwrap();
        let head = d.head.param_count();
        assert_eq!(d.phi().param_count(), prompts + fusion + head);
    }

    #[test]
    fn nonzero_prompt_changes_next_stage_input() {
        let mut d = dual::<f64>();
        d.prompts[0].pairs[0].0.up.weight.tensor.data_mut().iter_mut().for_each(|v| *v = 0.05);
        let x = input(3, 2).cast::<f64>();
        let out = d.dual_forward(&x, 1.0).unwrap();
        assert!(!out.features_p[0].bit_eq(&out.features_t[0]));
        assert!(!out.logits_p.bit_eq(&out.logits_t));
        // original path unaffected by φ
        let fresh = dual::<f64>().dual_forward(&x, 1.0).unwrap();
        assert!(out.logits_t.bit_eq(&fresh.logits_t));
    }

    #[test]
    fn fresh_head_differs_from_copy() {
        let mut cfg = PromptConfig::for_stages(3);
        cfg.fresh_head = true;
        let d = DualForwardTeacher::<f32>::new(teacher(), cfg, 2).unwrap();
        assert_ne!(d.head.weight.tensor, d.teacher.head.weight.tensor);
        assert_eq!(d.head.weight.name, "prompt.head.weight");
    }

    #[test]
    fn config_arity_checked() {
        let cfg = PromptConfig::for_stages(4);
        assert!(DualForwardTeacher::<f32>::new(teacher(), cfg, 0).is_err());
    }

    #[test]
    fn gradient_reaches_every_phi_tensor() {
        let mut d = dual::<f64>();
        // generic point away from the zero-prompt start
        let mut r = ChaCha8Rng::seed_from_u64(4);
        d.phi_mut().visit_mut(&mut |p| {
            if p.name.ends_with("up.weight") {
                p.tensor.data_mut().iter_mut().for_each(|v| *v = r.gen_range(-0.1..0.1));
            }
        });
        let x = input(5, 4).cast::<f64>();
        let mut ctx = Ctx::new(false);
        let xv = ctx.input(x);
        let out = d.forward_prompt(&mut ctx, xv, GradientFlow::ThroughFrozen).unwrap();
        let sq = ctx.tape.mul(out.logits, out.logits).unwrap();
        let loss = ctx.tape.mean_all(sq);
        let grads = ctx.backward(loss).unwrap();
        let (theta, phi) = d.param_groups();
        for p in phi {
            let g = grads.get(&p.name).unwrap();
            assert!(g.data().iter().any(|&v| v != 0.0), "{}", p.name);
        }
        for p in theta {
            assert!(grads.get(&p.name).is_none());
        }

        // detached base: only the last stage's prompt and the head learn
        let mut ctx = Ctx::new(false);
        let xv = ctx.input(input(5, 4).cast::<f64>());
        let out = d.forward_prompt(&mut ctx, xv, GradientFlow::DetachedBase).unwrap();
        let sq = ctx.tape.mul(out.logits, out.logits).unwrap();
        let loss = ctx.tape.mean_all(sq);
        let grads = ctx.backward(loss).unwrap();
        let g = grads.get("prompt.stage1.p0.down.weight").unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        let g = grads.get("prompt.stage3.p0.down.weight").unwrap();
        assert!(g.data().iter().any(|&v| v != 0.0));
    }
}
