//! Teacher pre-training, the prompt-path and student updates of the
//! dual-forward path teacher, vanilla KD and plain cross-entropy training.

mod metrics;
mod sgd;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

pub use metrics::{sig6, EpochRecord, MetricsLog, Split, CSV_HEADER};
pub use sgd::{lr_at, SgdState};

use crate::data::{batches, fold_seed, Batch, LabeledDataset};
use crate::dfpt::{DualForwardTeacher, GradientFlow, PromptConfig};
use crate::error::{Error, Result};
use crate::losses::{ce_loss, kd_loss, kl_distillation, soften_rows, SoftPrediction, TargetFlow};
use crate::models::{ArchSpec, Checkpoint, StagedModel};
use crate::nn::{Ctx, Group, Module};
use crate::tensor::{Element, Tensor, Var};

type ParamVisitor<'a, T> = dyn Fn(&mut dyn FnMut(&crate::nn::Param<T>)) + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    CeOnly,
    VanillaKd,
    Dfpt,
    /// Also fine-tunes θ at a reduced learning rate.
    DfptDagger,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::CeOnly => "ce",
            Method::VanillaKd => "kd",
            Method::Dfpt => "dfpt",
            Method::DfptDagger => "dfpt-t",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ce" | "ce-only" => Some(Method::CeOnly),
            "kd" | "vanilla-kd" => Some(Method::VanillaKd),
            "dfpt" | "dfpt-kd" => Some(Method::Dfpt),
            "dfpt-t" | "dfpt-kd-dagger" => Some(Method::DfptDagger),
            _ => None,
        }
    }

    pub fn uses_prompt_path(self) -> bool {
        matches!(self, Method::Dfpt | Method::DfptDagger)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    /// Prompt-path cross-entropy weight.
    pub lambda: f64,
    /// Student cross-entropy weight.
    pub alpha: f64,
    /// Student distillation weight.
    pub beta: f64,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    /// θ learning-rate multiplier for the fine-tuning variant.
    pub teacher_lr_scale: f64,
    /// φ learning-rate multiplier.
    pub prompt_lr_scale: f64,
    /// Joint gradient-norm bound for the prompt-path update.
    pub prompt_clip: Option<f64>,
    pub seed: u64,
    /// Multiply KL terms by `τ²`.
    pub compensate: bool,
    pub flow: GradientFlow,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Dfpt,
            lambda: 0.5,
            alpha: 0.5,
            beta: 0.5,
            tau: 4.0,
            epochs: 240,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            milestones: alloc::vec![150, 180, 210],
            lr_decay: 0.1,
            teacher_lr_scale: 0.01,
            prompt_lr_scale: 1.0,
            prompt_clip: Some(1.0),
            seed: 0,
            compensate: true,
            flow: GradientFlow::ThroughFrozen,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad(format!("alpha and beta must be nonnegative, got {} and {}", self.alpha, self.beta));
        }
        if !(self.teacher_lr_scale > 0.0 && self.teacher_lr_scale <= 1.0) {
            return bad(format!("teacher_lr_scale must lie in (0, 1], got {}", self.teacher_lr_scale));
        }
        if !(self.tau > 0.0) {
            return Err(Error::NonPositiveTemperature(self.tau));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("lr must be positive, momentum in [0, 1), weight_decay nonnegative".into());
        }
        if !(self.prompt_lr_scale > 0.0) || self.prompt_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("prompt_lr_scale and prompt_clip must be positive".into());
        }
        if !(self.lr_decay > 0.0) {
            return bad(format!("lr_decay must be positive, got {}", self.lr_decay));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(self.lr, &self.milestones, self.lr_decay, epoch)
    }
}

/// What the student learns from.
#[derive(Debug, Clone, PartialEq)]
pub enum TeacherSide<T> {
    None,
    Plain(StagedModel<T>),
    Dual(DualForwardTeacher<T>),
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PromptLosses {
    pub ce: f64,
    pub kd_t: f64,
    pub kd_s: f64,
    pub total: f64,
}

/// Loss components and batch statistics of one step, measured before the
/// updates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepOutput {
    pub ce: f64,
    pub kd_t: Option<f64>,
    pub kd_p: Option<f64>,
    pub loss: f64,
    pub prompt: Option<PromptLosses>,
    pub stats: BatchStatsSum,
}

/// Sums over samples; divide by `count` for means.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchStatsSum {
    pub count: usize,
    pub correct: usize,
    pub prompt_correct: usize,
    pub kl_s_t: f64,
    pub kl_s_p: f64,
    pub one_minus_pt_t: f64,
    pub one_minus_pt_p: f64,
}

impl BatchStatsSum {
    fn add(&mut self, o: &BatchStatsSum) {
        self.count += o.count;
        self.correct += o.correct;
        self.prompt_correct += o.prompt_correct;
        self.kl_s_t += o.kl_s_t;
        self.kl_s_p += o.kl_s_p;
        self.one_minus_pt_t += o.one_minus_pt_t;
        self.one_minus_pt_p += o.one_minus_pt_p;
    }
}

fn correct<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == y
        })
        .count()
}

fn batch_stats<T: Element>(
    tau: f64,
    labels: &[usize],
    z_s: &Tensor<T>,
    z_t: Option<&Tensor<T>>,
    z_p: Option<&Tensor<T>>,
) -> Result<BatchStatsSum> {
    let mut s = BatchStatsSum {
        count: labels.len(),
        correct: correct(z_s, labels),
        ..Default::default()
    };
    let p_s = soften_rows(z_s, tau)?;
    let teacher_terms = |z: &Tensor<T>| -> Result<(f64, f64)> {
        let p: Vec<SoftPrediction> = soften_rows(z, tau)?;
        let mut kl = 0.0;
        let mut rest = 0.0;
        for ((pt, ps), &y) in p.iter().zip(&p_s).zip(labels) {
            kl += kl_distillation(pt, ps, false)?;
            rest += 1.0 - pt.probs[y];
        }
        Ok((kl, rest))
    };
    if let Some(z) = z_t {
        (s.kl_s_t, s.one_minus_pt_t) = teacher_terms(z)?;
    }
    if let Some(z) = z_p {
        (s.kl_s_p, s.one_minus_pt_p) = teacher_terms(z)?;
        s.prompt_correct = correct(z, labels);
    }
    Ok(s)
}

/// Owns the student, the teacher side and the optimizer state.
#[derive(Debug, Clone)]
pub struct Distiller<T> {
    pub config: TrainConfig,
    pub student: StagedModel<T>,
    pub teacher: TeacherSide<T>,
    pub sgd_student: SgdState<T>,
    pub sgd_prompt: SgdState<T>,
    /// Original-path logits per `(split, sample)` while θ is frozen.
    cache: BTreeMap<(u8, usize), Vec<T>>,
    pub epoch: usize,
    pub step: usize,
}

impl<T: Element> Distiller<T> {
    pub fn new(config: TrainConfig, mut student: StagedModel<T>, mut teacher: TeacherSide<T>) -> Result<Self> {
        config.validate()?;
        let mismatch = |reason: &str| Error::MethodMismatch {
            method: config.method.label(),
            reason: reason.into(),
        };
        match (&config.method, &mut teacher) {
            (Method::CeOnly, _) => {}
            (Method::VanillaKd, TeacherSide::Plain(t)) => t.set_trainable(false),
            (Method::VanillaKd, _) => return Err(mismatch("vanilla KD needs a plain teacher")),
            (Method::Dfpt, TeacherSide::Dual(d)) => d.set_teacher_trainable(false),
            (Method::DfptDagger, TeacherSide::Dual(d)) => d.set_teacher_trainable(true),
            (_, _) => return Err(mismatch("prompt-path methods need a dual-forward teacher")),
        }
        student.set_trainable(true);
        let sgd = |c: &TrainConfig| SgdState::new(c.lr, c.momentum, c.weight_decay);
        let mut sgd_prompt = sgd(&config);
        sgd_prompt.lr = config.lr * config.prompt_lr_scale;
        sgd_prompt.clip_norm = config.prompt_clip;
        Ok(Self {
            sgd_student: sgd(&config),
            sgd_prompt,
            config,
            student,
            teacher,
            cache: BTreeMap::new(),
            epoch: 0,
            step: 0,
        })
    }

    fn teacher_frozen(&self) -> bool {
        self.config.method != Method::DfptDagger
    }

    /// Original-path logits without gradient, cached while θ is frozen and
    /// the inputs are not augmented.
    fn original_logits(&mut self, x: &Tensor<T>, key: Option<(u8, &[usize])>) -> Result<Option<Tensor<T>>> {
        let model = match &self.teacher {
            TeacherSide::None => return Ok(None),
            TeacherSide::Plain(t) => t,
            TeacherSide::Dual(d) => &d.teacher,
        };
        let cacheable = key.filter(|_| self.teacher_frozen());
        if let Some((split, idx)) = cacheable {
            if let Some(rows) = idx.iter().map(|&i| self.cache.get(&(split, i))).collect::<Option<Vec<_>>>() {
                let classes = rows.first().map_or(0, |r| r.len());
                let data = rows.into_iter().flatten().copied().collect();
                return Ok(Some(Tensor::new(&[idx.len(), classes], data)?));
            }
        }
        let z = model.predict(x)?;
        if let Some((split, idx)) = cacheable {
            let c = z.shape()[1];
            for (row, &i) in z.data().chunks_exact(c).zip(idx) {
                self.cache.insert((split, i), row.to_vec());
            }
        }
        Ok(Some(z))
    }

    fn non_finite(&self, what: &'static str, values: &[(&str, f64)]) -> Error {
        let norm = |m: &ParamVisitor<T>| {
            let mut s = 0.0;
            m(&mut |p| s += p.tensor.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>());
            libm::sqrt(s)
        };
        let psi = norm(&|f| self.student.visit(f));
        let teacher = match &self.teacher {
            TeacherSide::None => 0.0,
            TeacherSide::Plain(t) => norm(&|f| t.visit(f)),
            TeacherSide::Dual(d) => norm(&|f| d.visit(f)),
        };
        let losses: Vec<String> = values.iter().map(|(k, v)| format!("{k}={v}")).collect();
        Error::NonFiniteLoss {
            what,
            epoch: self.epoch + 1,
            step: self.step,
            state: format!(
                "{}; |psi|={psi}; |teacher side|={teacher}; lr={}",
                losses.join(", "),
                self.sgd_student.lr
            ),
        }
    }

    /// Sets both optimizers to the scheduled rate for 0-based `epoch`.
    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
        let lr = self.config.lr_at(epoch);
        self.sgd_student.lr = lr;
        self.sgd_prompt.lr = lr * self.config.prompt_lr_scale;
    }

    /// One batch: forward everything, update the prompt path, then the
    /// student.
    pub fn step(&mut self, batch: &Batch<T>) -> Result<StepOutput> {
        let cfg = self.config.clone();
        let key = (!cfg.augment).then_some((0u8, batch.indices.as_slice()));
        let z_t = if cfg.method == Method::CeOnly {
            None
        } else {
            self.original_logits(&batch.images, key)?
        };

        // prompt-path forward
        let mut prompt_ctx = None;
        if let (true, TeacherSide::Dual(d)) = (cfg.method.uses_prompt_path(), &self.teacher) {
            let mut ctx = Ctx::new(false);
            let x = ctx.input(batch.images.clone());
            let out = d.forward_prompt(&mut ctx, x, cfg.flow)?;
            prompt_ctx = Some((ctx, out.logits));
        }
        let z_p: Option<Tensor<T>> = prompt_ctx.as_ref().map(|(c, v)| c.value(*v).clone());

        // student forward
        let mut sctx = Ctx::new(true);
        let xs = sctx.input(batch.images.clone());
        let zs_var = self.student.forward(&mut sctx, xs, true)?;
        let z_s = sctx.value(zs_var).clone();
        let stats = batch_stats(cfg.tau, &batch.labels, &z_s, z_t.as_ref(), z_p.as_ref())?;

        // prompt-path update
        let mut prompt_losses = None;
        if let Some((mut ctx, zp)) = prompt_ctx {
            let zt = ctx.input(z_t.clone().ok_or_else(|| Error::MethodMismatch {
                method: cfg.method.label(),
                reason: "missing original-path logits".into(),
            })?);
            let zs_const = ctx.input(z_s.clone());
            let ce = ce_loss(&mut ctx.tape, zp, &batch.labels)?;
            let kd_t = kd_loss(&mut ctx.tape, zt, zp, cfg.tau, cfg.compensate, TargetFlow::Detached)?;
            let kd_s = kd_loss(&mut ctx.tape, zs_const, zp, cfg.tau, cfg.compensate, TargetFlow::Detached)?;
            let a = ctx.tape.scale(ce, T::of(cfg.lambda));
            let kd = ctx.tape.add(kd_t, kd_s)?;
            let b = ctx.tape.scale(kd, T::of(1.0 - cfg.lambda));
            let total = ctx.tape.add(a, b)?;
            let v = |x: Var| ctx.value(x).data()[0].as_f64();
            let pl = PromptLosses {
                ce: v(ce),
                kd_t: v(kd_t),
                kd_s: v(kd_s),
                total: v(total),
            };
            if !pl.total.is_finite() {
                return Err(self.non_finite(
                    "prompt path",
                    &[("ce", pl.ce), ("kd_t", pl.kd_t), ("kd_s", pl.kd_s)],
                ));
            }
            let grads = ctx.backward(total)?;
            let scale = cfg.teacher_lr_scale;
            if let TeacherSide::Dual(d) = &mut self.teacher {
                self.sgd_prompt
                    .step(d, &grads, |g| if g == Group::Theta { scale } else { 1.0 })?;
            }
            prompt_losses = Some(pl);
        }

        // student update
        let ce = ce_loss(&mut sctx.tape, zs_var, &batch.labels)?;
        let mut kd_t_val = None;
        let mut kd_p_val = None;
        let loss = if cfg.method == Method::CeOnly {
            ce
        } else {
            let a = sctx.tape.scale(ce, T::of(cfg.alpha));
            let zt = sctx.input(z_t.clone().ok_or_else(|| Error::MethodMismatch {
                method: cfg.method.label(),
                reason: "missing teacher logits".into(),
            })?);
            let mut kd = kd_loss(&mut sctx.tape, zt, zs_var, cfg.tau, cfg.compensate, TargetFlow::Detached)?;
            kd_t_val = Some(sctx.value(kd).data()[0].as_f64());
            if let Some(zp) = &z_p {
                let zp = sctx.input(zp.clone());
                let kp = kd_loss(&mut sctx.tape, zp, zs_var, cfg.tau, cfg.compensate, TargetFlow::Detached)?;
                kd_p_val = Some(sctx.value(kp).data()[0].as_f64());
                kd = sctx.tape.add(kd, kp)?;
            }
            let b = sctx.tape.scale(kd, T::of(cfg.beta));
            sctx.tape.add(a, b)?
        };
        let ce_val = sctx.value(ce).data()[0].as_f64();
        let loss_val = sctx.value(loss).data()[0].as_f64();
        if !loss_val.is_finite() {
            return Err(self.non_finite(
                "student",
                &[("ce", ce_val), ("kd_t", kd_t_val.unwrap_or(0.0)), ("kd_p", kd_p_val.unwrap_or(0.0))],
            ));
        }
        let grads = sctx.backward(loss)?;
        self.sgd_student.step(&mut self.student, &grads, |_| 1.0)?;
        sctx.commit_running_stats(&mut self.student);
        self.step += 1;
        Ok(StepOutput {
            ce: ce_val,
            kd_t: kd_t_val,
            kd_p: kd_p_val,
            loss: loss_val,
            prompt: prompt_losses,
            stats,
        })
    }

    /// One pass over `train`; returns the train record for this epoch.
    pub fn train_epoch(&mut self, train: &LabeledDataset) -> Result<EpochRecord> {
        let cfg = self.config.clone();
        let mut it = batches(train, cfg.batch_size.min(train.len()), cfg.seed, self.epoch, cfg.augment)?;
        let mut stats = BatchStatsSum::default();
        let (mut ce, mut kd_t, mut kd_p) = (0.0, 0.0, 0.0);
        while let Some(b) = it.next_batch::<T>() {
            let out = self.step(&b)?;
            let n = b.labels.len() as f64;
            ce += out.ce * n;
            kd_t += out.kd_t.unwrap_or(0.0) * n;
            kd_p += out.kd_p.unwrap_or(0.0) * n;
            stats.add(&out.stats);
        }
        Ok(self.record(Split::Train, &stats, ce, kd_t, kd_p))
    }

    fn record(&self, split: Split, s: &BatchStatsSum, ce: f64, kd_t: f64, kd_p: f64) -> EpochRecord {
        let n = s.count.max(1) as f64;
        let m = self.config.method;
        let has_t = m != Method::CeOnly;
        let has_p = m.uses_prompt_path();
        EpochRecord {
            epoch: self.epoch + 1,
            split: Some(split),
            top1: s.correct as f64 / n,
            ce: ce / n,
            kd_t: has_t.then_some(kd_t / n),
            kd_p: has_p.then_some(kd_p / n),
            prompt_top1: has_p.then_some(s.prompt_correct as f64 / n),
            kl_s_t: has_t.then_some(s.kl_s_t / n),
            kl_s_p: has_p.then_some(s.kl_s_p / n),
            one_minus_pt_t: has_t.then_some(s.one_minus_pt_t / n),
            one_minus_pt_p: has_p.then_some(s.one_minus_pt_p / n),
            lr: self.sgd_student.lr,
        }
    }

    /// Eval-mode pass over `ds` without updates.
    pub fn evaluate(&mut self, ds: &LabeledDataset) -> Result<EpochRecord> {
        let cfg = self.config.clone();
        let tape_free = |logits: &Tensor<T>, target: &Tensor<T>| -> Result<f64> {
            let pt = soften_rows(target, cfg.tau)?;
            let ps = soften_rows(logits, cfg.tau)?;
            let mut s = 0.0;
            for (a, b) in pt.iter().zip(&ps) {
                s += kl_distillation(a, b, cfg.compensate)?;
            }
            Ok(s)
        };
        let mut stats = BatchStatsSum::default();
        let (mut ce, mut kd_t, mut kd_p) = (0.0, 0.0, 0.0);
        let bs = cfg.batch_size.min(ds.len()).max(1);
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(bs) {
            let (x, labels) = ds.gather::<T>(chunk);
            let z_s = self.student.predict(&x)?;
            let z_t = if cfg.method == Method::CeOnly {
                None
            } else {
                self.original_logits(&x, Some((1, chunk)))?
            };
            let z_p = match (&self.teacher, cfg.method.uses_prompt_path()) {
                (TeacherSide::Dual(d), true) => {
                    let mut ctx = Ctx::no_grad(false);
                    let xv = ctx.input(x.clone());
                    let out = d.forward_prompt(&mut ctx, xv, GradientFlow::ThroughFrozen)?;
                    Some(ctx.value(out.logits).clone())
                }
                _ => None,
            };
            let p_s = soften_rows(&z_s, 1.0)?;
            ce += p_s.iter().zip(&labels).map(|(p, &y)| -p.log_probs[y]).sum::<f64>();
            if let Some(z) = &z_t {
                kd_t += tape_free(&z_s, z)?;
            }
            if let Some(z) = &z_p {
                kd_p += tape_free(&z_s, z)?;
            }
            stats.add(&batch_stats(cfg.tau, &labels, &z_s, z_t.as_ref(), z_p.as_ref())?);
        }
        Ok(self.record(Split::Test, &stats, ce, kd_t, kd_p))
    }

    pub fn dual(&self) -> Option<&DualForwardTeacher<T>> {
        match &self.teacher {
            TeacherSide::Dual(d) => Some(d),
            _ => None,
        }
    }
}

fn check_dataset(spec: &ArchSpec, ds: &LabeledDataset) -> Result<()> {
    if ds.image_shape[0] != spec.in_channels || ds.classes != spec.classes {
        return Err(Error::DatasetMismatch(format!(
            "{} expects {} channels and {} classes, dataset `{}` has {} and {}",
            spec.name, spec.in_channels, spec.classes, ds.split, ds.image_shape[0], ds.classes
        )));
    }
    Ok(())
}

/// Epoch loop with a train and a test record per epoch.
pub fn fit<T: Element>(d: &mut Distiller<T>, train: &LabeledDataset, test: &LabeledDataset) -> Result<MetricsLog> {
    let mut log = MetricsLog::new();
    for epoch in 0..d.config.epochs {
        d.set_epoch(epoch);
        let tr = d.train_epoch(train)?;
        let te = d.evaluate(test)?;
        log.push(tr)?;
        log.push(te)?;
    }
    Ok(log)
}

/// Cross-entropy training of a fresh teacher; the checkpoint records final
/// train and test accuracy.
pub fn pretrain_teacher<T: Element>(
    spec: &ArchSpec,
    train: &LabeledDataset,
    test: &LabeledDataset,
    config: &TrainConfig,
) -> Result<(StagedModel<T>, Checkpoint, MetricsLog)> {
    check_dataset(spec, train)?;
    check_dataset(spec, test)?;
    let model = StagedModel::build(spec, fold_seed(config.seed, 1), "teacher", Group::Theta)?;
    let cfg = TrainConfig {
        method: Method::CeOnly,
        ..config.clone()
    };
    let mut d = Distiller::new(cfg, model, TeacherSide::None)?;
    let log = fit(&mut d, train, test)?;
    let metrics = final_metrics(&log);
    let ckpt = d.student.to_checkpoint(fold_seed(config.seed, 1), metrics);
    Ok((d.student, ckpt, log))
}

fn final_metrics(log: &MetricsLog) -> Vec<(String, f64)> {
    let mut m = Vec::new();
    if let Some(r) = log.last(Split::Train) {
        m.push(("train_top1".into(), r.top1));
    }
    if let Some(r) = log.last(Split::Test) {
        m.push(("test_top1".into(), r.top1));
        if let Some(p) = r.prompt_top1 {
            m.push(("test_prompt_top1".into(), p));
        }
    }
    m
}

/// Results of a distillation run.
#[derive(Debug, Clone)]
pub struct RunOutput<T> {
    pub student: StagedModel<T>,
    pub student_ckpt: Checkpoint,
    pub dual: Option<DualForwardTeacher<T>>,
    /// φ (and θ for the fine-tuning variant) under the `prompt.` prefix.
    pub prompt_ckpt: Option<Checkpoint>,
    pub log: MetricsLog,
}

/// The full loop: wrap the teacher, build the student, train, evaluate.
pub fn run<T: Element>(
    config: &TrainConfig,
    prompt: Option<&PromptConfig>,
    teacher_ckpt: Option<&Checkpoint>,
    student_arch: &ArchSpec,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<RunOutput<T>> {
    check_dataset(student_arch, train)?;
    check_dataset(student_arch, test)?;
    let student_seed = fold_seed(config.seed, 1);
    let student = StagedModel::build(student_arch, student_seed, "student", Group::Psi)?;
    let teacher = match (config.method, teacher_ckpt) {
        (Method::CeOnly, _) => TeacherSide::None,
        (_, None) => {
            return Err(Error::MethodMismatch {
                method: config.method.label(),
                reason: "a teacher checkpoint is required".into(),
            })
        }
        (m, Some(ck)) => {
            let t = StagedModel::from_checkpoint(ck, Group::Theta)?;
            check_dataset(&t.arch, train)?;
            if m.uses_prompt_path() {
                let pc = prompt.cloned().unwrap_or_else(|| PromptConfig::for_stages(t.num_stages()));
                TeacherSide::Dual(DualForwardTeacher::new(t, pc, fold_seed(config.seed, 2))?)
            } else {
                TeacherSide::Plain(t)
            }
        }
    };
    let mut d = Distiller::new(config.clone(), student, teacher)?;
    let log = fit(&mut d, train, test)?;
    let metrics = final_metrics(&log);
    let student_ckpt = d.student.to_checkpoint(student_seed, metrics.clone());
    let (dual, prompt_ckpt) = match d.teacher {
        TeacherSide::Dual(dual) => {
            let ck = if config.method == Method::DfptDagger {
                Checkpoint::capture(&dual.arch_tag(), fold_seed(config.seed, 2), &dual, metrics)
            } else {
                Checkpoint::capture(&dual.arch_tag(), fold_seed(config.seed, 2), &dual.phi(), metrics)
            };
            (Some(dual), Some(ck))
        }
        _ => (None, None),
    };
    Ok(RunOutput {
        student: d.student,
        student_ckpt,
        dual,
        prompt_ckpt,
        log,
    })
}
