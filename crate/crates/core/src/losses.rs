//! Temperature-softened predictions, their target / non-target split, and the
//! distillation and cross-entropy losses.
//!
//! The value-level functions work on one logit vector in `f64`. The tape-level
//! functions ([`kd_loss`], [`ce_loss`]) take `(batch, classes)` logits, return
//! batch means and are differentiable with respect to their trainable input.
//!
//! KL is always written `KL(target ‖ input) = Σ target·(log target − log input)`;
//! the target side is a constant unless the caller asks for flow.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// `softmax(z / τ)`, kept together with its logs and source.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftPrediction {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub temperature: f64,
    pub logits: Vec<f64>,
}

impl SoftPrediction {
    pub fn classes(&self) -> usize {
        self.probs.len()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

/// `(p_t, p_\t)`: probability of the target class and of everything else.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetSplit {
    pub target: usize,
    pub p_target: f64,
    pub p_rest: f64,
}

/// Distribution over the non-target classes, in class order with the target
/// removed.
#[derive(Debug, Clone, PartialEq)]
pub struct NonTargetDist {
    pub target: usize,
    pub q: Vec<f64>,
    log_q: Vec<f64>,
}

/// Binary term, non-target term and the `1 − p_t` weight of the teacher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdDecomposition {
    pub binary: f64,
    pub nontarget: f64,
    pub weight: f64,
}

impl KdDecomposition {
    /// `binary + weight · nontarget`, equal to the uncompensated KL.
    pub fn recombined(&self) -> f64 {
        self.binary + self.weight * self.nontarget
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(v.map(|x| libm::exp(x - m)).sum::<f64>())
}

pub fn soften(logits: &[f64], temperature: f64) -> Result<SoftPrediction> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    if logits.is_empty() {
        return Err(Error::IndexOutOfRange { index: 0, len: 0 });
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let lse = log_sum_exp(scaled.iter().copied());
    let log_probs: Vec<f64> = scaled.iter().map(|s| s - lse).collect();
    Ok(SoftPrediction {
        probs: log_probs.iter().map(|&l| libm::exp(l)).collect(),
        log_probs,
        temperature,
        logits: logits.to_vec(),
    })
}

fn check_index(t: usize, len: usize) -> Result<()> {
    if t >= len {
        Err(Error::IndexOutOfRange { index: t, len })
    } else {
        Ok(())
    }
}

pub fn split_target(p: &SoftPrediction, t: usize) -> Result<TargetSplit> {
    check_index(t, p.classes())?;
    let p_rest = p
        .probs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != t)
        .map(|(_, &v)| v)
        .sum();
    Ok(TargetSplit {
        target: t,
        p_target: p.probs[t],
        p_rest,
    })
}

/// Log of the non-target mass, computed from logits so it stays finite when
/// the target dominates.
fn log_rest(p: &SoftPrediction, t: usize) -> f64 {
    let lse_all = log_sum_exp(p.logits.iter().map(|z| z / p.temperature));
    let lse_rest = log_sum_exp(
        p.logits
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != t)
            .map(|(_, z)| z / p.temperature),
    );
    lse_rest - lse_all
}

pub fn nontarget_distribution(p: &SoftPrediction, t: usize) -> Result<NonTargetDist> {
    check_index(t, p.classes())?;
    let lr = log_rest(p, t);
    if lr == f64::NEG_INFINITY || p.classes() < 2 || p.probs[t] == 1.0 && lr < -745.0 {
        return Err(Error::DegenerateNonTarget);
    }
    let log_q: Vec<f64> = p
        .log_probs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != t)
        .map(|(_, &l)| l - lr)
        .collect();
    Ok(NonTargetDist {
        target: t,
        q: log_q.iter().map(|&l| libm::exp(l)).collect(),
        log_q,
    })
}

fn kl_logspace(target: &[f64], log_target: &[f64], log_input: &[f64]) -> f64 {
    target
        .iter()
        .zip(log_target)
        .zip(log_input)
        .map(|((&p, &lp), &lq)| if p == 0.0 { 0.0 } else { p * (lp - lq) })
        .sum()
}

/// `KL(p_teacher ‖ p_student)`, times `τ²` when `compensate`.
pub fn kl_distillation(teacher: &SoftPrediction, student: &SoftPrediction, compensate: bool) -> Result<f64> {
    if teacher.classes() != student.classes() {
        return Err(Error::ShapeMismatch {
            op: "kl_distillation",
            lhs: vec![teacher.classes()],
            rhs: vec![student.classes()],
        });
    }
    let kl = kl_logspace(&teacher.probs, &teacher.log_probs, &student.log_probs);
    let tau = teacher.temperature;
    Ok(if compensate { kl * tau * tau } else { kl })
}

/// Splits `KL(p_T ‖ p_S)` into the binary target/rest term, the non-target
/// term, and the teacher's `1 − p_t` weight.
pub fn decompose_kd(teacher: &SoftPrediction, student: &SoftPrediction, t: usize) -> Result<KdDecomposition> {
    if teacher.classes() != student.classes() {
        return Err(Error::ShapeMismatch {
            op: "decompose_kd",
            lhs: vec![teacher.classes()],
            rhs: vec![student.classes()],
        });
    }
    let bt = split_target(teacher, t)?;
    let (qt, qs) = (nontarget_distribution(teacher, t)?, nontarget_distribution(student, t)?);
    let (lrt, lrs) = (log_rest(teacher, t), log_rest(student, t));
    let binary = kl_logspace(
        &[bt.p_target, bt.p_rest],
        &[teacher.log_probs[t], lrt],
        &[student.log_probs[t], lrs],
    );
    let nontarget = kl_logspace(&qt.q, &qt.log_q, &qs.log_q);
    Ok(KdDecomposition {
        binary,
        nontarget,
        weight: bt.p_rest,
    })
}

/// `−log softmax(z)[y]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    check_index(label, logits.len())?;
    Ok(log_sum_exp(logits.iter().copied()) - logits[label])
}

/// Whether a distillation target is a constant or a differentiable input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetFlow {
    Detached,
    Attached,
}

/// Batch mean of `KL(softmax(target/τ) ‖ softmax(input/τ))` over
/// `(batch, classes)` logits, times `τ²` when `compensate`.
pub fn kd_loss<T: Element>(
    tape: &mut Tape<T>,
    target_logits: Var,
    input_logits: Var,
    temperature: f64,
    compensate: bool,
    flow: TargetFlow,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::NonPositiveTemperature(temperature));
    }
    let (st, si) = (tape.shape(target_logits).to_vec(), tape.shape(input_logits).to_vec());
    if st != si || st.len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "kd_loss",
            lhs: st,
            rhs: si,
        });
    }
    let batch = st[0];
    let target = match flow {
        TargetFlow::Detached => tape.detach(target_logits),
        TargetFlow::Attached => target_logits,
    };
    let inv_tau = T::of(1.0 / temperature);
    let ts = tape.scale(target, inv_tau);
    let log_pt = tape.log_softmax(ts)?;
    let pt = tape.exp(log_pt);
    let is = tape.scale(input_logits, inv_tau);
    let log_ps = tape.log_softmax(is)?;
    let diff = tape.sub(log_pt, log_ps)?;
    let terms = tape.mul(pt, diff)?;
    let total = tape.sum_all(terms);
    let factor = if compensate { temperature * temperature } else { 1.0 };
    Ok(tape.scale(total, T::of(factor / batch as f64)))
}

/// Batch mean cross-entropy of `(batch, classes)` logits against labels.
pub fn ce_loss<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "ce_loss",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let classes = shape[1];
    let mut onehot = vec![T::zero(); labels.len() * classes];
    for (row, &y) in labels.iter().enumerate() {
        check_index(y, classes)?;
        onehot[row * classes + y] = T::one();
    }
    let onehot = tape.constant(Tensor::new(&shape, onehot)?);
    let ls = tape.log_softmax(logits)?;
    let picked = tape.mul(ls, onehot)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, T::of(-1.0 / labels.len() as f64)))
}

/// Row-wise soft predictions of a `(batch, classes)` logit tensor.
pub fn soften_rows<T: Element>(logits: &Tensor<T>, temperature: f64) -> Result<Vec<SoftPrediction>> {
    let classes = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            let z: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
            soften(&z, temperature)
        })
        .collect()
}

/// Shannon entropy in nats.
pub fn entropy(p: &SoftPrediction) -> f64 {
    -kl_logspace(&p.probs, &p.log_probs, &vec![0.0; p.classes()])
}
