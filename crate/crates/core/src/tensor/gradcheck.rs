use alloc::vec::Vec;

use super::{Element, Tape, Tensor, Var};
use crate::error::Result;

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_difference<T, F>(f: &F, x: &Tensor<T>, eps: T) -> Result<Vec<T>>
where
    T: Element,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let eval = |probe: &Tensor<T>| -> Result<T> {
        let mut tape = Tape::new();
        let v = tape.constant(probe.clone());
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    let two = T::one() + T::one();
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (two * eps));
    }
    Ok(grad)
}

/// Max over entries of `|analytic − fd| / max(|analytic|, |fd|, 1e-8)`.
pub fn check_gradients<T, F>(f: F, x: &Tensor<T>, eps: T) -> Result<T>
where
    T: Element,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(&x.clone().with_requires_grad(true));
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads.tensor(xv);
    let numeric = finite_difference(&f, x, eps)?;
    let floor = T::of(1e-8);
    Ok(analytic
        .data()
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(T::zero(), T::max))
}
