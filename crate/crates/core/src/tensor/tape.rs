use alloc::vec;
use alloc::vec::Vec;

use super::ops::{self, ConvGeom};
use super::{broadcast_shape, broadcast_strides, for_each_broadcast, gemm, numel, strides};
use super::{Element, Tensor, Transpose};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    /// Gradient goes to the first maximal element in row-major order.
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Binary(Binary, Var, Var),
    Scale(Var, T),
    Reduce {
        input: Var,
        mode: Reduce,
        /// Input shape with reduced axes set to 1.
        kept: Vec<usize>,
        argmax: Vec<usize>,
    },
    /// `a · b`, or `a · bᵀ` when the flag is set.
    MatMul(Var, Var, bool),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Reshape(Var),
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    LogSoftmax(Var),
    Exp(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a train-mode batch norm: per-channel mean and
/// unbiased variance, for the caller's running-average update.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

/// Append-only record of operations, differentiated by [`Tape::backward`].
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it
/// and a single reverse sweep visits each node once.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients from one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of a leaf, `None` when the leaf does not require grad.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zero-filled when nothing flowed into `v`.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).unwrap_or_else(|_| Tensor::scalar(g[0])),
            None => Tensor::zeros(shape),
        }
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let mut value = value;
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf; it is differentiated iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let rg = t.requires_grad();
        self.push(t.clone(), Op::Leaf, rg)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies `v` into a fresh constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::ShapeMismatch {
            op: "elementwise",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        if kind == Binary::Div && self.value(b).data().iter().any(|v| v.is_zero()) {
            return Err(Error::DivisionByZero);
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); numel(&out_shape)];
        let (ta, tb) = (
            broadcast_strides(&sa, &out_shape),
            broadcast_strides(&sb, &out_shape),
        );
        for_each_broadcast(&out_shape, &ta, &tb, |o, ia, ib| {
            let (p, q) = (xa[ia], xb[ib]);
            out[o] = match kind {
                Binary::Add => p + q,
                Binary::Sub => p - q,
                Binary::Mul => p * q,
                Binary::Div => p / q,
            };
        });
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(&out_shape, out).unwrap_or_else(|e| unreachable_shape(e)),
            Op::Binary(kind, a, b),
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|v| v * c);
        let rg = self.requires_grad(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Reduces over `axes`; reduced extents are dropped unless `keep_dims`.
    pub fn reduce(&mut self, a: Var, axes: &[usize], mode: Reduce, keep_dims: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        if let Some(&axis) = axes.iter().find(|&&ax| ax >= rank) {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let mut kept = shape.clone();
        for &ax in axes {
            kept[ax] = 1;
        }
        let count = numel(&shape) / numel(&kept);
        let src = self.value(a).data();
        let out_len = numel(&kept);
        let mut out = vec![
            match mode {
                Reduce::Max => T::neg_infinity(),
                _ => T::zero(),
            };
            out_len
        ];
        let mut argmax = if mode == Reduce::Max {
            vec![usize::MAX; out_len]
        } else {
            Vec::new()
        };
        let (own, to_out) = (strides(&shape), broadcast_strides(&kept, &shape));
        for_each_broadcast(&shape, &own, &to_out, |_, i, o| match mode {
            Reduce::Sum | Reduce::Mean => out[o] += src[i],
            Reduce::Max => {
                if argmax[o] == usize::MAX || src[i] > out[o] {
                    out[o] = src[i];
                    argmax[o] = i;
                }
            }
        });
        if mode == Reduce::Mean {
            let c = T::of(count as f64);
            out.iter_mut().for_each(|v| *v = *v / c);
        }
        let out_shape: Vec<usize> = if keep_dims {
            kept.clone()
        } else {
            shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        let rg = self.requires_grad(a);
        let value = if out_shape.is_empty() {
            Tensor::scalar(out[0])
        } else {
            Tensor::new(&out_shape, out).unwrap_or_else(|e| unreachable_shape(e))
        };
        Ok(self.push(
            value,
            Op::Reduce {
                input: a,
                mode,
                kept,
                argmax,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(a, &axes, Reduce::Sum, false)
            .unwrap_or_else(|e| unreachable_shape(e))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.reduce(a, &axes, Reduce::Mean, false)
            .unwrap_or_else(|e| unreachable_shape(e))
    }

    /// 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a` (m×k) and `b` (n×k).
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, bt: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let inner_b = if bt { sb.get(1) } else { sb.first() };
        if sa.len() != 2 || sb.len() != 2 || Some(&sa[1]) != inner_b {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], if bt { sb[0] } else { sb[1] });
        let tb = if bt { Transpose::Yes } else { Transpose::No };
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Transpose::No,
            self.value(b).data(),
            tb,
            &mut out,
            false,
        );
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(&[m, n], out).unwrap_or_else(|e| unreachable_shape(e)),
            Op::MatMul(a, b, bt),
            rg,
        ))
    }

    /// Zero-padded cross-correlation of `x` (N,C,H,W) with `w` (O,C,k,k).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        if sx[1] != sw[1] {
            return Err(Error::ChannelMismatch {
                expected: sw[1],
                got: sx[1],
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![sw[0]],
                });
            }
        }
        let k = sw[2];
        let (out_h, out_w) = match (
            ops::conv_out_extent(sx[2], k, stride, pad),
            ops::conv_out_extent(sx[3], k, stride, pad),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(Error::DegenerateOutput { input: sx }),
        };
        let geom = ConvGeom {
            batch: sx[0],
            in_c: sx[1],
            h: sx[2],
            w: sx[3],
            out_c: sw[0],
            k,
            stride,
            pad,
            out_h,
            out_w,
        };
        let out = ops::conv_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::new(&[geom.batch, geom.out_c, out_h, out_w], out)
                .unwrap_or_else(|e| unreachable_shape(e)),
            Op::Conv2d { x, w, b, geom },
            rg,
        ))
    }

    /// Per-channel normalization of an NCHW batch followed by `gamma·x̂ + beta`.
    ///
    /// With `running = None` the batch statistics are used (train mode) and
    /// returned; otherwise the supplied `(mean, var)` are used (eval mode).
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: sx,
                rhs: vec![],
            });
        }
        let (n, c, plane) = (sx[0], sx[1], sx[2] * sx[3]);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::ChannelMismatch {
                    expected: c,
                    got: self.shape(p).iter().product(),
                });
            }
        }
        if let Some((m, v)) = running {
            if m.len() != c || v.len() != c {
                return Err(Error::ChannelMismatch {
                    expected: c,
                    got: m.len(),
                });
            }
        }
        if running.is_none() && n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let xs = self.value(x).data();
        let count = T::of((n * plane) as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        match running {
            Some((m, v)) => {
                mean.copy_from_slice(m);
                var.copy_from_slice(v);
            }
            None => {
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        mean[ch] += xs[base..base + plane].iter().copied().sum::<T>();
                    }
                }
                mean.iter_mut().for_each(|m| *m = *m / count);
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        let m = mean[ch];
                        var[ch] += xs[base..base + plane]
                            .iter()
                            .map(|&v| (v - m) * (v - m))
                            .sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / count);
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * plane;
                for i in base..base + plane {
                    let h = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let stats = running.is_none().then(|| {
            let bessel = count / (count - T::one());
            BatchStats {
                mean: mean.clone(),
                var_unbiased: var.iter().map(|&v| v * bessel).collect(),
            }
        });
        let rg = self.any_grad(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(&sx, out).unwrap_or_else(|e| unreachable_shape(e)),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: running.is_none(),
            },
            rg,
        );
        Ok((v, stats))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(T::zero()));
        let rg = self.requires_grad(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.requires_grad(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                len: shape[axis],
            });
        }
        let (outer, extent, inner) = ops::axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::new(&out_shape, out).unwrap_or_else(|e| unreachable_shape(e)),
            Op::Narrow {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let same_rank = s.len() == first.len();
            if !same_rank || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = ops::axis_split(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let ext = self.shape(v)[axis];
                let src = self.value(v).data();
                out.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::new(&out_shape, out).unwrap_or_else(|e| unreachable_shape(e)),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
        let out = ops::log_softmax_rows(self.value(a).data(), cols);
        let rg = self.requires_grad(a);
        Ok(self.push(
            Tensor::new(&shape, out).unwrap_or_else(|e| unreachable_shape(e)),
            Op::LogSoftmax(a),
            rg,
        ))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.exp());
        let rg = self.requires_grad(a);
        self.push(value, Op::Exp(a), rg)
    }

    /// Reverse sweep from the scalar `loss`.
    ///
    /// Every leaf that requires grad gets a gradient, zero-filled when it is
    /// not on any path to `loss`; contributions from several paths add up.
    /// Constant leaves receive nothing, yet gradient passes through the ops
    /// that consume them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![T::zero(); node.value.numel()]);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
            slot => *slot = Some(contrib),
        }
    }

    /// Sums a broadcast gradient back down to `input`'s shape.
    fn unbroadcast(&self, g: &[T], out_shape: &[usize], input: Var, f: impl Fn(usize, usize) -> T) -> Vec<T> {
        let in_shape = self.shape(input);
        let mut acc = vec![T::zero(); numel(in_shape)];
        let (so, si) = (strides(out_shape), broadcast_strides(in_shape, out_shape));
        for_each_broadcast(out_shape, &so, &si, |_, o, i| acc[i] += g[o] * f(o, i));
        acc
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (
                    broadcast_strides(va.shape(), out_shape),
                    broadcast_strides(vb.shape(), out_shape),
                );
                // per-output-element partials, gathered through the broadcast map
                let mut da = vec![T::zero(); g.len()];
                let mut db = vec![T::zero(); g.len()];
                let (xa, xb) = (va.data(), vb.data());
                for_each_broadcast(out_shape, &sa, &sb, |o, ia, ib| {
                    let (p, q) = (xa[ia], xb[ib]);
                    let (pa, pb) = match kind {
                        Binary::Add => (T::one(), T::one()),
                        Binary::Sub => (T::one(), -T::one()),
                        Binary::Mul => (q, p),
                        Binary::Div => (T::one() / q, -p / (q * q)),
                    };
                    da[o] = pa;
                    db[o] = pb;
                });
                if self.requires_grad(*a) {
                    let ga = self.unbroadcast(g, out_shape, *a, |o, _| da[o]);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let gb = self.unbroadcast(g, out_shape, *b, |o, _| db[o]);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => {
                let ga = g.iter().map(|&v| v * *c).collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Reduce {
                input,
                mode,
                kept,
                argmax,
            } => {
                let in_shape = self.shape(*input);
                let mut gi = vec![T::zero(); numel(in_shape)];
                match mode {
                    Reduce::Max => {
                        for (o, &i) in argmax.iter().enumerate() {
                            gi[i] += g[o];
                        }
                    }
                    Reduce::Sum | Reduce::Mean => {
                        let scale = if *mode == Reduce::Mean {
                            T::one() / T::of((numel(in_shape) / numel(kept)) as f64)
                        } else {
                            T::one()
                        };
                        let (own, to_out) = (strides(in_shape), broadcast_strides(kept, in_shape));
                        for_each_broadcast(in_shape, &own, &to_out, |_, i, o| gi[i] = g[o] * scale);
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::MatMul(a, b, bt) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = out_shape[1];
                let bv = self.value(*b).data();
                if self.requires_grad(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    let tb = if *bt { Transpose::No } else { Transpose::Yes };
                    gemm(m, n, k, g, Transpose::No, bv, tb, &mut ga, false);
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data();
                    let mut gb = vec![T::zero(); k * n];
                    if *bt {
                        gemm(n, m, k, g, Transpose::Yes, av, Transpose::No, &mut gb, false);
                    } else {
                        gemm(k, m, n, av, Transpose::Yes, g, Transpose::No, &mut gb, false);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let want = (
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                    b.is_some_and(|b| self.requires_grad(b)),
                );
                let cg = ops::conv_backward(geom, self.value(*x).data(), self.value(*w).data(), g, want);
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, plane) = (out_shape[0], out_shape[1], out_shape[2] * out_shape[3]);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * plane;
                        for i in base..base + plane {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let gm = self.value(*gamma).data();
                    let count = T::of((n * plane) as f64);
                    let mut dx = vec![T::zero(); g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * plane;
                            let k = gm[ch] * inv_std[ch];
                            for i in base..base + plane {
                                dx[i] = if *batch_stats {
                                    k * (g[i] - dbeta[ch] / count - xhat[i] * dgamma[ch] / count)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Relu(a) => {
                let xa = self.value(*a).data();
                let ga = g
                    .iter()
                    .zip(xa)
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *a, ga);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::Narrow { input, axis, start } => {
                let in_shape = self.shape(*input);
                let (outer, extent, inner) = ops::axis_split(in_shape, *axis);
                let len = out_shape[*axis];
                let mut gi = vec![T::zero(); numel(in_shape)];
                for o in 0..outer {
                    let dst = (o * extent + start) * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = ops::axis_split(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let ext = self.shape(v)[*axis];
                    if self.requires_grad(v) {
                        let mut gi = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            gi.extend_from_slice(&g[src..src + ext * inner]);
                        }
                        self.accumulate(grads, v, gi);
                    }
                    offset += ext;
                }
            }
            Op::LogSoftmax(a) => {
                let cols = *out_shape.last().unwrap_or(&1);
                let y = node.value.data();
                let mut ga = vec![T::zero(); g.len()];
                for ((gr, yr), dr) in g.chunks(cols).zip(y.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let total: T = gr.iter().copied().sum();
                    for ((d, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = gv - yv.exp() * total;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = g.iter().zip(node.value.data()).map(|(&gv, &y)| gv * y).collect();
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

fn unreachable_shape(e: Error) -> ! {
    panic!("internal shape invariant violated: {e}")
}
