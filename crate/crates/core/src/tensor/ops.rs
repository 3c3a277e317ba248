//! Raw kernels shared by the tape's forward and backward passes.

use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{gemm, Transpose};
use super::{numel, Element};

/// Geometry of a square-kernel 2-D cross-correlation over an NCHW batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_plane(&self) -> usize {
        self.h * self.w
    }
}

/// Output extent of a convolution, `None` when no window fits.
pub(crate) fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    if span < k || stride == 0 {
        None
    } else {
        Some((span - k) / stride + 1)
    }
}

/// Unfolds sample `x` into columns `[offset, offset + plane)` of every row of
/// `cols`, whose rows are `stride` long.
pub(crate) fn im2col<T: Element>(g: &ConvGeom, x: &[T], cols: &mut [T], stride: usize, offset: usize) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    for c in 0..g.in_c {
        let xc = &x[c * g.in_plane()..(c + 1) * g.in_plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * stride + offset..row * stride + offset + g.out_plane()];
                for oy in 0..g.out_h {
                    let iy = (oy * s) as isize + ky as isize - p;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - p;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto sample gradient `dx`.
pub(crate) fn col2im<T: Element>(g: &ConvGeom, cols: &[T], dx: &mut [T], stride: usize, offset: usize) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    for c in 0..g.in_c {
        let in_plane = g.in_plane();
        let dxc = &mut dx[c * in_plane..(c + 1) * in_plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * stride + offset..row * stride + offset + g.out_plane()];
                for oy in 0..g.out_h {
                    let iy = (oy * s) as isize + ky as isize - p;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * s) as isize + kx as isize - p;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Column matrix `[patch, batch·plane]` of the whole batch.
fn batch_cols<T: Element>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let (plane, wide) = (g.out_plane(), g.batch * g.out_plane());
    let in_len = g.in_c * g.in_plane();
    let mut cols = vec![T::zero(); g.patch() * wide];
    for n in 0..g.batch {
        im2col(g, &x[n * in_len..(n + 1) * in_len], &mut cols, wide, n * plane);
    }
    cols
}

/// `[N, C, P]` ↔ `[C, N·P]`.
fn swap_batch_channel<T: Element>(src: &[T], n: usize, c: usize, plane: usize, to_wide: bool) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for s in 0..n {
        for ch in 0..c {
            let nchw = (s * c + ch) * plane;
            let wide = ch * n * plane + s * plane;
            let (from, to) = if to_wide { (nchw, wide) } else { (wide, nchw) };
            out[to..to + plane].copy_from_slice(&src[from..from + plane]);
        }
    }
    out
}

pub(crate) fn conv_forward<T: Element>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let plane = g.out_plane();
    let wide = g.batch * plane;
    let cols = batch_cols(g, x);
    let mut out_wide = vec![T::zero(); g.out_c * wide];
    gemm(g.out_c, g.patch(), wide, w, Transpose::No, &cols, Transpose::No, &mut out_wide, false);
    if let Some(b) = b {
        for (row, &bias) in out_wide.chunks_mut(wide).zip(b) {
            row.iter_mut().for_each(|v| *v += bias);
        }
    }
    swap_batch_channel(&out_wide, g.batch, g.out_c, plane, false)
}

/// Gradients of a convolution; each requested buffer is returned freshly
/// allocated.
pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub(crate) fn conv_backward<T: Element>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dout: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let plane = g.out_plane();
    let wide = g.batch * plane;
    let in_len = g.in_c * g.in_plane();
    let dout_wide = swap_batch_channel(dout, g.batch, g.out_c, plane, true);
    let dw = want.1.then(|| {
        let cols = batch_cols(g, x);
        let mut dw = vec![T::zero(); g.out_c * g.patch()];
        gemm(g.out_c, wide, g.patch(), &dout_wide, Transpose::No, &cols, Transpose::Yes, &mut dw, false);
        dw
    });
    let db = want
        .2
        .then(|| dout_wide.chunks(wide).map(|row| row.iter().copied().sum::<T>()).collect());
    let dx = want.0.then(|| {
        let mut dcols = vec![T::zero(); g.patch() * wide];
        gemm(g.patch(), g.out_c, wide, w, Transpose::Yes, &dout_wide, Transpose::No, &mut dcols, false);
        let mut dx = vec![T::zero(); g.batch * in_len];
        for n in 0..g.batch {
            col2im(g, &dcols, &mut dx[n * in_len..(n + 1) * in_len], wide, n * plane);
        }
        dx
    });
    ConvGrads { dx, dw, db }
}

/// `(outer, extent, inner)` split of `shape` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

/// Row-wise log-softmax over the last axis with max subtraction.
pub(crate) fn log_softmax_rows<T: Element>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (row, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = v - lse;
        }
    }
    out
}
