//! Forward and adjoint kernels for the fused tape operations.
//!
//! Every kernel here has a verbatim primitive-composition equivalent; the
//! fused form only avoids materializing intermediates on the tape.

use super::tensor::{gemm, transpose_last};
use crate::scalar::Scalar;

/// Geometry of a same-padded 1-D convolution over one spatial axis of a
/// `[c_in, rows, cols]` input with a `[c_in, c_out, width]` kernel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub width: usize,
    pub rows: usize,
    pub cols: usize,
    /// `1` convolves along rows (time in `[C,T,N]`), `2` along columns.
    pub axis: usize,
}

impl ConvGeom {
    /// Left padding; odd widths pad symmetrically, even widths pad one more
    /// on the right.
    fn pad_left(&self) -> isize {
        ((self.width - 1) / 2) as isize
    }

    /// Valid output range `[lo, hi)` along the convolved axis for tap `u`,
    /// together with the source offset.
    fn span(&self, u: usize) -> (usize, usize, isize) {
        let len = if self.axis == 1 { self.rows } else { self.cols } as isize;
        let shift = u as isize - self.pad_left();
        let lo = (-shift).clamp(0, len);
        let hi = (len - shift).clamp(lo, len);
        (lo as usize, hi as usize, shift)
    }
}

/// Unfolds `x` into a `(c_in·width) × plane` matrix whose row `(ci, u)` holds
/// the input seen by tap `u`, with zeros where the tap falls in the padding.
fn im2col<S: Scalar>(x: &[S], g: ConvGeom) -> Vec<S> {
    let plane = g.rows * g.cols;
    let mut col = vec![S::zero(); g.c_in * g.width * plane];
    for ci in 0..g.c_in {
        let xp = &x[ci * plane..(ci + 1) * plane];
        for u in 0..g.width {
            let dst = &mut col[(ci * g.width + u) * plane..(ci * g.width + u + 1) * plane];
            let (lo, hi, shift) = g.span(u);
            if g.axis == 2 {
                for i in 0..g.rows {
                    let s0 = (i * g.cols) as isize + shift;
                    let src = &xp[(s0 + lo as isize) as usize..(s0 + hi as isize) as usize];
                    dst[i * g.cols + lo..i * g.cols + hi].copy_from_slice(src);
                }
            } else if lo < hi {
                let s0 = ((lo as isize + shift) as usize) * g.cols;
                let len = (hi - lo) * g.cols;
                dst[lo * g.cols..lo * g.cols + len].copy_from_slice(&xp[s0..s0 + len]);
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatter-adds a column matrix back onto the input.
fn col2im<S: Scalar>(col: &[S], g: ConvGeom) -> Vec<S> {
    let plane = g.rows * g.cols;
    let mut x = vec![S::zero(); g.c_in * plane];
    for ci in 0..g.c_in {
        let xp = &mut x[ci * plane..(ci + 1) * plane];
        for u in 0..g.width {
            let src = &col[(ci * g.width + u) * plane..(ci * g.width + u + 1) * plane];
            let (lo, hi, shift) = g.span(u);
            if g.axis == 2 {
                for i in 0..g.rows {
                    let s0 = (i * g.cols) as isize + shift;
                    let dst = &mut xp[(s0 + lo as isize) as usize..(s0 + hi as isize) as usize];
                    for (d, &v) in dst.iter_mut().zip(&src[i * g.cols + lo..i * g.cols + hi]) {
                        *d += v;
                    }
                }
            } else if lo < hi {
                let s0 = ((lo as isize + shift) as usize) * g.cols;
                let len = (hi - lo) * g.cols;
                for (d, &v) in xp[s0..s0 + len].iter_mut().zip(&src[lo * g.cols..lo * g.cols + len]) {
                    *d += v;
                }
            }
        }
    }
    x
}

/// `[c_in, c_out, width]` kernel as a `c_out × (c_in·width)` matrix.
fn kernel_matrix<S: Scalar>(w: &[S], g: ConvGeom) -> Vec<S> {
    let k = g.c_in * g.width;
    let mut m = vec![S::zero(); g.c_out * k];
    for ci in 0..g.c_in {
        for co in 0..g.c_out {
            for u in 0..g.width {
                m[co * k + ci * g.width + u] = w[(ci * g.c_out + co) * g.width + u];
            }
        }
    }
    m
}

pub(crate) fn conv1d_forward<S: Scalar>(x: &[S], w: &[S], g: ConvGeom) -> Vec<S> {
    let col = im2col(x, g);
    gemm(&kernel_matrix(w, g), &col, g.c_out, g.c_in * g.width, g.rows * g.cols)
}

/// Adjoint of [`conv1d_forward`]: returns `(grad_x, grad_w)`, each only when
/// requested.
pub(crate) fn conv1d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    gout: &[S],
    g: ConvGeom,
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let plane = g.rows * g.cols;
    let k = g.c_in * g.width;
    let gw = want_w.then(|| {
        let col_t = transpose_last(&im2col(x, g), 1, k, plane);
        let gm = gemm(gout, &col_t, g.c_out, plane, k);
        let mut gw = vec![S::zero(); w.len()];
        for ci in 0..g.c_in {
            for co in 0..g.c_out {
                for u in 0..g.width {
                    gw[(ci * g.c_out + co) * g.width + u] = gm[co * k + ci * g.width + u];
                }
            }
        }
        gw
    });
    let gx = want_x.then(|| {
        let wt = transpose_last(&kernel_matrix(w, g), 1, g.c_out, k);
        col2im(&gemm(&wt, gout, k, g.c_out, plane), g)
    });
    (gx, gw)
}

/// Polynomial graph filter applied row-wise: `out[r] = Σ_k θ[r,k] L^k x[r]`.
///
/// Returns the output and the Krylov basis `[x, Lx, …, L^{K-1}x]` (each
/// `rows × n`), built by repeated mat-vec products.
pub(crate) fn poly_conv_forward<S: Scalar>(
    x: &[S],
    theta: &[S],
    lap: &[S],
    rows: usize,
    n: usize,
    k: usize,
) -> (Vec<S>, Vec<Vec<S>>) {
    let lap_t = transpose_last(lap, 1, n, n);
    let mut basis = Vec::with_capacity(k);
    basis.push(x.to_vec());
    for _ in 1..k {
        let next = gemm(basis.last().unwrap(), &lap_t, rows, n, n);
        basis.push(next);
    }
    let mut out = vec![S::zero(); rows * n];
    for (order, b) in basis.iter().enumerate() {
        for r in 0..rows {
            let c = theta[r * k + order];
            for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(&b[r * n..(r + 1) * n]) {
                *o += c * v;
            }
        }
    }
    (out, basis)
}

pub(crate) struct PolyGrads<S> {
    pub x: Option<Vec<S>>,
    pub theta: Option<Vec<S>>,
    pub lap: Option<Vec<S>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn poly_conv_backward<S: Scalar>(
    basis: &[Vec<S>],
    theta: &[S],
    lap: &[S],
    gout: &[S],
    rows: usize,
    n: usize,
    want: (bool, bool, bool),
) -> PolyGrads<S> {
    let k = basis.len();
    let (want_x, want_theta, want_lap) = want;
    let theta_grad = want_theta.then(|| {
        let mut gt = vec![S::zero(); rows * k];
        for (order, b) in basis.iter().enumerate() {
            for r in 0..rows {
                gt[r * k + order] = gout[r * n..(r + 1) * n]
                    .iter()
                    .zip(&b[r * n..(r + 1) * n])
                    .map(|(&a, &v)| a * v)
                    .sum();
            }
        }
        gt
    });
    if !want_x && !want_lap {
        return PolyGrads {
            x: None,
            theta: theta_grad,
            lap: None,
        };
    }

    let scaled = |order: usize| -> Vec<S> {
        let mut h = vec![S::zero(); rows * n];
        for r in 0..rows {
            let c = theta[r * k + order];
            for (d, &gv) in h[r * n..(r + 1) * n].iter_mut().zip(&gout[r * n..(r + 1) * n]) {
                *d = c * gv;
            }
        }
        h
    };

    // Adjoint of B_{j+1} = B_j Lᵀ, walked from the highest order down.
    let mut h = scaled(k - 1);
    let mut glap = want_lap.then(|| vec![S::zero(); n * n]);
    for order in (0..k - 1).rev() {
        if let Some(gl) = glap.as_mut() {
            let ht = transpose_last(&h, 1, rows, n);
            let contrib = gemm(&ht, &basis[order], n, rows, n);
            for (a, b) in gl.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        let mut prev = gemm(&h, lap, rows, n, n);
        let own = scaled(order);
        for (a, b) in prev.iter_mut().zip(own) {
            *a += b;
        }
        h = prev;
    }
    PolyGrads {
        x: want_x.then_some(h),
        theta: theta_grad,
        lap: glap,
    }
}

/// `L = I − D^{-1/2} A D^{-1/2}` with the zero-degree rows mapped to identity
/// rows. Returns `(L, d^{-1/2}, d)`.
pub(crate) fn norm_laplacian_forward<S: Scalar>(a: &[S], n: usize) -> (Vec<S>, Vec<S>, Vec<S>) {
    let degree: Vec<S> = (0..n).map(|i| a[i * n..(i + 1) * n].iter().copied().sum()).collect();
    let inv_sqrt: Vec<S> = degree
        .iter()
        .map(|&d| if d > S::zero() { d.sqrt().recip() } else { S::zero() })
        .collect();
    let mut lap = vec![S::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let m = a[i * n + j] * (inv_sqrt[i] * inv_sqrt[j]);
            lap[i * n + j] = if i == j { S::one() - m } else { -m };
        }
    }
    (lap, inv_sqrt, degree)
}

pub(crate) fn norm_laplacian_backward<S: Scalar>(
    a: &[S],
    inv_sqrt: &[S],
    degree: &[S],
    gout: &[S],
    n: usize,
) -> Vec<S> {
    let half = S::lit(0.5);
    let mut ga = vec![S::zero(); n * n];
    let mut g_inv = vec![S::zero(); n];
    for i in 0..n {
        for j in 0..n {
            let gm = -gout[i * n + j];
            ga[i * n + j] = gm * inv_sqrt[i] * inv_sqrt[j];
            g_inv[i] += gm * a[i * n + j] * inv_sqrt[j];
            g_inv[j] += gm * inv_sqrt[i] * a[i * n + j];
        }
    }
    for i in 0..n {
        if degree[i] > S::zero() {
            // d(d^{-1/2})/dd = -½ d^{-3/2}
            let gd = g_inv[i] * (-half) * inv_sqrt[i] * inv_sqrt[i] * inv_sqrt[i];
            for j in 0..n {
                ga[i * n + j] += gd;
            }
        }
    }
    ga
}
