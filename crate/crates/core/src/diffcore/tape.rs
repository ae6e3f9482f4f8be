//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to its variables in creation
//! order, which is a topological order by construction. [`Tape::backward`]
//! consumes the tape and walks it once in reverse, accumulating adjoints.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::kernels::{self, ConvGeom};
use super::tensor::{gemm, transpose_last, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_TAPE: AtomicUsize = AtomicUsize::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: usize,
    index: usize,
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    Relu(usize),
    Abs(usize),
    Square(usize),
    Sigmoid(usize),
    Sum(usize),
    Mean(usize),
    Matmul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    TransposeLast {
        a: usize,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        inner: usize,
        sizes: Vec<usize>,
    },
    Slice {
        a: usize,
        outer: usize,
        inner: usize,
        axis_len: usize,
        start: usize,
        len: usize,
    },
    AddBias {
        x: usize,
        b: usize,
    },
    PolyConv {
        x: usize,
        theta: usize,
        lap: usize,
        basis: Vec<Vec<S>>,
        rows: usize,
        n: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    NormLaplacian {
        a: usize,
        inv_sqrt: Vec<S>,
        degree: Vec<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Operation record for one forward pass.
#[derive(Debug)]
pub struct Tape<S> {
    id: usize,
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable leaf (a parameter or an input under test).
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push_raw(value, true, Op::Leaf)
    }

    /// Registers a constant; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_raw(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.check(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Detached("variable is not recorded on this tape".into()));
        }
        Ok(v.index)
    }

    fn push_raw(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var { tape: self.id, index }
    }

    fn push(&mut self, name: &'static str, value: Tensor<S>, inputs: &[usize], op: Op<S>) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("forward {name}")));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_raw(value, requires_grad, op))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        self.same_shape(name, ia, ib)?;
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(name, out, &[ia, ib], op)
    }

    fn unary(&mut self, name: &'static str, a: Var, op: impl FnOnce(usize) -> Op<S>, f: impl Fn(S) -> S) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.nodes[ia].value.map(f);
        self.push(name, out, &[ia], op(ia))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (a.index, b.index);
        self.zip_map("add", a, b, Op::Add(ia, ib), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (a.index, b.index);
        self.zip_map("sub", a, b, Op::Sub(ia, ib), |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (a.index, b.index);
        self.zip_map("mul", a, b, Op::Mul(ia, ib), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        self.unary("scale", a, |i| Op::Scale(i, c), |x| x * c)
    }

    /// Rectifier with subgradient 0 at the origin.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, Op::Relu, |x| if x > S::zero() { x } else { S::zero() })
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, Op::Abs, |x| x.abs())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, Op::Square, |x| x * x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, Op::Sigmoid, |x| S::one() / (S::one() + (-x).exp()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), &[ia], Op::Sum(ia))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        let s: S = v.data().iter().copied().sum();
        let m = s / S::lit(v.len() as f64);
        self.push("mean", Tensor::scalar(m), &[ia], Op::Mean(ia))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = gemm(self.nodes[ia].value.data(), self.nodes[ib].value.data(), m, k, n);
        let out = Tensor::from_parts(vec![m, n], data);
        self.push("matmul", out, &[ia, ib], Op::Matmul { a: ia, b: ib, m, k, n })
    }

    /// Swaps the last two axes (matrix transpose for rank 2).
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].value.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Dimension {
                op: "transpose",
                detail: format!("needs rank >= 2, got {shape:?}"),
            });
        }
        let r = shape.len();
        let (rows, cols) = (shape[r - 2], shape[r - 1]);
        let batch = shape[..r - 2].iter().product();
        let data = transpose_last(self.nodes[ia].value.data(), batch, rows, cols);
        let mut out_shape = shape.clone();
        out_shape.swap(r - 2, r - 1);
        let out = Tensor::from_parts(out_shape, data);
        self.push("transpose", out, &[ia], Op::TransposeLast { a: ia, batch, rows, cols })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let v = &self.nodes[ia].value;
        if shape.iter().product::<usize>() != v.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: v.shape().to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        self.push("reshape", out, &[ia], Op::Reshape(ia))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let Some(&first) = idx.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let base = self.nodes[first].value.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension {
                op: "concat",
                detail: format!("axis {axis} out of range for {base:?}"),
            });
        }
        let mut sizes = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            let agrees = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !agrees {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            sizes.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&i, &sz) in idx.iter().zip(&sizes) {
                let src = self.nodes[i].value.data();
                data.extend_from_slice(&src[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data);
        self.push(
            "concat",
            out,
            &idx,
            Op::Concat {
                inputs: idx.clone(),
                outer,
                inner,
                sizes,
            },
        )
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let shape = self.nodes[ia].value.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Dimension {
                op: "slice",
                detail: format!("[{start}, {}) along axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, axis_len, inner) = split_axis(&shape, axis);
        let src = self.nodes[ia].value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let out = Tensor::from_parts(out_shape, data);
        self.push(
            "slice",
            out,
            &[ia],
            Op::Slice {
                a: ia,
                outer,
                inner,
                axis_len,
                start,
                len,
            },
        )
    }

    /// Adds `b[c]` to every entry of leading-axis slice `x[c, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(b)?);
        let (sx, sb) = (self.nodes[ix].value.shape(), self.nodes[ib].value.shape());
        if sx.is_empty() || sb != [sx[0]] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: sx.to_vec(),
                right: sb.to_vec(),
            });
        }
        let inner = self.nodes[ix].value.len() / sx[0];
        let bias = self.nodes[ib].value.data();
        let data = self.nodes[ix]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i / inner])
            .collect();
        let out = Tensor::from_parts(sx.to_vec(), data);
        self.push("add_bias", out, &[ix, ib], Op::AddBias { x: ix, b: ib })
    }

    /// Per-row polynomial graph filter.
    ///
    /// `x` is `[.., N]` with `R` leading rows, `theta` is `[.., K]` with the
    /// same leading extents, `lap` is `[N, N]`; row `r` of the result is
    /// `Σ_k theta[r, k] · lap^k · x[r]`.
    pub fn graph_poly_conv(&mut self, x: Var, theta: Var, lap: Var) -> Result<Var> {
        let (ix, it, il) = (self.check(x)?, self.check(theta)?, self.check(lap)?);
        let sx = self.nodes[ix].value.shape().to_vec();
        let st = self.nodes[it].value.shape().to_vec();
        let sl = self.nodes[il].value.shape().to_vec();
        let n = *sx.last().ok_or_else(|| Error::Dimension {
            op: "graph_poly_conv",
            detail: "signal must have rank >= 1".into(),
        })?;
        if sl != [n, n] {
            return Err(Error::ShapeMismatch {
                op: "graph_poly_conv",
                left: sx,
                right: sl,
            });
        }
        if st.len() != sx.len() || st[..st.len() - 1] != sx[..sx.len() - 1] || st[st.len() - 1] == 0 {
            return Err(Error::ShapeMismatch {
                op: "graph_poly_conv",
                left: sx,
                right: st,
            });
        }
        let k = st[st.len() - 1];
        let rows = self.nodes[ix].value.len() / n;
        let (out, basis) = kernels::poly_conv_forward(
            self.nodes[ix].value.data(),
            self.nodes[it].value.data(),
            self.nodes[il].value.data(),
            rows,
            n,
            k,
        );
        let out = Tensor::from_parts(sx, out);
        self.push(
            "graph_poly_conv",
            out,
            &[ix, it, il],
            Op::PolyConv {
                x: ix,
                theta: it,
                lap: il,
                basis,
                rows,
                n,
            },
        )
    }

    /// Same-padded 1-D convolution of `x: [c_in, rows, cols]` with
    /// `w: [c_in, c_out, width]` along `axis` (1 = rows, 2 = cols).
    pub fn conv1d_same(&mut self, x: Var, w: Var, axis: usize) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let sx = self.nodes[ix].value.shape().to_vec();
        let sw = self.nodes[iw].value.shape().to_vec();
        if sx.len() != 3 || sw.len() != 3 || sw[0] != sx[0] || !(axis == 1 || axis == 2) {
            return Err(Error::ShapeMismatch {
                op: "conv1d_same",
                left: sx,
                right: sw,
            });
        }
        let geom = ConvGeom {
            c_in: sx[0],
            c_out: sw[1],
            width: sw[2],
            rows: sx[1],
            cols: sx[2],
            axis,
        };
        let data = kernels::conv1d_forward(self.nodes[ix].value.data(), self.nodes[iw].value.data(), geom);
        let out = Tensor::from_parts(vec![geom.c_out, geom.rows, geom.cols], data);
        self.push("conv1d_same", out, &[ix, iw], Op::Conv1d { x: ix, w: iw, geom })
    }

    /// Normalized Laplacian `I − D^{-1/2} A D^{-1/2}` of a square matrix.
    pub fn normalized_laplacian(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let sa = self.nodes[ia].value.shape().to_vec();
        if sa.len() != 2 || sa[0] != sa[1] {
            return Err(Error::Dimension {
                op: "normalized_laplacian",
                detail: format!("needs a square matrix, got {sa:?}"),
            });
        }
        let n = sa[0];
        let (lap, inv_sqrt, degree) = kernels::norm_laplacian_forward(self.nodes[ia].value.data(), n);
        let out = Tensor::from_parts(sa, lap);
        self.push(
            "normalized_laplacian",
            out,
            &[ia],
            Op::NormLaplacian {
                a: ia,
                inv_sqrt,
                degree,
            },
        )
    }

    /// Consumes the tape and returns `∂loss/∂v` for every differentiable node.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        let il = self.check(loss)?;
        let lv = &self.nodes[il].value;
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[il].requires_grad {
            return Err(Error::Detached("loss does not depend on any differentiable leaf".into()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[il] = Some(Tensor::full(lv.shape(), S::one()));

        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if !g.all_finite() {
                return Err(Error::NonFinite("backward".into()));
            }
        }

        let leaf_grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| if matches!(n.op, Op::Leaf) && n.requires_grad { g } else { None })
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads: leaf_grads,
        })
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        let mut acc = |j: usize, t: Tensor<S>| accumulate(grads, j, t);
        let gd = g.data();
        let shaped = |j: usize, data: Vec<S>| Tensor::from_parts(nodes[j].value.shape().to_vec(), data);

        match &nodes[i].op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if wants(a) {
                    acc(a, g.clone());
                }
                if wants(b) {
                    acc(b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    acc(a, g.clone());
                }
                if wants(b) {
                    acc(b, g.map(|v| -v));
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
                if wants(a) {
                    acc(a, shaped(a, gd.iter().zip(vb).map(|(&x, &y)| x * y).collect()));
                }
                if wants(b) {
                    acc(b, shaped(b, gd.iter().zip(va).map(|(&x, &y)| x * y).collect()));
                }
            }
            &Op::Scale(a, c) => acc(a, g.map(|v| v * c)),
            &Op::Relu(a) => {
                let va = nodes[a].value.data();
                let d = gd
                    .iter()
                    .zip(va)
                    .map(|(&x, &y)| if y > S::zero() { x } else { S::zero() })
                    .collect();
                acc(a, shaped(a, d));
            }
            &Op::Abs(a) => {
                let va = nodes[a].value.data();
                let d = gd
                    .iter()
                    .zip(va)
                    .map(|(&x, &y)| {
                        if y > S::zero() {
                            x
                        } else if y < S::zero() {
                            -x
                        } else {
                            S::zero()
                        }
                    })
                    .collect();
                acc(a, shaped(a, d));
            }
            &Op::Square(a) => {
                let va = nodes[a].value.data();
                let two = S::lit(2.0);
                acc(a, shaped(a, gd.iter().zip(va).map(|(&x, &y)| two * x * y).collect()));
            }
            &Op::Sigmoid(a) => {
                let out = nodes[i].value.data();
                let d = gd.iter().zip(out).map(|(&x, &s)| x * s * (S::one() - s)).collect();
                acc(a, shaped(a, d));
            }
            &Op::Sum(a) => acc(a, Tensor::full(nodes[a].value.shape(), g.item())),
            &Op::Mean(a) => {
                let n = S::lit(nodes[a].value.len() as f64);
                acc(a, Tensor::full(nodes[a].value.shape(), g.item() / n));
            }
            &Op::Matmul { a, b, m, k, n } => {
                let (va, vb) = (nodes[a].value.data(), nodes[b].value.data());
                if wants(a) {
                    let bt = transpose_last(vb, 1, k, n);
                    acc(a, shaped(a, gemm(gd, &bt, m, n, k)));
                }
                if wants(b) {
                    let at = transpose_last(va, 1, m, k);
                    acc(b, shaped(b, gemm(&at, gd, k, m, n)));
                }
            }
            &Op::TransposeLast { a, batch, rows, cols } => {
                acc(a, shaped(a, transpose_last(gd, batch, cols, rows)));
            }
            &Op::Reshape(a) => acc(a, shaped(a, gd.to_vec())),
            Op::Concat {
                inputs,
                outer,
                inner,
                sizes,
            } => {
                let total: usize = sizes.iter().sum();
                let mut offset = 0;
                for (&j, &sz) in inputs.iter().zip(sizes) {
                    if wants(j) {
                        let mut d = Vec::with_capacity(outer * sz * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[base..base + sz * inner]);
                        }
                        acc(j, shaped(j, d));
                    }
                    offset += sz;
                }
            }
            &Op::Slice {
                a,
                outer,
                inner,
                axis_len,
                start,
                len,
            } => {
                let mut d = vec![S::zero(); outer * axis_len * inner];
                for o in 0..outer {
                    let dst = (o * axis_len + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                acc(a, shaped(a, d));
            }
            &Op::AddBias { x, b } => {
                if wants(x) {
                    acc(x, g.clone());
                }
                if wants(b) {
                    let c = nodes[b].value.len();
                    let inner = gd.len() / c;
                    let d = (0..c).map(|ch| gd[ch * inner..(ch + 1) * inner].iter().copied().sum()).collect();
                    acc(b, shaped(b, d));
                }
            }
            Op::PolyConv {
                x,
                theta,
                lap,
                basis,
                rows,
                n,
            } => {
                let (x, theta, lap) = (*x, *theta, *lap);
                let pg = kernels::poly_conv_backward(
                    basis,
                    nodes[theta].value.data(),
                    nodes[lap].value.data(),
                    gd,
                    *rows,
                    *n,
                    (wants(x), wants(theta), wants(lap)),
                );
                if let Some(d) = pg.x {
                    acc(x, shaped(x, d));
                }
                if let Some(d) = pg.theta {
                    acc(theta, shaped(theta, d));
                }
                if let Some(d) = pg.lap {
                    acc(lap, shaped(lap, d));
                }
            }
            &Op::Conv1d { x, w, geom } => {
                let (gx, gw) = kernels::conv1d_backward(
                    nodes[x].value.data(),
                    nodes[w].value.data(),
                    gd,
                    geom,
                    wants(x),
                    wants(w),
                );
                if let Some(d) = gx {
                    acc(x, shaped(x, d));
                }
                if let Some(d) = gw {
                    acc(w, shaped(w, d));
                }
            }
            Op::NormLaplacian { a, inv_sqrt, degree } => {
                let a = *a;
                let n = nodes[a].value.shape()[0];
                let d = kernels::norm_laplacian_backward(nodes[a].value.data(), inv_sqrt, degree, gd, n);
                acc(a, shaped(a, d));
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], j: usize, t: Tensor<S>) {
    match &mut grads[j] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

/// Adjoints of the differentiable leaves of a consumed tape.
#[derive(Debug)]
pub struct Gradients<S> {
    tape: usize,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for `v`; `None` when `v` is not a differentiable leaf or the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient for a leaf, or zeros of `shape` when the loss does not
    /// reach it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}
