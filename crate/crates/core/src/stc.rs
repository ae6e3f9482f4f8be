//! Factorized spatio-temporal graph convolution.
//!
//! A layer filters every `(channel, timestep)` graph frame with its own
//! polynomial in the Laplacian, then mixes channels with a same-padded
//! convolution along time. Input `C_in × T × N` becomes `C_out × T × N`.

use rand::Rng;

use crate::diffcore::{poly_filter_uniform, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graphops::GraphLaplacian;
use crate::scalar::Scalar;

const THETA_NOISE: f64 = 0.3;

/// Rank-3 `channels × time × nodes` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor<S>(Tensor<S>);

impl<S: Scalar> FeatureTensor<S> {
    pub fn new(channels: usize, steps: usize, nodes: usize, data: Vec<S>) -> Result<Self> {
        let t = Tensor::new(vec![channels, steps, nodes], data)?;
        Self::from_tensor(t)
    }

    pub fn zeros(channels: usize, steps: usize, nodes: usize) -> Self {
        Self(Tensor::zeros(&[channels, steps, nodes]))
    }

    pub fn from_tensor(t: Tensor<S>) -> Result<Self> {
        if t.rank() != 3 {
            return Err(Error::Dimension {
                op: "FeatureTensor",
                detail: format!("expected rank 3, got {:?}", t.shape()),
            });
        }
        if !t.all_finite() {
            return Err(Error::NonFinite("feature tensor".into()));
        }
        Ok(Self(t))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn nodes(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn at(&self, c: usize, p: usize, n: usize) -> S {
        self.0.get(&[c, p, n])
    }

    pub fn set(&mut self, c: usize, p: usize, n: usize, v: S) {
        self.0.set(&[c, p, n], v);
    }

    /// The `nodes`-long graph signal at `(c, p)`.
    pub fn frame(&self, c: usize, p: usize) -> &[S] {
        let n = self.nodes();
        let off = (c * self.steps() + p) * n;
        &self.0.data()[off..off + n]
    }

    pub fn as_tensor(&self) -> &Tensor<S> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.0
    }

    /// Relabels nodes: output node `i` carries input node `perm[i]`.
    pub fn permute_nodes(&self, perm: &[usize]) -> Self {
        let (c, t, n) = (self.channels(), self.steps(), self.nodes());
        let mut out = Self::zeros(c, t, n);
        for ci in 0..c {
            for p in 0..t {
                for (i, &src) in perm.iter().enumerate() {
                    out.set(ci, p, i, self.at(ci, p, src));
                }
            }
        }
        out
    }
}

/// Concrete tensors of one layer, for use outside a model.
#[derive(Clone, Debug, PartialEq)]
pub struct StcLayerParams<S> {
    /// `C_in × T × K`
    pub spatial_theta: Tensor<S>,
    /// `C_in × C_out × Q`, `Q` odd
    pub temporal_kernel: Tensor<S>,
    /// `C_out`
    pub bias: Option<Tensor<S>>,
}

impl<S: Scalar> StcLayerParams<S> {
    /// Identity spatial filter (`K = 1`, `θ = 1`) and centered delta kernel.
    pub fn identity(channels: usize, steps: usize, q: usize) -> Self {
        let spatial_theta = Tensor::full(&[channels, steps, 1], S::one());
        let mut temporal_kernel = Tensor::zeros(&[channels, channels, q]);
        for c in 0..channels {
            temporal_kernel.set(&[c, c, q / 2], S::one());
        }
        Self {
            spatial_theta,
            temporal_kernel,
            bias: None,
        }
    }

    /// Evaluates the layer on constant inputs.
    pub fn forward(&self, x: &FeatureTensor<S>, laplacian: &GraphLaplacian<S>) -> Result<FeatureTensor<S>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.as_tensor().clone());
        let th = tape.constant(self.spatial_theta.clone());
        let kv = tape.constant(self.temporal_kernel.clone());
        let bv = self.bias.as_ref().map(|b| tape.constant(b.clone()));
        let lv = tape.constant(laplacian.as_tensor().clone());
        let out = stc_forward(&mut tape, xv, th, kv, bv, lv)?;
        FeatureTensor::from_tensor(tape.value(out).clone())
    }
}

fn axis_mismatch(op: &'static str, axis: &str, expected: usize, got: usize) -> Error {
    Error::Dimension {
        op,
        detail: format!("{axis} axis: expected {expected}, got {got}"),
    }
}

/// `Z[c,p,:] = Σ_k θ[c,p,k] L^k X[c,p,:]` for every channel and timestep.
pub fn spatial_stage<S: Scalar>(tape: &mut Tape<S>, x: Var, theta: Var, laplacian: Var) -> Result<Var> {
    let sx = tape.shape(x).to_vec();
    let st = tape.shape(theta).to_vec();
    let sl = tape.shape(laplacian).to_vec();
    if sx.len() != 3 {
        return Err(Error::Dimension {
            op: "spatial_stage",
            detail: format!("input must be C x T x N, got {sx:?}"),
        });
    }
    if st.len() != 3 {
        return Err(Error::Dimension {
            op: "spatial_stage",
            detail: format!("theta must be C x T x K, got {st:?}"),
        });
    }
    if st[0] != sx[0] {
        return Err(axis_mismatch("spatial_stage", "channel", sx[0], st[0]));
    }
    if st[1] != sx[1] {
        return Err(axis_mismatch("spatial_stage", "time", sx[1], st[1]));
    }
    if sl != [sx[2], sx[2]] {
        return Err(axis_mismatch("spatial_stage", "node", sx[2], sl[0]));
    }
    tape.graph_poly_conv(x, theta, laplacian)
}

/// Same-padded convolution along time with a `C_in × C_out × Q` kernel,
/// plus an optional per-output-channel bias.
pub fn temporal_stage<S: Scalar>(tape: &mut Tape<S>, z: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
    let sz = tape.shape(z).to_vec();
    let sk = tape.shape(kernel).to_vec();
    if sz.len() != 3 || sk.len() != 3 {
        return Err(Error::Dimension {
            op: "temporal_stage",
            detail: format!("input {sz:?} / kernel {sk:?} must both be rank 3"),
        });
    }
    if sk[2] % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "temporal kernel width Q = {} must be odd to preserve the time extent",
            sk[2]
        )));
    }
    if sk[0] != sz[0] {
        return Err(axis_mismatch("temporal_stage", "channel", sz[0], sk[0]));
    }
    let out = tape.conv1d_same(z, kernel, 1)?;
    match bias {
        Some(b) => tape.add_bias(out, b),
        None => Ok(out),
    }
}

/// One full layer: [`spatial_stage`] followed by [`temporal_stage`].
pub fn stc_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    theta: Var,
    kernel: Var,
    bias: Option<Var>,
    laplacian: Var,
) -> Result<Var> {
    let z = spatial_stage(tape, x, theta, laplacian)?;
    temporal_stage(tape, z, kernel, bias)
}

/// A layer whose tensors live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct StcLayer {
    pub theta: ParamId,
    pub kernel: ParamId,
    pub bias: Option<ParamId>,
    pub c_in: usize,
    pub c_out: usize,
    pub steps: usize,
}

impl StcLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        steps: usize,
        k: usize,
        q: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if q % 2 == 0 {
            return Err(Error::Config(format!("temporal window Q = {q} must be odd")));
        }
        if k == 0 {
            return Err(Error::Config("polynomial order K must be >= 1".into()));
        }
        let theta = store.insert(
            format!("{prefix}.spatial_theta"),
            poly_filter_uniform(&[c_in, steps, k], THETA_NOISE, rng),
        )?;
        let kernel = store.insert_glorot(
            format!("{prefix}.temporal_kernel"),
            &[c_in, c_out, q],
            c_in * q,
            c_out * q,
            rng,
        )?;
        let bias = if bias {
            Some(store.insert_zeros(format!("{prefix}.bias"), &[c_out])?)
        } else {
            None
        };
        Ok(Self {
            theta,
            kernel,
            bias,
            c_in,
            c_out,
            steps,
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, params: &Bound, x: Var, laplacian: Var) -> Result<Var> {
        stc_forward(
            tape,
            x,
            params.var(self.theta),
            params.var(self.kernel),
            self.bias.map(|b| params.var(b)),
            laplacian,
        )
    }

    pub fn params<S: Scalar>(&self, store: &ParamStore<S>) -> StcLayerParams<S> {
        StcLayerParams {
            spatial_theta: store.get(self.theta).clone(),
            temporal_kernel: store.get(self.kernel).clone(),
            bias: self.bias.map(|b| store.get(b).clone()),
        }
    }
}
