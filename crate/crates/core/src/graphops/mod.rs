//! Graph construction from travel times and localized spectral filtering.
//!
//! Affinities are `exp(−T/σ)` of the symmetrized travel-time matrix, the
//! operator is the normalized Laplacian, and filters are polynomials in the
//! Laplacian applied by repeated mat-vec products.

mod spectral;

pub use spectral::{spectral_conv_oracle, symmetric_eigen, SymmetricEigen};

use crate::diffcore::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Square `N×N` row-major matrix checked on construction.
fn square_from<S: Scalar>(op: &'static str, n: usize, data: Vec<S>) -> Result<Tensor<S>> {
    if n == 0 || data.len() != n * n {
        return Err(Error::Dimension {
            op,
            detail: format!("expected {n}x{n} = {} entries, got {}", n * n, data.len()),
        });
    }
    Tensor::new(vec![n, n], data)
}

/// Pairwise travel times in seconds. Entries are finite and nonnegative and
/// the diagonal is zero.
#[derive(Clone, Debug, PartialEq)]
pub struct TravelTimeMatrix<S> {
    times: Tensor<S>,
}

impl<S: Scalar> TravelTimeMatrix<S> {
    pub fn new(n: usize, data: Vec<S>) -> Result<Self> {
        let times = square_from("TravelTimeMatrix", n, data)?;
        for i in 0..n {
            for j in 0..n {
                let t = times.data()[i * n + j];
                if !t.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "travel time ({i},{j}) is not finite; encode unreachable pairs with a sentinel"
                    )));
                }
                if t < S::zero() {
                    return Err(Error::InvalidArgument(format!("negative travel time {t} at ({i},{j})")));
                }
                if i == j && t != S::zero() {
                    return Err(Error::InvalidArgument(format!("diagonal travel time at {i} must be 0, got {t}")));
                }
            }
        }
        Ok(Self { times })
    }

    /// Builds a matrix from raw entries where `None` or non-finite marks an
    /// unreachable pair; those become `unreachable_factor ×` the largest
    /// finite off-diagonal time (or `fallback` if there is none).
    pub fn with_unreachable(n: usize, raw: &[Option<S>], unreachable_factor: S, fallback: S) -> Result<Self> {
        if raw.len() != n * n {
            return Err(Error::Dimension {
                op: "TravelTimeMatrix",
                detail: format!("expected {} entries, got {}", n * n, raw.len()),
            });
        }
        let finite = |v: &Option<S>| v.filter(|t| t.is_finite());
        let max = raw
            .iter()
            .enumerate()
            .filter(|(k, _)| k / n != k % n)
            .filter_map(|(_, v)| finite(v))
            .fold(None, |m: Option<S>, t| Some(m.map_or(t, |m| m.max(t))));
        let sentinel = max.map_or(fallback, |m| m * unreachable_factor);
        let data = raw
            .iter()
            .enumerate()
            .map(|(k, v)| if k / n == k % n { S::zero() } else { finite(v).unwrap_or(sentinel) })
            .collect();
        Self::new(n, data)
    }

    pub fn nodes(&self) -> usize {
        self.times.shape()[0]
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.times.data()[i * self.nodes() + j]
    }

    pub fn as_tensor(&self) -> &Tensor<S> {
        &self.times
    }
}

/// Symmetric affinity with entries in `(0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityMatrix<S> {
    affinity: Tensor<S>,
    sigma: S,
}

impl<S: Scalar> AffinityMatrix<S> {
    /// Wraps an existing affinity, e.g. a model prediction or an average.
    ///
    /// Requires exact symmetry and entries in `[0, 1]` (zero allowed so that
    /// diagonal-zeroed or edgeless graphs can be represented).
    pub fn from_tensor(affinity: Tensor<S>, sigma: S) -> Result<Self> {
        let s = affinity.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::Dimension {
                op: "AffinityMatrix",
                detail: format!("expected square matrix, got {s:?}"),
            });
        }
        let n = s[0];
        let d = affinity.data();
        for i in 0..n {
            for j in 0..n {
                let a = d[i * n + j];
                if !(a >= S::zero() && a <= S::one()) {
                    return Err(Error::InvalidArgument(format!("affinity ({i},{j}) = {a} outside [0, 1]")));
                }
                if a != d[j * n + i] {
                    return Err(Error::InvalidArgument(format!("affinity is not symmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { affinity, sigma })
    }

    pub fn nodes(&self) -> usize {
        self.affinity.shape()[0]
    }

    pub fn sigma(&self) -> S {
        self.sigma
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.affinity.data()[i * self.nodes() + j]
    }

    pub fn as_tensor(&self) -> &Tensor<S> {
        &self.affinity
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.affinity
    }

    /// Copy with the self-loops removed.
    pub fn without_self_loops(&self) -> Self {
        let n = self.nodes();
        let mut a = self.affinity.clone();
        for i in 0..n {
            a.data_mut()[i * n + i] = S::zero();
        }
        Self {
            affinity: a,
            sigma: self.sigma,
        }
    }
}

/// `A_ij = exp(−((T_ij + T_ji)/2) / σ)`.
pub fn affinity_from_travel_time<S: Scalar>(times: &TravelTimeMatrix<S>, sigma: S) -> Result<AffinityMatrix<S>> {
    if !(sigma > S::zero()) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let n = times.nodes();
    let half = S::lit(0.5);
    let mut data = vec![S::zero(); n * n];
    for i in 0..n {
        for j in i..n {
            let t = (times.get(i, j) + times.get(j, i)) * half;
            let a = (-t / sigma).exp();
            data[i * n + j] = a;
            data[j * n + i] = a;
        }
    }
    Ok(AffinityMatrix {
        affinity: Tensor::from_parts(vec![n, n], data),
        sigma,
    })
}

/// Normalized Laplacian with its degree vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphLaplacian<S> {
    laplacian: Tensor<S>,
    degree: Vec<S>,
}

impl<S: Scalar> GraphLaplacian<S> {
    pub fn nodes(&self) -> usize {
        self.degree.len()
    }

    pub fn degree(&self) -> &[S] {
        &self.degree
    }

    pub fn get(&self, i: usize, j: usize) -> S {
        self.laplacian.data()[i * self.nodes() + j]
    }

    pub fn as_tensor(&self) -> &Tensor<S> {
        &self.laplacian
    }

    /// `y = L x`
    pub fn apply(&self, x: &[S]) -> Vec<S> {
        let n = self.nodes();
        gemm(self.laplacian.data(), x, n, n, 1)
    }

    /// Relabels nodes: entry `(i, j)` of the result is `L[perm[i], perm[j]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.nodes();
        let mut data = vec![S::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = self.get(perm[i], perm[j]);
            }
        }
        Self {
            laplacian: Tensor::from_parts(vec![n, n], data),
            degree: perm.iter().map(|&p| self.degree[p]).collect(),
        }
    }
}

const SYMMETRY_TOL: f64 = 1e-12;

/// `L = I − D^{-1/2} A D^{-1/2}`; a node with zero degree gets an identity
/// row (`L_ii = 1`, off-diagonal 0).
pub fn normalized_laplacian<S: Scalar>(affinity: &AffinityMatrix<S>) -> Result<GraphLaplacian<S>> {
    laplacian_of(affinity.as_tensor())
}

/// Same as [`normalized_laplacian`] for a raw square tensor. Rejects
/// asymmetry beyond `1e-12` and negative entries.
pub fn laplacian_of<S: Scalar>(a: &Tensor<S>) -> Result<GraphLaplacian<S>> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::Dimension {
            op: "normalized_laplacian",
            detail: format!("expected square matrix, got {s:?}"),
        });
    }
    let n = s[0];
    let d = a.data();
    let tol = S::lit(SYMMETRY_TOL);
    for i in 0..n {
        for j in 0..n {
            if d[i * n + j] < S::zero() {
                return Err(Error::InvalidArgument(format!("negative affinity at ({i},{j})")));
            }
            if (d[i * n + j] - d[j * n + i]).abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "normalized_laplacian: affinity is not symmetric at ({i},{j})"
                )));
            }
        }
    }
    let (lap, _, degree) = crate::diffcore::kernels::norm_laplacian_forward(d, n);
    Ok(GraphLaplacian {
        laplacian: Tensor::from_parts(vec![n, n], lap),
        degree,
    })
}

/// Polynomial coefficients `θ_0 … θ_{K−1}` of a localized filter.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFilter<S> {
    theta: Vec<S>,
}

impl<S: Scalar> SpectralFilter<S> {
    pub fn new(theta: Vec<S>) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::InvalidArgument("filter order K must be >= 1".into()));
        }
        Ok(Self { theta })
    }

    pub fn order(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[S] {
        &self.theta
    }

    /// Frequency response `w(λ) = Σ_k θ_k λ^k`.
    pub fn response(&self, lambda: S) -> S {
        self.theta.iter().rev().fold(S::zero(), |acc, &c| acc * lambda + c)
    }
}

/// `Σ_k θ_k L^k x`, evaluated as `y_0 = x`, `y_{k+1} = L y_k`.
pub fn spatial_graph_conv<S: Scalar>(x: &[S], laplacian: &GraphLaplacian<S>, filter: &SpectralFilter<S>) -> Result<Vec<S>> {
    let n = laplacian.nodes();
    if x.len() != n {
        return Err(Error::Dimension {
            op: "spatial_graph_conv",
            detail: format!("signal has {} entries for a {n}-node graph", x.len()),
        });
    }
    let theta = filter.theta();
    let mut out: Vec<S> = x.iter().map(|&v| theta[0] * v).collect();
    let mut y = x.to_vec();
    for &c in &theta[1..] {
        y = laplacian.apply(&y);
        for (o, &v) in out.iter_mut().zip(&y) {
            *o += c * v;
        }
    }
    Ok(out)
}

/// Median of the finite off-diagonal entries of a sequence of travel-time
/// matrices; the default affinity bandwidth.
pub fn median_travel_time<'a, S: Scalar>(mats: impl IntoIterator<Item = &'a TravelTimeMatrix<S>>) -> Option<S> {
    let mut vals: Vec<S> = Vec::new();
    for m in mats {
        let n = m.nodes();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    vals.push(m.get(i, j));
                }
            }
        }
    }
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite travel times"));
    let mid = vals.len() / 2;
    Some(if vals.len() % 2 == 1 {
        vals[mid]
    } else {
        (vals[mid - 1] + vals[mid]) * S::lit(0.5)
    })
}
