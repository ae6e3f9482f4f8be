//! Eigendecomposition-based graph Fourier filtering.
//!
//! Used only to verify the polynomial filters; nothing on the training path
//! calls into this module.

use nalgebra::{DMatrix, DVector, RealField};

use super::GraphLaplacian;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `L = U diag(λ) Uᵀ` with eigenvectors as the columns of `U`.
#[derive(Clone, Debug)]
pub struct SymmetricEigen<S: Scalar + RealField> {
    pub eigenvalues: Vec<S>,
    pub eigenvectors: DMatrix<S>,
}

pub fn symmetric_eigen<S: Scalar + RealField>(laplacian: &GraphLaplacian<S>) -> Result<SymmetricEigen<S>> {
    let n = laplacian.nodes();
    let m = DMatrix::from_row_slice(n, n, laplacian.as_tensor().data());
    let eig = nalgebra::SymmetricEigen::try_new(m, S::lit(1e-15), 10_000).ok_or(Error::EigenConvergence)?;
    Ok(SymmetricEigen {
        eigenvalues: eig.eigenvalues.iter().copied().collect(),
        eigenvectors: eig.eigenvectors,
    })
}

/// Filters `x` in the graph frequency domain: project onto the eigenbasis,
/// scale coefficient `i` by `response[i]`, and transform back.
pub fn spectral_conv_oracle<S: Scalar + RealField>(
    x: &[S],
    laplacian: &GraphLaplacian<S>,
    response: &[S],
) -> Result<Vec<S>> {
    let n = laplacian.nodes();
    if x.len() != n || response.len() != n {
        return Err(Error::Dimension {
            op: "spectral_conv_oracle",
            detail: format!("signal {} / response {} for a {n}-node graph", x.len(), response.len()),
        });
    }
    let eig = symmetric_eigen(laplacian)?;
    Ok(filter_in_basis(&eig, x, response))
}

/// Same as [`spectral_conv_oracle`] with a precomputed decomposition.
pub(crate) fn filter_in_basis<S: Scalar + RealField>(eig: &SymmetricEigen<S>, x: &[S], response: &[S]) -> Vec<S> {
    let u = &eig.eigenvectors;
    let xv = DVector::from_column_slice(x);
    let mut coeffs = u.transpose() * xv;
    for (c, &w) in coeffs.iter_mut().zip(response) {
        *c *= w;
    }
    (u * coeffs).iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::graphops::laplacian_of;

    fn small_laplacian() -> GraphLaplacian<f64> {
        let a = Tensor::from_f64(
            &[4, 4],
            &[1.0, 0.6, 0.1, 0.0, 0.6, 1.0, 0.3, 0.2, 0.1, 0.3, 1.0, 0.9, 0.0, 0.2, 0.9, 1.0],
        )
        .unwrap();
        laplacian_of(&a).unwrap()
    }

    #[test]
    fn all_pass_filter_is_identity() {
        let l = small_laplacian();
        let x = [0.3, -1.0, 2.0, 0.5];
        let y = spectral_conv_oracle(&x, &l, &[1.0; 4]).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn indicator_response_projects_onto_eigenvector() {
        let l = small_laplacian();
        let eig = symmetric_eigen(&l).unwrap();
        for j in 0..4 {
            let u: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
            let mut w = vec![0.0; 4];
            w[j] = 1.0;
            let y = filter_in_basis(&eig, &u, &w);
            for (a, b) in u.iter().zip(&y) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
