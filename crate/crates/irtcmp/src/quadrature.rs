//! Gauss-Hermite quadrature grids for the latent-trait integral, including
//! tensor grids under a multivariate normal prior.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A fixed quadrature grid approximating expectations under a
/// `N_M(0, cov)` prior. Weights are normalized to unit mass.
#[derive(Debug, Clone)]
pub struct QuadratureGrid {
    /// Q nodes, each an M-vector (row-major, Q x M).
    nodes: Vec<f64>,
    weights: Vec<f64>,
    n_dims: usize,
}

impl QuadratureGrid {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn n_dims(&self) -> usize {
        self.n_dims
    }

    #[inline]
    pub fn node(&self, q: usize) -> &[f64] {
        &self.nodes[q * self.n_dims..(q + 1) * self.n_dims]
    }

    #[inline]
    pub fn weight(&self, q: usize) -> f64 {
        self.weights[q]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Grid with every node multiplied by `s` (weights unchanged). Used to
    /// rescale a standard-normal grid to a freely estimated variance.
    pub fn scaled(&self, s: f64) -> QuadratureGrid {
        QuadratureGrid {
            nodes: self.nodes.iter().map(|v| v * s).collect(),
            weights: self.weights.clone(),
            n_dims: self.n_dims,
        }
    }

    /// Sum of `w_q * f(node_q)` over the grid.
    pub fn expectation<F: FnMut(&[f64]) -> f64>(&self, mut f: F) -> Result<f64> {
        let mut acc = 0.0;
        for q in 0..self.len() {
            let v = f(self.node(q));
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("integrand at node {}", q)));
            }
            acc += self.weights[q] * v;
        }
        Ok(acc)
    }
}

/// Nodes and weights of the q-point probabilists' Gauss-Hermite rule
/// (weight function `exp(-x^2/2)/sqrt(2*pi)`), weights normalized to sum
/// to one. Computed by Golub-Welsch on the symmetric tridiagonal Jacobi
/// matrix with off-diagonal `sqrt(k)`.
pub fn hermite_rule(q: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(q >= 1);
    let mut jacobi = DMatrix::<f64>::zeros(q, q);
    for k in 1..q {
        let v = (k as f64).sqrt();
        jacobi[(k - 1, k)] = v;
        jacobi[(k, k - 1)] = v;
    }
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..q)
        .map(|i| {
            let node = eig.eigenvalues[i];
            let w = eig.eigenvectors[(0, i)].powi(2);
            (node, w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let nodes = pairs.iter().map(|p| p.0).collect();
    let weights = pairs.iter().map(|p| p.1 / total).collect();
    (nodes, weights)
}

/// Build a tensor-product Gauss-Hermite grid for an M-dimensional normal
/// prior with the given covariance. Nodes of the standard grid are mapped
/// through the Cholesky factor of `cov`; weights are renormalized to one.
pub fn build_grid(q_per_dim: usize, n_dims: usize, cov: &DMatrix<f64>) -> Result<QuadratureGrid> {
    if q_per_dim < 2 {
        return Err(Error::InvalidSpec("quadrature needs at least 2 points per dimension".into()));
    }
    if cov.nrows() != n_dims || cov.ncols() != n_dims {
        return Err(Error::ShapeMismatch(format!(
            "covariance is {}x{}, expected {}x{}",
            cov.nrows(),
            cov.ncols(),
            n_dims,
            n_dims
        )));
    }
    let chol = cov.clone().cholesky().ok_or(Error::NotPositiveDefinite)?;
    let lower = chol.l();

    let (nodes_1d, weights_1d) = hermite_rule(q_per_dim);
    let q_total = q_per_dim.pow(n_dims as u32);
    let mut nodes = Vec::with_capacity(q_total * n_dims);
    let mut weights = Vec::with_capacity(q_total);
    let mut index = vec![0usize; n_dims];
    let mut z = vec![0.0f64; n_dims];
    loop {
        let mut w = 1.0;
        for (m, &im) in index.iter().enumerate() {
            z[m] = nodes_1d[im];
            w *= weights_1d[im];
        }
        for r in 0..n_dims {
            let mut v = 0.0;
            for c in 0..=r {
                v += lower[(r, c)] * z[c];
            }
            nodes.push(v);
        }
        weights.push(w);

        // advance multi-index
        let mut dim = 0;
        loop {
            if dim == n_dims {
                let total: f64 = weights.iter().sum();
                for w in &mut weights {
                    *w /= total;
                }
                return Ok(QuadratureGrid { nodes, weights, n_dims });
            }
            index[dim] += 1;
            if index[dim] < q_per_dim {
                break;
            }
            index[dim] = 0;
            dim += 1;
        }
    }
}

/// Standard-normal grid in one dimension (unit variance).
pub fn standard_grid(q: usize, n_dims: usize) -> Result<QuadratureGrid> {
    build_grid(q, n_dims, &DMatrix::identity(n_dims, n_dims))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn two_point_rule_is_plus_minus_one() {
        let (nodes, weights) = hermite_rule(2);
        assert_abs_diff_eq!(nodes[0], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(nodes[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(weights[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(weights[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn weights_sum_to_one() {
        for q in [2, 5, 21, 61] {
            let grid = standard_grid(q, 1).unwrap();
            let total: f64 = grid.weights().iter().sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn second_moment_of_standard_normal() {
        let grid = standard_grid(21, 1).unwrap();
        let m2 = grid.expectation(|t| t[0] * t[0]).unwrap();
        assert_abs_diff_eq!(m2, 1.0, epsilon = 1e-8);
    }

    #[test]
    fn constant_integrates_to_one_and_mean_is_zero() {
        let grid = standard_grid(21, 1).unwrap();
        assert_abs_diff_eq!(grid.expectation(|_| 1.0).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(grid.expectation(|t| t[0]).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn logistic_expectation_is_half() {
        let grid = standard_grid(61, 1).unwrap();
        let v = grid.expectation(|t| 1.0 / (1.0 + (-t[0]).exp())).unwrap();
        assert_abs_diff_eq!(v, 0.5, epsilon = 1e-6);
    }

    #[test]
    fn bivariate_moments_match_covariance() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let grid = build_grid(15, 2, &cov).unwrap();
        assert_abs_diff_eq!(grid.expectation(|_| 1.0).unwrap(), 1.0, epsilon = 1e-10);
        for m in 0..2 {
            assert_abs_diff_eq!(grid.expectation(|t| t[m]).unwrap(), 0.0, epsilon = 1e-6);
        }
        for r in 0..2 {
            for c in 0..2 {
                let v = grid.expectation(|t| t[r] * t[c]).unwrap();
                assert_abs_diff_eq!(v, cov[(r, c)], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn non_positive_definite_covariance_is_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(build_grid(5, 2, &cov), Err(Error::NotPositiveDefinite)));
    }

    #[test]
    fn non_finite_integrand_is_an_error() {
        let grid = standard_grid(5, 1).unwrap();
        let r = grid.expectation(|t| 1.0 / (t[0] - t[0]));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
