//! Gaussian copula numerics: correlation matrices, log-densities and sampling.
//!
//! Everything is in log space. With `y = quantile(u)` the copula density is
//! `|P|^(-1/2) exp(-(y' P^-1 y - y' y) / 2)`.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{GcmmError, Result};
use crate::normal;

/// A correlation matrix held with its Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    dim: usize,
    matrix: Vec<f64>,
    lower: Vec<f64>,
    log_det: f64,
}

impl CorrelationMatrix {
    pub fn identity(dim: usize) -> Self {
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            m[i * dim + i] = 1.0;
        }
        Self { dim, matrix: m.clone(), lower: m, log_det: 0.0 }
    }

    /// Validates symmetry, unit diagonal (within 1e-10) and positive
    /// definiteness of a row-major matrix.
    pub fn from_row_major(dim: usize, matrix: Vec<f64>) -> Result<Self> {
        if dim == 0 || matrix.len() != dim * dim {
            return Err(GcmmError::InvalidModel(format!(
                "correlation matrix needs {} entries, got {}",
                dim * dim,
                matrix.len()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(GcmmError::InvalidModel("correlation matrix has non-finite entries".into()));
        }
        for i in 0..dim {
            if (matrix[i * dim + i] - 1.0).abs() > 1e-10 {
                return Err(GcmmError::InvalidModel("correlation matrix needs a unit diagonal".into()));
            }
            for j in 0..i {
                if matrix[i * dim + j] != matrix[j * dim + i] {
                    return Err(GcmmError::InvalidModel("correlation matrix must be symmetric".into()));
                }
            }
        }
        let chol = DMatrix::from_row_slice(dim, dim, &matrix)
            .cholesky()
            .ok_or_else(|| GcmmError::Singular("matrix is not positive definite".into()))?;
        let l = chol.l();
        let mut lower = vec![0.0; dim * dim];
        let mut log_det = 0.0;
        for i in 0..dim {
            for j in 0..=i {
                lower[i * dim + j] = l[(i, j)];
            }
            log_det += 2.0 * l[(i, i)].ln();
        }
        Ok(Self { dim, matrix, lower, log_det })
    }

    /// 2 x 2 matrix with off-diagonal `rho`.
    pub fn bivariate(rho: f64) -> Result<Self> {
        Self::from_row_major(2, vec![1.0, rho, rho, 1.0])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.dim + j]
    }

    pub fn as_row_major(&self) -> &[f64] {
        &self.matrix
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Row-major lower Cholesky factor.
    pub fn lower_cholesky(&self) -> &[f64] {
        &self.lower
    }

    /// Solves `L z = y`.
    fn forward_solve(&self, y: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut z = vec![0.0; d];
        for i in 0..d {
            let mut acc = y[i];
            for j in 0..i {
                acc -= self.lower[i * d + j] * z[j];
            }
            z[i] = acc / self.lower[i * d + i];
        }
        z
    }

    /// `y' P^-1 y`.
    pub fn quadratic_form(&self, y: &[f64]) -> f64 {
        self.forward_solve(y).iter().map(|z| z * z).sum()
    }

    /// `-(log|P| + tr(P^-1 S)) / 2`: the expected log copula density under a
    /// scatter matrix `S`, up to terms that do not depend on `P`.
    pub fn expected_log_density(&self, scatter: &[f64]) -> f64 {
        let d = self.dim;
        let mut trace = 0.0;
        // tr(P^-1 S) = sum over columns s_j of (L^-1 s_j) . (L^-1 e_j)
        for j in 0..d {
            let col: Vec<f64> = (0..d).map(|i| scatter[i * d + j]).collect();
            let mut e = vec![0.0; d];
            e[j] = 1.0;
            let a = self.forward_solve(&col);
            let b = self.forward_solve(&e);
            trace += a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>();
        }
        -0.5 * (self.log_det + trace)
    }

    /// Convex combination `(1 - t) self + t other`.
    pub fn blend(&self, other: &Self, t: f64) -> Result<Self> {
        let mut m: Vec<f64> =
            self.matrix.iter().zip(&other.matrix).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        for i in 0..self.dim {
            m[i * self.dim + i] = 1.0;
        }
        Self::from_row_major(self.dim, m)
    }
}

/// Observation mapped through one component's marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianizedPoint {
    /// `quantile(F_i(x_i))` per dimension.
    pub y: Vec<f64>,
    /// `sum_i ln f_i(x_i)`.
    pub log_marginal_density_sum: f64,
    /// `sum_i ln phi(y_i)`.
    pub log_normal_pdf_sum: f64,
}

impl GaussianizedPoint {
    pub fn new(y: Vec<f64>, log_marginal_density_sum: f64) -> Self {
        let log_normal_pdf_sum = y.iter().map(|v| normal::ln_pdf(*v)).sum();
        Self { y, log_marginal_density_sum, log_normal_pdf_sum }
    }
}

/// Weighted uncentered scatter `sum w_n y_n y_n' / sum w_n` of row-major points.
pub fn weighted_scatter(points: &[f64], dim: usize, weights: &[f64]) -> Result<Vec<f64>> {
    if points.len() != weights.len() * dim {
        return Err(GcmmError::InvalidData("points and weights disagree in length".into()));
    }
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(GcmmError::InvalidData("total weight must be positive".into()));
    }
    let positive = weights.iter().filter(|w| **w > 0.0).count();
    if positive < dim {
        return Err(GcmmError::Singular(format!(
            "{positive} weighted points cannot span {dim} dimensions"
        )));
    }
    let mut s = vec![0.0; dim * dim];
    for (y, &w) in points.chunks_exact(dim).zip(weights) {
        if w == 0.0 {
            continue;
        }
        for a in 0..dim {
            let wa = w * y[a];
            for b in 0..=a {
                s[a * dim + b] += wa * y[b];
            }
        }
    }
    for a in 0..dim {
        for b in 0..=a {
            let v = s[a * dim + b] / total;
            s[a * dim + b] = v;
            s[b * dim + a] = v;
        }
    }
    Ok(s)
}

/// Adds `ridge` to the diagonal of a scatter matrix and rescales it to unit
/// diagonal.
pub fn correlation_from_scatter(scatter: &[f64], dim: usize, ridge: f64) -> Result<CorrelationMatrix> {
    let scale: Vec<f64> = (0..dim).map(|i| scatter[i * dim + i] + ridge).collect();
    if scale.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(GcmmError::Singular("scatter has a zero diagonal".into()));
    }
    let mut m = vec![0.0; dim * dim];
    for a in 0..dim {
        for b in 0..dim {
            m[a * dim + b] = if a == b {
                1.0
            } else {
                scatter[a * dim + b] / (scale[a] * scale[b]).sqrt()
            };
        }
    }
    CorrelationMatrix::from_row_major(dim, m)
}

/// Weighted scatter, ridge, unit-diagonal rescale and Cholesky in one step.
pub fn correlation_from_weighted_scatter(
    points: &[f64],
    dim: usize,
    weights: &[f64],
    ridge: f64,
) -> Result<CorrelationMatrix> {
    let s = weighted_scatter(points, dim, weights)?;
    correlation_from_scatter(&s, dim, ridge)
}

/// `ln c(u | P)` expressed in `y = quantile(u)`.
pub fn log_copula_density(p: &CorrelationMatrix, y: &[f64]) -> f64 {
    let z = p.forward_solve(y);
    let excess: f64 = z.iter().zip(y).map(|(zi, yi)| zi * zi - yi * yi).sum();
    -0.5 * p.log_det - 0.5 * excess
}

/// Log of one mixture summand without its weight: copula term plus the
/// marginal log-densities.
pub fn log_component_density(p: &CorrelationMatrix, gp: &GaussianizedPoint) -> f64 {
    log_copula_density(p, &gp.y) + gp.log_marginal_density_sum
}

/// Draws `z ~ N(0, P)` through the Cholesky factor.
pub fn sample_correlated_normal<R: Rng + ?Sized>(p: &CorrelationMatrix, rng: &mut R) -> Vec<f64> {
    let d = p.dim;
    let e: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    (0..d).map(|i| (0..=i).map(|j| p.lower[i * d + j] * e[j]).sum()).collect()
}

/// Draws `u` from the Gaussian copula; every coordinate lies strictly in (0, 1).
pub fn sample_copula<R: Rng + ?Sized>(p: &CorrelationMatrix, rng: &mut R) -> Vec<f64> {
    sample_correlated_normal(p, rng)
        .into_iter()
        .map(|z| normal::cdf(z).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0))
        .collect()
}
