use nalgebra::{DMatrix, SymmetricEigen};

use super::{DiagGmm, MixtureModel, LOG_2PI};
use crate::error::{LidError, Result};

/// Full-covariance GMM. Each covariance is stored with the inverse of its
/// Cholesky factor so a frame costs one triangular product per component.
#[derive(Debug, Clone)]
pub struct FullGmm {
    weights: Vec<f64>,
    means: Vec<f64>,
    covs: Vec<DMatrix<f64>>,
    dim: usize,
    gconsts: Vec<f64>,
    /// Packed lower-triangular `L^-1` per component, row by row.
    inv_chol: Vec<Vec<f64>>,
}

impl PartialEq for FullGmm {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights && self.means == other.means && self.covs == other.covs
    }
}

/// Floors the eigenvalues of a symmetric matrix at `rel_floor` times their
/// mean. Leaves the matrix untouched when nothing needs flooring.
pub(crate) fn floor_eigenvalues(m: &DMatrix<f64>, rel_floor: f64) -> DMatrix<f64> {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym.clone());
    let mean = eig.eigenvalues.iter().sum::<f64>() / eig.eigenvalues.len() as f64;
    let floor = rel_floor * mean.max(f64::MIN_POSITIVE);
    if eig.eigenvalues.iter().all(|&v| v >= floor) {
        return sym;
    }
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose();
    symmetrize(&rebuilt)
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = m.clone();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

impl FullGmm {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, covs: Vec<DMatrix<f64>>) -> Result<Self> {
        let m = weights.len();
        if m == 0 || covs.len() != m {
            return Err(LidError::DimensionMismatch {
                context: "full GMM covariance count",
                expected: m,
                actual: covs.len(),
            });
        }
        let dim = covs[0].nrows();
        if means.len() != m * dim {
            return Err(LidError::DimensionMismatch {
                context: "full GMM means",
                expected: m * dim,
                actual: means.len(),
            });
        }
        let mut gconsts = Vec::with_capacity(m);
        let mut inv_chol = Vec::with_capacity(m);
        for (c, cov) in covs.iter().enumerate() {
            if cov.nrows() != dim || cov.ncols() != dim {
                return Err(LidError::DimensionMismatch {
                    context: "full GMM covariance shape",
                    expected: dim,
                    actual: cov.nrows(),
                });
            }
            let chol = cov.clone().cholesky().ok_or_else(|| {
                LidError::Numeric(format!("covariance of component {c} is not positive definite"))
            })?;
            let l = chol.l();
            let logdet: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let linv = l
                .solve_lower_triangular(&DMatrix::identity(dim, dim))
                .ok_or_else(|| LidError::Numeric(format!("singular Cholesky factor in component {c}")))?;
            let mut packed = Vec::with_capacity(dim * (dim + 1) / 2);
            for i in 0..dim {
                for j in 0..=i {
                    packed.push(linv[(i, j)]);
                }
            }
            inv_chol.push(packed);
            gconsts.push(weights[c].ln() - 0.5 * (dim as f64 * LOG_2PI + logdet));
        }
        Ok(Self {
            weights,
            means,
            covs,
            dim,
            gconsts,
            inv_chol,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        &self.means[c * self.dim..(c + 1) * self.dim]
    }

    pub fn means_flat(&self) -> &[f64] {
        &self.means
    }

    pub fn cov(&self, c: usize) -> &DMatrix<f64> {
        &self.covs[c]
    }

    pub fn covs(&self) -> &[DMatrix<f64>] {
        &self.covs
    }

    /// `ln w_c + ln N(frame; mu_c, Sigma_c)` for one component.
    pub fn component_loglike(&self, c: usize, frame: &[f64]) -> f64 {
        let d = self.dim;
        let mu = self.mean(c);
        let packed = &self.inv_chol[c];
        let mut quad = 0.0;
        let mut k = 0;
        for i in 0..d {
            let mut z = 0.0;
            for j in 0..=i {
                z += packed[k] * (frame[j] - mu[j]);
                k += 1;
            }
            quad += z * z;
        }
        self.gconsts[c] - 0.5 * quad
    }

    /// Diagonal model with the same weights, means and covariance diagonals.
    pub fn diagonalized(&self) -> Result<DiagGmm> {
        let vars = self
            .covs
            .iter()
            .flat_map(|c| c.diagonal().iter().copied().collect::<Vec<_>>())
            .collect();
        DiagGmm::from_flat(self.weights.clone(), self.means.clone(), vars, self.dim)
    }
}

impl MixtureModel for FullGmm {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_components(&self) -> usize {
        self.weights.len()
    }

    fn component_loglikes_into(&self, frame: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.component_loglike(c, frame);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_with_diagonal_covariance_matches_diag_model() {
        let means = vec![0.5, -1.0, 2.0, 0.0];
        let vars = [[1.5, 0.7], [0.3, 2.0]];
        let covs = vars
            .iter()
            .map(|v| DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(v)))
            .collect();
        let full = FullGmm::new(vec![0.4, 0.6], means.clone(), covs).unwrap();
        let diag = DiagGmm::from_flat(
            vec![0.4, 0.6],
            means,
            vars.iter().flatten().copied().collect(),
            2,
        )
        .unwrap();
        for x in [[0.0, 0.0], [1.0, -2.0], [3.0, 0.5]] {
            assert!((full.loglike(&x).unwrap() - diag.loglike(&x).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn correlated_density_matches_closed_form() {
        let cov = DMatrix::from_row_slice(2, 2, &[2.0, 0.8, 0.8, 1.0]);
        let g = FullGmm::new(vec![1.0], vec![0.0, 0.0], vec![cov.clone()]).unwrap();
        let x = nalgebra::DVector::from_row_slice(&[0.3, -0.4]);
        let inv = cov.clone().try_inverse().unwrap();
        let quad = (x.transpose() * inv * &x)[(0, 0)];
        let want = -0.5 * (2.0 * LOG_2PI + cov.determinant().ln() + quad);
        assert!((g.loglike(x.as_slice()).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn eigen_floor_lifts_small_eigenvalues() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let f = floor_eigenvalues(&m, 1e-4);
        let eig = SymmetricEigen::new(f.clone());
        assert!(eig.eigenvalues.min() >= 1e-4 * 1.0 - 1e-12);
        assert!(f.clone().cholesky().is_some());
        let ok = DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 1.0]);
        assert_eq!(floor_eigenvalues(&ok, 1e-4), ok);
    }
}
