use super::{log_sum_exp, MixtureModel, LOG_2PI};
use crate::error::{LidError, Result};
use crate::matrix::FeatureMatrix;

/// Diagonal-covariance GMM with cached per-component constants.
#[derive(Debug, Clone)]
pub struct DiagGmm {
    weights: Vec<f64>,
    /// Row-major `M x D`.
    means: Vec<f64>,
    vars: Vec<f64>,
    dim: usize,
    gconsts: Vec<f64>,
    inv_vars: Vec<f64>,
    means_inv_vars: Vec<f64>,
}

impl PartialEq for DiagGmm {
    fn eq(&self, other: &Self) -> bool {
        self.weights == other.weights && self.means == other.means && self.vars == other.vars
    }
}

impl DiagGmm {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, vars: Vec<Vec<f64>>) -> Result<Self> {
        let dim = means.first().map_or(0, Vec::len);
        let flat = |rows: Vec<Vec<f64>>, what| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(rows.len() * dim);
            for r in rows {
                if r.len() != dim {
                    return Err(LidError::DimensionMismatch {
                        context: what,
                        expected: dim,
                        actual: r.len(),
                    });
                }
                out.extend(r);
            }
            Ok(out)
        };
        let means = flat(means, "GMM mean")?;
        let vars = flat(vars, "GMM variance")?;
        Self::from_flat(weights, means, vars, dim)
    }

    pub fn from_flat(weights: Vec<f64>, means: Vec<f64>, vars: Vec<f64>, dim: usize) -> Result<Self> {
        let m = weights.len();
        if m == 0 || dim == 0 {
            return Err(LidError::InvalidInput("GMM needs at least one component and dimension".into()));
        }
        if means.len() != m * dim || vars.len() != m * dim {
            return Err(LidError::DimensionMismatch {
                context: "GMM parameter block",
                expected: m * dim,
                actual: means.len().min(vars.len()),
            });
        }
        if vars.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(LidError::Numeric("GMM variances must be positive and finite".into()));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(LidError::Numeric("GMM weights must be non-negative".into()));
        }
        let inv_vars: Vec<f64> = vars.iter().map(|v| 1.0 / v).collect();
        let means_inv_vars: Vec<f64> = means.iter().zip(&inv_vars).map(|(m, iv)| m * iv).collect();
        let gconsts = (0..m)
            .map(|c| {
                let r = c * dim..(c + 1) * dim;
                let quad: f64 = means[r.clone()]
                    .iter()
                    .zip(&inv_vars[r.clone()])
                    .map(|(mu, iv)| mu * mu * iv)
                    .sum();
                let logdet: f64 = vars[r].iter().map(|v| v.ln()).sum();
                weights[c].ln() - 0.5 * (dim as f64 * LOG_2PI + logdet + quad)
            })
            .collect();
        Ok(Self {
            weights,
            means,
            vars,
            dim,
            gconsts,
            inv_vars,
            means_inv_vars,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        &self.means[c * self.dim..(c + 1) * self.dim]
    }

    pub fn var(&self, c: usize) -> &[f64] {
        &self.vars[c * self.dim..(c + 1) * self.dim]
    }

    pub fn means_flat(&self) -> &[f64] {
        &self.means
    }

    pub fn vars_flat(&self) -> &[f64] {
        &self.vars
    }

    /// Sum of frame log-likelihoods over a whole utterance.
    pub fn total_loglike(&self, feats: &FeatureMatrix) -> Result<f64> {
        self.check_dim(feats.cols())?;
        let mut buf = vec![0.0; self.num_components()];
        Ok(feats
            .iter_rows()
            .map(|row| {
                self.component_loglikes_into(row, &mut buf);
                log_sum_exp(&buf)
            })
            .sum())
    }

    /// Text dump of weights and per-component occupancy for debugging.
    pub fn summary(&self, occupancy: Option<&[f64]>) -> String {
        let mut s = format!("diag-gmm components={} dim={}\n", self.num_components(), self.dim);
        for c in 0..self.num_components() {
            s.push_str(&format!("{c}\tweight={:.6}", self.weights[c]));
            if let Some(occ) = occupancy {
                s.push_str(&format!("\toccupancy={:.3}", occ[c]));
            }
            s.push('\n');
        }
        s
    }
}

impl MixtureModel for DiagGmm {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_components(&self) -> usize {
        self.weights.len()
    }

    fn component_loglikes_into(&self, frame: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (c, o) in out.iter_mut().enumerate() {
            let miv = &self.means_inv_vars[c * d..(c + 1) * d];
            let iv = &self.inv_vars[c * d..(c + 1) * d];
            let mut lin = 0.0;
            let mut sq = 0.0;
            for i in 0..d {
                let x = frame[i];
                lin += x * miv[i];
                sq += x * x * iv[i];
            }
            *o = self.gconsts[c] + lin - 0.5 * sq;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_normal_at_zero() {
        let g = DiagGmm::new(vec![1.0], vec![vec![0.0]], vec![vec![1.0]]).unwrap();
        let ll = g.loglike(&[0.0]).unwrap();
        assert!((ll + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn matches_log_sum_exp_of_component_densities() {
        let g = DiagGmm::new(
            vec![0.2, 0.5, 0.3],
            vec![vec![0.0, 1.0], vec![2.0, -1.0], vec![-3.0, 0.5]],
            vec![vec![1.0, 2.0], vec![0.5, 0.5], vec![3.0, 1.5]],
        )
        .unwrap();
        let x = [0.7, -0.2];
        let mut terms = Vec::new();
        for c in 0..3 {
            let mut lp = g.weights()[c].ln();
            for d in 0..2 {
                let (m, v) = (g.mean(c)[d], g.var(c)[d]);
                lp += -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x[d] - m).powi(2) / v);
            }
            terms.push(lp);
        }
        let max = terms.iter().cloned().fold(f64::MIN, f64::max);
        let want = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
        assert!((g.loglike(&x).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn farther_from_mean_is_less_likely() {
        let g = DiagGmm::new(vec![1.0], vec![vec![1.0, 1.0]], vec![vec![2.0, 0.5]]).unwrap();
        let mut prev = f64::INFINITY;
        for i in 0..20 {
            let x = 1.0 + i as f64 * 0.3;
            let ll = g.loglike(&[x, x]).unwrap();
            assert!(ll < prev);
            prev = ll;
        }
    }

    #[test]
    fn dimension_mismatch() {
        let g = DiagGmm::new(vec![1.0], vec![vec![0.0; 3]], vec![vec![1.0; 3]]).unwrap();
        assert!(matches!(g.loglike(&[0.0; 2]), Err(LidError::DimensionMismatch { .. })));
    }
}
