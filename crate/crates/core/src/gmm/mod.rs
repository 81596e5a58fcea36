//! Diagonal and full-covariance GMM-UBMs, trained as a coherent tandem: the
//! diagonal model preselects a few components per frame and the full model
//! with the same means scores them.

mod diag;
mod full;
mod posterior;
mod tandem;
mod train;

pub use diag::DiagGmm;
pub use full::FullGmm;
pub use posterior::{PosteriorMatrix, PostRow, PRUNE_THRESHOLD};
pub use tandem::{tandem_posteriors, TandemUbm};
pub use train::{
    diag_to_full, full_em_iteration, train_diag_ubm, train_ubm, EmTrace, UbmConfig, UbmStage,
};

use crate::error::{LidError, Result};

pub(crate) const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Frame-level log-likelihood of a mixture model.
pub trait MixtureModel {
    fn dim(&self) -> usize;
    fn num_components(&self) -> usize;

    /// Per-component `ln w_c + ln N(x; mu_c, Sigma_c)`; no dimension check.
    fn component_loglikes_into(&self, frame: &[f64], out: &mut [f64]);

    /// `log sum_c w_c N(frame; mu_c, Sigma_c)`.
    fn loglike(&self, frame: &[f64]) -> Result<f64> {
        self.check_dim(frame.len())?;
        let mut buf = vec![0.0; self.num_components()];
        self.component_loglikes_into(frame, &mut buf);
        Ok(log_sum_exp(&buf))
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(LidError::DimensionMismatch {
                context: "GMM frame",
                expected: self.dim(),
                actual: got,
            });
        }
        Ok(())
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Normalizes log scores into posteriors in place; returns the log total.
pub(crate) fn softmax_in_place(v: &mut [f64]) -> f64 {
    let total = log_sum_exp(v);
    for x in v.iter_mut() {
        *x = (*x - total).exp();
    }
    total
}
