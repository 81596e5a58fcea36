use crate::error::{LidError, Result};
use crate::matrix::FeatureMatrix;

/// N-d-P-k shifted delta cepstra parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SdcConfig {
    pub n_static: usize,
    pub delta_spread: usize,
    pub block_shift: usize,
    pub num_blocks: usize,
}

impl Default for SdcConfig {
    /// The conventional 7-1-3-7 scheme.
    fn default() -> Self {
        Self {
            n_static: 7,
            delta_spread: 1,
            block_shift: 3,
            num_blocks: 7,
        }
    }
}

impl SdcConfig {
    pub fn output_dim(&self) -> usize {
        self.n_static + self.n_static * self.num_blocks
    }
}

fn clamp(t: isize, rows: usize) -> usize {
    t.clamp(0, rows as isize - 1) as usize
}

fn regression_deltas(feats: &FeatureMatrix, window: usize) -> FeatureMatrix {
    let (rows, cols) = (feats.rows(), feats.cols());
    let norm: f64 = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = FeatureMatrix::zeros(rows, cols, feats.frame_shift_s);
    for t in 0..rows {
        let row = out.row_mut(t);
        for n in 1..=window {
            let fwd = feats.row(clamp(t as isize + n as isize, rows));
            let back = feats.row(clamp(t as isize - n as isize, rows));
            for ((o, a), b) in row.iter_mut().zip(fwd).zip(back) {
                *o += n as f64 * (a - b);
            }
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    out
}

/// Appends `order` levels of regression deltas, each computed from the
/// previous level with `±window` frames of clamped context.
pub fn add_deltas(feats: &FeatureMatrix, order: usize, window: usize) -> Result<FeatureMatrix> {
    if !(1..=2).contains(&order) {
        return Err(LidError::InvalidConfig(format!("delta order must be 1 or 2, got {order}")));
    }
    if window == 0 {
        return Err(LidError::InvalidConfig("delta window must be >= 1".into()));
    }
    if feats.rows() == 0 {
        return Ok(FeatureMatrix::zeros(0, feats.cols() * (order + 1), feats.frame_shift_s));
    }
    let mut out = feats.clone();
    let mut level = feats.clone();
    for _ in 0..order {
        level = regression_deltas(&level, window);
        out = out.hstack(&level)?;
    }
    Ok(out)
}

/// `[c(t) | Δ_0(t) | ... | Δ_{k-1}(t)]` with
/// `Δ_i(t) = c(t + iP + d) - c(t + iP - d)` and indices clamped to the utterance.
pub fn compute_sdc(static_feats: &FeatureMatrix, cfg: &SdcConfig) -> Result<FeatureMatrix> {
    let n = cfg.n_static;
    if static_feats.cols() < n {
        return Err(LidError::DimensionMismatch {
            context: "SDC static columns",
            expected: n,
            actual: static_feats.cols(),
        });
    }
    let rows = static_feats.rows();
    let dim = cfg.output_dim();
    let mut data = Vec::with_capacity(rows * dim);
    let (d, p) = (cfg.delta_spread as isize, cfg.block_shift as isize);
    for t in 0..rows {
        data.extend_from_slice(&static_feats.row(t)[..n]);
        for i in 0..cfg.num_blocks as isize {
            let center = t as isize + i * p;
            let fwd = &static_feats.row(clamp(center + d, rows))[..n];
            let back = &static_feats.row(clamp(center - d, rows))[..n];
            data.extend(fwd.iter().zip(back).map(|(a, b)| a - b));
        }
    }
    FeatureMatrix::new(rows, dim, data, static_feats.frame_shift_s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_deltas_match_hand_values() {
        let f = FeatureMatrix::new(5, 1, vec![0.0, 1.0, 2.0, 3.0, 4.0], 0.01).unwrap();
        let d = add_deltas(&f, 1, 2).unwrap();
        let got: Vec<f64> = (0..5).map(|t| d.get(t, 1)).collect();
        let want = [0.5, 0.8, 1.0, 0.8, 0.5];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{got:?}");
        }
    }

    #[test]
    fn twenty_dims_become_sixty() {
        let f = FeatureMatrix::zeros(10, 20, 0.01);
        assert_eq!(add_deltas(&f, 2, 2).unwrap().cols(), 60);
    }

    #[test]
    fn constant_input_has_zero_dynamics() {
        let row: Vec<f64> = (0..7).map(|i| i as f64 * 1.5 - 2.0).collect();
        let f = FeatureMatrix::from_rows(&vec![row.clone(); 12], 0.01).unwrap();
        let d = add_deltas(&f, 2, 2).unwrap();
        for t in 0..12 {
            assert!(d.row(t)[7..].iter().all(|&v| v == 0.0));
        }
        let s = compute_sdc(&f, &SdcConfig::default()).unwrap();
        assert_eq!(s.cols(), 56);
        for t in 0..12 {
            assert_eq!(&s.row(t)[..7], row.as_slice());
            assert!(s.row(t)[7..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn sdc_rejects_narrow_input() {
        let f = FeatureMatrix::zeros(4, 5, 0.01);
        assert!(compute_sdc(&f, &SdcConfig::default()).is_err());
    }

    #[test]
    fn bad_delta_order() {
        let f = FeatureMatrix::zeros(4, 5, 0.01);
        assert!(add_deltas(&f, 3, 2).is_err());
        assert!(add_deltas(&f, 1, 0).is_err());
    }
}
