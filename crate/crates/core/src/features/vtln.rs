use super::{energy_vad, static_cepstra, AudioSegment, FrontEndConfig, VadConfig};
use crate::error::{LidError, Result};
use crate::gmm::DiagGmm;
use crate::matrix::FeatureMatrix;

/// Warp factors 0.80, 0.85, ..., 1.20.
pub fn warp_grid() -> Vec<f64> {
    (0..=8).map(|i| f64::from(80 + 5 * i) / 100.0).collect()
}

/// Features scored by the warp model: the front-end of `cfg` at the given
/// warp, restricted to speech frames and globally mean-normalized.
pub fn vtln_probe_features(
    audio: &AudioSegment,
    cfg: &FrontEndConfig,
    warp: f64,
    seed: u64,
) -> Result<FeatureMatrix> {
    let cfg = FrontEndConfig {
        vtln_warp: warp,
        ..cfg.clone()
    };
    let feats = static_cepstra(audio, &cfg, seed)?;
    let mask = if cfg.use_energy {
        energy_vad(&feats, &VadConfig::default())
    } else {
        super::VadMask::all(feats.rows())
    };
    let speech = if mask.num_speech() > 0 {
        feats.select_rows(&mask.flags)?
    } else {
        feats
    };
    Ok(super::sliding_cmn(&speech, f64::INFINITY, true))
}

/// Picks the grid warp whose warped features score highest under
/// `warp_model`. Exact ties go to the warp nearest 1.0, then the smaller one.
pub fn estimate_vtln_warp(
    audio: &AudioSegment,
    cfg: &FrontEndConfig,
    warp_model: &DiagGmm,
    grid: &[f64],
    seed: u64,
) -> Result<f64> {
    if grid.is_empty() {
        return Err(LidError::InvalidInput("empty VTLN warp grid".into()));
    }
    if let Some(w) = grid.iter().find(|w| !(0.8..=1.2).contains(*w)) {
        return Err(LidError::InvalidInput(format!("warp {w} outside [0.8, 1.2]")));
    }
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let mut best: Option<(f64, f64)> = None;
    for &warp in grid {
        let feats = vtln_probe_features(audio, cfg, warp, seed)?;
        let ll = warp_model.total_loglike(&feats)?;
        let better = match best {
            None => true,
            Some((bw, bll)) => {
                ll > bll
                    || (ll == bll
                        && ((warp - 1.0).abs() < (bw - 1.0).abs()
                            || ((warp - 1.0).abs() == (bw - 1.0).abs() && warp < bw)))
            }
        };
        if better {
            best = Some((warp, ll));
        }
    }
    Ok(best.map(|(w, _)| w).unwrap_or(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_nine_points() {
        let g = warp_grid();
        assert_eq!(g.len(), 9);
        assert_eq!(g[0], 0.8);
        assert_eq!(g[4], 1.0);
        assert_eq!(g[8], 1.2);
    }

    #[test]
    fn singleton_and_empty_grids() {
        let audio = AudioSegment::new("u", vec![0.1; 4000], 8000);
        let gmm = DiagGmm::new(vec![1.0], vec![vec![0.0; 7]], vec![vec![1.0; 7]]).unwrap();
        let cfg = FrontEndConfig::sdc_static();
        assert_eq!(estimate_vtln_warp(&audio, &cfg, &gmm, &[1.0], 0).unwrap(), 1.0);
        assert!(estimate_vtln_warp(&audio, &cfg, &gmm, &[], 0).is_err());
        assert!(estimate_vtln_warp(&audio, &cfg, &gmm, &[0.5, 1.0], 0).is_err());
    }
}
