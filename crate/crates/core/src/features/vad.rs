use crate::matrix::FeatureMatrix;

/// Per-frame speech flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VadMask {
    pub flags: Vec<bool>,
}

impl VadMask {
    pub fn all(len: usize) -> Self {
        Self {
            flags: vec![true; len],
        }
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn num_speech(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn truncate(&mut self, n: usize) {
        self.flags.truncate(n);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct VadConfig {
    /// Offset added to the utterance mean log energy.
    pub threshold_offset: f64,
    pub context: usize,
    pub proportion: f64,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            threshold_offset: 0.0,
            context: 2,
            proportion: 0.6,
        }
    }
}

/// A frame is a speech candidate when its log energy (column 0) exceeds the
/// utterance mean by more than `threshold_offset`; it is flagged speech when
/// at least `proportion` of the frames within `±context` are candidates.
pub fn energy_vad(feats: &FeatureMatrix, cfg: &VadConfig) -> VadMask {
    let rows = feats.rows();
    if rows == 0 || feats.cols() == 0 {
        return VadMask { flags: Vec::new() };
    }
    let mean = (0..rows).map(|t| feats.get(t, 0)).sum::<f64>() / rows as f64;
    let threshold = mean + cfg.threshold_offset;
    let candidate: Vec<bool> = (0..rows).map(|t| feats.get(t, 0) > threshold).collect();

    let flags = (0..rows)
        .map(|t| {
            let lo = t.saturating_sub(cfg.context);
            let hi = (t + cfg.context).min(rows - 1);
            let hits = candidate[lo..=hi].iter().filter(|&&c| c).count();
            hits as f64 >= cfg.proportion * (hi - lo + 1) as f64
        })
        .collect();
    VadMask { flags }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn energies(e: &[f64]) -> FeatureMatrix {
        FeatureMatrix::new(e.len(), 1, e.to_vec(), 0.01).unwrap()
    }

    #[test]
    fn constant_energy_with_positive_offset_is_silence() {
        let f = energies(&[2.0; 30]);
        let cfg = VadConfig {
            threshold_offset: 0.5,
            ..VadConfig::default()
        };
        let m = energy_vad(&f, &cfg);
        assert_eq!(m.len(), 30);
        assert_eq!(m.num_speech(), 0);
    }

    #[test]
    fn zero_context_full_proportion_is_raw_threshold() {
        let e: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64).collect();
        let mean = e.iter().sum::<f64>() / 40.0;
        let cfg = VadConfig {
            threshold_offset: 0.0,
            context: 0,
            proportion: 1.0,
        };
        let m = energy_vad(&energies(&e), &cfg);
        let want: Vec<bool> = e.iter().map(|&v| v > mean).collect();
        assert_eq!(m.flags, want);
    }

    #[test]
    fn loud_burst_is_flagged() {
        // 100 frames of low-level jitter with a 10-frame burst at mean + 3 sigma.
        let mut e: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { -0.5 } else { 0.1 }).collect();
        for v in &mut e[40..50] {
            *v = 3.0;
        }
        let m = energy_vad(&energies(&e), &VadConfig::default());
        // Hand rule: mean = 0.12, so only burst frames are candidates; with
        // context 2 and proportion 0.6 a frame needs 3 of 5 neighbours.
        let want: Vec<bool> = (0..100).map(|t| (40..50).contains(&t)).collect();
        assert_eq!(m.flags, want);
    }
}
