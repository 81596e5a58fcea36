/// Lower edge of the VTLN piecewise-linear warp, in Hz.
const VTLN_LOW_CUTOFF_HZ: f64 = 100.0;
/// Upper edge of the warp, measured down from the Nyquist frequency.
const VTLN_HIGH_OFFSET_HZ: f64 = 500.0;

pub fn mel_scale(freq_hz: f64) -> f64 {
    1127.0 * (1.0 + freq_hz / 700.0).ln()
}

/// Piecewise-linear VTLN warp of a frequency.
///
/// Inside `[l, h]` the frequency is scaled by `warp`; outside it the map is
/// linear and pins `low_freq` and `high_freq` to themselves. A warp below 1
/// moves filters down, matching a speaker whose spectrum is compressed.
pub fn vtln_warp_freq(
    vtln_low: f64,
    vtln_high: f64,
    low_freq: f64,
    high_freq: f64,
    warp: f64,
    freq: f64,
) -> f64 {
    if warp == 1.0 || freq < low_freq || freq > high_freq {
        return freq;
    }
    let inv = 1.0 / warp;
    let l = vtln_low * inv.max(1.0);
    let h = vtln_high * inv.min(1.0);
    let fl = warp * l;
    let fh = warp * h;
    if freq < l {
        low_freq + (fl - low_freq) / (l - low_freq) * (freq - low_freq)
    } else if freq < h {
        warp * freq
    } else {
        high_freq + (fh - high_freq) / (h - high_freq) * (freq - high_freq)
    }
}

/// Triangular mel filterbank over the one-sided power spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    pub num_bins: usize,
    pub fft_size: usize,
    /// `num_bins x (fft_size / 2 + 1)` weights.
    pub weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    /// Builds the filterbank with filter edges warped by `warp` (1.0 = none).
    pub fn new(
        num_bins: usize,
        fft_size: usize,
        sample_rate_hz: u32,
        low_freq: f64,
        high_freq: f64,
        warp: f64,
    ) -> Self {
        let nyquist = f64::from(sample_rate_hz) / 2.0;
        let vtln_high = nyquist - VTLN_HIGH_OFFSET_HZ;
        Self::build(num_bins, fft_size, sample_rate_hz, low_freq, high_freq, |f| {
            vtln_warp_freq(VTLN_LOW_CUTOFF_HZ, vtln_high, low_freq, high_freq, warp, f)
        })
    }

    /// The same filterbank with no warp function applied at all.
    pub fn unwarped(
        num_bins: usize,
        fft_size: usize,
        sample_rate_hz: u32,
        low_freq: f64,
        high_freq: f64,
    ) -> Self {
        Self::build(num_bins, fft_size, sample_rate_hz, low_freq, high_freq, |f| f)
    }

    fn build(
        num_bins: usize,
        fft_size: usize,
        sample_rate_hz: u32,
        low_freq: f64,
        high_freq: f64,
        warp_hz: impl Fn(f64) -> f64,
    ) -> Self {
        let num_fft_bins = fft_size / 2 + 1;
        let bin_hz = f64::from(sample_rate_hz) / fft_size as f64;
        let mel_low = mel_scale(low_freq);
        let mel_high = mel_scale(high_freq);
        let delta = (mel_high - mel_low) / (num_bins + 1) as f64;
        let inv_mel = |m: f64| 700.0 * ((m / 1127.0).exp() - 1.0);
        let warped_mel = |m: f64| mel_scale(warp_hz(inv_mel(m)));

        let weights = (0..num_bins)
            .map(|b| {
                let left = warped_mel(mel_low + b as f64 * delta);
                let center = warped_mel(mel_low + (b + 1) as f64 * delta);
                let right = warped_mel(mel_low + (b + 2) as f64 * delta);
                (0..num_fft_bins)
                    .map(|i| {
                        let m = mel_scale(i as f64 * bin_hz);
                        if m > left && m < right {
                            if m <= center {
                                (m - left) / (center - left)
                            } else {
                                (right - m) / (right - center)
                            }
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            num_bins,
            fft_size,
            weights,
        }
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(&self.weights) {
            *o = w.iter().zip(power).map(|(a, b)| a * b).sum();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_warp_is_bit_identical_to_unwarped() {
        for &(bins, fft) in &[(23usize, 256usize), (40, 256), (40, 512)] {
            let a = MelFilterbank::new(bins, fft, 8000, 20.0, 3800.0, 1.0);
            let b = MelFilterbank::unwarped(bins, fft, 8000, 20.0, 3800.0);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn warp_is_monotone_and_pins_edges() {
        for &w in &[0.8, 0.9, 1.1, 1.2] {
            let f = |x| vtln_warp_freq(100.0, 3500.0, 20.0, 3800.0, w, x);
            assert!((f(20.0) - 20.0).abs() < 1e-9);
            assert!((f(3800.0) - 3800.0).abs() < 1e-9);
            let mut prev = f(20.0);
            for i in 1..=378 {
                let cur = f(20.0 + i as f64 * 10.0);
                assert!(cur > prev);
                prev = cur;
            }
            assert!((f(1000.0) - w * 1000.0).abs() < 1e-9);
        }
    }

    #[test]
    fn warp_below_one_moves_filters_down() {
        let a = MelFilterbank::new(23, 256, 8000, 20.0, 3800.0, 1.0);
        let b = MelFilterbank::new(23, 256, 8000, 20.0, 3800.0, 0.9);
        let peak = |w: &Vec<f64>| {
            w.iter()
                .enumerate()
                .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0
        };
        assert!(peak(&b.weights[15]) < peak(&a.weights[15]));
    }
}
