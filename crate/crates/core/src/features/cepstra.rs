use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{FrontEndConfig, MelFilterbank, WindowedFrames};
use crate::error::{LidError, Result};
use crate::matrix::FeatureMatrix;

/// Orthonormal DCT-II basis, `num_cepstra x num_bins`.
fn dct_matrix(num_cepstra: usize, num_bins: usize) -> Vec<Vec<f64>> {
    let n = num_bins as f64;
    (0..num_cepstra)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            (0..num_bins)
                .map(|j| {
                    scale * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / n).cos()
                })
                .collect()
        })
        .collect()
}

/// Power spectrum, mel filterbank (warped by `cfg.vtln_warp`), log, DCT-II,
/// keep `num_cepstra`. With `use_energy` coefficient 0 is the raw log energy.
pub fn compute_cepstra(frames: &WindowedFrames, cfg: &FrontEndConfig) -> Result<FeatureMatrix> {
    cfg.validate(frames.sample_rate_hz)?;
    let fft_size = frames.frame_len.next_power_of_two();
    let fbank = MelFilterbank::new(
        cfg.num_mel_bins,
        fft_size,
        frames.sample_rate_hz,
        cfg.low_freq_hz,
        cfg.high_freq_hz,
        cfg.vtln_warp,
    );
    let dct = dct_matrix(cfg.num_cepstra, cfg.num_mel_bins);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_size);

    let mut buf = vec![Complex::new(0.0, 0.0); fft_size];
    let mut power = vec![0.0; fft_size / 2 + 1];
    let mut mel = vec![0.0; cfg.num_mel_bins];
    let mut out = Vec::with_capacity(frames.num_frames * cfg.num_cepstra);

    for t in 0..frames.num_frames {
        for (b, &s) in buf.iter_mut().zip(frames.frame(t)) {
            *b = Complex::new(s, 0.0);
        }
        for b in buf.iter_mut().skip(frames.frame_len) {
            *b = Complex::new(0.0, 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        if power.iter().any(|p| !p.is_finite()) {
            return Err(LidError::NonFinite {
                frame: t,
                what: "power spectrum",
            });
        }
        fbank.apply(&power, &mut mel);
        for m in mel.iter_mut() {
            *m = m.max(f64::EPSILON).ln();
        }
        for (k, basis) in dct.iter().enumerate() {
            let c = if k == 0 && cfg.use_energy {
                frames.log_energy[t]
            } else {
                basis.iter().zip(&mel).map(|(a, b)| a * b).sum()
            };
            out.push(c);
        }
    }
    FeatureMatrix::new(frames.num_frames, cfg.num_cepstra, out, frames.frame_shift_s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{frame_and_window, AudioSegment};

    fn tone(freq: f64, secs: f64) -> AudioSegment {
        let n = (8000.0 * secs) as usize;
        let s = (0..n)
            .map(|i| 0.4 * (2.0 * std::f64::consts::PI * freq * i as f64 / 8000.0).sin())
            .collect();
        AudioSegment::new("tone", s, 8000)
    }

    #[test]
    fn highres_is_forty_dims() {
        let cfg = FrontEndConfig::highres();
        let f = frame_and_window(&tone(440.0, 0.5), &cfg, 0).unwrap();
        let c = compute_cepstra(&f, &cfg).unwrap();
        assert_eq!(c.cols(), 40);
        assert_eq!(c.rows(), 48);
    }

    #[test]
    fn mfcc20_has_energy_in_column_zero() {
        let cfg = FrontEndConfig::mfcc20();
        let f = frame_and_window(&tone(440.0, 0.5), &cfg, 0).unwrap();
        let c = compute_cepstra(&f, &cfg).unwrap();
        assert_eq!(c.cols(), 20);
        for t in 0..c.rows() {
            assert_eq!(c.get(t, 0), f.log_energy[t]);
        }
    }

    #[test]
    fn silence_gives_finite_output() {
        let cfg = FrontEndConfig {
            dither_amplitude: 0.0,
            ..FrontEndConfig::mfcc20()
        };
        let audio = AudioSegment::new("s", vec![0.0; 2000], 8000);
        let f = frame_and_window(&audio, &cfg, 0).unwrap();
        let c = compute_cepstra(&f, &cfg).unwrap();
        assert!(c.all_finite());
    }

    #[test]
    fn dct_is_orthonormal() {
        let d = dct_matrix(23, 23);
        for i in 0..23 {
            for j in 0..23 {
                let dot: f64 = d[i].iter().zip(&d[j]).map(|(a, b)| a * b).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-12);
            }
        }
    }
}
