use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AudioSegment, FrontEndConfig};
use crate::error::{LidError, Result};

/// Windowed analysis frames plus the raw log energy of each frame, which is
/// measured after dither but before preemphasis and windowing.
#[derive(Debug, Clone)]
pub struct WindowedFrames {
    pub num_frames: usize,
    pub frame_len: usize,
    pub sample_rate_hz: u32,
    pub frame_shift_s: f64,
    /// Row-major `num_frames x frame_len`.
    pub data: Vec<f64>,
    pub log_energy: Vec<f64>,
}

impl WindowedFrames {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.frame_len..(t + 1) * self.frame_len]
    }
}

pub(crate) fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let denom = (n - 1) as f64;
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / denom).cos())
        .collect()
}

pub fn frame_and_window(
    audio: &AudioSegment,
    cfg: &FrontEndConfig,
    seed: u64,
) -> Result<WindowedFrames> {
    cfg.validate(audio.sample_rate_hz)?;
    let len = cfg.frame_len_samples(audio.sample_rate_hz);
    let shift = cfg.frame_shift_samples(audio.sample_rate_hz);
    let n = audio.samples.len();
    if n < len || len == 0 {
        return Err(LidError::TooShort {
            samples: n,
            needed: len,
        });
    }
    let num_frames = (n - len) / shift + 1;
    let window = hamming(len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let amp = cfg.dither_amplitude;

    let mut data = vec![0.0; num_frames * len];
    let mut log_energy = Vec::with_capacity(num_frames);
    let mut buf = vec![0.0; len];
    for t in 0..num_frames {
        let start = t * shift;
        buf.copy_from_slice(&audio.samples[start..start + len]);
        if amp > 0.0 {
            for v in buf.iter_mut() {
                *v += rng.random_range(-amp..=amp);
            }
        }
        let energy: f64 = buf.iter().map(|v| v * v).sum();
        log_energy.push(energy.max(f64::EPSILON).ln());

        let out = &mut data[t * len..(t + 1) * len];
        let k = cfg.preemphasis_coeff;
        for i in (1..len).rev() {
            out[i] = (buf[i] - k * buf[i - 1]) * window[i];
        }
        out[0] = (buf[0] - k * buf[0]) * window[0];
    }

    Ok(WindowedFrames {
        num_frames,
        frame_len: len,
        sample_rate_hz: audio.sample_rate_hz,
        frame_shift_s: cfg.frame_shift_s(),
        data,
        log_energy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_for_one_second_at_8k() {
        let audio = AudioSegment::new("u", vec![0.1; 8000], 8000);
        let cfg = FrontEndConfig::sdc_static();
        let f = frame_and_window(&audio, &cfg, 0).unwrap();
        assert_eq!(f.num_frames, 99);
        assert_eq!(f.frame_len, 160);
    }

    #[test]
    fn zero_audio_without_dither_gives_zero_frames() {
        let audio = AudioSegment::new("u", vec![0.0; 1000], 8000);
        let cfg = FrontEndConfig {
            dither_amplitude: 0.0,
            ..FrontEndConfig::sdc_static()
        };
        let f = frame_and_window(&audio, &cfg, 3).unwrap();
        assert!(f.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let samples: Vec<f64> = (0..4000).map(|i| (i as f64 * 0.01).sin() * 0.3).collect();
        let audio = AudioSegment::new("u", samples, 8000);
        let cfg = FrontEndConfig::sdc_static();
        let a = frame_and_window(&audio, &cfg, 42).unwrap();
        let b = frame_and_window(&audio, &cfg, 42).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.log_energy, b.log_energy);
        let c = frame_and_window(&audio, &cfg, 43).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn too_short_is_an_error() {
        let audio = AudioSegment::new("u", vec![0.0; 100], 8000);
        let err = frame_and_window(&audio, &FrontEndConfig::sdc_static(), 0).unwrap_err();
        assert!(matches!(err, LidError::TooShort { samples: 100, needed: 160 }));
    }

    #[test]
    fn dither_stays_within_amplitude() {
        let audio = AudioSegment::new("u", vec![0.0; 800], 8000);
        let cfg = FrontEndConfig {
            preemphasis_coeff: 0.0,
            dither_amplitude: 0.01,
            ..FrontEndConfig::sdc_static()
        };
        let f = frame_and_window(&audio, &cfg, 1).unwrap();
        let w = hamming(f.frame_len);
        for t in 0..f.num_frames {
            for (v, wi) in f.frame(t).iter().zip(&w) {
                assert!(v.abs() <= 0.01 * wi + 1e-15);
            }
        }
    }
}
