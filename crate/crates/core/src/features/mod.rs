//! Acoustic front-end: framing, mel cepstra with VTLN-warped filterbanks,
//! deltas, shifted delta cepstra, sliding cepstral mean normalization and
//! an energy based speech activity detector.

mod cepstra;
mod cmn;
mod deltas;
mod frames;
mod mel;
mod vad;
mod vtln;

pub use cepstra::compute_cepstra;
pub use cmn::sliding_cmn;
pub use deltas::{add_deltas, compute_sdc, SdcConfig};
pub use frames::{frame_and_window, WindowedFrames};
pub use mel::{mel_scale, vtln_warp_freq, MelFilterbank};
pub use vad::{energy_vad, VadConfig, VadMask};
pub use vtln::{estimate_vtln_warp, vtln_probe_features, warp_grid};

use crate::error::{LidError, Result};

pub use crate::matrix::FeatureMatrix;

/// A mono utterance with amplitudes in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct AudioSegment {
    pub samples: Vec<f64>,
    pub sample_rate_hz: u32,
    pub utt_id: String,
}

impl AudioSegment {
    pub fn new(utt_id: impl Into<String>, samples: Vec<f64>, sample_rate_hz: u32) -> Self {
        Self {
            samples,
            sample_rate_hz,
            utt_id: utt_id.into(),
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate_hz)
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FrontEndConfig {
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
    pub dither_amplitude: f64,
    pub preemphasis_coeff: f64,
    pub num_mel_bins: usize,
    pub num_cepstra: usize,
    pub low_freq_hz: f64,
    pub high_freq_hz: f64,
    /// Filterbank warp factor; 1.0 leaves the filterbank untouched.
    pub vtln_warp: f64,
    /// Replace cepstrum 0 with the log frame energy.
    pub use_energy: bool,
}

impl Default for FrontEndConfig {
    fn default() -> Self {
        Self::sdc_static()
    }
}

impl FrontEndConfig {
    /// Static cepstra feeding the 7-1-3-7 SDC stack: log energy plus c1..c6
    /// from 20 ms windows.
    pub fn sdc_static() -> Self {
        Self {
            frame_len_ms: 20.0,
            frame_shift_ms: 10.0,
            dither_amplitude: 1.0 / 32768.0,
            preemphasis_coeff: 0.97,
            num_mel_bins: 23,
            num_cepstra: 7,
            low_freq_hz: 20.0,
            high_freq_hz: 3800.0,
            vtln_warp: 1.0,
            use_energy: true,
        }
    }

    /// 19 cepstra plus log energy; 60 dimensions once deltas and
    /// accelerations are appended.
    pub fn mfcc20() -> Self {
        Self {
            num_cepstra: 20,
            ..Self::sdc_static()
        }
    }

    /// 40 cepstra from 40 mel bins over 25 ms windows, no truncation.
    pub fn highres() -> Self {
        Self {
            frame_len_ms: 25.0,
            num_mel_bins: 40,
            num_cepstra: 40,
            use_energy: false,
            ..Self::sdc_static()
        }
    }

    pub fn frame_len_samples(&self, sample_rate_hz: u32) -> usize {
        (self.frame_len_ms * f64::from(sample_rate_hz) / 1000.0).round() as usize
    }

    pub fn frame_shift_samples(&self, sample_rate_hz: u32) -> usize {
        (self.frame_shift_ms * f64::from(sample_rate_hz) / 1000.0).round() as usize
    }

    pub fn frame_shift_s(&self) -> f64 {
        self.frame_shift_ms / 1000.0
    }

    pub fn validate(&self, sample_rate_hz: u32) -> Result<()> {
        let bad = |msg: String| Err(LidError::InvalidConfig(msg));
        if sample_rate_hz == 0 {
            return bad("sample rate must be positive".into());
        }
        if !(self.frame_shift_ms > 0.0 && self.frame_shift_ms <= self.frame_len_ms) {
            return bad(format!(
                "need 0 < frame_shift_ms ({}) <= frame_len_ms ({})",
                self.frame_shift_ms, self.frame_len_ms
            ));
        }
        if self.frame_shift_samples(sample_rate_hz) == 0 {
            return bad("frame shift rounds to zero samples".into());
        }
        if self.num_mel_bins == 0 || self.num_cepstra == 0 || self.num_cepstra > self.num_mel_bins
        {
            return bad(format!(
                "need 0 < num_cepstra ({}) <= num_mel_bins ({})",
                self.num_cepstra, self.num_mel_bins
            ));
        }
        let nyquist = f64::from(sample_rate_hz) / 2.0;
        if !(self.low_freq_hz >= 0.0
            && self.low_freq_hz < self.high_freq_hz
            && self.high_freq_hz <= nyquist)
        {
            return bad(format!(
                "need 0 <= low_freq_hz ({}) < high_freq_hz ({}) <= {nyquist}",
                self.low_freq_hz, self.high_freq_hz
            ));
        }
        if !(self.vtln_warp > 0.0 && self.vtln_warp.is_finite()) {
            return bad(format!("vtln_warp must be positive, got {}", self.vtln_warp));
        }
        if self.dither_amplitude < 0.0 {
            return bad("dither_amplitude must be non-negative".into());
        }
        Ok(())
    }
}

/// Static cepstra for one utterance: framing, windowing, filterbank and DCT.
pub fn static_cepstra(audio: &AudioSegment, cfg: &FrontEndConfig, seed: u64) -> Result<FeatureMatrix> {
    let frames = frame_and_window(audio, cfg, seed)?;
    compute_cepstra(&frames, cfg)
}
