use std::path::Path;

use crate::error::{LidError, Result};
use crate::features::AudioSegment;

/// Reads a PCM16 WAV file; multi-channel files keep the first channel.
pub fn read_wav(path: &Path) -> Result<AudioSegment> {
    let fail = |reason: String| LidError::Format {
        path: path.display().to_string(),
        offset: 0,
        reason,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => LidError::io(path, io),
        other => fail(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(fail(format!(
            "unsupported WAV encoding: {:?} {} bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let channels = spec.channels.max(1) as usize;
    let samples = reader
        .samples::<i16>()
        .step_by(channels)
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| fail(e.to_string()))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(AudioSegment::new(id, samples, spec.sample_rate))
}

/// Writes mono PCM16, clipping to the representable range.
pub fn write_wav(path: &Path, audio: &AudioSegment) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| LidError::io(dir, e))?;
    }
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => LidError::io(path, io),
        other => LidError::InvalidInput(other.to_string()),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(to_err)?;
    for &s in &audio.samples {
        let v = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(to_err)?;
    }
    w.finalize().map_err(to_err)
}

/// G.711 mu-law byte to a linear sample in `[-1, 1)`.
pub fn mulaw_to_linear(byte: u8) -> f64 {
    let u = !byte;
    let exponent = (u >> 4) & 0x07;
    let mantissa = i32::from(u & 0x0f);
    let magnitude = (((mantissa << 3) + 0x84) << exponent) - 0x84;
    let v = if u & 0x80 != 0 { -magnitude } else { magnitude };
    f64::from(v) / 32768.0
}

/// G.711 mu-law encoding of a linear sample in `[-1, 1]`.
pub fn linear_to_mulaw(sample: f64) -> u8 {
    const BIAS: i32 = 0x84;
    const CLIP: i32 = 32635;
    let mut pcm = (sample * 32768.0).round() as i32;
    let sign = if pcm < 0 {
        pcm = -pcm;
        0x80
    } else {
        0
    };
    pcm = pcm.min(CLIP) + BIAS;
    let exponent = (0..8).rev().find(|&e| pcm & (0x80 << e) != 0).unwrap_or(0);
    let mantissa = (pcm >> (exponent + 3)) & 0x0f;
    !((sign | (exponent << 4) | mantissa) as u8)
}

/// Headerless mu-law file at the given sample rate.
pub fn read_mulaw(path: &Path, sample_rate_hz: u32) -> Result<AudioSegment> {
    let bytes = std::fs::read(path).map_err(|e| LidError::io(path, e))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(AudioSegment::new(id, bytes.into_iter().map(mulaw_to_linear).collect(), sample_rate_hz))
}

/// Loads audio by extension: `.wav` as PCM16, `.ul`/`.mulaw`/`.raw` as 8 kHz mu-law.
pub fn read_audio(path: &Path) -> Result<AudioSegment> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ul" | "mulaw" | "raw") => read_mulaw(path, 8000),
        _ => read_wav(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mulaw_reference_points() {
        assert_eq!(mulaw_to_linear(0xff), 0.0);
        assert_eq!(mulaw_to_linear(0x7f), 0.0);
        assert_eq!(mulaw_to_linear(0x80), 32124.0 / 32768.0);
        assert_eq!(mulaw_to_linear(0x00), -32124.0 / 32768.0);
    }

    #[test]
    fn mulaw_roundtrip_on_codewords() {
        for b in 0..=255u8 {
            let lin = mulaw_to_linear(b);
            let back = linear_to_mulaw(lin);
            // 0x7f and 0xff both decode to zero.
            assert_eq!(mulaw_to_linear(back), lin, "byte {b:#x}");
        }
    }

    #[test]
    fn wav_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..800).map(|i| 0.5 * (i as f64 * 0.05).sin()).collect();
        write_wav(&p, &AudioSegment::new("t", samples.clone(), 8000)).unwrap();
        let back = read_audio(&p).unwrap();
        assert_eq!(back.sample_rate_hz, 8000);
        assert_eq!(back.utt_id, "t");
        for (a, b) in samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1.0 / 16000.0);
        }
    }
}
