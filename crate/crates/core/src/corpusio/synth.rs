//! Synthetic multi-language speech: each language is a Markov chain over a
//! subset of a shared phone inventory, and each phone is rendered as three
//! formant sinusoids plus white noise.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};

use super::audio::write_wav;
use super::manifest::{write_labels, Manifest, ManifestRow};
use crate::error::{LidError, Result};
use crate::features::AudioSegment;

/// Label blocks are 10 ms long.
pub const LABEL_BLOCK_S: f64 = 0.01;
const PEAK: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthPhone {
    /// Index in the shared inventory; doubles as the frame label.
    pub global_id: u32,
    pub formants_hz: [f64; 3],
    /// Sinusoid amplitudes; all zero for silence.
    pub gains: [f64; 3],
    pub noise_level: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthLanguageSpec {
    pub language: String,
    pub phones: Vec<SynthPhone>,
    /// Row-stochastic transitions between entries of `phones`.
    pub transitions: Vec<Vec<f64>>,
    /// Mean phone duration in 10 ms frames.
    pub mean_phone_frames: f64,
}

impl SynthLanguageSpec {
    pub fn num_phones(&self) -> usize {
        self.phones.len()
    }

    pub fn validate(&self, sample_rate_hz: u32, max_warp: f64) -> Result<()> {
        let k = self.phones.len();
        if k == 0 {
            return Err(LidError::InvalidConfig(format!("language {} has no phones", self.language)));
        }
        if self.transitions.len() != k || self.transitions.iter().any(|r| r.len() != k) {
            return Err(LidError::InvalidConfig(format!(
                "language {}: transition matrix is not {k}x{k}",
                self.language
            )));
        }
        for (i, row) in self.transitions.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|p| !(*p >= 0.0)) {
                return Err(LidError::InvalidConfig(format!(
                    "language {}: transition row {i} sums to {s}",
                    self.language
                )));
            }
        }
        let nyquist = f64::from(sample_rate_hz) / 2.0;
        for p in &self.phones {
            if p.formants_hz.iter().any(|&f| !(f > 0.0) || f * max_warp >= nyquist) {
                return Err(LidError::InvalidConfig(format!(
                    "language {}: phone {} formants {:?} exceed Nyquist {nyquist} Hz",
                    self.language, p.global_id, p.formants_hz
                )));
            }
        }
        if !(self.mean_phone_frames >= 1.0) {
            return Err(LidError::InvalidConfig("mean phone duration must be at least one frame".into()));
        }
        Ok(())
    }
}

/// Parameters of a randomly drawn family of related languages.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct FamilyConfig {
    pub num_languages: usize,
    /// Shared inventory size including the silence phone 0.
    pub inventory_size: usize,
    /// Non-silence phones used by each language.
    pub phones_per_language: usize,
    /// Relative per-language perturbation of each phone's formants.
    pub formant_jitter: f64,
    pub noise_level: f64,
    pub mean_phone_frames: f64,
    /// Gamma shape for transition rows; small values give peaky phonotactics.
    pub transition_concentration: f64,
    /// Probability of moving into silence from any phone.
    pub silence_prob: f64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self {
            num_languages: 5,
            inventory_size: 64,
            phones_per_language: 32,
            formant_jitter: 0.02,
            noise_level: 0.3,
            mean_phone_frames: 8.0,
            transition_concentration: 0.3,
            silence_prob: 0.05,
        }
    }
}

fn random_row(rng: &mut ChaCha8Rng, len: usize, shape: f64, skip: Option<usize>) -> Vec<f64> {
    let gamma = Gamma::new(shape, 1.0).expect("positive shape");
    let mut row: Vec<f64> = (0..len)
        .map(|j| if Some(j) == skip { 0.0 } else { gamma.sample(rng).max(1e-12) })
        .collect();
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= s);
    row
}

/// The shared phone inventory: phone 0 is silence, the rest get random
/// formant triples in typical F1/F2/F3 ranges.
pub fn phone_inventory(size: usize, noise_level: f64, seed: u64) -> Vec<SynthPhone> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..size as u32)
        .map(|id| {
            if id == 0 {
                SynthPhone {
                    global_id: 0,
                    formants_hz: [500.0, 1500.0, 2500.0],
                    gains: [0.0; 3],
                    noise_level,
                }
            } else {
                SynthPhone {
                    global_id: id,
                    formants_hz: [
                        rng.random_range(250.0..850.0),
                        rng.random_range(850.0..2300.0),
                        rng.random_range(2300.0..3400.0),
                    ],
                    gains: [1.0, 0.5, 0.25],
                    noise_level,
                }
            }
        })
        .collect()
}

/// Draws `num_languages` languages over one shared inventory. Names are
/// `lang0`, `lang1`, ...; extra languages drawn with the same seed and a
/// larger count extend the family without changing earlier members.
pub fn language_family(cfg: &FamilyConfig, seed: u64) -> Result<Vec<SynthLanguageSpec>> {
    if cfg.inventory_size < 2 || cfg.phones_per_language == 0 || cfg.phones_per_language >= cfg.inventory_size {
        return Err(LidError::InvalidConfig(format!(
            "cannot draw {} phones per language from an inventory of {}",
            cfg.phones_per_language, cfg.inventory_size
        )));
    }
    if !(cfg.silence_prob >= 0.0 && cfg.silence_prob < 1.0) || !(cfg.transition_concentration > 0.0) {
        return Err(LidError::InvalidConfig("bad silence probability or concentration".into()));
    }
    let inventory = phone_inventory(cfg.inventory_size, cfg.noise_level, seed);
    (0..cfg.num_languages)
        .map(|l| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(l as u64 + 1)));
            let mut ids: Vec<usize> = sample(&mut rng, cfg.inventory_size - 1, cfg.phones_per_language)
                .into_iter()
                .map(|i| i + 1)
                .collect();
            ids.sort_unstable();
            ids.insert(0, 0);
            let phones: Vec<SynthPhone> = ids
                .iter()
                .map(|&g| {
                    let mut p = inventory[g].clone();
                    if g != 0 {
                        for f in &mut p.formants_hz {
                            *f *= 1.0 + rng.random_range(-cfg.formant_jitter..=cfg.formant_jitter);
                        }
                    }
                    p
                })
                .collect();
            let k = phones.len();
            let transitions = (0..k)
                .map(|i| {
                    if i == 0 {
                        let mut row = random_row(&mut rng, k, 1.0, Some(0));
                        row[0] = 0.0;
                        row
                    } else {
                        let mut row = random_row(&mut rng, k, cfg.transition_concentration, Some(i));
                        row[0] = 0.0;
                        let speech: f64 = row.iter().sum();
                        row.iter_mut().for_each(|v| *v *= (1.0 - cfg.silence_prob) / speech);
                        row[0] = cfg.silence_prob;
                        row
                    }
                })
                .collect();
            Ok(SynthLanguageSpec {
                language: format!("lang{l}"),
                phones,
                transitions,
                mean_phone_frames: cfg.mean_phone_frames,
            })
        })
        .collect()
}

/// One rendered utterance with its per-block phone labels.
#[derive(Debug, Clone)]
pub struct SynthUtterance {
    pub audio: AudioSegment,
    pub labels: Vec<u32>,
}

fn sample_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Renders one utterance. `speaker_warp` scales every formant.
pub fn synthesize_utterance(
    spec: &SynthLanguageSpec,
    utt_id: &str,
    duration_s: f64,
    sample_rate_hz: u32,
    speaker_warp: f64,
    seed: u64,
) -> Result<SynthUtterance> {
    spec.validate(sample_rate_hz, speaker_warp.max(1.0))?;
    let block = (f64::from(sample_rate_hz) * LABEL_BLOCK_S).round() as usize;
    let num_blocks = (duration_s / LABEL_BLOCK_S).round() as usize;
    if block == 0 || num_blocks == 0 {
        return Err(LidError::InvalidInput(format!("utterance {utt_id} has no samples")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(num_blocks * block);
    let mut labels = Vec::with_capacity(num_blocks);
    let k = spec.num_phones();
    let mut phone = rng.random_range(0..k);
    let sr = f64::from(sample_rate_hz);
    while labels.len() < num_blocks {
        let p = &spec.phones[phone];
        let frames = ((spec.mean_phone_frames * rng.random_range(0.5..1.5)).round() as usize).max(2);
        let frames = frames.min(num_blocks - labels.len());
        let gain = rng.random_range(0.7..1.0);
        let phases: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
        let noise = Normal::new(0.0, p.noise_level.max(0.0)).expect("finite noise level");
        for n in 0..frames * block {
            let t = n as f64 / sr;
            let mut v = 0.0;
            for j in 0..3 {
                if p.gains[j] != 0.0 {
                    v += p.gains[j] * (2.0 * PI * p.formants_hz[j] * speaker_warp * t + phases[j]).sin();
                }
            }
            samples.push(gain * v + noise.sample(&mut rng));
        }
        labels.extend(std::iter::repeat_n(p.global_id, frames));
        phone = sample_index(&mut rng, &spec.transitions[phone]);
    }
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        samples.iter_mut().for_each(|v| *v *= PEAK / peak);
    }
    Ok(SynthUtterance {
        audio: AudioSegment::new(utt_id, samples, sample_rate_hz),
        labels,
    })
}

/// What to render for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtterancePlan {
    pub utt_id: String,
    pub language: usize,
    pub duration_s: f64,
    pub speaker_warp: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub utts_per_language: usize,
    /// Durations are assigned round-robin within each language.
    pub durations_s: Vec<f64>,
    pub sample_rate_hz: u32,
    /// Per-utterance speaker warp drawn uniformly from this range.
    pub speaker_warp_range: Option<(f64, f64)>,
    pub seed: u64,
    pub prefix: String,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            utts_per_language: 100,
            durations_s: vec![3.0, 10.0, 30.0],
            sample_rate_hz: 8000,
            speaker_warp_range: None,
            seed: 1,
            prefix: "utt".into(),
        }
    }
}

/// Utterance list; utterance `i` (over all languages) uses seed `seed + i`.
pub fn plan_corpus(specs: &[SynthLanguageSpec], cfg: &CorpusConfig) -> Result<Vec<UtterancePlan>> {
    if specs.is_empty() || cfg.durations_s.is_empty() || cfg.durations_s.iter().any(|d| !(*d > 0.0)) {
        return Err(LidError::InvalidConfig("corpus needs languages and positive durations".into()));
    }
    let mut warp_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut out = Vec::with_capacity(specs.len() * cfg.utts_per_language);
    for (l, spec) in specs.iter().enumerate() {
        for i in 0..cfg.utts_per_language {
            let idx = out.len() as u64;
            let speaker_warp = match cfg.speaker_warp_range {
                Some((lo, hi)) if hi > lo => warp_rng.random_range(lo..hi),
                Some((lo, _)) => lo,
                None => 1.0,
            };
            out.push(UtterancePlan {
                utt_id: format!("{}_{}_{i:05}", cfg.prefix, spec.language),
                language: l,
                duration_s: cfg.durations_s[i % cfg.durations_s.len()],
                speaker_warp,
                seed: cfg.seed.wrapping_add(idx),
            });
        }
    }
    Ok(out)
}

pub fn render(specs: &[SynthLanguageSpec], plan: &UtterancePlan, sample_rate_hz: u32) -> Result<SynthUtterance> {
    synthesize_utterance(
        &specs[plan.language],
        &plan.utt_id,
        plan.duration_s,
        sample_rate_hz,
        plan.speaker_warp,
        plan.seed,
    )
}

/// Writes `audio/<id>.wav`, `labels/<id>.lab` and `manifest.tsv` under
/// `out_dir` and returns the manifest. Paths in the manifest are relative.
pub fn synthesize_corpus(specs: &[SynthLanguageSpec], cfg: &CorpusConfig, out_dir: &Path) -> Result<Manifest> {
    if specs.len() < 2 {
        return Err(LidError::InvalidConfig("a corpus needs at least two languages".into()));
    }
    let plans = plan_corpus(specs, cfg)?;
    let mut rows = Vec::with_capacity(plans.len());
    for plan in &plans {
        let utt = render(specs, plan, cfg.sample_rate_hz)?;
        let rel = PathBuf::from("audio").join(format!("{}.wav", plan.utt_id));
        write_wav(&out_dir.join(&rel), &utt.audio)?;
        write_labels(&out_dir.join("labels").join(format!("{}.lab", plan.utt_id)), &utt.labels)?;
        rows.push(ManifestRow {
            utt_id: plan.utt_id.clone(),
            path: rel,
            language: specs[plan.language].language.clone(),
            duration_s: plan.duration_s,
            vtln_warp: cfg.speaker_warp_range.map(|_| plan.speaker_warp),
        });
    }
    let manifest = Manifest::new(rows)?;
    manifest.write(&out_dir.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Label file path for a manifest row written by [`synthesize_corpus`].
pub fn label_path(corpus_dir: &Path, utt_id: &str) -> PathBuf {
    corpus_dir.join("labels").join(format!("{utt_id}.lab"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn single_phone(noise: f64) -> SynthLanguageSpec {
        SynthLanguageSpec {
            language: "mono".into(),
            phones: vec![SynthPhone {
                global_id: 1,
                formants_hz: [500.0, 1500.0, 2500.0],
                gains: [1.0, 0.5, 0.25],
                noise_level: noise,
            }],
            transitions: vec![vec![1.0]],
            mean_phone_frames: 8.0,
        }
    }

    #[test]
    fn spectral_peaks_sit_on_formants() {
        let u = synthesize_utterance(&single_phone(0.0), "x", 1.0, 8000, 1.0, 3).unwrap();
        // One 10 ms segment of length 8 blocks = 640 samples; take 512 inside the first.
        let n = 512;
        let mut buf: Vec<Complex<f64>> = u.audio.samples[..n].iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let mag: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm()).collect();
        let bin_hz = 8000.0 / n as f64;
        for f in [500.0, 1500.0, 2500.0] {
            let center = (f / bin_hz).round() as usize;
            let lo = center.saturating_sub(8);
            let hi = (center + 8).min(mag.len() - 1);
            let peak = (lo..=hi).max_by(|&a, &b| mag[a].partial_cmp(&mag[b]).unwrap()).unwrap();
            assert!((peak as f64 * bin_hz - f).abs() <= bin_hz, "formant {f}: peak at bin {peak}");
        }
    }

    #[test]
    fn same_seed_same_audio() {
        let fam = language_family(&FamilyConfig::default(), 4).unwrap();
        let a = synthesize_utterance(&fam[1], "a", 3.0, 8000, 1.0, 17).unwrap();
        let b = synthesize_utterance(&fam[1], "a", 3.0, 8000, 1.0, 17).unwrap();
        assert_eq!(a.audio.samples, b.audio.samples);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.labels.len(), 300);
        assert_eq!(a.audio.samples.len(), 24000);
        let peak = a.audio.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 0.5).abs() < 1e-12);
    }

    #[test]
    fn family_specs_are_valid() {
        let cfg = FamilyConfig::default();
        let fam = language_family(&cfg, 9).unwrap();
        assert_eq!(fam.len(), 5);
        for spec in &fam {
            spec.validate(8000, 1.0).unwrap();
            assert_eq!(spec.num_phones(), cfg.phones_per_language + 1);
            assert_eq!(spec.phones[0].global_id, 0);
            assert!(spec.phones.iter().all(|p| (p.global_id as usize) < cfg.inventory_size));
        }
        let bigger = language_family(&FamilyConfig { num_languages: 6, ..cfg }, 9).unwrap();
        assert_eq!(&bigger[..5], &fam[..]);
    }

    #[test]
    fn formant_above_nyquist_is_rejected() {
        let mut spec = single_phone(0.1);
        spec.phones[0].formants_hz[2] = 4100.0;
        assert!(synthesize_utterance(&spec, "x", 1.0, 8000, 1.0, 0).is_err());
    }

    #[test]
    fn plan_counts_and_duration_cycle() {
        let fam = language_family(&FamilyConfig::default(), 1).unwrap();
        let plans = plan_corpus(&fam, &CorpusConfig::default()).unwrap();
        assert_eq!(plans.len(), 500);
        assert_eq!(plans.iter().filter(|p| p.duration_s == 30.0).count(), 5 * 33);
        let cfg = CorpusConfig {
            utts_per_language: 300,
            ..CorpusConfig::default()
        };
        assert_eq!(plan_corpus(&fam, &cfg).unwrap().len(), 1500);
    }

    #[test]
    fn corpus_on_disk_is_reproducible() {
        let fam = language_family(
            &FamilyConfig {
                num_languages: 2,
                ..FamilyConfig::default()
            },
            2,
        )
        .unwrap();
        let cfg = CorpusConfig {
            utts_per_language: 2,
            durations_s: vec![3.0],
            ..CorpusConfig::default()
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = synthesize_corpus(&fam, &cfg, d1.path()).unwrap();
        let m2 = synthesize_corpus(&fam, &cfg, d2.path()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.len(), 4);
        for r in &m1.rows {
            let a = std::fs::read(d1.path().join(&r.path)).unwrap();
            let b = std::fs::read(d2.path().join(&r.path)).unwrap();
            assert_eq!(a, b);
        }
    }
}
