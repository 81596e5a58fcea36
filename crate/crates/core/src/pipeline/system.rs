//! Building blocks shared by the on-disk stages and the in-memory experiment.

use log::{info, warn};
use nalgebra::DVector;
use rayon::prelude::*;

use super::config::{FeatureSettings, FeatureType, IvectorSettings, NnetSettings, PosteriorKind};
use crate::classifier::{predict_posteriors, stack_rows, train_logreg, LogRegModel, TrainOptions};
use crate::error::{LidError, Result};
use crate::eval::{Trial, TrialSet};
use crate::features::{
    add_deltas, compute_sdc, energy_vad, estimate_vtln_warp, sliding_cmn, static_cepstra, vtln_probe_features,
    warp_grid, AudioSegment, FrontEndConfig, VadMask,
};
use crate::gmm::{train_diag_ubm, train_ubm, DiagGmm, MixtureModel, PosteriorMatrix, TandemUbm, UbmConfig};
use crate::ivector::{em_iteration, init_supervised_gmm, IvectorExtractor};
use crate::matrix::FeatureMatrix;
use crate::nnet::{labels_for_frames, train_sgd, FrameLabels, TddnnModel, TrainLog};
use crate::stats::{accumulate_stats, align_frame_counts, FeatureStream, PosteriorSource, SuffStats};

/// Stable per-utterance seed (FNV-1a over the id, mixed with `base`).
pub fn utt_seed(base: u64, utt_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in utt_id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Feature streams of one utterance.
///
/// `lid` holds only the speech frames, mean-normalized over a sliding window.
/// `mask` and `highres` cover every frame, cut to a common length.
#[derive(Debug, Clone, PartialEq)]
pub struct UttFeatures {
    pub utt_id: String,
    pub lid: FeatureMatrix,
    pub mask: VadMask,
    pub highres: Option<FeatureMatrix>,
}

impl UttFeatures {
    fn check(&self) -> Result<()> {
        if self.lid.rows() != self.mask.num_speech() {
            return Err(LidError::DimensionMismatch {
                context: "speech frames vs VAD mask",
                expected: self.mask.num_speech(),
                actual: self.lid.rows(),
            });
        }
        if let Some(h) = &self.highres {
            if h.rows() != self.mask.len() {
                return Err(LidError::DimensionMismatch {
                    context: "high-resolution frames vs VAD mask",
                    expected: self.mask.len(),
                    actual: h.rows(),
                });
            }
        }
        Ok(())
    }
}

fn lid_front_end(fs: &FeatureSettings, ft: FeatureType, warp: f64) -> FrontEndConfig {
    let base = match ft {
        FeatureType::Sdc => &fs.sdc_features,
        FeatureType::Mfcc60 => &fs.mfcc_features,
    };
    FrontEndConfig {
        vtln_warp: warp,
        ..base.clone()
    }
}

/// Computes the LID stream (SDC or MFCC with deltas), the energy VAD mask
/// and optionally the high-resolution stream for one utterance.
pub fn extract_features(
    audio: &AudioSegment,
    fs: &FeatureSettings,
    ft: FeatureType,
    warp: f64,
    with_highres: bool,
    seed: u64,
) -> Result<UttFeatures> {
    let static_cfg = lid_front_end(fs, ft, warp);
    let statics = static_cepstra(audio, &static_cfg, seed)?;
    let mut feats = match ft {
        FeatureType::Sdc => compute_sdc(&statics, &fs.sdc)?,
        FeatureType::Mfcc60 => add_deltas(&statics, 2, 2)?,
    };
    let mut mask = energy_vad(&statics, &fs.vad);
    let highres = if with_highres {
        let hr = static_cepstra(audio, &fs.highres_features, seed ^ 0x4849)?;
        let n = align_frame_counts(feats.rows(), hr.rows(), 2, &audio.utt_id)?;
        feats = feats.truncate_rows(n);
        mask.truncate(n);
        Some(sliding_cmn(&hr.truncate_rows(n), fs.highres_cmn_window_s, true))
    } else {
        None
    };
    if mask.num_speech() == 0 {
        warn!("{}: no speech frames detected, keeping every frame", audio.utt_id);
        mask = VadMask::all(mask.len());
    }
    let speech = feats.select_rows(&mask.flags)?;
    Ok(UttFeatures {
        utt_id: audio.utt_id.clone(),
        lid: sliding_cmn(&speech, fs.cmn_window_s, true),
        mask,
        highres,
    })
}

/// Frame targets aligned with the high-resolution stream.
pub fn frame_labels(block_labels: &[u32], feats: &UttFeatures, fs: &FeatureSettings) -> Result<FrameLabels> {
    let hr = feats
        .highres
        .as_ref()
        .ok_or_else(|| LidError::InvalidInput(format!("{}: no high-resolution features", feats.utt_id)))?;
    let cfg = &fs.highres_features;
    labels_for_frames(block_labels, hr.rows(), cfg.frame_len_ms / 1000.0, cfg.frame_shift_s())
}

/// Diagonal warp-selection GMM trained on unwarped probe features.
pub fn train_warp_model(audio: &[AudioSegment], fs: &FeatureSettings, seed: u64) -> Result<DiagGmm> {
    let feats = audio
        .par_iter()
        .map(|a| vtln_probe_features(a, &fs.vtln_probe, 1.0, utt_seed(seed, &a.utt_id)))
        .collect::<Result<Vec<_>>>()?;
    let (gmm, trace) = train_diag_ubm(&feats, fs.vtln_components, fs.vtln_iters, seed)?;
    info!(
        "warp model: {} components, log-likelihood {:.4e}",
        gmm.num_components(),
        trace.loglikes.last().copied().unwrap_or(f64::NAN)
    );
    Ok(gmm)
}

pub fn estimate_warp(audio: &AudioSegment, fs: &FeatureSettings, model: &DiagGmm, seed: u64) -> Result<f64> {
    estimate_vtln_warp(audio, &fs.vtln_probe, model, &warp_grid(), utt_seed(seed, &audio.utt_id))
}

/// A trained frame-posterior model of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum PosteriorModel {
    Gmm(TandemUbm),
    Dnn(TddnnModel),
}

impl PosteriorModel {
    pub fn kind(&self) -> PosteriorKind {
        match self {
            PosteriorModel::Gmm(_) => PosteriorKind::Gmm,
            PosteriorModel::Dnn(_) => PosteriorKind::Dnn,
        }
    }

    pub fn source(&self) -> &dyn PosteriorSource {
        match self {
            PosteriorModel::Gmm(u) => u,
            PosteriorModel::Dnn(n) => n,
        }
    }
}

pub fn train_gmm_ubm(train: &[&UttFeatures], cfg: &UbmConfig) -> Result<TandemUbm> {
    let lid: Vec<&FeatureMatrix> = train.iter().map(|u| &u.lid).collect();
    train_ubm(&lid, cfg)
}

/// Trains the frame classifier on high-resolution features and phone targets.
pub fn train_dnn(train: &[(&UttFeatures, &FrameLabels)], cfg: &NnetSettings) -> Result<(TddnnModel, TrainLog)> {
    let data = train
        .iter()
        .map(|(u, y)| {
            let hr = u
                .highres
                .as_ref()
                .ok_or_else(|| LidError::InvalidInput(format!("{}: no high-resolution features", u.utt_id)))?;
            Ok((hr.clone(), (*y).clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = TddnnModel::build(cfg.model.clone(), cfg.seed)?;
    model.fit_input_normalization(data.iter().map(|(f, _)| f))?;
    let sample: Vec<&FeatureMatrix> = data.iter().step_by(data.len().div_ceil(40).max(1)).map(|(f, _)| f).collect();
    model.standardize_layers(&sample)?;
    let log = train_sgd(&mut model, &data, &cfg.schedule)?;
    info!(
        "nnet: {} frames, cross-entropy {:.4} -> {:.4}",
        data.iter().map(|(f, _)| f.rows()).sum::<usize>(),
        log.initial_ce,
        log.final_ce()
    );
    Ok((model, log))
}

/// Posteriors for the speech frames of one utterance, row-aligned with `lid`.
pub fn speech_frame_posteriors(source: &dyn PosteriorSource, utt: &UttFeatures) -> Result<PosteriorMatrix> {
    utt.check()?;
    match source.stream() {
        FeatureStream::Stats => source.posteriors(&utt.lid),
        FeatureStream::HighRes => {
            let hr = utt
                .highres
                .as_ref()
                .ok_or_else(|| LidError::InvalidInput(format!("{}: no high-resolution features", utt.utt_id)))?;
            source.posteriors(hr)?.select(&utt.mask.flags)
        }
    }
}

pub fn all_speech_posteriors(source: &dyn PosteriorSource, utts: &[&UttFeatures]) -> Result<Vec<PosteriorMatrix>> {
    utts.par_iter().map(|u| speech_frame_posteriors(source, u)).collect()
}

/// Class means and diagonal variances the statistics are centered on.
pub fn centering_model(model: &PosteriorModel, utts: &[&UttFeatures], posts: &[PosteriorMatrix]) -> Result<(Vec<f64>, Vec<f64>)> {
    match model {
        PosteriorModel::Gmm(ubm) => {
            let d = ubm.full.dim();
            let vars = ubm.full.covs().iter().flat_map(|c| (0..d).map(move |j| c[(j, j)])).collect();
            Ok((ubm.full.means_flat().to_vec(), vars))
        }
        PosteriorModel::Dnn(_) => {
            let gmm = init_supervised_gmm(posts.iter().zip(utts.iter().map(|u| &u.lid)))?;
            Ok((gmm.means, gmm.vars))
        }
    }
}

pub fn centered_stats(posts: &[PosteriorMatrix], utts: &[&UttFeatures], means: &[f64]) -> Result<Vec<SuffStats>> {
    posts
        .par_iter()
        .zip(utts.par_iter())
        .map(|(p, u)| accumulate_stats(p, &u.lid, &VadMask::all(u.lid.rows()), Some(means)))
        .collect()
}

/// Random initialization around the centering model followed by EM.
/// Returns the extractor and the objective after each iteration.
pub fn train_extractor(
    means: Vec<f64>,
    vars: Vec<f64>,
    dim: usize,
    stats: &[SuffStats],
    cfg: &IvectorSettings,
) -> Result<(IvectorExtractor, Vec<f64>)> {
    let mut ext = IvectorExtractor::init(means, vars, dim, cfg.rank, cfg.seed)?;
    let mut objectives = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.iters {
        let (next, obj) = em_iteration(&ext, stats)?;
        info!("ivector EM iteration {}: objective {:.6e}", it + 1, obj);
        objectives.push(obj);
        ext = next;
    }
    Ok((ext, objectives))
}

pub fn extract_all(ext: &IvectorExtractor, stats: &[SuffStats]) -> Result<Vec<DVector<f64>>> {
    stats.par_iter().map(|s| Ok(ext.extract(s)?.w)).collect()
}

pub fn train_classifier(
    ivectors: &[DVector<f64>],
    labels: &[usize],
    languages: Vec<String>,
    opts: &TrainOptions,
) -> Result<LogRegModel> {
    train_logreg(&stack_rows(ivectors)?, labels, languages, opts)
}

/// Test utterance identity needed to turn classifier output into a trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialKey {
    pub utt_id: String,
    pub language: usize,
    pub duration_s: u32,
}

pub fn score_trials(model: &LogRegModel, keys: &[TrialKey], ivectors: &[DVector<f64>]) -> Result<TrialSet> {
    if keys.len() != ivectors.len() {
        return Err(LidError::DimensionMismatch {
            context: "trial keys vs i-vectors",
            expected: keys.len(),
            actual: ivectors.len(),
        });
    }
    let trials = keys
        .iter()
        .zip(ivectors)
        .map(|(k, w)| {
            Ok(Trial {
                utt_id: k.utt_id.clone(),
                true_language: k.language,
                duration_s: k.duration_s,
                posteriors: predict_posteriors(model, w.as_slice())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    TrialSet::new(model.languages.clone(), trials)
}
