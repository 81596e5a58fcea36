//! Both pipelines run end to end on a synthetic corpus held in memory.
//! Audio is rendered on demand from per-utterance seeds and dropped once its
//! features are computed.

use std::time::Instant;

use log::info;
use nalgebra::DVector;
use rayon::prelude::*;

use super::config::{PosteriorKind, RunConfig, Vtln};
use super::system::{
    all_speech_posteriors, centered_stats, centering_model, estimate_warp, extract_all, extract_features,
    frame_labels, score_trials, train_classifier, train_dnn, train_extractor, train_gmm_ubm, train_warp_model,
    utt_seed, PosteriorModel, TrialKey, UttFeatures,
};
use crate::classifier::{add_language, stack_rows, LogRegModel};
use crate::corpusio::{language_family, plan_corpus, render, SynthLanguageSpec, UtterancePlan};
use crate::error::{LidError, Result};
use crate::eval::{EvalReport, TrialSet};
use crate::features::AudioSegment;
use crate::ivector::IvectorExtractor;
use crate::nnet::FrameLabels;

/// Features of a rendered synthetic corpus.
pub struct PreparedCorpus {
    pub languages: Vec<String>,
    pub train: Vec<UttFeatures>,
    pub train_language: Vec<usize>,
    pub train_labels: Vec<FrameLabels>,
    pub test: Vec<UttFeatures>,
    pub test_keys: Vec<TrialKey>,
}

fn render_audio(specs: &[SynthLanguageSpec], plan: &UtterancePlan, sr: u32) -> Result<(AudioSegment, Vec<u32>)> {
    let u = render(specs, plan, sr)?;
    Ok((u.audio, u.labels))
}

impl PreparedCorpus {
    /// Renders and featurizes `num_languages` languages of the configured family.
    pub fn build(cfg: &RunConfig, num_languages: usize) -> Result<Self> {
        let start = Instant::now();
        let family = crate::corpusio::FamilyConfig {
            num_languages,
            ..cfg.synth.family.clone()
        };
        let specs = language_family(&family, cfg.synth.family_seed)?;
        let train_plan = plan_corpus(&specs, &cfg.synth.train)?;
        let test_plan = plan_corpus(&specs, &cfg.synth.test)?;
        let (train_sr, test_sr) = (cfg.synth.train.sample_rate_hz, cfg.synth.test.sample_rate_hz);
        let fs = &cfg.features;

        let warp_model = match cfg.vtln {
            Vtln::Off => None,
            Vtln::On => {
                let audio = train_plan
                    .par_iter()
                    .take(fs.vtln_train_utts)
                    .map(|p| render_audio(&specs, p, train_sr).map(|a| a.0))
                    .collect::<Result<Vec<_>>>()?;
                Some(train_warp_model(&audio, fs, cfg.seed)?)
            }
        };
        let featurize = |audio: &AudioSegment| -> Result<UttFeatures> {
            let warp = match &warp_model {
                Some(m) => estimate_warp(audio, fs, m, cfg.seed)?,
                None => 1.0,
            };
            extract_features(audio, fs, cfg.feature_type, warp, true, utt_seed(cfg.seed, &audio.utt_id))
        };

        let train = train_plan
            .par_iter()
            .map(|p| {
                let (audio, blocks) = render_audio(&specs, p, train_sr)?;
                let feats = featurize(&audio)?;
                let labels = frame_labels(&blocks, &feats, fs)?;
                Ok((feats, labels))
            })
            .collect::<Result<Vec<_>>>()?;
        let (train, train_labels): (Vec<_>, Vec<_>) = train.into_iter().unzip();
        let test = test_plan
            .par_iter()
            .map(|p| featurize(&render_audio(&specs, p, test_sr)?.0))
            .collect::<Result<Vec<_>>>()?;
        info!(
            "corpus: {} train / {} test utterances featurized in {:.1} s",
            train.len(),
            test.len(),
            start.elapsed().as_secs_f64()
        );
        Ok(Self {
            languages: specs.iter().map(|s| s.language.clone()).collect(),
            train_language: train_plan.iter().map(|p| p.language).collect(),
            train,
            train_labels,
            test_keys: test_plan
                .iter()
                .map(|p| TrialKey {
                    utt_id: p.utt_id.clone(),
                    language: p.language,
                    duration_s: p.duration_s.round() as u32,
                })
                .collect(),
            test,
        })
    }

    fn train_of(&self, langs: std::ops::Range<usize>) -> Vec<usize> {
        (0..self.train.len()).filter(|&i| langs.contains(&self.train_language[i])).collect()
    }

    fn test_of(&self, langs: std::ops::Range<usize>) -> Vec<usize> {
        (0..self.test.len()).filter(|&i| langs.contains(&self.test_keys[i].language)).collect()
    }
}

/// Everything one pipeline produced.
pub struct PipelineRun {
    pub kind: PosteriorKind,
    pub model: PosteriorModel,
    pub extractor: IvectorExtractor,
    pub em_objectives: Vec<f64>,
    pub classifier: LogRegModel,
    pub train_ivectors: Vec<DVector<f64>>,
    pub train_labels: Vec<usize>,
    pub trials: TrialSet,
    pub report: EvalReport,
    pub seconds: f64,
}

fn ivectors_for(
    model: &PosteriorModel,
    ext: &IvectorExtractor,
    utts: &[&UttFeatures],
) -> Result<Vec<DVector<f64>>> {
    let posts = all_speech_posteriors(model.source(), utts)?;
    let stats = centered_stats(&posts, utts, ext.means())?;
    extract_all(ext, &stats)
}

/// Trains and evaluates one pipeline on the first `num_languages` languages.
pub fn run_pipeline(cfg: &RunConfig, kind: PosteriorKind, corpus: &PreparedCorpus, num_languages: usize) -> Result<PipelineRun> {
    if num_languages < 2 || num_languages > corpus.languages.len() {
        return Err(LidError::InvalidConfig(format!(
            "cannot run on {num_languages} of {} languages",
            corpus.languages.len()
        )));
    }
    let start = Instant::now();
    let train_idx = corpus.train_of(0..num_languages);
    let train: Vec<&UttFeatures> = train_idx.iter().map(|&i| &corpus.train[i]).collect();

    let model = match kind {
        PosteriorKind::Gmm => PosteriorModel::Gmm(train_gmm_ubm(&train, &cfg.ubm)?),
        PosteriorKind::Dnn => {
            let per_lang = cfg.nnet.train_utts_per_language.unwrap_or(usize::MAX);
            let mut seen = vec![0usize; num_languages];
            let subset: Vec<(&UttFeatures, &FrameLabels)> = train_idx
                .iter()
                .filter(|&&i| {
                    let l = corpus.train_language[i];
                    seen[l] += 1;
                    seen[l] <= per_lang
                })
                .map(|&i| (&corpus.train[i], &corpus.train_labels[i]))
                .collect();
            PosteriorModel::Dnn(train_dnn(&subset, &cfg.nnet)?.0)
        }
    };
    info!("{kind:?}: posterior model trained after {:.1} s", start.elapsed().as_secs_f64());

    let posts = all_speech_posteriors(model.source(), &train)?;
    let (means, vars) = centering_model(&model, &train, &posts)?;
    let stats = centered_stats(&posts, &train, &means)?;
    drop(posts);
    let dim = cfg.lid_dim();
    let (extractor, em_objectives) = train_extractor(means, vars, dim, &stats, &cfg.ivector)?;
    let train_ivectors = extract_all(&extractor, &stats)?;
    drop(stats);
    info!("{kind:?}: extractor trained after {:.1} s", start.elapsed().as_secs_f64());

    let train_labels: Vec<usize> = train_idx.iter().map(|&i| corpus.train_language[i]).collect();
    let languages = corpus.languages[..num_languages].to_vec();
    let classifier = train_classifier(&train_ivectors, &train_labels, languages, &cfg.classifier)?;

    let test_idx = corpus.test_of(0..num_languages);
    let test: Vec<&UttFeatures> = test_idx.iter().map(|&i| &corpus.test[i]).collect();
    let test_ivectors = ivectors_for(&model, &extractor, &test)?;
    let keys: Vec<TrialKey> = test_idx.iter().map(|&i| corpus.test_keys[i].clone()).collect();
    let trials = score_trials(&classifier, &keys, &test_ivectors)?;
    let title = match kind {
        PosteriorKind::Gmm => "GMM-UBM pipeline",
        PosteriorKind::Dnn => "DNN-UBM pipeline",
    };
    let report = EvalReport::evaluate(title, &trials)?;
    let seconds = start.elapsed().as_secs_f64();
    info!("{kind:?}: done in {seconds:.1} s\n{}", report.to_table());
    Ok(PipelineRun {
        kind,
        model,
        extractor,
        em_objectives,
        classifier,
        train_ivectors,
        train_labels,
        trials,
        report,
        seconds,
    })
}

/// Result of enrolling one more language into a trained pipeline.
pub struct ExtendedRun {
    pub classifier: LogRegModel,
    /// Trials over every language, old and new, scored by the new classifier.
    pub trials: TrialSet,
}

/// Adds language `new_language` by retraining only the classifier of `run`.
pub fn extend_pipeline(cfg: &RunConfig, run: &PipelineRun, corpus: &PreparedCorpus, new_language: usize) -> Result<ExtendedRun> {
    let k = run.classifier.num_classes();
    if new_language != k || new_language >= corpus.languages.len() {
        return Err(LidError::InvalidConfig(format!(
            "next language must be index {k} of the corpus, got {new_language}"
        )));
    }
    let new_train: Vec<&UttFeatures> = corpus
        .train_of(new_language..new_language + 1)
        .into_iter()
        .map(|i| &corpus.train[i])
        .collect();
    let new_ivectors = ivectors_for(&run.model, &run.extractor, &new_train)?;
    let classifier = add_language(
        &run.classifier,
        &corpus.languages[new_language],
        &stack_rows(&new_ivectors)?,
        &stack_rows(&run.train_ivectors)?,
        &run.train_labels,
        &cfg.classifier,
    )?;
    let test_idx = corpus.test_of(0..new_language + 1);
    let test: Vec<&UttFeatures> = test_idx.iter().map(|&i| &corpus.test[i]).collect();
    let test_ivectors = ivectors_for(&run.model, &run.extractor, &test)?;
    let keys: Vec<TrialKey> = test_idx.iter().map(|&i| corpus.test_keys[i].clone()).collect();
    let trials = score_trials(&classifier, &keys, &test_ivectors)?;
    Ok(ExtendedRun { classifier, trials })
}
