//! On-disk stages. Every stage records the checksums of its inputs and
//! outputs in `<workdir>/.stages/<stage>.done`; a rerun with unchanged inputs
//! and intact outputs does nothing.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::artifacts::Artifact;
use super::config::{PosteriorKind, RunConfig, Vtln};
use super::system::{
    all_speech_posteriors, centered_stats, centering_model, estimate_warp, extract_all, extract_features,
    frame_labels, score_trials, train_classifier, train_dnn, train_extractor, train_gmm_ubm, train_warp_model,
    utt_seed, PosteriorModel, TrialKey, UttFeatures,
};
use crate::classifier::LogRegModel;
use crate::corpusio::{
    label_path, language_family, read_audio, read_labels, read_matrix, synthesize_corpus, write_atomic,
    write_container, write_matrix, Manifest, ModelContainer, Tensor,
};
use crate::error::{LidError, Result};
use crate::eval::{read_scores, write_scores, EvalReport};
use crate::features::{AudioSegment, VadMask};
use crate::gmm::TandemUbm;
use crate::ivector::IvectorExtractor;
use crate::matrix::FeatureMatrix;
use crate::nnet::{FrameLabels, TddnnModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    SynthCorpus,
    Features,
    TrainUbm,
    TrainDnn,
    TrainIvector,
    ExtractIvectors,
    TrainClassifier,
    Score,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::SynthCorpus,
        Stage::Features,
        Stage::TrainUbm,
        Stage::TrainDnn,
        Stage::TrainIvector,
        Stage::ExtractIvectors,
        Stage::TrainClassifier,
        Stage::Score,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SynthCorpus => "synth-corpus",
            Stage::Features => "features",
            Stage::TrainUbm => "train-ubm",
            Stage::TrainDnn => "train-dnn",
            Stage::TrainIvector => "train-ivector",
            Stage::ExtractIvectors => "extract-ivectors",
            Stage::TrainClassifier => "train-classifier",
            Stage::Score => "score",
            Stage::Evaluate => "evaluate",
        }
    }

    /// Stages needed to go from a fresh work directory to a report for the
    /// configured posterior source.
    pub fn sequence(kind: PosteriorKind) -> Vec<Stage> {
        Self::ALL
            .into_iter()
            .filter(|s| match s {
                Stage::TrainUbm => kind == PosteriorKind::Gmm,
                Stage::TrainDnn => kind == PosteriorKind::Dnn,
                _ => true,
            })
            .collect()
    }
}

impl FromStr for Stage {
    type Err = LidError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| LidError::InvalidConfig(format!("unknown stage {s:?}")))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    UpToDate,
}

/// Artifact locations under the work directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub workdir: PathBuf,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            workdir: cfg.workdir.clone(),
            train_manifest: cfg.train_manifest.clone(),
            test_manifest: cfg.test_manifest.clone(),
        }
    }

    fn at(&self, rel: &str) -> PathBuf {
        self.workdir.join(rel)
    }

    pub fn features(&self, split: &str) -> PathBuf {
        self.at(&format!("features/{split}.lrmd"))
    }

    pub fn warps(&self) -> PathBuf {
        self.at("features/warps.tsv")
    }

    pub fn ubm(&self) -> PathBuf {
        self.at("models/ubm.lrmd")
    }

    pub fn nnet(&self) -> PathBuf {
        self.at("models/nnet.lrmd")
    }

    pub fn extractor(&self) -> PathBuf {
        self.at("models/extractor.lrmd")
    }

    pub fn classifier(&self) -> PathBuf {
        self.at("models/classifier.lrmd")
    }

    pub fn ivectors(&self, split: &str) -> PathBuf {
        self.at(&format!("ivectors/{split}.fvm"))
    }

    pub fn ivector_ids(&self, split: &str) -> PathBuf {
        self.at(&format!("ivectors/{split}.ids"))
    }

    pub fn scores(&self) -> PathBuf {
        self.at("scores/test.tsv")
    }

    pub fn report(&self) -> PathBuf {
        self.at("results/report.txt")
    }

    pub fn report_tsv(&self) -> PathBuf {
        self.at("results/report.tsv")
    }

    pub fn marker(&self, stage: Stage) -> PathBuf {
        self.at(&format!(".stages/{}.done", stage.name()))
    }

    fn posterior_model(&self, kind: PosteriorKind) -> (PathBuf, Stage) {
        match kind {
            PosteriorKind::Gmm => (self.ubm(), Stage::TrainUbm),
            PosteriorKind::Dnn => (self.nnet(), Stage::TrainDnn),
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| LidError::io(path, e))?;
    let mut h = Sha256::new();
    io::copy(&mut f, &mut h).map_err(|e| LidError::io(path, e))?;
    Ok(format!("{:x}", h.finalize()))
}

/// Declared inputs of a stage, each with the stage that produces it.
fn declared_inputs(stage: Stage, cfg: &RunConfig, lay: &Layout) -> Result<Vec<(PathBuf, Option<Stage>)>> {
    let (model, model_stage) = lay.posterior_model(cfg.posterior_source);
    let up = |p: PathBuf, s: Stage| (p, Some(s));
    Ok(match stage {
        Stage::SynthCorpus => Vec::new(),
        Stage::Features => {
            let mut v = Vec::new();
            for mpath in [&lay.train_manifest, &lay.test_manifest] {
                if !mpath.exists() {
                    return Err(missing(mpath, Stage::SynthCorpus));
                }
                let m = Manifest::read(mpath)?;
                v.push(up(mpath.clone(), Stage::SynthCorpus));
                for row in &m.rows {
                    v.push(up(Manifest::resolve(mpath, row), Stage::SynthCorpus));
                    if mpath == &lay.train_manifest {
                        let lab = label_path(mpath.parent().unwrap_or(Path::new(".")), &row.utt_id);
                        if lab.exists() {
                            v.push((lab, None));
                        }
                    }
                }
            }
            v
        }
        Stage::TrainUbm | Stage::TrainDnn => vec![up(lay.features("train"), Stage::Features)],
        Stage::TrainIvector => vec![up(lay.features("train"), Stage::Features), up(model, model_stage)],
        Stage::ExtractIvectors => vec![
            up(lay.features("train"), Stage::Features),
            up(lay.features("test"), Stage::Features),
            up(model, model_stage),
            up(lay.extractor(), Stage::TrainIvector),
        ],
        Stage::TrainClassifier => vec![
            up(lay.ivectors("train"), Stage::ExtractIvectors),
            up(lay.ivector_ids("train"), Stage::ExtractIvectors),
        ],
        Stage::Score => vec![
            up(lay.classifier(), Stage::TrainClassifier),
            up(lay.ivectors("test"), Stage::ExtractIvectors),
            up(lay.ivector_ids("test"), Stage::ExtractIvectors),
        ],
        Stage::Evaluate => vec![up(lay.scores(), Stage::Score)],
    })
}

fn declared_outputs(stage: Stage, cfg: &RunConfig, lay: &Layout) -> Vec<PathBuf> {
    match stage {
        Stage::SynthCorpus => vec![lay.train_manifest.clone(), lay.test_manifest.clone()],
        Stage::Features => {
            let mut v = vec![lay.features("train"), lay.features("test")];
            if cfg.vtln == Vtln::On {
                v.push(lay.warps());
            }
            v
        }
        Stage::TrainUbm => vec![lay.ubm()],
        Stage::TrainDnn => vec![lay.nnet()],
        Stage::TrainIvector => vec![lay.extractor()],
        Stage::ExtractIvectors => vec![
            lay.ivectors("train"),
            lay.ivector_ids("train"),
            lay.ivectors("test"),
            lay.ivector_ids("test"),
        ],
        Stage::TrainClassifier => vec![lay.classifier()],
        Stage::Score => vec![lay.scores()],
        Stage::Evaluate => vec![lay.report(), lay.report_tsv()],
    }
}

fn missing(path: &Path, stage: Stage) -> LidError {
    LidError::MissingArtifact {
        path: path.to_path_buf(),
        stage: stage.name(),
    }
}

fn input_fingerprint(stage: Stage, cfg: &RunConfig, inputs: &[(PathBuf, Option<Stage>)]) -> Result<String> {
    let mut s = String::new();
    let cfg_hash = format!("{:x}", Sha256::digest(cfg.to_toml()?.as_bytes()));
    let _ = writeln!(s, "stage\t{}", stage.name());
    let _ = writeln!(s, "config\t{cfg_hash}");
    for (p, producer) in inputs {
        if !p.exists() {
            return Err(match producer {
                Some(st) => missing(p, *st),
                None => LidError::io(p, io::Error::from(io::ErrorKind::NotFound)),
            });
        }
        let _ = writeln!(s, "input\t{}\t{}", p.display(), sha256_file(p)?);
    }
    Ok(s)
}

fn outputs_fingerprint(outputs: &[PathBuf]) -> Result<Option<String>> {
    let mut s = String::new();
    for p in outputs {
        if !p.exists() {
            return Ok(None);
        }
        let _ = writeln!(s, "output\t{}\t{}", p.display(), sha256_file(p)?);
    }
    Ok(Some(s))
}

/// Runs one stage unless its marker shows it is up to date. When inputs have
/// changed since the marker was written the stage refuses to run unless
/// `force` is set.
pub fn run_stage(stage: Stage, cfg: &RunConfig, force: bool) -> Result<StageStatus> {
    cfg.validate()?;
    let lay = Layout::new(cfg);
    let inputs = declared_inputs(stage, cfg, &lay)?;
    let fingerprint = input_fingerprint(stage, cfg, &inputs)?;
    let outputs = declared_outputs(stage, cfg, &lay);
    let marker = lay.marker(stage);
    if let Ok(previous) = fs::read_to_string(&marker) {
        let current = outputs_fingerprint(&outputs)?;
        if previous.starts_with(&fingerprint) {
            if current.is_some_and(|o| previous == format!("{fingerprint}{o}")) {
                info!("{stage}: up to date");
                return Ok(StageStatus::UpToDate);
            }
            warn!("{stage}: outputs missing or modified, rerunning");
        } else if !force {
            return Err(LidError::ChecksumMismatch {
                stage: stage.name().to_string(),
            });
        } else {
            warn!("{stage}: inputs changed, overwriting because of --force");
        }
    }
    let start = std::time::Instant::now();
    match stage {
        Stage::SynthCorpus => synth_corpus(cfg, &lay)?,
        Stage::Features => features(cfg, &lay)?,
        Stage::TrainUbm => train_ubm_stage(cfg, &lay)?,
        Stage::TrainDnn => train_dnn_stage(cfg, &lay)?,
        Stage::TrainIvector => train_ivector_stage(cfg, &lay)?,
        Stage::ExtractIvectors => extract_ivectors_stage(cfg, &lay)?,
        Stage::TrainClassifier => train_classifier_stage(cfg, &lay)?,
        Stage::Score => score_stage(&lay)?,
        Stage::Evaluate => evaluate_stage(cfg, &lay)?,
    }
    let out = outputs_fingerprint(&outputs)?.ok_or_else(|| {
        LidError::InvalidInput(format!("stage {stage} finished without writing all of its outputs"))
    })?;
    write_atomic(&marker, format!("{fingerprint}{out}").as_bytes())?;
    info!("{stage}: done in {:.1} s", start.elapsed().as_secs_f64());
    Ok(StageStatus::Ran)
}

/// Runs every stage the configured pipeline needs, in order.
pub fn run_all(cfg: &RunConfig, force: bool) -> Result<Vec<(Stage, StageStatus)>> {
    Stage::sequence(cfg.posterior_source)
        .into_iter()
        .map(|s| Ok((s, run_stage(s, cfg, force)?)))
        .collect()
}

fn synth_corpus(cfg: &RunConfig, lay: &Layout) -> Result<()> {
    let specs = language_family(&cfg.synth.family, cfg.synth.family_seed)?;
    for (manifest, corpus) in [(&lay.train_manifest, &cfg.synth.train), (&lay.test_manifest, &cfg.synth.test)] {
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let m = synthesize_corpus(&specs, corpus, dir)?;
        if dir.join("manifest.tsv") != *manifest {
            m.write(manifest)?;
        }
        info!("synthesized {} utterances into {}", m.len(), dir.display());
    }
    Ok(())
}

/// Per-utterance features as stored in a feature container.
struct StoredUtt {
    feats: UttFeatures,
    labels: Option<FrameLabels>,
}

fn features_to_container(utts: &[StoredUtt], shift_s: f64, hr_shift_s: f64) -> Result<ModelContainer> {
    let mut c = ModelContainer::new()
        .with_meta("kind", "features")
        .with_meta("frame_shift_s", format!("{shift_s:?}"))
        .with_meta("highres_frame_shift_s", format!("{hr_shift_s:?}"));
    let mat = |name: String, f: &FeatureMatrix| -> Result<Tensor> {
        Tensor::new(name, vec![f.rows() as u32, f.cols() as u32], f.as_slice().to_vec())
    };
    for u in utts {
        let id = &u.feats.utt_id;
        c.push(mat(format!("{id}/lid"), &u.feats.lid)?);
        let mask: Vec<f64> = u.feats.mask.flags.iter().map(|&b| f64::from(u8::from(b))).collect();
        c.push(Tensor::vector(format!("{id}/mask"), &mask)?);
        if let Some(hr) = &u.feats.highres {
            c.push(mat(format!("{id}/hires"), hr)?);
        }
        if let Some(y) = &u.labels {
            let y: Vec<f64> = y.iter().map(|&v| f64::from(v)).collect();
            c.push(Tensor::vector(format!("{id}/labels"), &y)?);
        }
    }
    Ok(c)
}

fn load_features(path: &Path) -> Result<HashMap<String, StoredUtt>> {
    if !path.exists() {
        return Err(missing(path, Stage::Features));
    }
    let c = crate::corpusio::read_container(path)?;
    let shift: f64 = parse_shift(&c, "frame_shift_s")?;
    let hr_shift: f64 = parse_shift(&c, "highres_frame_shift_s")?;
    let bad = |m: String| LidError::Format {
        path: path.display().to_string(),
        offset: 0,
        reason: m,
    };
    let mut out: HashMap<String, StoredUtt> = HashMap::new();
    for t in c.tensors {
        let (id, part) = t
            .name
            .rsplit_once('/')
            .ok_or_else(|| bad(format!("unexpected tensor {:?}", t.name)))?;
        let entry = out.entry(id.to_string()).or_insert_with(|| StoredUtt {
            feats: UttFeatures {
                utt_id: id.to_string(),
                lid: FeatureMatrix::zeros(0, 0, shift),
                mask: VadMask { flags: Vec::new() },
                highres: None,
            },
            labels: None,
        });
        let as_matrix = |s: f64| -> Result<FeatureMatrix> {
            if t.dims.len() != 2 {
                return Err(bad(format!("tensor {:?} is not a matrix", t.name)));
            }
            FeatureMatrix::new(t.dims[0] as usize, t.dims[1] as usize, t.data.clone(), s)
        };
        match part {
            "lid" => entry.feats.lid = as_matrix(shift)?,
            "hires" => entry.feats.highres = Some(as_matrix(hr_shift)?),
            "mask" => entry.feats.mask = VadMask {
                flags: t.data.iter().map(|&v| v != 0.0).collect(),
            },
            "labels" => entry.labels = Some(t.data.iter().map(|&v| v as u32).collect()),
            other => return Err(bad(format!("unknown feature part {other:?}"))),
        }
    }
    Ok(out)
}

fn parse_shift(c: &ModelContainer, key: &str) -> Result<f64> {
    c.require_meta(key)?
        .parse()
        .map_err(|_| LidError::InvalidInput(format!("bad {key} in feature container")))
}

/// Utterances of a manifest in manifest order, with their language index.
struct Split {
    manifest: Manifest,
    utts: Vec<StoredUtt>,
}

fn load_split(lay: &Layout, split: &str) -> Result<Split> {
    let mpath = if split == "train" { &lay.train_manifest } else { &lay.test_manifest };
    let manifest = Manifest::read(mpath)?;
    let mut by_id = load_features(&lay.features(split))?;
    let utts = manifest
        .rows
        .iter()
        .map(|r| {
            by_id
                .remove(&r.utt_id)
                .ok_or_else(|| LidError::InvalidInput(format!("no features for utterance {}", r.utt_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Split { manifest, utts })
}

fn features(cfg: &RunConfig, lay: &Layout) -> Result<()> {
    let fs_cfg = &cfg.features;
    let train_m = Manifest::read(&lay.train_manifest)?;
    let test_m = Manifest::read(&lay.test_manifest)?;
    let load = |mpath: &Path, row: &crate::corpusio::ManifestRow| -> Result<AudioSegment> {
        let mut a = read_audio(&Manifest::resolve(mpath, row))?;
        a.utt_id = row.utt_id.clone();
        Ok(a)
    };
    let warp_model = match cfg.vtln {
        Vtln::Off => None,
        Vtln::On => {
            let audio = train_m
                .rows
                .par_iter()
                .take(fs_cfg.vtln_train_utts)
                .map(|r| load(&lay.train_manifest, r))
                .collect::<Result<Vec<_>>>()?;
            Some(train_warp_model(&audio, fs_cfg, cfg.seed)?)
        }
    };
    let mut warps = String::from("utt_id\twarp\n");
    for (split, mpath, m) in [("train", &lay.train_manifest, &train_m), ("test", &lay.test_manifest, &test_m)] {
        let corpus_dir = mpath.parent().unwrap_or(Path::new("."));
        let utts = m
            .rows
            .par_iter()
            .map(|row| {
                let audio = load(mpath, row)?;
                let warp = match &warp_model {
                    Some(wm) => estimate_warp(&audio, fs_cfg, wm, cfg.seed)?,
                    None => 1.0,
                };
                let feats =
                    extract_features(&audio, fs_cfg, cfg.feature_type, warp, true, utt_seed(cfg.seed, &row.utt_id))?;
                let lab = label_path(corpus_dir, &row.utt_id);
                let labels = if split == "train" && lab.exists() {
                    Some(frame_labels(&read_labels(&lab)?, &feats, fs_cfg)?)
                } else {
                    None
                };
                Ok((StoredUtt { feats, labels }, warp))
            })
            .collect::<Result<Vec<_>>>()?;
        for (u, w) in &utts {
            let _ = writeln!(warps, "{}\t{w:?}", u.feats.utt_id);
        }
        let utts: Vec<StoredUtt> = utts.into_iter().map(|(u, _)| u).collect();
        let c = features_to_container(
            &utts,
            fs_cfg.sdc_features.frame_shift_s(),
            fs_cfg.highres_features.frame_shift_s(),
        )?;
        write_container(&lay.features(split), &c)?;
        info!("features: {} {split} utterances", utts.len());
    }
    if cfg.vtln == Vtln::On {
        write_atomic(&lay.warps(), warps.as_bytes())?;
    }
    Ok(())
}

fn train_ubm_stage(cfg: &RunConfig, lay: &Layout) -> Result<()> {
    let split = load_split(lay, "train")?;
    let refs: Vec<&UttFeatures> = split.utts.iter().map(|u| &u.feats).collect();
    train_gmm_ubm(&refs, &cfg.ubm)?.save(&lay.ubm())
}

fn train_dnn_stage(cfg: &RunConfig, lay: &Layout) -> Result<()> {
    let split = load_split(lay, "train")?;
    let langs = split.manifest.languages();
    let per_lang = cfg.nnet.train_utts_per_language.unwrap_or(usize::MAX);
    let mut seen = vec![0usize; langs.len()];
    let mut data = Vec::new();
    for (row, u) in split.manifest.rows.iter().zip(&split.utts) {
        let l = langs.iter().position(|x| x == &row.language).unwrap_or(0);
        seen[l] += 1;
        if seen[l] > per_lang {
            continue;
        }
        let y = u.labels.as_ref().ok_or_else(|| {
            LidError::InvalidInput(format!("training utterance {} has no frame labels", row.utt_id))
        })?;
        data.push((&u.feats, y));
    }
    train_dnn(&data, &cfg.nnet)?.0.save(&lay.nnet())
}

fn load_posterior_model(cfg: &RunConfig, lay: &Layout) -> Result<PosteriorModel> {
    Ok(match cfg.posterior_source {
        PosteriorKind::Gmm => PosteriorModel::Gmm(TandemUbm::load(&lay.ubm())?),
        PosteriorKind::Dnn => PosteriorModel::Dnn(TddnnModel::load(&lay.nnet())?),
    })
}

fn train_ivector_stage(cfg: &RunConfig, lay: &Layout) -> Result<()> {
    let model = load_posterior_model(cfg, lay)?;
    let split = load_split(lay, "train")?;
    let refs: Vec<&UttFeatures> = split.utts.iter().map(|u| &u.feats).collect();
    let posts = all_speech_posteriors(model.source(), &refs)?;
    let (means, vars) = centering_model(&model, &refs, &posts)?;
    let stats = centered_stats(&posts, &refs, &means)?;
    let (ext, _) = train_extractor(means, vars, cfg.lid_dim(), &stats, &cfg.ivector)?;
    ext.save(&lay.extractor())
}

fn extract_ivectors_stage(cfg: &RunConfig, lay: &Layout) -> Result<()> {
    let model = load_posterior_model(cfg, lay)?;
    let ext = IvectorExtractor::load(&lay.extractor())?;
    for split_name in ["train", "test"] {
        let split = load_split(lay, split_name)?;
        let refs: Vec<&UttFeatures> = split.utts.iter().map(|u| &u.feats).collect();
        let posts = all_speech_posteriors(model.source(), &refs)?;
        let stats = centered_stats(&posts, &refs, ext.means())?;
        let ivecs = extract_all(&ext, &stats)?;
        let m = DMatrix::from_fn(ivecs.len(), ext.rank(), |i, j| ivecs[i][j]);
        write_matrix(&lay.ivectors(split_name), &m)?;
        let mut ids = String::new();
        for r in &split.manifest.rows {
            let _ = writeln!(ids, "{}\t{}\t{:?}", r.utt_id, r.language, r.duration_s);
        }
        write_atomic(&lay.ivector_ids(split_name), ids.as_bytes())?;
    }
    Ok(())
}

struct IvectorSet {
    ids: Vec<(String, String, f64)>,
    vectors: Vec<DVector<f64>>,
}

fn load_ivectors(lay: &Layout, split: &str) -> Result<IvectorSet> {
    let (mpath, ipath) = (lay.ivectors(split), lay.ivector_ids(split));
    for p in [&mpath, &ipath] {
        if !p.exists() {
            return Err(missing(p, Stage::ExtractIvectors));
        }
    }
    let m = read_matrix(&mpath)?;
    let text = fs::read_to_string(&ipath).map_err(|e| LidError::io(&ipath, e))?;
    let ids = text
        .lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split('\t').collect();
            let dur = f.get(2).and_then(|d| d.parse().ok());
            match (f.len(), dur) {
                (3, Some(d)) => Ok((f[0].to_string(), f[1].to_string(), d)),
                _ => Err(LidError::Format {
                    path: ipath.display().to_string(),
                    offset: i as u64 + 1,
                    reason: format!("line {}: expected utt_id, language, duration", i + 1),
                }),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if ids.len() != m.nrows() {
        return Err(LidError::DimensionMismatch {
            context: "i-vector ids vs rows",
            expected: m.nrows(),
            actual: ids.len(),
        });
    }
    let vectors = (0..m.nrows()).map(|i| m.row(i).transpose()).collect();
    Ok(IvectorSet { ids, vectors })
}

fn languages_of(ids: &[(String, String, f64)]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for (_, l, _) in ids {
        if !out.contains(l) {
            out.push(l.clone());
        }
    }
    out
}

fn train_classifier_stage(cfg: &RunConfig, lay: &Layout) -> Result<()> {
    let set = load_ivectors(lay, "train")?;
    let languages = languages_of(&set.ids);
    let labels: Vec<usize> = set
        .ids
        .iter()
        .map(|(_, l, _)| languages.iter().position(|x| x == l).unwrap_or(0))
        .collect();
    train_classifier(&set.vectors, &labels, languages, &cfg.classifier)?.save(&lay.classifier())
}

fn score_stage(lay: &Layout) -> Result<()> {
    let model = LogRegModel::load(&lay.classifier())?;
    let set = load_ivectors(lay, "test")?;
    let keys = set
        .ids
        .iter()
        .map(|(id, l, d)| {
            let language = model
                .languages
                .iter()
                .position(|x| x == l)
                .ok_or_else(|| LidError::InvalidInput(format!("test utterance {id} has unknown language {l:?}")))?;
            Ok(TrialKey {
                utt_id: id.clone(),
                language,
                duration_s: d.round() as u32,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let trials = score_trials(&model, &keys, &set.vectors)?;
    write_atomic(&lay.scores(), write_scores(&trials).as_bytes())
}

fn evaluate_stage(cfg: &RunConfig, lay: &Layout) -> Result<()> {
    let path = lay.scores();
    let text = fs::read_to_string(&path).map_err(|e| LidError::io(&path, e))?;
    let trials = read_scores(&text, &path.display().to_string())?;
    let title = if cfg.report_title.is_empty() {
        "Language recognition results"
    } else {
        &cfg.report_title
    };
    let report = EvalReport::evaluate(title, &trials)?;
    write_atomic(&lay.report(), report.to_table().as_bytes())?;
    write_atomic(&lay.report_tsv(), report.to_tsv().as_bytes())?;
    info!("\n{}", report.to_table());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_roundtrip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert_eq!("nope".parse::<Stage>().unwrap_err().exit_code(), 1);
        assert!(!Stage::sequence(PosteriorKind::Dnn).contains(&Stage::TrainUbm));
        assert!(!Stage::sequence(PosteriorKind::Gmm).contains(&Stage::TrainDnn));
    }

    #[test]
    fn missing_upstream_names_the_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig {
            workdir: dir.path().to_path_buf(),
            train_manifest: dir.path().join("corpus/train/manifest.tsv"),
            test_manifest: dir.path().join("corpus/test/manifest.tsv"),
            ..RunConfig::preset("c").unwrap()
        };
        match run_stage(Stage::TrainIvector, &cfg, false).unwrap_err() {
            LidError::MissingArtifact { stage, .. } => assert_eq!(stage, "features"),
            e => panic!("unexpected {e}"),
        }
        match run_stage(Stage::Features, &cfg, false).unwrap_err() {
            LidError::MissingArtifact { stage, .. } => assert_eq!(stage, "synth-corpus"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn feature_container_roundtrip() {
        let lid = FeatureMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]], 0.01).unwrap();
        let hr = FeatureMatrix::from_rows(&[vec![0.5], vec![0.25], vec![0.125]], 0.01).unwrap();
        let u = StoredUtt {
            feats: UttFeatures {
                utt_id: "a/b".into(),
                lid: lid.clone(),
                mask: VadMask {
                    flags: vec![true, false, true],
                },
                highres: Some(hr.clone()),
            },
            labels: Some(vec![3, 1, 2]),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.lrmd");
        write_container(&p, &features_to_container(&[u], 0.01, 0.01).unwrap()).unwrap();
        let back = load_features(&p).unwrap();
        let b = &back["a/b"];
        assert_eq!(b.feats.lid, lid);
        assert_eq!(b.feats.highres.as_ref().unwrap(), &hr);
        assert_eq!(b.feats.mask.flags, vec![true, false, true]);
        assert_eq!(b.labels.as_deref(), Some(&[3u32, 1, 2][..]));
    }
}
