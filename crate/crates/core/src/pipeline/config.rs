use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::TrainOptions;
use crate::corpusio::{CorpusConfig, FamilyConfig};
use crate::error::{LidError, Result};
use crate::features::{FrontEndConfig, SdcConfig, VadConfig};
use crate::gmm::UbmConfig;
use crate::nnet::{SgdSchedule, TddnnConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorKind {
    Gmm,
    Dnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vtln {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureType {
    Sdc,
    Mfcc60,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSettings {
    pub sdc_features: FrontEndConfig,
    pub mfcc_features: FrontEndConfig,
    pub highres_features: FrontEndConfig,
    pub sdc: SdcConfig,
    pub vad: VadConfig,
    /// Sliding CMN window for the SDC and MFCC streams.
    pub cmn_window_s: f64,
    pub highres_cmn_window_s: f64,
    /// Front-end scored by the warp-selection GMM.
    pub vtln_probe: FrontEndConfig,
    pub vtln_components: usize,
    pub vtln_iters: usize,
    /// Training utterances used to fit the warp-selection GMM.
    pub vtln_train_utts: usize,
}

impl Default for FeatureSettings {
    fn default() -> Self {
        Self {
            sdc_features: FrontEndConfig::sdc_static(),
            mfcc_features: FrontEndConfig::mfcc20(),
            highres_features: FrontEndConfig::highres(),
            sdc: SdcConfig::default(),
            vad: VadConfig::default(),
            cmn_window_s: 3.0,
            highres_cmn_window_s: 6.0,
            vtln_probe: FrontEndConfig {
                num_cepstra: 13,
                ..FrontEndConfig::sdc_static()
            },
            vtln_components: 64,
            vtln_iters: 5,
            vtln_train_utts: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NnetSettings {
    pub model: TddnnConfig,
    pub schedule: SgdSchedule,
    /// Training utterances per language; `None` uses all of them.
    pub train_utts_per_language: Option<usize>,
    pub seed: u64,
}

impl Default for NnetSettings {
    fn default() -> Self {
        Self {
            model: TddnnConfig::default(),
            schedule: SgdSchedule::default(),
            train_utts_per_language: None,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IvectorSettings {
    pub rank: usize,
    pub iters: usize,
    pub seed: u64,
}

impl Default for IvectorSettings {
    fn default() -> Self {
        Self {
            rank: 50,
            iters: 5,
            seed: 13,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSettings {
    pub family: FamilyConfig,
    pub family_seed: u64,
    pub train: CorpusConfig,
    pub test: CorpusConfig,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self {
            family: FamilyConfig::default(),
            family_seed: 2024,
            train: CorpusConfig {
                utts_per_language: 200,
                durations_s: vec![10.0],
                seed: 100_000,
                prefix: "train".into(),
                ..CorpusConfig::default()
            },
            test: CorpusConfig {
                utts_per_language: 100,
                durations_s: vec![3.0, 10.0, 30.0],
                seed: 900_000,
                prefix: "test".into(),
                ..CorpusConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Preset the file was layered on, if any.
    pub preset: Option<String>,
    pub workdir: PathBuf,
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub posterior_source: PosteriorKind,
    pub vtln: Vtln,
    pub feature_type: FeatureType,
    pub seed: u64,
    pub features: FeatureSettings,
    pub ubm: UbmConfig,
    pub nnet: NnetSettings,
    pub ivector: IvectorSettings,
    pub classifier: TrainOptions,
    pub synth: SynthSettings,
    pub report_title: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: None,
            workdir: PathBuf::from("work"),
            train_manifest: PathBuf::from("work/corpus/train/manifest.tsv"),
            test_manifest: PathBuf::from("work/corpus/test/manifest.tsv"),
            posterior_source: PosteriorKind::Dnn,
            vtln: Vtln::On,
            feature_type: FeatureType::Sdc,
            seed: 1,
            features: FeatureSettings::default(),
            ubm: UbmConfig::default(),
            nnet: NnetSettings::default(),
            ivector: IvectorSettings::default(),
            classifier: TrainOptions::default(),
            synth: SynthSettings::default(),
            report_title: String::new(),
        }
    }
}

impl RunConfig {
    /// The four reference conditions:
    /// a = GMM posteriors, SDC, VTLN; b = DNN posteriors, SDC, VTLN;
    /// c = DNN posteriors, SDC, no VTLN; d = DNN posteriors, 60-dim MFCC, no VTLN.
    pub fn preset(name: &str) -> Result<Self> {
        let (source, vtln, ft, title) = match name {
            "a" => (PosteriorKind::Gmm, Vtln::On, FeatureType::Sdc, "GMM-UBM system with SDC features and VTLN"),
            "b" => (PosteriorKind::Dnn, Vtln::On, FeatureType::Sdc, "DNN-UBM system with SDC features and VTLN"),
            "c" => (PosteriorKind::Dnn, Vtln::Off, FeatureType::Sdc, "DNN-UBM system with SDC features, VTLN skipped"),
            "d" => (PosteriorKind::Dnn, Vtln::Off, FeatureType::Mfcc60, "DNN-UBM system with 60-dim MFCC, VTLN skipped"),
            other => return Err(LidError::InvalidConfig(format!("unknown preset {other:?}; expected a, b, c or d"))),
        };
        Ok(Self {
            preset: Some(name.to_string()),
            posterior_source: source,
            vtln,
            feature_type: ft,
            report_title: title.to_string(),
            ..Self::default()
        })
    }

    /// Parses TOML. A top-level `preset` key selects the base configuration
    /// and the remaining keys override it.
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| LidError::InvalidConfig(format!("config parse error: {e}")))?;
        let base = match file.get("preset") {
            Some(toml::Value::String(p)) => Self::preset(p)?,
            Some(other) => return Err(LidError::InvalidConfig(format!("preset must be a string, got {other}"))),
            None => Self::default(),
        };
        let mut merged = toml::Table::try_from(&base)
            .map_err(|e| LidError::InvalidConfig(format!("cannot serialize base config: {e}")))?;
        merge_tables(&mut merged, file);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| LidError::InvalidConfig(format!("config error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths are taken from the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LidError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.workdir, &mut cfg.train_manifest, &mut cfg.test_manifest] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LidError::InvalidConfig(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LidError::InvalidConfig(m));
        if self.ivector.rank == 0 || self.ivector.iters == 0 {
            return bad("ivector rank and iterations must be positive".into());
        }
        if self.ubm.num_components == 0 || self.ubm.top_n == 0 || self.ubm.top_n > self.ubm.num_components {
            return bad(format!(
                "ubm top_n {} must be in 1..={}",
                self.ubm.top_n, self.ubm.num_components
            ));
        }
        if self.features.cmn_window_s <= 0.0 || self.features.highres_cmn_window_s <= 0.0 {
            return bad("CMN windows must be positive".into());
        }
        if self.nnet.model.input_dim != self.features.highres_features.num_cepstra {
            return bad(format!(
                "nnet input_dim {} does not match {} high-resolution cepstra",
                self.nnet.model.input_dim, self.features.highres_features.num_cepstra
            ));
        }
        self.nnet.model.validate()?;
        Ok(())
    }

    /// Replaces the run seed and derives every model seed from it. The
    /// synthetic corpus keeps its own seeds.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.ubm.seed = seed.wrapping_add(1);
        self.nnet.seed = seed.wrapping_add(2);
        self.nnet.schedule.seed = seed.wrapping_add(3);
        self.ivector.seed = seed.wrapping_add(4);
        self.classifier.seed = seed.wrapping_add(5);
    }

    /// Stats-stream dimension implied by the feature type.
    pub fn lid_dim(&self) -> usize {
        match self.feature_type {
            FeatureType::Sdc => self.features.sdc.output_dim(),
            FeatureType::Mfcc60 => 3 * self.features.mfcc_features.num_cepstra,
        }
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_match_reference_conditions() {
        let a = RunConfig::preset("a").unwrap();
        assert_eq!((a.posterior_source, a.vtln, a.feature_type), (PosteriorKind::Gmm, Vtln::On, FeatureType::Sdc));
        let c = RunConfig::preset("c").unwrap();
        assert_eq!(c.vtln, Vtln::Off);
        let d = RunConfig::preset("d").unwrap();
        assert_eq!(d.feature_type, FeatureType::Mfcc60);
        assert_eq!(d.lid_dim(), 60);
        assert_eq!(a.lid_dim(), 56);
        assert!(RunConfig::preset("e").is_err());
    }

    #[test]
    fn file_values_override_preset() {
        let cfg = RunConfig::from_toml(
            r#"
            preset = "c"
            seed = 9
            [ivector]
            rank = 20
            [ubm]
            num_components = 16
            top_n = 8
            "#,
        )
        .unwrap();
        assert_eq!(cfg.vtln, Vtln::Off);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.ivector.rank, 20);
        assert_eq!(cfg.ivector.iters, 5);
        assert_eq!(cfg.ubm.num_components, 16);
        assert_eq!(cfg.ubm.diag.iters, 10);
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = RunConfig::preset("b").unwrap();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in ["posterior_source = \"hmm\"", "[ubm]\ntop_n = 100", "preset = 3", "[ivector]\nrank = 0"] {
            let e = RunConfig::from_toml(text).unwrap_err();
            assert_eq!(e.exit_code(), 1, "{text}: {e}");
        }
    }
}
