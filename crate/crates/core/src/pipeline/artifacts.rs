use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::classifier::LogRegModel;
use crate::corpusio::{read_container, write_container, ModelContainer, Tensor};
use crate::error::{LidError, Result};
use crate::gmm::{DiagGmm, FullGmm, MixtureModel, TandemUbm};
use crate::ivector::IvectorExtractor;
use crate::nnet::{Affine, TddnnConfig, TddnnModel};

/// A model that lives in a named-tensor container.
pub trait Artifact: Sized {
    const KIND: &'static str;

    fn to_container(&self) -> Result<ModelContainer>;
    fn from_container(c: &ModelContainer) -> Result<Self>;

    fn save(&self, path: &Path) -> Result<()> {
        write_container(path, &self.to_container()?)
    }

    fn load(path: &Path) -> Result<Self> {
        let c = read_container(path)?;
        let kind = c.require_meta("kind")?;
        if kind != Self::KIND {
            return Err(LidError::Format {
                path: path.display().to_string(),
                offset: 0,
                reason: format!("expected a {} container, found {kind}", Self::KIND),
            });
        }
        Self::from_container(&c)
    }
}

fn parse_meta<T: std::str::FromStr>(c: &ModelContainer, key: &str) -> Result<T> {
    let v = c.require_meta(key)?;
    v.parse()
        .map_err(|_| LidError::InvalidInput(format!("metadata {key}={v:?} is not valid")))
}

fn u32_dim(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| LidError::InvalidInput(format!("dimension {n} too large")))
}

fn shaped<'a>(c: &'a ModelContainer, name: &str, dims: &[usize]) -> Result<&'a Tensor> {
    let t = c.tensor(name)?;
    if t.dims.len() != dims.len() || t.dims.iter().zip(dims).any(|(&a, &b)| a as usize != b) {
        return Err(LidError::InvalidInput(format!(
            "tensor {name:?} has shape {:?}, expected {dims:?}",
            t.dims
        )));
    }
    Ok(t)
}

fn push_diag(c: &mut ModelContainer, prefix: &str, g: &DiagGmm) -> Result<()> {
    let (m, d) = (u32_dim(g.num_components())?, u32_dim(g.dim())?);
    c.push(Tensor::vector(format!("{prefix}weights"), g.weights())?);
    c.push(Tensor::new(format!("{prefix}means"), vec![m, d], g.means_flat().to_vec())?);
    c.push(Tensor::new(format!("{prefix}vars"), vec![m, d], g.vars_flat().to_vec())?);
    Ok(())
}

fn read_diag(c: &ModelContainer, prefix: &str) -> Result<DiagGmm> {
    let weights = c.tensor(&format!("{prefix}weights"))?;
    let means = c.tensor(&format!("{prefix}means"))?;
    if weights.dims.len() != 1 || means.dims.len() != 2 {
        return Err(LidError::InvalidInput("malformed diagonal GMM tensors".into()));
    }
    let (m, d) = (means.dims[0] as usize, means.dims[1] as usize);
    let vars = shaped(c, &format!("{prefix}vars"), &[m, d])?;
    DiagGmm::from_flat(weights.data.clone(), means.data.clone(), vars.data.clone(), d)
}

impl Artifact for DiagGmm {
    const KIND: &'static str = "diag_gmm";

    fn to_container(&self) -> Result<ModelContainer> {
        let mut c = ModelContainer::new().with_meta("kind", Self::KIND);
        push_diag(&mut c, "", self)?;
        Ok(c)
    }

    fn from_container(c: &ModelContainer) -> Result<Self> {
        read_diag(c, "")
    }
}

impl Artifact for TandemUbm {
    const KIND: &'static str = "tandem_ubm";

    fn to_container(&self) -> Result<ModelContainer> {
        let mut c = ModelContainer::new()
            .with_meta("kind", Self::KIND)
            .with_meta("top_n", self.top_n);
        push_diag(&mut c, "diag/", &self.diag)?;
        let (m, d) = (self.full.num_components(), self.full.dim());
        c.push(Tensor::vector("full/weights", self.full.weights())?);
        let mut covs = Vec::with_capacity(m * d * d);
        for cov in self.full.covs() {
            for i in 0..d {
                covs.extend(cov.row(i).iter());
            }
        }
        c.push(Tensor::new("full/covs", vec![u32_dim(m)?, u32_dim(d)?, u32_dim(d)?], covs)?);
        Ok(c)
    }

    fn from_container(c: &ModelContainer) -> Result<Self> {
        let diag = read_diag(c, "diag/")?;
        let (m, d) = (diag.num_components(), diag.dim());
        let weights = shaped(c, "full/weights", &[m])?.data.clone();
        let covs = shaped(c, "full/covs", &[m, d, d])?;
        let covs = covs
            .data
            .chunks_exact(d * d)
            .map(|block| DMatrix::from_row_slice(d, d, block))
            .collect();
        let full = FullGmm::new(weights, diag.means_flat().to_vec(), covs)?;
        TandemUbm::new(diag, full, parse_meta(c, "top_n")?)
    }
}

fn offsets_to_text(offsets: &[Vec<i32>]) -> String {
    offsets
        .iter()
        .map(|layer| layer.iter().map(i32::to_string).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

fn offsets_from_text(text: &str) -> Result<Vec<Vec<i32>>> {
    text.split(';')
        .map(|layer| {
            layer
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| LidError::InvalidInput(format!("bad splice offset {v:?}")))
                })
                .collect()
        })
        .collect()
}

impl Artifact for TddnnModel {
    const KIND: &'static str = "tddnn";

    fn to_container(&self) -> Result<ModelContainer> {
        let cfg = self.config();
        let mut c = ModelContainer::new()
            .with_meta("kind", Self::KIND)
            .with_meta("input_dim", cfg.input_dim)
            .with_meta("splice_offsets", offsets_to_text(&cfg.splice_offsets))
            .with_meta("hidden_dim", cfg.hidden_dim)
            .with_meta("pnorm_group_size", cfg.pnorm_group_size)
            .with_meta("pnorm_p", format!("{:?}", cfg.pnorm_p))
            .with_meta("num_classes", cfg.num_classes);
        c.push(Tensor::vector("input_shift", self.input_shift.as_slice())?);
        c.push(Tensor::vector("input_scale", self.input_scale.as_slice())?);
        for (i, layer) in self.layers.iter().enumerate() {
            c.push(Tensor::matrix(format!("layer{i}/w"), &layer.w)?);
            c.push(Tensor::vector(format!("layer{i}/b"), layer.b.as_slice())?);
        }
        Ok(c)
    }

    fn from_container(c: &ModelContainer) -> Result<Self> {
        let config = TddnnConfig {
            input_dim: parse_meta(c, "input_dim")?,
            splice_offsets: offsets_from_text(c.require_meta("splice_offsets")?)?,
            hidden_dim: parse_meta(c, "hidden_dim")?,
            pnorm_group_size: parse_meta(c, "pnorm_group_size")?,
            pnorm_p: parse_meta(c, "pnorm_p")?,
            num_classes: parse_meta(c, "num_classes")?,
        };
        config.validate()?;
        let vec = |name: &str| -> Result<DVector<f64>> {
            Ok(DVector::from_vec(shaped(c, name, &[config.input_dim])?.data.clone()))
        };
        let (shift, scale) = (vec("input_shift")?, vec("input_scale")?);
        let layers = (0..=config.num_layers())
            .map(|i| {
                let w = c.tensor(&format!("layer{i}/w"))?.to_matrix()?;
                let b = shaped(c, &format!("layer{i}/b"), &[w.ncols()])?;
                Ok(Affine {
                    b: DVector::from_vec(b.data.clone()),
                    w,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        TddnnModel::from_parts(config, shift, scale, layers)
    }
}

impl Artifact for IvectorExtractor {
    const KIND: &'static str = "ivector_extractor";

    fn to_container(&self) -> Result<ModelContainer> {
        let (m, d, r) = (self.num_classes(), self.dim(), self.rank());
        let mut c = ModelContainer::new().with_meta("kind", Self::KIND);
        let (mu, du) = (u32_dim(m)?, u32_dim(d)?);
        c.push(Tensor::new("means", vec![mu, du], self.means().to_vec())?);
        c.push(Tensor::new("vars", vec![mu, du], self.vars().to_vec())?);
        let mut t = Vec::with_capacity(m * d * r);
        for block in self.loadings() {
            for i in 0..d {
                t.extend(block.row(i).iter());
            }
        }
        c.push(Tensor::new("loadings", vec![mu, du, u32_dim(r)?], t)?);
        Ok(c)
    }

    fn from_container(c: &ModelContainer) -> Result<Self> {
        let t = c.tensor("loadings")?;
        if t.dims.len() != 3 {
            return Err(LidError::InvalidInput("loadings must be a 3-way tensor".into()));
        }
        let (m, d, r) = (t.dims[0] as usize, t.dims[1] as usize, t.dims[2] as usize);
        let means = shaped(c, "means", &[m, d])?.data.clone();
        let vars = shaped(c, "vars", &[m, d])?.data.clone();
        let blocks = t
            .data
            .chunks_exact((d * r).max(1))
            .map(|b| DMatrix::from_row_slice(d, r, b))
            .collect();
        IvectorExtractor::new(blocks, means, vars)
    }
}

impl Artifact for LogRegModel {
    const KIND: &'static str = "logreg";

    fn to_container(&self) -> Result<ModelContainer> {
        if let Some(bad) = self.languages.iter().find(|l| l.contains(['\t', '\n'])) {
            return Err(LidError::InvalidInput(format!("language label {bad:?} cannot be stored")));
        }
        let mut c = ModelContainer::new()
            .with_meta("kind", Self::KIND)
            .with_meta("languages", self.languages.join("\t"));
        c.push(Tensor::matrix("weights", &self.weights)?);
        Ok(c)
    }

    fn from_container(c: &ModelContainer) -> Result<Self> {
        let languages = c.require_meta("languages")?.split('\t').map(String::from).collect();
        LogRegModel::new(c.tensor("weights")?.to_matrix()?, languages)
    }
}
