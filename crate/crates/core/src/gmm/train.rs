use std::borrow::Borrow;

use log::{info, warn};
use nalgebra::DMatrix;
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::full::floor_eigenvalues;
use super::{softmax_in_place, tandem, DiagGmm, FullGmm, MixtureModel, TandemUbm};
use crate::error::{LidError, Result};
use crate::matrix::FeatureMatrix;

/// Utterances per accumulation chunk. Chunks are reduced in index order, so
/// results do not depend on the number of worker threads.
const CHUNK_UTTS: usize = 8;
/// Relative variance floor against the global data variance.
const VAR_FLOOR: f64 = 1e-6;
/// Eigenvalue floor for full covariances, relative to the mean eigenvalue.
const EIG_FLOOR: f64 = 1e-4;
/// Components with less occupancy than this are left unchanged.
const MIN_OCCUPANCY: f64 = 1e-8;
/// Frame posteriors below this are skipped when accumulating full scatter.
const SCATTER_POST_MIN: f64 = 1e-8;

/// Total data log-likelihood recorded at each EM iteration; entry `i` is the
/// likelihood of the model entering iteration `i`, the last entry that of
/// the returned model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmTrace {
    pub loglikes: Vec<f64>,
}

impl EmTrace {
    /// True when no step drops by more than `rel_tol` relative.
    pub fn is_monotone(&self, rel_tol: f64) -> bool {
        self.loglikes
            .windows(2)
            .all(|w| w[1] - w[0] >= -rel_tol * w[0].abs().max(1.0))
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UbmStage {
    /// Number of randomly chosen utterances; `None` uses all of them.
    pub subset_utts: Option<usize>,
    pub iters: usize,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct UbmConfig {
    pub num_components: usize,
    /// Diagonal training stage.
    pub diag: UbmStage,
    /// Full-covariance stages. The first one starts with the fixed-mean,
    /// fixed-weight covariance pass; every further iteration is a full EM
    /// step with tandem preselection.
    pub full: Vec<UbmStage>,
    pub top_n: usize,
    pub seed: u64,
}

impl Default for UbmConfig {
    fn default() -> Self {
        Self {
            num_components: 64,
            diag: UbmStage {
                subset_utts: Some(250),
                iters: 10,
            },
            full: vec![
                UbmStage {
                    subset_utts: Some(500),
                    iters: 1,
                },
                UbmStage {
                    subset_utts: None,
                    iters: 1,
                },
            ],
            top_n: 20,
            seed: 777,
        }
    }
}

fn check_data<D: Borrow<FeatureMatrix> + Sync>(data: &[D]) -> Result<(usize, usize)> {
    let dim = data
        .iter()
        .map(|f| f.borrow())
        .find(|f| f.rows() > 0)
        .map(|f| f.cols())
        .ok_or_else(|| LidError::InvalidInput("no training frames".into()))?;
    let mut frames = 0;
    for f in data {
        let f = f.borrow();
        if f.rows() > 0 && f.cols() != dim {
            return Err(LidError::DimensionMismatch {
                context: "GMM training data",
                expected: dim,
                actual: f.cols(),
            });
        }
        frames += f.rows();
    }
    Ok((frames, dim))
}

fn global_moments<D: Borrow<FeatureMatrix> + Sync>(data: &[D], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0.0;
    let mut s1 = vec![0.0; dim];
    for f in data {
        let f = f.borrow();
        for row in f.iter_rows() {
            n += 1.0;
            for (a, x) in s1.iter_mut().zip(row) {
                *a += x;
            }
        }
    }
    let mean: Vec<f64> = s1.iter().map(|v| v / n).collect();
    let mut s2 = vec![0.0; dim];
    for f in data {
        let f = f.borrow();
        for row in f.iter_rows() {
            for ((a, x), m) in s2.iter_mut().zip(row).zip(&mean) {
                *a += (x - m) * (x - m);
            }
        }
    }
    let var = s2.iter().map(|v| v / n).collect();
    (mean, var)
}

#[derive(Clone)]
struct DiagAccum {
    occ: Vec<f64>,
    sx: Vec<f64>,
    sxx: Vec<f64>,
    loglike: f64,
}

impl DiagAccum {
    fn new(m: usize, d: usize) -> Self {
        Self {
            occ: vec![0.0; m],
            sx: vec![0.0; m * d],
            sxx: vec![0.0; m * d],
            loglike: 0.0,
        }
    }

    fn add(&mut self, o: &DiagAccum) {
        self.loglike += o.loglike;
        for (a, b) in self.occ.iter_mut().zip(&o.occ) {
            *a += b;
        }
        for (a, b) in self.sx.iter_mut().zip(&o.sx) {
            *a += b;
        }
        for (a, b) in self.sxx.iter_mut().zip(&o.sxx) {
            *a += b;
        }
    }
}

fn diag_estep<D: Borrow<FeatureMatrix> + Sync>(gmm: &DiagGmm, data: &[D]) -> DiagAccum {
    let (m, d) = (gmm.num_components(), gmm.dim());
    let partials: Vec<DiagAccum> = data
        .par_chunks(CHUNK_UTTS)
        .map(|chunk| {
            let mut acc = DiagAccum::new(m, d);
            let mut post = vec![0.0; m];
            for f in chunk {
                let f = f.borrow();
                for row in f.iter_rows() {
                    gmm.component_loglikes_into(row, &mut post);
                    acc.loglike += softmax_in_place(&mut post);
                    for (c, &g) in post.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        acc.occ[c] += g;
                        let sx = &mut acc.sx[c * d..(c + 1) * d];
                        let sxx = &mut acc.sxx[c * d..(c + 1) * d];
                        for i in 0..d {
                            let x = row[i];
                            sx[i] += g * x;
                            sxx[i] += g * x * x;
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = DiagAccum::new(m, d);
    for p in &partials {
        total.add(p);
    }
    total
}

fn diag_mstep(old: &DiagGmm, acc: &DiagAccum, var_floor: &[f64]) -> Result<DiagGmm> {
    let (m, d) = (old.num_components(), old.dim());
    let total: f64 = acc.occ.iter().sum();
    let mut weights = Vec::with_capacity(m);
    let mut means = Vec::with_capacity(m * d);
    let mut vars = Vec::with_capacity(m * d);
    for c in 0..m {
        let occ = acc.occ[c];
        weights.push(occ / total);
        if occ < MIN_OCCUPANCY {
            warn!("GMM component {c} has occupancy {occ:.3e}; keeping its parameters");
            means.extend_from_slice(old.mean(c));
            vars.extend_from_slice(old.var(c));
            continue;
        }
        for i in 0..d {
            let mu = acc.sx[c * d + i] / occ;
            let var = acc.sxx[c * d + i] / occ - mu * mu;
            means.push(mu);
            vars.push(var.max(var_floor[i]));
        }
    }
    DiagGmm::from_flat(weights, means, vars, d)
}

/// Diagonal UBM: global variance for every component, means at `num_components`
/// distinct randomly chosen frames, uniform weights, then `num_iters` EM steps.
pub fn train_diag_ubm<D: Borrow<FeatureMatrix> + Sync>(
    data: &[D],
    num_components: usize,
    num_iters: usize,
    seed: u64,
) -> Result<(DiagGmm, EmTrace)> {
    let (frames, dim) = check_data(data)?;
    if num_components == 0 {
        return Err(LidError::InvalidConfig("GMM needs at least one component".into()));
    }
    if frames < num_components {
        return Err(LidError::InvalidInput(format!(
            "{frames} frames cannot initialize {num_components} components"
        )));
    }
    let (_, global_var) = global_moments(data, dim);
    let var_floor: Vec<f64> = global_var.iter().map(|v| (v * VAR_FLOOR).max(f64::MIN_POSITIVE)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = index::sample(&mut rng, frames, num_components).into_vec();
    picks.sort_unstable();
    let mut means = Vec::with_capacity(num_components * dim);
    let (mut utt, mut offset) = (0, 0);
    for p in picks {
        while p >= offset + data[utt].borrow().rows() {
            offset += data[utt].borrow().rows();
            utt += 1;
        }
        means.extend_from_slice(data[utt].borrow().row(p - offset));
    }
    let vars: Vec<f64> = (0..num_components)
        .flat_map(|_| global_var.iter().map(|v| v.max(f64::MIN_POSITIVE)))
        .collect();
    let weights = vec![1.0 / num_components as f64; num_components];
    let mut gmm = DiagGmm::from_flat(weights, means, vars, dim)?;

    let mut trace = EmTrace::default();
    for it in 0..num_iters {
        let acc = diag_estep(&gmm, data);
        info!("diag UBM iter {it}: avg loglike {:.4}", acc.loglike / frames as f64);
        trace.loglikes.push(acc.loglike);
        gmm = diag_mstep(&gmm, &acc, &var_floor)?;
    }
    trace.loglikes.push(diag_estep(&gmm, data).loglike);
    Ok((gmm, trace))
}

/// Scatter accumulator about fixed per-component centers; lower triangles
/// stored row-major in `d x d` blocks.
struct ScatterAccum {
    occ: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    loglike: f64,
}

impl ScatterAccum {
    fn new(m: usize, d: usize) -> Self {
        Self {
            occ: vec![0.0; m],
            s1: vec![0.0; m * d],
            s2: vec![0.0; m * d * d],
            loglike: 0.0,
        }
    }

    fn add_frame(&mut self, c: usize, g: f64, row: &[f64], center: &[f64], dx: &mut [f64]) {
        let d = row.len();
        for i in 0..d {
            dx[i] = row[i] - center[i];
        }
        self.occ[c] += g;
        let s1 = &mut self.s1[c * d..(c + 1) * d];
        let s2 = &mut self.s2[c * d * d..(c + 1) * d * d];
        for i in 0..d {
            let gi = g * dx[i];
            s1[i] += gi;
            let r = &mut s2[i * d..i * d + i + 1];
            for j in 0..=i {
                r[j] += gi * dx[j];
            }
        }
    }

    fn add(&mut self, o: &ScatterAccum) {
        self.loglike += o.loglike;
        for (a, b) in self.occ.iter_mut().zip(&o.occ) {
            *a += b;
        }
        for (a, b) in self.s1.iter_mut().zip(&o.s1) {
            *a += b;
        }
        for (a, b) in self.s2.iter_mut().zip(&o.s2) {
            *a += b;
        }
    }

    fn scatter(&self, c: usize, d: usize) -> DMatrix<f64> {
        let s2 = &self.s2[c * d * d..(c + 1) * d * d];
        let mut m = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..=i {
                m[(i, j)] = s2[i * d + j];
                m[(j, i)] = s2[i * d + j];
            }
        }
        m
    }
}

fn reduce(partials: Vec<ScatterAccum>, m: usize, d: usize) -> ScatterAccum {
    let mut total = ScatterAccum::new(m, d);
    for p in &partials {
        total.add(p);
    }
    total
}

/// One EM pass with diagonal-model posteriors that re-estimates full
/// covariances around the fixed means; weights and means are copied unchanged.
pub fn diag_to_full<D: Borrow<FeatureMatrix> + Sync>(diag: &DiagGmm, data: &[D]) -> Result<FullGmm> {
    let (_, dim) = check_data(data)?;
    if dim != diag.dim() {
        return Err(LidError::DimensionMismatch {
            context: "diag_to_full data",
            expected: diag.dim(),
            actual: dim,
        });
    }
    let (m, d) = (diag.num_components(), dim);
    let partials: Vec<ScatterAccum> = data
        .par_chunks(CHUNK_UTTS)
        .map(|chunk| {
            let mut acc = ScatterAccum::new(m, d);
            let mut post = vec![0.0; m];
            let mut dx = vec![0.0; d];
            for f in chunk {
                let f = f.borrow();
                for row in f.iter_rows() {
                    diag.component_loglikes_into(row, &mut post);
                    acc.loglike += softmax_in_place(&mut post);
                    for (c, &g) in post.iter().enumerate() {
                        if g >= SCATTER_POST_MIN {
                            acc.add_frame(c, g, row, diag.mean(c), &mut dx);
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let acc = reduce(partials, m, d);

    let covs = (0..m)
        .map(|c| {
            let occ = acc.occ[c];
            if occ < MIN_OCCUPANCY {
                warn!("component {c} occupancy {occ:.3e}: keeping diagonal covariance");
                DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diag.var(c)))
            } else {
                floor_eigenvalues(&(acc.scatter(c, d) / occ), EIG_FLOOR)
            }
        })
        .collect();
    FullGmm::new(diag.weights().to_vec(), diag.means_flat().to_vec(), covs)
}

/// Full EM step with tandem preselection. Returns the updated full model,
/// its coherent diagonal partner, and the tandem log-likelihood of the input.
pub fn full_em_iteration<D: Borrow<FeatureMatrix> + Sync>(
    ubm: &TandemUbm,
    data: &[D],
) -> Result<(TandemUbm, f64)> {
    let full = &ubm.full;
    let (m, d) = (full.num_components(), full.dim());
    let partials: Vec<ScatterAccum> = data
        .par_chunks(CHUNK_UTTS)
        .map(|chunk| {
            let mut acc = ScatterAccum::new(m, d);
            let mut dx = vec![0.0; d];
            let mut scratch = tandem::Scratch::new(m);
            for f in chunk {
                let f = f.borrow();
                for row in f.iter_rows() {
                    let (post, ll) = tandem::select_and_score(&ubm.diag, full, row, ubm.top_n, &mut scratch);
                    acc.loglike += ll;
                    for &(c, g) in &post {
                        if g >= SCATTER_POST_MIN {
                            acc.add_frame(c as usize, g, row, full.mean(c as usize), &mut dx);
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let acc = reduce(partials, m, d);
    let total: f64 = acc.occ.iter().sum();

    let mut weights = Vec::with_capacity(m);
    let mut means = Vec::with_capacity(m * d);
    let mut covs = Vec::with_capacity(m);
    for c in 0..m {
        let occ = acc.occ[c];
        weights.push(occ / total);
        if occ < MIN_OCCUPANCY {
            warn!("full GMM component {c} has occupancy {occ:.3e}; keeping its parameters");
            means.extend_from_slice(full.mean(c));
            covs.push(full.cov(c).clone());
            continue;
        }
        let shift: Vec<f64> = acc.s1[c * d..(c + 1) * d].iter().map(|v| v / occ).collect();
        means.extend(full.mean(c).iter().zip(&shift).map(|(mu, s)| mu + s));
        let s = nalgebra::DVector::from_column_slice(&shift);
        let cov = acc.scatter(c, d) / occ - &s * s.transpose();
        covs.push(floor_eigenvalues(&cov, EIG_FLOOR));
    }
    let full = FullGmm::new(weights, means, covs)?;
    let diag = full.diagonalized()?;
    Ok((TandemUbm::new(diag, full, ubm.top_n)?, acc.loglike))
}

fn subset<'a, D: Borrow<FeatureMatrix>>(data: &'a [D], order: &[usize], n: Option<usize>) -> Vec<&'a FeatureMatrix> {
    let n = n.unwrap_or(data.len()).min(data.len());
    let mut idx: Vec<usize> = order[..n].to_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| data[i].borrow()).collect()
}

/// Staged tandem UBM recipe: a diagonal model on a subset, one fixed-mean
/// full-covariance pass, then full EM stages on growing subsets.
pub fn train_ubm<D: Borrow<FeatureMatrix> + Sync>(data: &[D], cfg: &UbmConfig) -> Result<TandemUbm> {
    if cfg.full.is_empty() {
        return Err(LidError::InvalidConfig("UBM recipe needs at least one full stage".into()));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));

    let diag_data = subset(data, &order, cfg.diag.subset_utts);
    info!("training diagonal UBM on {} utterances", diag_data.len());
    let (diag, _) = train_diag_ubm(&diag_data, cfg.num_components, cfg.diag.iters, cfg.seed)?;
    drop(diag_data);

    let mut ubm: Option<TandemUbm> = None;
    for (s, stage) in cfg.full.iter().enumerate() {
        let stage_data = subset(data, &order, stage.subset_utts);
        info!("full UBM stage {s} on {} utterances", stage_data.len());
        let mut iters = stage.iters;
        let mut current = match ubm.take() {
            Some(u) => u,
            None => {
                let full = diag_to_full(&diag, &stage_data)?;
                iters = iters.saturating_sub(1);
                TandemUbm::new(diag.clone(), full, cfg.top_n)?
            }
        };
        for it in 0..iters {
            let (next, ll) = full_em_iteration(&current, &stage_data)?;
            info!("full UBM stage {s} iter {it}: loglike {ll:.3}");
            current = next;
        }
        ubm = Some(current);
    }
    ubm.ok_or_else(|| LidError::InvalidConfig("empty UBM recipe".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn blobs(seed: u64, utts: usize) -> Vec<FeatureMatrix> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[-4.0, 0.0, 1.0], [3.0, 3.0, -2.0], [0.0, -4.0, 4.0]];
        (0..utts)
            .map(|_| {
                let mut data = Vec::with_capacity(180);
                for t in 0..60 {
                    let c = centers[t % 3];
                    let skew: f64 = rng.random_range(-1.0..1.0);
                    for j in 0..3 {
                        data.push(c[j] + skew * (j as f64 + 1.0) * 0.5 + rng.random_range(-0.3..0.3));
                    }
                }
                FeatureMatrix::new(60, 3, data, 0.01).unwrap()
            })
            .collect()
    }

    #[test]
    fn diag_training_is_monotone_and_floored() {
        let data = blobs(1, 6);
        let (gmm, trace) = train_diag_ubm(&data, 4, 8, 3).unwrap();
        assert_eq!(trace.loglikes.len(), 9);
        assert!(trace.is_monotone(1e-9));
        assert!((gmm.weights().iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert!(gmm.vars_flat().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn diag_training_is_seeded() {
        let data = blobs(2, 4);
        let a = train_diag_ubm(&data, 3, 3, 9).unwrap();
        let b = train_diag_ubm(&data, 3, 3, 9).unwrap();
        assert_eq!(a, b);
        assert!(train_diag_ubm(&data, 0, 3, 9).is_err());
        assert!(train_diag_ubm(&Vec::<FeatureMatrix>::new(), 2, 3, 9).is_err());
    }

    #[test]
    fn full_model_shares_diag_means() {
        let data = blobs(3, 5);
        let (diag, _) = train_diag_ubm(&data, 3, 4, 1).unwrap();
        let full = diag_to_full(&diag, &data).unwrap();
        assert_eq!(full.means_flat(), diag.means_flat());
        for c in 0..3 {
            let cov = full.cov(c);
            assert!((cov - cov.transpose()).amax() < 1e-12);
            assert!(cov.clone().cholesky().is_some());
        }
    }

    #[test]
    fn ubm_recipe_yields_coherent_pair() {
        let data = blobs(4, 8);
        let cfg = UbmConfig {
            num_components: 3,
            diag: UbmStage {
                subset_utts: Some(4),
                iters: 3,
            },
            full: vec![
                UbmStage {
                    subset_utts: Some(6),
                    iters: 1,
                },
                UbmStage {
                    subset_utts: None,
                    iters: 2,
                },
            ],
            top_n: 2,
            seed: 5,
        };
        let ubm = train_ubm(&data, &cfg).unwrap();
        assert_eq!(ubm.num_components(), 3);
        assert_eq!(ubm.top_n, 2);
        assert_eq!(ubm.diag.means_flat(), ubm.full.means_flat());
        assert!((ubm.full.weights().iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert_eq!(train_ubm(&data, &cfg).unwrap(), ubm);
    }
}
