//! Total-variability model: supervised GMM initialization, EM training of the
//! loading matrix and posterior-mean i-vector extraction.

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{LidError, Result};
use crate::gmm::{DiagGmm, PosteriorMatrix};
use crate::matrix::FeatureMatrix;
use crate::stats::SuffStats;

/// Relative variance floor for the supervised GMM, against the global variance.
const SUPERVISED_VAR_FLOOR: f64 = 1e-3;
/// Classes with less soft count than this fall back to global moments.
const MIN_CLASS_COUNT: f64 = 1.0;
const CHUNK_UTTS: usize = 8;

/// Class means, diagonal covariances and priors estimated from frame
/// posteriors of an external posterior source.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedGmm {
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    pub priors: Vec<f64>,
    pub dim: usize,
}

impl SupervisedGmm {
    pub fn num_classes(&self) -> usize {
        self.priors.len()
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        &self.means[c * self.dim..(c + 1) * self.dim]
    }

    pub fn var(&self, c: usize) -> &[f64] {
        &self.vars[c * self.dim..(c + 1) * self.dim]
    }
}

/// Weighted first and second moments per class.
pub fn init_supervised_gmm<'a, I>(data: I) -> Result<SupervisedGmm>
where
    I: IntoIterator<Item = (&'a PosteriorMatrix, &'a FeatureMatrix)>,
{
    let mut data = data.into_iter().peekable();
    let (first_post, first_feats) = data
        .peek()
        .ok_or_else(|| LidError::InvalidInput("no utterances for supervised GMM".into()))?;
    let (m, d) = (first_post.num_classes, first_feats.cols());
    let mut n = vec![0.0; m];
    let mut s1 = vec![0.0; m * d];
    let mut s2 = vec![0.0; m * d];
    let mut g1 = vec![0.0; d];
    let mut g2 = vec![0.0; d];
    let mut frames = 0usize;
    for (post, feats) in data {
        if post.num_classes != m || feats.cols() != d {
            return Err(LidError::DimensionMismatch {
                context: "supervised GMM input shape",
                expected: m * d,
                actual: post.num_classes * feats.cols(),
            });
        }
        if post.len() != feats.rows() {
            return Err(LidError::DimensionMismatch {
                context: "posterior rows vs feature rows",
                expected: feats.rows(),
                actual: post.len(),
            });
        }
        for (row, y) in post.rows.iter().zip(feats.iter_rows()) {
            for j in 0..d {
                g1[j] += y[j];
                g2[j] += y[j] * y[j];
            }
            for &(c, p) in row {
                let c = c as usize;
                n[c] += p;
                for j in 0..d {
                    s1[c * d + j] += p * y[j];
                    s2[c * d + j] += p * y[j] * y[j];
                }
            }
        }
        frames += feats.rows();
    }
    if frames == 0 {
        return Err(LidError::InvalidInput("no frames for supervised GMM".into()));
    }
    let gmean: Vec<f64> = g1.iter().map(|v| v / frames as f64).collect();
    let gvar: Vec<f64> = g2
        .iter()
        .zip(&gmean)
        .map(|(v, mu)| (v / frames as f64 - mu * mu).max(f64::MIN_POSITIVE))
        .collect();
    let mut means = vec![0.0; m * d];
    let mut vars = vec![0.0; m * d];
    let mut fallback = 0;
    for c in 0..m {
        for j in 0..d {
            let k = c * d + j;
            let floor = SUPERVISED_VAR_FLOOR * gvar[j];
            if n[c] < MIN_CLASS_COUNT {
                means[k] = gmean[j];
                vars[k] = gvar[j];
            } else {
                let mu = s1[k] / n[c];
                means[k] = mu;
                vars[k] = (s2[k] / n[c] - mu * mu).max(floor);
            }
        }
        if n[c] < MIN_CLASS_COUNT {
            fallback += 1;
        }
    }
    if fallback > 0 {
        warn!("supervised GMM: {fallback} of {m} classes had too little occupancy, using global moments");
    }
    let total: f64 = n.iter().sum();
    let priors = if total > 0.0 {
        n.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / m as f64; m]
    };
    Ok(SupervisedGmm {
        means,
        vars,
        priors,
        dim: d,
    })
}

/// Posterior of the latent factor for one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Ivector {
    pub w: DVector<f64>,
    /// Posterior precision `L`.
    pub precision: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvectorExtractor {
    /// One `D x R` loading block per class.
    t: Vec<DMatrix<f64>>,
    means: Vec<f64>,
    vars: Vec<f64>,
    dim: usize,
    rank: usize,
    /// `T_c' Σ_c^{-1}` per class (`R x D`).
    t_inv_var: Vec<DMatrix<f64>>,
    /// `T_c' Σ_c^{-1} T_c` per class (`R x R`).
    t_inv_var_t: Vec<DMatrix<f64>>,
}

impl IvectorExtractor {
    pub fn new(t: Vec<DMatrix<f64>>, means: Vec<f64>, vars: Vec<f64>) -> Result<Self> {
        let m = t.len();
        if m == 0 {
            return Err(LidError::InvalidInput("extractor needs at least one class".into()));
        }
        let (dim, rank) = t[0].shape();
        if rank == 0 || dim == 0 {
            return Err(LidError::InvalidConfig("extractor rank and dimension must be positive".into()));
        }
        if t.iter().any(|b| b.shape() != (dim, rank)) {
            return Err(LidError::InvalidInput("inconsistent loading block shapes".into()));
        }
        for (what, v) in [("extractor means", &means), ("extractor variances", &vars)] {
            if v.len() != m * dim {
                return Err(LidError::DimensionMismatch {
                    context: what,
                    expected: m * dim,
                    actual: v.len(),
                });
            }
        }
        if vars.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(LidError::InvalidInput("extractor variances must be positive".into()));
        }
        let mut ext = Self {
            t,
            means,
            vars,
            dim,
            rank,
            t_inv_var: Vec::new(),
            t_inv_var_t: Vec::new(),
        };
        ext.refresh();
        Ok(ext)
    }

    /// Random loading matrix around the given class means and variances.
    pub fn init(means: Vec<f64>, vars: Vec<f64>, dim: usize, rank: usize, seed: u64) -> Result<Self> {
        if dim == 0 || rank == 0 || !means.len().is_multiple_of(dim) {
            return Err(LidError::InvalidConfig(format!(
                "cannot build extractor with dim {dim}, rank {rank} from {} means",
                means.len()
            )));
        }
        let m = means.len() / dim;
        let mean_var = vars.iter().sum::<f64>() / vars.len().max(1) as f64;
        let scale = 0.1 * mean_var.sqrt() / (rank as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = (0..m)
            .map(|_| {
                DMatrix::from_fn(dim, rank, |_, _| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                })
            })
            .collect();
        Self::new(t, means, vars)
    }

    pub fn from_supervised(gmm: &SupervisedGmm, rank: usize, seed: u64) -> Result<Self> {
        Self::init(gmm.means.clone(), gmm.vars.clone(), gmm.dim, rank, seed)
    }

    /// Extractor on the class means and diagonal variances of a GMM.
    pub fn from_diag_gmm(gmm: &DiagGmm, rank: usize, seed: u64) -> Result<Self> {
        use crate::gmm::MixtureModel;
        Self::init(gmm.means_flat().to_vec(), gmm.vars_flat().to_vec(), gmm.dim(), rank, seed)
    }

    fn refresh(&mut self) {
        let d = self.dim;
        self.t_inv_var = self
            .t
            .iter()
            .enumerate()
            .map(|(c, tc)| {
                let mut m = tc.transpose();
                for j in 0..d {
                    m.column_mut(j).scale_mut(1.0 / self.vars[c * d + j]);
                }
                m
            })
            .collect();
        self.t_inv_var_t = self.t_inv_var.iter().zip(&self.t).map(|(a, t)| a * t).collect();
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.t.len()
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn vars(&self) -> &[f64] {
        &self.vars
    }

    pub fn loading(&self, c: usize) -> &DMatrix<f64> {
        &self.t[c]
    }

    pub fn loadings(&self) -> &[DMatrix<f64>] {
        &self.t
    }

    fn check_stats(&self, stats: &SuffStats) -> Result<()> {
        if !stats.centered {
            return Err(LidError::InvalidInput("i-vector extraction needs centered statistics".into()));
        }
        if stats.num_classes != self.num_classes() || stats.dim != self.dim {
            return Err(LidError::DimensionMismatch {
                context: "statistics vs extractor shape",
                expected: self.num_classes() * self.dim,
                actual: stats.num_classes * stats.dim,
            });
        }
        Ok(())
    }

    /// Returns `(L, b)` with `L = I + Σ_c N_c T_c'Σ_c^{-1}T_c` and
    /// `b = Σ_c T_c'Σ_c^{-1} F̂_c`.
    fn precision_and_linear(&self, stats: &SuffStats) -> (DMatrix<f64>, DVector<f64>) {
        let r = self.rank;
        let mut l = DMatrix::identity(r, r);
        let mut b = DVector::zeros(r);
        for c in 0..self.num_classes() {
            let n = stats.n[c];
            if n != 0.0 {
                l += &self.t_inv_var_t[c] * n;
            }
            let f = stats.first_order(c);
            if f.iter().any(|&v| v != 0.0) {
                b.gemv(1.0, &self.t_inv_var[c], &DVector::from_column_slice(f), 1.0);
            }
        }
        (l, b)
    }

    /// Posterior mean and precision; also returns `L^{-1}` and the per-utterance
    /// marginal log-likelihood term `0.5 b'L^{-1}b - 0.5 log|L|`.
    fn posterior(&self, stats: &SuffStats) -> Result<(Ivector, DMatrix<f64>, f64)> {
        let (l, b) = self.precision_and_linear(stats);
        let chol = l
            .clone()
            .cholesky()
            .ok_or_else(|| LidError::Numeric("i-vector precision is not positive definite".into()))?;
        let w = chol.solve(&b);
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let objective = 0.5 * b.dot(&w) - 0.5 * logdet;
        let cov = chol.inverse();
        Ok((
            Ivector {
                w,
                precision: Some(l),
            },
            cov,
            objective,
        ))
    }

    /// Posterior mean `E[w] = L^{-1} Σ_c T_c'Σ_c^{-1} F̂_c` with its precision.
    pub fn extract(&self, stats: &SuffStats) -> Result<Ivector> {
        self.check_stats(stats)?;
        Ok(self.posterior(stats)?.0)
    }
}

pub fn extract_ivector(ext: &IvectorExtractor, stats: &SuffStats) -> Result<Ivector> {
    ext.extract(stats)
}

struct EmAccum {
    objective: f64,
    /// `Σ_u N_uc E[w w']` per class.
    a: Vec<DMatrix<f64>>,
    /// `Σ_u F̂_uc E[w]'` per class.
    c: Vec<DMatrix<f64>>,
}

impl EmAccum {
    fn new(m: usize, d: usize, r: usize) -> Self {
        Self {
            objective: 0.0,
            a: vec![DMatrix::zeros(r, r); m],
            c: vec![DMatrix::zeros(d, r); m],
        }
    }

    fn add(&mut self, other: &EmAccum) {
        self.objective += other.objective;
        for (x, y) in self.a.iter_mut().zip(&other.a) {
            *x += y;
        }
        for (x, y) in self.c.iter_mut().zip(&other.c) {
            *x += y;
        }
    }
}

/// One EM pass over centered per-utterance statistics. Returns the updated
/// extractor and the marginal log-likelihood of the statistics under the
/// input model, up to terms that do not depend on the loading matrix.
pub fn em_iteration(ext: &IvectorExtractor, stats_set: &[SuffStats]) -> Result<(IvectorExtractor, f64)> {
    if stats_set.is_empty() {
        return Err(LidError::InvalidInput("no statistics for i-vector training".into()));
    }
    for s in stats_set {
        ext.check_stats(s)?;
    }
    let (m, d, r) = (ext.num_classes(), ext.dim, ext.rank);
    let partials: Vec<EmAccum> = stats_set
        .par_chunks(CHUNK_UTTS)
        .map(|chunk| {
            let mut acc = EmAccum::new(m, d, r);
            for s in chunk {
                let (iv, cov, obj) = ext.posterior(s)?;
                acc.objective += obj;
                let ww = cov + &iv.w * iv.w.transpose();
                for c in 0..m {
                    if s.n[c] != 0.0 {
                        acc.a[c] += &ww * s.n[c];
                    }
                    let f = DVector::from_column_slice(s.first_order(c));
                    acc.c[c].ger(1.0, &f, &iv.w, 1.0);
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = EmAccum::new(m, d, r);
    for p in &partials {
        total.add(p);
    }

    let mut t = ext.t.clone();
    for c in 0..m {
        let a = &total.a[c];
        let trace = a.trace();
        if trace == 0.0 {
            continue;
        }
        let rhs = total.c[c].transpose();
        let solved = match a.clone().cholesky() {
            Some(ch) => ch.solve(&rhs),
            None => {
                let ridge = 1e-8 * trace / r as f64;
                warn!("i-vector M-step: class {c} normal matrix singular, adding ridge {ridge:e}");
                let mut reg = a.clone();
                for i in 0..r {
                    reg[(i, i)] += ridge;
                }
                reg.cholesky()
                    .ok_or_else(|| LidError::Numeric(format!("cannot solve M-step for class {c}")))?
                    .solve(&rhs)
            }
        };
        t[c] = solved.transpose();
    }
    let next = IvectorExtractor::new(t, ext.means.clone(), ext.vars.clone())?;
    info!("i-vector EM: objective {:.6} over {} utterances", total.objective, stats_set.len());
    Ok((next, total.objective))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn stats_from(n: Vec<f64>, f: Vec<f64>, dim: usize) -> SuffStats {
        let m = n.len();
        SuffStats {
            n,
            f,
            centered: true,
            dim,
            num_classes: m,
        }
    }

    #[test]
    fn scalar_model_matches_closed_form() {
        let (t, var, n, f) = (0.7, 1.8, 12.5, 3.3);
        let ext = IvectorExtractor::new(vec![DMatrix::from_element(1, 1, t)], vec![0.2], vec![var]).unwrap();
        let iv = ext.extract(&stats_from(vec![n], vec![f], 1)).unwrap();
        let want = t / var * f / (1.0 + t * t / var * n);
        assert!((iv.w[0] - want).abs() < 1e-12);
        let prec = iv.precision.unwrap();
        assert!((prec[(0, 0)] - (1.0 + t * t * n / var)).abs() < 1e-12);
    }

    #[test]
    fn zero_stats_give_prior_mean() {
        let ext = IvectorExtractor::init(vec![0.0; 6], vec![1.0; 6], 2, 4, 3).unwrap();
        let iv = ext.extract(&SuffStats::zeros(3, 2, true)).unwrap();
        assert!(iv.w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_uncentered_or_misshaped_stats() {
        let ext = IvectorExtractor::init(vec![0.0; 6], vec![1.0; 6], 2, 4, 3).unwrap();
        assert!(ext.extract(&SuffStats::zeros(3, 2, false)).is_err());
        assert!(matches!(
            ext.extract(&SuffStats::zeros(2, 3, true)),
            Err(LidError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn zero_first_order_drives_loadings_to_zero() {
        let ext = IvectorExtractor::init(vec![0.0; 4], vec![1.0; 4], 2, 3, 1).unwrap();
        let set: Vec<_> = (0..3).map(|_| stats_from(vec![5.0, 0.0], vec![0.0; 4], 2)).collect();
        let (next, _) = em_iteration(&ext, &set).unwrap();
        assert!(next.loading(0).iter().all(|&v| v.abs() < 1e-15));
        // The unoccupied class keeps its loading.
        assert_eq!(next.loading(1), ext.loading(1));
    }

    #[test]
    fn precision_smallest_eigenvalue_at_least_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ext = IvectorExtractor::init(vec![0.0; 12], vec![0.5; 12], 3, 5, 9).unwrap();
        let n: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..20.0)).collect();
        let f: Vec<f64> = (0..12).map(|_| rng.random_range(-3.0..3.0)).collect();
        let l = ext.extract(&stats_from(n, f, 3)).unwrap().precision.unwrap();
        let eig = nalgebra::SymmetricEigen::new(l);
        assert!(eig.eigenvalues.min() >= 1.0 - 1e-8);
    }

    #[test]
    fn supervised_gmm_one_hot_gives_class_means() {
        let feats = FeatureMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![-1.0, 0.5], vec![-3.0, 1.5]], 0.01).unwrap();
        let post = PosteriorMatrix::new(2, vec![vec![(0, 1.0)], vec![(0, 1.0)], vec![(1, 1.0)], vec![(1, 1.0)]]);
        let g = init_supervised_gmm([(&post, &feats)]).unwrap();
        assert_eq!(g.mean(0), &[2.0, 4.0]);
        assert_eq!(g.mean(1), &[-2.0, 1.0]);
        assert_eq!(g.priors, vec![0.5, 0.5]);
        assert!((g.var(0)[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn supervised_gmm_uniform_posteriors_give_global_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.random_range(-1.0..1.0); 3]).collect();
        let feats = FeatureMatrix::from_rows(&rows, 0.01).unwrap();
        let post = PosteriorMatrix::new(3, (0..30).map(|_| (0..3).map(|c| (c, 1.0 / 3.0)).collect()).collect());
        let g = init_supervised_gmm([(&post, &feats)]).unwrap();
        let gm = feats.column_means();
        for c in 0..3 {
            for j in 0..3 {
                assert!((g.mean(c)[j] - gm[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn supervised_gmm_matches_weighted_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (t, m, d) = (50, 4, 3);
        let rows: Vec<Vec<f64>> = (0..t).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let dense: Vec<Vec<f64>> = (0..t)
            .map(|_| {
                let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..1.0)).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let feats = FeatureMatrix::from_rows(&rows, 0.01).unwrap();
        let g = init_supervised_gmm([(&PosteriorMatrix::from_dense(&dense), &feats)]).unwrap();
        for c in 0..m {
            let n: f64 = dense.iter().map(|p| p[c]).sum();
            assert!((g.priors[c] - n / t as f64).abs() < 1e-12);
            for j in 0..d {
                let mu: f64 = (0..t).map(|i| dense[i][c] * rows[i][j]).sum::<f64>() / n;
                let var: f64 = (0..t).map(|i| dense[i][c] * (rows[i][j] - mu).powi(2)).sum::<f64>() / n;
                assert!((g.mean(c)[j] - mu).abs() < 1e-10);
                assert!((g.var(c)[j] - var).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn supervised_gmm_low_count_class_uses_global_moments() {
        let feats = FeatureMatrix::from_rows(&[vec![1.0], vec![3.0], vec![5.0]], 0.01).unwrap();
        let post = PosteriorMatrix::new(2, vec![vec![(0, 1.0)], vec![(0, 1.0)], vec![(0, 0.5), (1, 0.5)]]);
        let g = init_supervised_gmm([(&post, &feats)]).unwrap();
        assert_eq!(g.mean(1), &[3.0]);
        assert!((g.var(1)[0] - 8.0 / 3.0).abs() < 1e-12);
        assert!(init_supervised_gmm(std::iter::empty()).is_err());
    }

    #[test]
    fn em_is_deterministic_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (m, d, r) = (3, 2, 2);
        let truth = IvectorExtractor::init(vec![0.0; m * d], vec![1.0; m * d], d, r, 50).unwrap();
        let set: Vec<SuffStats> = (0..20)
            .map(|_| {
                let w: DVector<f64> = DVector::from_fn(r, |_, _| { let z: f64 = StandardNormal.sample(&mut rng); 10.0 * z });
                let n: Vec<f64> = (0..m).map(|_| rng.random_range(5.0..30.0)).collect();
                let mut f = vec![0.0; m * d];
                for c in 0..m {
                    let shift = truth.loading(c) * &w;
                    for j in 0..d {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        f[c * d + j] = n[c] * shift[j] + n[c].sqrt() * noise;
                    }
                }
                stats_from(n, f, d)
            })
            .collect();
        let mut ext = IvectorExtractor::init(vec![0.0; m * d], vec![1.0; m * d], d, r, 1).unwrap();
        let mut objs = Vec::new();
        for _ in 0..5 {
            let (next, obj) = em_iteration(&ext, &set).unwrap();
            objs.push(obj);
            ext = next;
        }
        for w in objs.windows(2) {
            assert!(w[1] >= w[0] - 1e-6 * w[0].abs(), "{objs:?}");
        }
        let again = em_iteration(&IvectorExtractor::init(vec![0.0; m * d], vec![1.0; m * d], d, r, 1).unwrap(), &set)
            .unwrap();
        assert_eq!(again.1, objs[0]);
    }
}
