use std::cmp::Ordering;

use rayon::prelude::*;

use super::{log_sum_exp, DiagGmm, FullGmm, MixtureModel, PostRow, PosteriorMatrix, PRUNE_THRESHOLD};
use crate::error::{LidError, Result};
use crate::matrix::FeatureMatrix;

/// Coherent diagonal/full model pair plus the preselection width.
#[derive(Debug, Clone, PartialEq)]
pub struct TandemUbm {
    pub diag: DiagGmm,
    pub full: FullGmm,
    pub top_n: usize,
}

fn check_coherent(diag: &DiagGmm, full: &FullGmm, top_n: usize) -> Result<()> {
    if diag.num_components() != full.num_components() || diag.dim() != full.dim() {
        return Err(LidError::InvalidInput(format!(
            "incoherent UBM pair: diag {}x{}, full {}x{}",
            diag.num_components(),
            diag.dim(),
            full.num_components(),
            full.dim()
        )));
    }
    if diag.means_flat() != full.means_flat() {
        return Err(LidError::InvalidInput("incoherent UBM pair: means differ".into()));
    }
    if top_n == 0 || top_n > diag.num_components() {
        return Err(LidError::InvalidConfig(format!(
            "top_n must be in 1..={}, got {top_n}",
            diag.num_components()
        )));
    }
    Ok(())
}

impl TandemUbm {
    pub fn new(diag: DiagGmm, full: FullGmm, top_n: usize) -> Result<Self> {
        check_coherent(&diag, &full, top_n)?;
        Ok(Self { diag, full, top_n })
    }

    pub fn num_components(&self) -> usize {
        self.full.num_components()
    }

    /// Pruned tandem posteriors for every frame of an utterance.
    pub fn posteriors(&self, feats: &FeatureMatrix) -> Result<PosteriorMatrix> {
        self.full.check_dim(feats.cols())?;
        let rows: Vec<PostRow> = (0..feats.rows())
            .into_par_iter()
            .with_min_len(64)
            .map_init(
                || Scratch::new(self.num_components()),
                |scratch, t| select_and_score(&self.diag, &self.full, feats.row(t), self.top_n, scratch).0,
            )
            .collect();
        let mut post = PosteriorMatrix::new(self.num_components(), rows);
        post.prune(PRUNE_THRESHOLD);
        Ok(post)
    }
}

pub(crate) struct Scratch {
    diag_ll: Vec<f64>,
    order: Vec<usize>,
}

impl Scratch {
    pub(crate) fn new(m: usize) -> Self {
        Self {
            diag_ll: vec![0.0; m],
            order: Vec::with_capacity(m),
        }
    }
}

/// Core of [`tandem_posteriors`]: returns the sparse posterior row over the
/// preselected components and the log-likelihood over that set.
pub(crate) fn select_and_score(
    diag: &DiagGmm,
    full: &FullGmm,
    frame: &[f64],
    top_n: usize,
    scratch: &mut Scratch,
) -> (PostRow, f64) {
    let m = diag.num_components();
    diag.component_loglikes_into(frame, &mut scratch.diag_ll);
    let ll = &scratch.diag_ll;
    let by_score = |a: &usize, b: &usize| {
        ll[*b].partial_cmp(&ll[*a]).unwrap_or(Ordering::Equal).then(a.cmp(b))
    };
    scratch.order.clear();
    scratch.order.extend(0..m);
    if top_n < m {
        scratch.order.select_nth_unstable_by(top_n - 1, by_score);
        scratch.order.truncate(top_n);
    }
    scratch.order.sort_unstable();

    let scores: Vec<f64> = scratch.order.iter().map(|&c| full.component_loglike(c, frame)).collect();
    let total = log_sum_exp(&scores);
    let row = scratch
        .order
        .iter()
        .zip(&scores)
        .map(|(&c, &s)| (c as u32, (s - total).exp()))
        .collect();
    (row, total)
}

/// Posterior row of one frame: the `top_n` components with the highest
/// diagonal likelihood are rescored with the full covariances and
/// renormalized; every other component gets exactly zero.
pub fn tandem_posteriors(diag: &DiagGmm, full: &FullGmm, frame: &[f64], top_n: usize) -> Result<PostRow> {
    check_coherent(diag, full, top_n)?;
    full.check_dim(frame.len())?;
    let mut scratch = Scratch::new(diag.num_components());
    Ok(select_and_score(diag, full, frame, top_n, &mut scratch).0)
}
