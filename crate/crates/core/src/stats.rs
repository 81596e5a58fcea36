//! Zeroth and first-order Baum-Welch statistics against any frame posterior
//! source, either a GMM-UBM or the classes of a neural network.

use log::debug;

use crate::error::{LidError, Result};
use crate::features::VadMask;
use crate::gmm::{PosteriorMatrix, TandemUbm};
use crate::matrix::FeatureMatrix;
use crate::nnet::TddnnModel;

/// Row sums may deviate from 1 by at most this before accumulation refuses.
const ROW_SUM_TOL: f64 = 1e-6;

/// Which feature stream a posterior source reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureStream {
    /// The same features the statistics are collected on.
    Stats,
    /// The 40-dim high-resolution cepstra.
    HighRes,
}

/// Anything that maps frames to class posteriors.
pub trait PosteriorSource: Sync {
    fn num_classes(&self) -> usize;
    fn stream(&self) -> FeatureStream;
    fn posteriors(&self, feats: &FeatureMatrix) -> Result<PosteriorMatrix>;
}

impl PosteriorSource for TandemUbm {
    fn num_classes(&self) -> usize {
        self.num_components()
    }

    fn stream(&self) -> FeatureStream {
        FeatureStream::Stats
    }

    fn posteriors(&self, feats: &FeatureMatrix) -> Result<PosteriorMatrix> {
        TandemUbm::posteriors(self, feats)
    }
}

impl PosteriorSource for TddnnModel {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn stream(&self) -> FeatureStream {
        FeatureStream::HighRes
    }

    fn posteriors(&self, feats: &FeatureMatrix) -> Result<PosteriorMatrix> {
        let mut post = self.forward(feats)?;
        post.prune(crate::gmm::PRUNE_THRESHOLD);
        Ok(post)
    }
}

/// `n[c] = N_c`, `f[c] = F_c` (or the centered `F̂_c` when `centered`).
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    pub n: Vec<f64>,
    /// Row-major `M x D`.
    pub f: Vec<f64>,
    pub centered: bool,
    pub dim: usize,
    pub num_classes: usize,
}

impl SuffStats {
    pub fn zeros(num_classes: usize, dim: usize, centered: bool) -> Self {
        Self {
            n: vec![0.0; num_classes],
            f: vec![0.0; num_classes * dim],
            centered,
            dim,
            num_classes,
        }
    }

    pub fn first_order(&self, c: usize) -> &[f64] {
        &self.f[c * self.dim..(c + 1) * self.dim]
    }

    pub fn total_occupancy(&self) -> f64 {
        self.n.iter().sum()
    }
}

/// Accumulates statistics over the frames whose mask flag is set:
/// `N_c = Σ P(c|y_t)`, `F_c = Σ P(c|y_t) y_t`, and with `means`,
/// `F̂_c = Σ P(c|y_t) (y_t - μ_c)`.
pub fn accumulate_stats(
    post: &PosteriorMatrix,
    feats: &FeatureMatrix,
    mask: &VadMask,
    means: Option<&[f64]>,
) -> Result<SuffStats> {
    if post.len() != feats.rows() {
        return Err(LidError::DimensionMismatch {
            context: "posterior rows vs feature rows",
            expected: feats.rows(),
            actual: post.len(),
        });
    }
    if mask.len() != feats.rows() {
        return Err(LidError::DimensionMismatch {
            context: "VAD mask vs feature rows",
            expected: feats.rows(),
            actual: mask.len(),
        });
    }
    let (m, d) = (post.num_classes, feats.cols());
    if let Some(mu) = means {
        if mu.len() != m * d {
            return Err(LidError::DimensionMismatch {
                context: "centering means",
                expected: m * d,
                actual: mu.len(),
            });
        }
    }

    let mut stats = SuffStats::zeros(m, d, means.is_some());
    for (t, row) in post.rows.iter().enumerate() {
        if !mask.flags[t] {
            continue;
        }
        let mut sum = 0.0;
        for &(c, p) in row {
            if c as usize >= m || !(p >= 0.0) {
                return Err(LidError::NotNormalized { frame: t, sum: p });
            }
            sum += p;
        }
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(LidError::NotNormalized { frame: t, sum });
        }
        let y = feats.row(t);
        for &(c, p) in row {
            let c = c as usize;
            stats.n[c] += p;
            let f = &mut stats.f[c * d..(c + 1) * d];
            for (acc, v) in f.iter_mut().zip(y) {
                *acc += p * v;
            }
        }
    }
    if let Some(mu) = means {
        for c in 0..m {
            let nc = stats.n[c];
            for (acc, mv) in stats.f[c * d..(c + 1) * d].iter_mut().zip(&mu[c * d..(c + 1) * d]) {
                *acc -= nc * mv;
            }
        }
    }
    Ok(stats)
}

/// Elementwise sum of two statistics blocks of the same shape and form.
pub fn merge_stats(a: &SuffStats, b: &SuffStats) -> Result<SuffStats> {
    if a.num_classes != b.num_classes || a.dim != b.dim {
        return Err(LidError::DimensionMismatch {
            context: "merge_stats shape",
            expected: a.num_classes * a.dim,
            actual: b.num_classes * b.dim,
        });
    }
    if a.centered != b.centered {
        return Err(LidError::InvalidInput("cannot merge centered with uncentered stats".into()));
    }
    Ok(SuffStats {
        n: a.n.iter().zip(&b.n).map(|(x, y)| x + y).collect(),
        f: a.f.iter().zip(&b.f).map(|(x, y)| x + y).collect(),
        centered: a.centered,
        dim: a.dim,
        num_classes: a.num_classes,
    })
}

/// Sums per-utterance statistics in index order.
pub fn reduce_stats(items: &[SuffStats]) -> Result<Option<SuffStats>> {
    let mut iter = items.iter();
    let Some(first) = iter.next() else {
        return Ok(None);
    };
    let mut acc = first.clone();
    for s in iter {
        acc = merge_stats(&acc, s)?;
    }
    Ok(Some(acc))
}

/// Reconciles the frame counts of two streams cut with different window
/// lengths at the same shift by truncating to the shorter one. Differences
/// larger than `max_diff` frames are treated as a pairing error.
pub fn align_frame_counts(a: usize, b: usize, max_diff: usize, utt_id: &str) -> Result<usize> {
    let diff = a.abs_diff(b);
    if diff > max_diff {
        return Err(LidError::DimensionMismatch {
            context: "feature stream frame counts",
            expected: a,
            actual: b,
        });
    }
    if diff > 0 {
        debug!("{utt_id}: truncating streams from {a}/{b} to {} frames", a.min(b));
    }
    Ok(a.min(b))
}

/// Centered statistics for one utterance.
///
/// `speech_feats` holds the speech frames of the statistics stream and
/// `mask` flags speech over every frame of the utterance. A source that
/// reads the statistics stream scores `speech_feats` directly; a source on
/// the high-resolution stream sees every frame for full temporal context and
/// its non-speech rows are filtered out afterwards.
pub fn utterance_stats(
    source: &dyn PosteriorSource,
    source_feats: &FeatureMatrix,
    speech_feats: &FeatureMatrix,
    mask: &VadMask,
    means: Option<&[f64]>,
    utt_id: &str,
) -> Result<SuffStats> {
    let (post, feats) = speech_posteriors(source, source_feats, speech_feats, mask, utt_id)?;
    let all = VadMask::all(feats.rows());
    accumulate_stats(&post, &feats, &all, means)
}

/// Posterior rows paired one-to-one with the rows of the returned speech
/// features.
pub fn speech_posteriors(
    source: &dyn PosteriorSource,
    source_feats: &FeatureMatrix,
    speech_feats: &FeatureMatrix,
    mask: &VadMask,
    utt_id: &str,
) -> Result<(PosteriorMatrix, FeatureMatrix)> {
    if mask.num_speech() != speech_feats.rows() {
        return Err(LidError::DimensionMismatch {
            context: "speech frames vs VAD mask",
            expected: mask.num_speech(),
            actual: speech_feats.rows(),
        });
    }
    match source.stream() {
        FeatureStream::Stats => Ok((source.posteriors(speech_feats)?, speech_feats.clone())),
        FeatureStream::HighRes => {
            let n = align_frame_counts(mask.len(), source_feats.rows(), 2, utt_id)?;
            let mut post = source.posteriors(source_feats)?;
            post.truncate(n);
            let mut mask = mask.clone();
            mask.truncate(n);
            let post = post.select(&mask.flags)?;
            Ok((post, speech_feats.truncate_rows(mask.num_speech())))
        }
    }
}
