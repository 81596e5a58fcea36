use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Gradients, TddnnModel};
use crate::error::{LidError, Result};
use crate::matrix::FeatureMatrix;

/// Output frames per training chunk. A minibatch is a run of shuffled chunks.
const CHUNK_FRAMES: usize = 64;

/// Per-frame class targets for one utterance.
pub type FrameLabels = Vec<u32>;

/// Maps 10 ms block labels onto frames: frame `t` takes the label of the
/// block containing its center sample time.
pub fn labels_for_frames(block_labels: &[u32], num_frames: usize, frame_len_s: f64, frame_shift_s: f64) -> Result<FrameLabels> {
    if block_labels.is_empty() {
        return Err(LidError::InvalidInput("empty label sequence".into()));
    }
    let block_s = 0.01;
    Ok((0..num_frames)
        .map(|t| {
            let center = t as f64 * frame_shift_s + 0.5 * frame_len_s;
            let b = ((center / block_s) + 1e-9).floor() as usize;
            block_labels[b.min(block_labels.len() - 1)]
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SgdSchedule {
    pub initial_lr: f64,
    pub final_lr: f64,
    pub num_epochs: usize,
    /// Frames per parameter update; gradients are summed, not averaged.
    pub minibatch_size: usize,
    pub seed: u64,
}

impl Default for SgdSchedule {
    fn default() -> Self {
        Self {
            initial_lr: 0.0015,
            final_lr: 0.00015,
            num_epochs: 6,
            minibatch_size: 256,
            seed: 1,
        }
    }
}

impl SgdSchedule {
    /// Geometric interpolation from `initial_lr` to `final_lr`.
    pub fn lr(&self, epoch: usize) -> f64 {
        if self.num_epochs <= 1 {
            return self.initial_lr;
        }
        let frac = epoch as f64 / (self.num_epochs - 1) as f64;
        self.initial_lr * (self.final_lr / self.initial_lr).powf(frac)
    }

    fn validate(&self) -> Result<()> {
        if self.num_epochs == 0 || self.minibatch_size == 0 {
            return Err(LidError::InvalidConfig("epochs and minibatch size must be positive".into()));
        }
        if !(self.initial_lr > 0.0 && self.final_lr > 0.0) {
            return Err(LidError::InvalidConfig("learning rates must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Mean per-frame cross-entropy before any update.
    pub initial_ce: f64,
    /// Mean per-frame cross-entropy seen during each epoch.
    pub epoch_ce: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

impl TrainLog {
    pub fn final_ce(&self) -> f64 {
        *self.epoch_ce.last().unwrap_or(&self.initial_ce)
    }
}

impl Gradients {
    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }
}

impl TddnnModel {
    /// Sets the input standardization to the global mean and inverse
    /// standard deviation of the given features.
    pub fn fit_input_normalization<'a>(&mut self, feats: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<()> {
        let d = self.config.input_dim;
        let mut n = 0usize;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for f in feats {
            self.check_input(f)?;
            for row in f.iter_rows() {
                for j in 0..d {
                    sum[j] += row[j];
                    sq[j] += row[j] * row[j];
                }
            }
            n += f.rows();
        }
        if n == 0 {
            return Err(LidError::InvalidInput("no frames for input normalization".into()));
        }
        for j in 0..d {
            let mean = sum[j] / n as f64;
            let var = (sq[j] / n as f64 - mean * mean).max(1e-10);
            self.input_shift[j] = mean;
            self.input_scale[j] = 1.0 / var.sqrt();
        }
        Ok(())
    }

    /// Data-dependent rescaling of the random initialization: layer by layer,
    /// each affine unit gets zero mean and unit variance over the sample
    /// frames. Without it the non-negative p-norm outputs carry almost no
    /// frame-dependent signal through a deep stack at initialization.
    pub fn standardize_layers(&mut self, sample: &[&FeatureMatrix]) -> Result<()> {
        if sample.is_empty() {
            return Err(LidError::InvalidInput("no frames for layer standardization".into()));
        }
        for f in sample {
            self.check_input(f)?;
        }
        let nl = self.config.num_layers();
        for l in 0..=nl {
            let width = self.layers[l].b.len();
            let mut n = 0usize;
            let mut sum = vec![0.0; width];
            let mut sq = vec![0.0; width];
            for f in sample {
                let (caches, logits) = self.forward_logits(f, 0, f.rows());
                let pre = if l < nl { &caches[l].pre } else { &logits };
                for i in 0..pre.nrows() {
                    for j in 0..width {
                        let v = pre[(i, j)];
                        sum[j] += v;
                        sq[j] += v * v;
                    }
                }
                n += pre.nrows();
            }
            let layer = &mut self.layers[l];
            for j in 0..width {
                let mean = sum[j] / n as f64;
                let sd = (sq[j] / n as f64 - mean * mean).max(0.0).sqrt();
                let scale = if sd > 1e-8 { 1.0 / sd } else { 1.0 };
                layer.w.column_mut(j).scale_mut(scale);
                layer.b[j] = (layer.b[j] - mean) * scale;
            }
        }
        Ok(())
    }

    fn apply_update(&mut self, grad: &Gradients, lr: f64) {
        for (p, g) in self.layers.iter_mut().zip(&grad.layers) {
            p.w.zip_apply(&g.w, |w, d| *w -= lr * d);
            p.b.axpy(-lr, &g.b, 1.0);
        }
    }

    /// Mean per-frame cross-entropy over a labeled set.
    pub fn mean_cross_entropy(&self, data: &[(FeatureMatrix, FrameLabels)]) -> Result<f64> {
        let parts: Vec<(f64, usize)> = data
            .par_iter()
            .map(|(f, y)| Ok((self.loss_and_gradient(f, y, 0, f.rows())?.0, f.rows())))
            .collect::<Result<_>>()?;
        let (loss, n) = parts.iter().fold((0.0, 0), |(l, n), (a, b)| (l + a, n + b));
        Ok(loss / n.max(1) as f64)
    }
}

/// Plain minibatch SGD on frame cross-entropy with a geometric learning-rate
/// schedule. Chunk gradients inside a minibatch are computed in parallel and
/// summed in a fixed order, so results do not depend on the thread count.
pub fn train_sgd(model: &mut TddnnModel, data: &[(FeatureMatrix, FrameLabels)], sched: &SgdSchedule) -> Result<TrainLog> {
    sched.validate()?;
    if data.is_empty() {
        return Err(LidError::InvalidInput("no training utterances".into()));
    }
    let mut chunks = Vec::new();
    for (u, (f, y)) in data.iter().enumerate() {
        model.check_input(f)?;
        if y.len() != f.rows() {
            return Err(LidError::DimensionMismatch {
                context: "frame labels",
                expected: f.rows(),
                actual: y.len(),
            });
        }
        let mut s = 0;
        while s < f.rows() {
            let e = (s + CHUNK_FRAMES).min(f.rows());
            chunks.push((u, s, e));
            s = e;
        }
    }
    let per_batch = sched.minibatch_size.div_ceil(CHUNK_FRAMES).max(1);
    let initial_ce = model.mean_cross_entropy(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sched.seed);
    let mut log = TrainLog {
        initial_ce,
        epoch_ce: Vec::with_capacity(sched.num_epochs),
        learning_rates: Vec::with_capacity(sched.num_epochs),
    };
    for epoch in 0..sched.num_epochs {
        let lr = sched.lr(epoch);
        chunks.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut frames = 0usize;
        for batch in chunks.chunks(per_batch) {
            let results: Vec<(f64, Gradients)> = batch
                .par_iter()
                .map(|&(u, s, e)| model.loss_and_gradient(&data[u].0, &data[u].1, s, e))
                .collect::<Result<_>>()?;
            let mut iter = results.into_iter();
            let (mut loss, mut grad) = iter.next().expect("non-empty batch");
            for (l, g) in iter {
                loss += l;
                grad.add_assign(&g);
            }
            if !loss.is_finite() {
                return Err(LidError::Numeric(format!("non-finite training loss in epoch {epoch}")));
            }
            loss_sum += loss;
            frames += batch.iter().map(|&(_, s, e)| e - s).sum::<usize>();
            model.apply_update(&grad, lr);
        }
        if !model.all_finite() {
            return Err(LidError::Numeric(format!("non-finite parameters after epoch {epoch}")));
        }
        let ce = loss_sum / frames as f64;
        log::info!("nnet epoch {epoch}: lr {lr:.6} cross-entropy {ce:.4}");
        log.epoch_ce.push(ce);
        log.learning_rates.push(lr);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::super::TddnnConfig;
    use super::*;
    use rand::Rng;

    #[test]
    fn schedule_endpoints() {
        let s = SgdSchedule::default();
        assert!((s.lr(0) - 0.0015).abs() < 1e-18);
        assert!((s.lr(5) - 0.00015).abs() < 1e-15);
        assert!(s.lr(2) < s.lr(1));
    }

    #[test]
    fn standardized_layers_have_unit_preactivations() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let sample: Vec<FeatureMatrix> = (0..3)
            .map(|_| FeatureMatrix::new(30, 3, (0..90).map(|_| rng.random_range(-2.0..2.0)).collect(), 0.01).unwrap())
            .collect();
        let refs: Vec<&FeatureMatrix> = sample.iter().collect();
        let mut model = TddnnModel::build(toy_cfg(), 9).unwrap();
        model.standardize_layers(&refs).unwrap();
        let nl = model.config().num_layers();
        for l in 0..=nl {
            let width = model.layers[l].b.len();
            let (mut n, mut sum, mut sq) = (0.0, vec![0.0; width], vec![0.0; width]);
            for f in &sample {
                let (caches, logits) = model.forward_logits(f, 0, f.rows());
                let pre = if l < nl { &caches[l].pre } else { &logits };
                for i in 0..pre.nrows() {
                    for j in 0..width {
                        sum[j] += pre[(i, j)];
                        sq[j] += pre[(i, j)] * pre[(i, j)];
                    }
                }
                n += pre.nrows() as f64;
            }
            for j in 0..width {
                let mean = sum[j] / n;
                let var = sq[j] / n - mean * mean;
                assert!(mean.abs() < 1e-9, "layer {l} unit {j} mean {mean}");
                assert!((var - 1.0).abs() < 1e-9, "layer {l} unit {j} variance {var}");
            }
        }
        assert!(model.standardize_layers(&[]).is_err());
    }

    #[test]
    fn frame_labels_follow_frame_centers() {
        let blocks: Vec<u32> = (0..10).collect();
        // 25 ms frames at 10 ms shift: centers at 12.5, 22.5, ... ms.
        let y = labels_for_frames(&blocks, 8, 0.025, 0.01).unwrap();
        assert_eq!(y, vec![1, 2, 3, 4, 5, 6, 7, 8]);
        let y = labels_for_frames(&blocks, 12, 0.02, 0.01).unwrap();
        assert_eq!(&y[..3], &[1, 2, 3]);
        assert_eq!(y[11], 9);
    }

    fn toy_cfg() -> TddnnConfig {
        TddnnConfig {
            input_dim: 3,
            splice_offsets: vec![vec![-1, 0, 1], vec![-1, 2]],
            hidden_dim: 6,
            pnorm_group_size: 2,
            pnorm_p: 2.0,
            num_classes: 3,
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let rows = 12;
        let feats = FeatureMatrix::new(rows, 3, (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect(), 0.01).unwrap();
        let labels: Vec<u32> = (0..rows).map(|_| rng.random_range(0..3)).collect();
        let mut model = TddnnModel::build(toy_cfg(), 5).unwrap();
        for l in &mut model.layers {
            l.b.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        }
        let (_, grad) = model.loss_and_gradient(&feats, &labels, 2, 10).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for idx in 0..model.num_params() {
            let orig = model.param(idx);
            model.set_param(idx, orig + h);
            let up = model.loss_and_gradient(&feats, &labels, 2, 10).unwrap().0;
            model.set_param(idx, orig - h);
            let down = model.loss_and_gradient(&feats, &labels, 2, 10).unwrap().0;
            model.set_param(idx, orig);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.get(&model, idx);
            let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn learns_two_separable_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut data = Vec::new();
        for _ in 0..20 {
            let rows = 40;
            let mut v = Vec::new();
            let mut y = Vec::new();
            for t in 0..rows {
                let class = ((t / 10) % 2) as u32;
                let c = if class == 0 { -1.0 } else { 1.0 };
                v.extend((0..3).map(|_| c + rng.random_range(-0.8..0.8)));
                y.push(class);
            }
            data.push((FeatureMatrix::new(rows, 3, v, 0.01).unwrap(), y));
        }
        let cfg = TddnnConfig {
            splice_offsets: vec![vec![0], vec![0]],
            num_classes: 2,
            ..toy_cfg()
        };
        let mut model = TddnnModel::build(cfg, 2).unwrap();
        model.fit_input_normalization(data.iter().map(|(f, _)| f)).unwrap();
        let sched = SgdSchedule {
            initial_lr: 0.01,
            final_lr: 0.001,
            num_epochs: 5,
            minibatch_size: 64,
            seed: 4,
        };
        let log = train_sgd(&mut model, &data, &sched).unwrap();
        assert!(log.final_ce() < log.initial_ce);
        let mut correct = 0;
        let mut total = 0;
        for (f, y) in &data {
            let p = model.forward_dense(f).unwrap();
            for t in 0..f.rows() {
                let pred = if p[(t, 1)] > p[(t, 0)] { 1 } else { 0 };
                correct += usize::from(pred == y[t]);
                total += 1;
            }
        }
        assert!(correct as f64 / total as f64 > 0.95);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<_> = (0..4)
            .map(|_| {
                let f = FeatureMatrix::new(70, 3, (0..210).map(|_| rng.random_range(-1.0..1.0)).collect(), 0.01).unwrap();
                let y = (0..70).map(|_| rng.random_range(0..3)).collect();
                (f, y)
            })
            .collect();
        let sched = SgdSchedule {
            num_epochs: 2,
            minibatch_size: 128,
            ..SgdSchedule::default()
        };
        let mut a = TddnnModel::build(toy_cfg(), 1).unwrap();
        let mut b = a.clone();
        train_sgd(&mut a, &data, &sched).unwrap();
        train_sgd(&mut b, &data, &sched).unwrap();
        assert_eq!(a, b);
    }
}
