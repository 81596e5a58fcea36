//! Multisplice time-delay network with p-norm hidden layers and a softmax
//! output, used as a frame-level posterior source over phone-state classes.
//!
//! Each hidden layer splices its input at a set of frame offsets, applies an
//! affine map, a p-norm group reduction and an RMS normalization. The whole
//! utterance is evaluated at once: the input is repeat-padded by the total
//! left/right context and every layer shrinks the sequence by its own
//! context, so output row `t` sees exactly input frames `t - left ..= t + right`.

mod train;

pub use train::{labels_for_frames, train_sgd, FrameLabels, SgdSchedule, TrainLog};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LidError, Result};
use crate::gmm::PosteriorMatrix;
use crate::matrix::FeatureMatrix;

const NORM_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TddnnConfig {
    pub input_dim: usize,
    /// Frame offsets spliced at the input of each hidden layer.
    pub splice_offsets: Vec<Vec<i32>>,
    /// Affine output width of each hidden layer (p-norm input dimension).
    pub hidden_dim: usize,
    pub pnorm_group_size: usize,
    pub pnorm_p: f64,
    pub num_classes: usize,
}

impl Default for TddnnConfig {
    fn default() -> Self {
        Self {
            input_dim: 40,
            splice_offsets: vec![
                vec![-2, -1, 0, 1, 2],
                vec![-2, 1],
                vec![0],
                vec![-3, 3],
                vec![-7, 2],
                vec![0],
            ],
            hidden_dim: 256,
            pnorm_group_size: 8,
            pnorm_p: 2.0,
            num_classes: 64,
        }
    }
}

impl TddnnConfig {
    pub fn num_layers(&self) -> usize {
        self.splice_offsets.len()
    }

    pub fn pnorm_output_dim(&self) -> usize {
        self.hidden_dim / self.pnorm_group_size.max(1)
    }

    /// Total `(left, right)` context of the network in frames.
    pub fn context(&self) -> (usize, usize) {
        self.splice_offsets.iter().fold((0, 0), |(l, r), offs| {
            let (lo, hi) = layer_context(offs);
            (l + lo, r + hi)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LidError::InvalidConfig(m));
        if self.input_dim == 0 || self.hidden_dim == 0 || self.pnorm_group_size == 0 {
            return bad("network dimensions must be positive".into());
        }
        if !self.hidden_dim.is_multiple_of(self.pnorm_group_size) {
            return bad(format!(
                "hidden_dim {} not divisible by pnorm_group_size {}",
                self.hidden_dim, self.pnorm_group_size
            ));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if !(self.pnorm_p >= 1.0) {
            return bad(format!("pnorm_p must be >= 1, got {}", self.pnorm_p));
        }
        if self.splice_offsets.is_empty() {
            return bad("network needs at least one hidden layer".into());
        }
        for (l, offs) in self.splice_offsets.iter().enumerate() {
            if offs.is_empty() || offs.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("layer {l} splice offsets must be non-empty and strictly increasing"));
            }
        }
        Ok(())
    }
}

fn layer_context(offs: &[i32]) -> (usize, usize) {
    let lo = offs.iter().copied().min().unwrap_or(0).min(0).unsigned_abs() as usize;
    let hi = offs.iter().copied().max().unwrap_or(0).max(0) as usize;
    (lo, hi)
}

/// Affine map stored as `in x out` so a batch is `X * W + 1 b'`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Affine {
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * &self.w;
        for (j, mut col) in z.column_iter_mut().enumerate() {
            col.add_scalar_mut(self.b[j]);
        }
        z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TddnnModel {
    config: TddnnConfig,
    /// Input standardization `(x - shift) * scale`, fixed during training.
    pub input_shift: DVector<f64>,
    pub input_scale: DVector<f64>,
    /// Hidden layers followed by the output layer.
    pub layers: Vec<Affine>,
}

/// `y_g = (Σ_{i∈g} |x_i|^p)^{1/p}` over consecutive groups.
pub fn pnorm(x: &[f64], group: usize, p: f64) -> Vec<f64> {
    x.chunks(group)
        .map(|g| {
            if p == 2.0 {
                g.iter().map(|v| v * v).sum::<f64>().sqrt()
            } else {
                g.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p)
            }
        })
        .collect()
}

/// Activations kept for backpropagation through one hidden layer.
struct LayerCache {
    spliced: DMatrix<f64>,
    pre: DMatrix<f64>,
    pnormed: DMatrix<f64>,
    rms: Vec<f64>,
    out: DMatrix<f64>,
}

/// Gradients with the same layout as `TddnnModel::layers`.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub layers: Vec<Affine>,
}

impl TddnnModel {
    /// Seeded scaled-uniform initialization: weights uniform in
    /// `±sqrt(3 / fan_in)`, zero biases.
    pub fn build(cfg: TddnnConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(cfg.num_layers() + 1);
        let mut in_dim = cfg.input_dim;
        let mut dims: Vec<(usize, usize)> = cfg
            .splice_offsets
            .iter()
            .map(|offs| {
                let d = (offs.len() * in_dim, cfg.hidden_dim);
                in_dim = cfg.pnorm_output_dim();
                d
            })
            .collect();
        dims.push((cfg.pnorm_output_dim(), cfg.num_classes));
        for (fan_in, fan_out) in dims {
            let s = (3.0 / fan_in as f64).sqrt();
            let w = DMatrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-s..s));
            layers.push(Affine {
                w,
                b: DVector::zeros(fan_out),
            });
        }
        Ok(Self {
            input_shift: DVector::zeros(cfg.input_dim),
            input_scale: DVector::from_element(cfg.input_dim, 1.0),
            config: cfg,
            layers,
        })
    }

    pub fn from_parts(
        config: TddnnConfig,
        input_shift: DVector<f64>,
        input_scale: DVector<f64>,
        layers: Vec<Affine>,
    ) -> Result<Self> {
        config.validate()?;
        let probe = Self::build(config.clone(), 0)?;
        if layers.len() != probe.layers.len()
            || layers
                .iter()
                .zip(&probe.layers)
                .any(|(a, b)| a.w.shape() != b.w.shape() || a.b.len() != b.b.len())
            || input_shift.len() != config.input_dim
            || input_scale.len() != config.input_dim
        {
            return Err(LidError::InvalidInput("network parameter shapes do not match config".into()));
        }
        Ok(Self {
            config,
            input_shift,
            input_scale,
            layers,
        })
    }

    pub fn config(&self) -> &TddnnConfig {
        &self.config
    }

    /// Input matrix with `left`/`right` context rows, edges repeat-padded.
    fn padded_input(&self, feats: &FeatureMatrix, start: usize, end: usize) -> DMatrix<f64> {
        let (left, right) = self.config.context();
        let n = end - start + left + right;
        let last = feats.rows() as isize - 1;
        let d = self.config.input_dim;
        let mut x = DMatrix::zeros(n, d);
        for i in 0..n {
            let t = (start as isize + i as isize - left as isize).clamp(0, last) as usize;
            let row = feats.row(t);
            for j in 0..d {
                x[(i, j)] = (row[j] - self.input_shift[j]) * self.input_scale[j];
            }
        }
        x
    }

    fn check_input(&self, feats: &FeatureMatrix) -> Result<()> {
        if feats.cols() != self.config.input_dim {
            return Err(LidError::DimensionMismatch {
                context: "network input",
                expected: self.config.input_dim,
                actual: feats.cols(),
            });
        }
        if feats.rows() == 0 {
            return Err(LidError::InvalidInput("network input has no frames".into()));
        }
        Ok(())
    }

    fn splice(h: &DMatrix<f64>, offs: &[i32]) -> DMatrix<f64> {
        let (lo, hi) = layer_context(offs);
        let n_out = h.nrows() - lo - hi;
        let d = h.ncols();
        let mut s = DMatrix::zeros(n_out, offs.len() * d);
        for (k, &o) in offs.iter().enumerate() {
            let first = (lo as i32 + o) as usize;
            s.view_mut((0, k * d), (n_out, d)).copy_from(&h.view((first, 0), (n_out, d)));
        }
        s
    }

    fn hidden_forward(&self, l: usize, h: &DMatrix<f64>) -> LayerCache {
        let cfg = &self.config;
        let spliced = Self::splice(h, &cfg.splice_offsets[l]);
        let pre = self.layers[l].apply(&spliced);
        let (n, g) = (pre.nrows(), cfg.pnorm_group_size);
        let out_dim = cfg.pnorm_output_dim();
        let mut pnormed = DMatrix::zeros(n, out_dim);
        for j in 0..out_dim {
            for i in 0..n {
                let v = if cfg.pnorm_p == 2.0 {
                    (0..g).map(|k| pre[(i, j * g + k)].powi(2)).sum::<f64>().sqrt()
                } else {
                    (0..g)
                        .map(|k| pre[(i, j * g + k)].abs().powf(cfg.pnorm_p))
                        .sum::<f64>()
                        .powf(1.0 / cfg.pnorm_p)
                };
                pnormed[(i, j)] = v;
            }
        }
        let rms: Vec<f64> = (0..n)
            .map(|i| {
                let ss: f64 = pnormed.row(i).iter().map(|v| v * v).sum();
                (ss / out_dim as f64 + NORM_EPS).sqrt()
            })
            .collect();
        let mut out = pnormed.clone();
        for i in 0..n {
            out.row_mut(i).scale_mut(1.0 / rms[i]);
        }
        LayerCache {
            spliced,
            pre,
            pnormed,
            rms,
            out,
        }
    }

    /// Output-layer logits for frames `start..end`, with caches.
    fn forward_logits(&self, feats: &FeatureMatrix, start: usize, end: usize) -> (Vec<LayerCache>, DMatrix<f64>) {
        let mut h = self.padded_input(feats, start, end);
        let mut caches = Vec::with_capacity(self.config.num_layers());
        for l in 0..self.config.num_layers() {
            let cache = self.hidden_forward(l, &h);
            h = cache.out.clone();
            caches.push(cache);
        }
        let logits = self.layers[self.config.num_layers()].apply(&h);
        (caches, logits)
    }

    fn softmax_rows(logits: &mut DMatrix<f64>) {
        for mut row in logits.row_iter_mut() {
            let max = row.max();
            row.apply(|v| *v = (*v - max).exp());
            let s = row.sum();
            row.scale_mut(1.0 / s);
        }
    }

    /// Dense per-frame softmax outputs.
    pub fn forward_dense(&self, feats: &FeatureMatrix) -> Result<DMatrix<f64>> {
        self.check_input(feats)?;
        let (_, mut probs) = self.forward_logits(feats, 0, feats.rows());
        Self::softmax_rows(&mut probs);
        Ok(probs)
    }

    /// One posterior row per input frame.
    pub fn forward(&self, feats: &FeatureMatrix) -> Result<PosteriorMatrix> {
        let probs = self.forward_dense(feats)?;
        let rows = (0..probs.nrows())
            .map(|i| {
                (0..probs.ncols())
                    .filter(|&c| probs[(i, c)] > 0.0)
                    .map(|c| (c as u32, probs[(i, c)]))
                    .collect()
            })
            .collect();
        Ok(PosteriorMatrix::new(self.config.num_classes, rows))
    }

    /// Summed cross-entropy of frames `start..end` against `labels` (indexed
    /// by absolute frame) and its gradient.
    pub fn loss_and_gradient(
        &self,
        feats: &FeatureMatrix,
        labels: &[u32],
        start: usize,
        end: usize,
    ) -> Result<(f64, Gradients)> {
        self.check_input(feats)?;
        if labels.len() != feats.rows() || start >= end || end > feats.rows() {
            return Err(LidError::InvalidInput("label range does not match features".into()));
        }
        let cfg = &self.config;
        let (caches, mut probs) = self.forward_logits(feats, start, end);
        Self::softmax_rows(&mut probs);

        let mut loss = 0.0;
        let mut delta = probs;
        for i in 0..delta.nrows() {
            let y = labels[start + i] as usize;
            if y >= cfg.num_classes {
                return Err(LidError::InvalidInput(format!("label {y} out of range")));
            }
            loss -= delta[(i, y)].max(f64::MIN_POSITIVE).ln();
            delta[(i, y)] -= 1.0;
        }

        let nl = cfg.num_layers();
        let mut grads: Vec<Affine> = Vec::with_capacity(nl + 1);
        let top_in = &caches[nl - 1].out;
        grads.push(Affine {
            w: top_in.tr_mul(&delta),
            b: column_sums(&delta),
        });
        let mut d_out = &delta * self.layers[nl].w.transpose();

        for l in (0..nl).rev() {
            let c = &caches[l];
            let (n, g) = (c.pre.nrows(), cfg.pnorm_group_size);
            let out_dim = cfg.pnorm_output_dim();
            // RMS normalization.
            let mut d_pn = DMatrix::zeros(n, out_dim);
            for i in 0..n {
                let dot: f64 = (0..out_dim).map(|j| c.out[(i, j)] * d_out[(i, j)]).sum();
                for j in 0..out_dim {
                    d_pn[(i, j)] = (d_out[(i, j)] - c.out[(i, j)] * dot / out_dim as f64) / c.rms[i];
                }
            }
            // p-norm.
            let mut d_pre = DMatrix::zeros(n, cfg.hidden_dim);
            for j in 0..out_dim {
                for i in 0..n {
                    let y = c.pnormed[(i, j)];
                    if y == 0.0 {
                        continue;
                    }
                    for k in 0..g {
                        let x = c.pre[(i, j * g + k)];
                        let dydx = if cfg.pnorm_p == 2.0 {
                            x / y
                        } else {
                            x.signum() * x.abs().powf(cfg.pnorm_p - 1.0) * y.powf(1.0 - cfg.pnorm_p)
                        };
                        d_pre[(i, j * g + k)] = d_pn[(i, j)] * dydx;
                    }
                }
            }
            grads.push(Affine {
                w: c.spliced.tr_mul(&d_pre),
                b: column_sums(&d_pre),
            });
            if l == 0 {
                break;
            }
            // Scatter the spliced-input gradient back onto the previous layer.
            let d_spliced = &d_pre * self.layers[l].w.transpose();
            let prev = &caches[l - 1].out;
            let d = prev.ncols();
            let (lo, _) = layer_context(&cfg.splice_offsets[l]);
            let mut d_prev = DMatrix::zeros(prev.nrows(), d);
            for (k, &o) in cfg.splice_offsets[l].iter().enumerate() {
                let first = (lo as i32 + o) as usize;
                let mut dst = d_prev.view_mut((first, 0), (n, d));
                dst += d_spliced.view((0, k * d), (n, d));
            }
            d_out = d_prev;
        }
        grads.reverse();
        Ok((loss, Gradients { layers: grads }))
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|a| a.w.len() + a.b.len()).sum()
    }

    fn locate(&self, mut idx: usize) -> (usize, bool, usize) {
        for (l, a) in self.layers.iter().enumerate() {
            if idx < a.w.len() {
                return (l, true, idx);
            }
            idx -= a.w.len();
            if idx < a.b.len() {
                return (l, false, idx);
            }
            idx -= a.b.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat parameter access, layer by layer, weights (column-major) then bias.
    pub fn param(&self, idx: usize) -> f64 {
        let (l, is_w, i) = self.locate(idx);
        if is_w {
            self.layers[l].w.as_slice()[i]
        } else {
            self.layers[l].b[i]
        }
    }

    pub fn set_param(&mut self, idx: usize, v: f64) {
        let (l, is_w, i) = self.locate(idx);
        if is_w {
            self.layers[l].w.as_mut_slice()[i] = v;
        } else {
            self.layers[l].b[i] = v;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|a| a.w.iter().all(|v| v.is_finite()) && a.b.iter().all(|v| v.is_finite()))
    }
}

impl Gradients {
    pub fn get(&self, model: &TddnnModel, idx: usize) -> f64 {
        let (l, is_w, i) = model.locate(idx);
        if is_w {
            self.layers[l].w.as_slice()[i]
        } else {
            self.layers[l].b[i]
        }
    }
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}
