//! Multinomial logistic regression over i-vectors.

use log::{debug, info};
use nalgebra::{DMatrix, DVector};

use crate::error::{LidError, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub l2_lambda: f64,
    pub max_iters: usize,
    /// Stop once the gradient norm falls below this.
    pub tolerance: f64,
    /// Accepted for reproducible configs; the optimizer starts from zero
    /// weights and has no random component.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            l2_lambda: 1e-3,
            max_iters: 500,
            tolerance: 1e-6,
            seed: 0,
        }
    }
}

impl TrainOptions {
    fn validate(&self) -> Result<()> {
        if !(self.l2_lambda >= 0.0) || self.max_iters == 0 || !(self.tolerance >= 0.0) {
            return Err(LidError::InvalidConfig(format!("invalid classifier options {self:?}")));
        }
        Ok(())
    }
}

/// `K x (R + 1)` weights with the bias in the last column.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRegModel {
    pub weights: DMatrix<f64>,
    pub languages: Vec<String>,
}

impl LogRegModel {
    pub fn new(weights: DMatrix<f64>, languages: Vec<String>) -> Result<Self> {
        if languages.len() < 2 || weights.nrows() != languages.len() || weights.ncols() < 2 {
            return Err(LidError::InvalidInput(format!(
                "classifier needs K >= 2 rows matching the label list, got {}x{} for {} labels",
                weights.nrows(),
                weights.ncols(),
                languages.len()
            )));
        }
        check_unique(&languages)?;
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(LidError::NonFinite {
                frame: 0,
                what: "classifier weights",
            });
        }
        Ok(Self { weights, languages })
    }

    pub fn num_classes(&self) -> usize {
        self.languages.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights.ncols() - 1
    }

    pub fn scores(&self, w: &[f64]) -> Result<Vec<f64>> {
        if w.len() != self.input_dim() {
            return Err(LidError::DimensionMismatch {
                context: "classifier input",
                expected: self.input_dim(),
                actual: w.len(),
            });
        }
        let r = self.input_dim();
        Ok((0..self.num_classes())
            .map(|k| {
                let row = self.weights.row(k);
                row[r] + (0..r).map(|j| row[j] * w[j]).sum::<f64>()
            })
            .collect())
    }
}

fn check_unique(languages: &[String]) -> Result<()> {
    for (i, a) in languages.iter().enumerate() {
        if languages[..i].contains(a) {
            return Err(LidError::InvalidInput(format!("duplicate language label {a:?}")));
        }
    }
    Ok(())
}

fn softmax(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

/// Softmax of the affine class scores.
pub fn predict_posteriors(model: &LogRegModel, w: &[f64]) -> Result<Vec<f64>> {
    let mut s = model.scores(w)?;
    softmax(&mut s);
    Ok(s)
}

/// Mean cross-entropy plus `λ/2 ||W||²` over the non-bias weights, and its
/// gradient with respect to the full weight matrix.
pub fn objective_and_gradient(weights: &DMatrix<f64>, x: &DMatrix<f64>, labels: &[usize], lambda: f64) -> (f64, DMatrix<f64>) {
    let (n, r) = x.shape();
    let k = weights.nrows();
    let mut grad = DMatrix::zeros(k, r + 1);
    let mut loss = 0.0;
    let mut scores = vec![0.0; k];
    for i in 0..n {
        let xi = x.row(i);
        for (c, s) in scores.iter_mut().enumerate() {
            *s = weights[(c, r)] + (0..r).map(|j| weights[(c, j)] * xi[j]).sum::<f64>();
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        loss += lse - scores[labels[i]];
        for c in 0..k {
            let resid = (scores[c] - lse).exp() - if c == labels[i] { 1.0 } else { 0.0 };
            for j in 0..r {
                grad[(c, j)] += resid * xi[j];
            }
            grad[(c, r)] += resid;
        }
    }
    let inv_n = 1.0 / n as f64;
    loss *= inv_n;
    grad *= inv_n;
    let mut reg = 0.0;
    for c in 0..k {
        for j in 0..r {
            reg += weights[(c, j)] * weights[(c, j)];
            grad[(c, j)] += lambda * weights[(c, j)];
        }
    }
    (loss + 0.5 * lambda * reg, grad)
}

/// Full-batch gradient descent with backtracking (Armijo) line search.
pub fn train_logreg(x: &DMatrix<f64>, labels: &[usize], languages: Vec<String>, opts: &TrainOptions) -> Result<LogRegModel> {
    opts.validate()?;
    let k = languages.len();
    let (n, r) = x.shape();
    if k < 2 {
        return Err(LidError::InvalidInput("classifier needs at least two languages".into()));
    }
    check_unique(&languages)?;
    if labels.len() != n {
        return Err(LidError::DimensionMismatch {
            context: "classifier labels",
            expected: n,
            actual: labels.len(),
        });
    }
    if n < k {
        return Err(LidError::InvalidInput(format!("{n} training vectors for {k} languages")));
    }
    let mut seen = vec![false; k];
    for &y in labels {
        if y >= k {
            return Err(LidError::InvalidInput(format!("label {y} outside {k} languages")));
        }
        seen[y] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(LidError::InvalidInput(format!("language {:?} has no training vectors", languages[missing])));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LidError::NonFinite {
            frame: 0,
            what: "classifier training input",
        });
    }

    let mut w = DMatrix::zeros(k, r + 1);
    let (mut f, mut g) = objective_and_gradient(&w, x, labels, opts.l2_lambda);
    let mut step = 1.0;
    let mut iters = 0;
    while iters < opts.max_iters {
        let gnorm2 = g.norm_squared();
        if gnorm2.sqrt() < opts.tolerance {
            break;
        }
        iters += 1;
        let mut accepted = false;
        while step > 1e-20 {
            let cand = &w - &g * step;
            let (fc, gc) = objective_and_gradient(&cand, x, labels, opts.l2_lambda);
            if fc <= f - 1e-4 * step * gnorm2 {
                w = cand;
                f = fc;
                g = gc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            debug!("logistic regression: line search stalled at iteration {iters}");
            break;
        }
        step *= 2.0;
    }
    info!(
        "logistic regression: {k} classes, {n} vectors, objective {f:.6}, gradient norm {:.2e} after {iters} iterations",
        g.norm()
    );
    LogRegModel::new(w, languages)
}

/// Retrains on the old classes plus one new language. Only the classifier
/// changes; the label order of `model` is kept and the new language appended.
pub fn add_language(
    model: &LogRegModel,
    new_language: &str,
    new_ivectors: &DMatrix<f64>,
    train_ivectors: &DMatrix<f64>,
    train_labels: &[usize],
    opts: &TrainOptions,
) -> Result<LogRegModel> {
    if model.languages.iter().any(|l| l == new_language) {
        return Err(LidError::InvalidInput(format!("language {new_language:?} already in the model")));
    }
    if new_ivectors.nrows() == 0 {
        return Err(LidError::InvalidInput("no i-vectors for the new language".into()));
    }
    if new_ivectors.ncols() != train_ivectors.ncols() || train_ivectors.ncols() != model.input_dim() {
        return Err(LidError::DimensionMismatch {
            context: "new-language i-vectors",
            expected: model.input_dim(),
            actual: new_ivectors.ncols(),
        });
    }
    let k = model.num_classes();
    let n_old = train_ivectors.nrows();
    let x = DMatrix::from_fn(n_old + new_ivectors.nrows(), model.input_dim(), |i, j| {
        if i < n_old {
            train_ivectors[(i, j)]
        } else {
            new_ivectors[(i - n_old, j)]
        }
    });
    let mut labels = train_labels.to_vec();
    labels.extend(std::iter::repeat_n(k, new_ivectors.nrows()));
    let mut languages = model.languages.clone();
    languages.push(new_language.to_string());
    train_logreg(&x, &labels, languages, opts)
}

/// Helper for building a training matrix from i-vector rows.
pub fn stack_rows(rows: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.first().map(|v| v.len()).unwrap_or(0);
    if rows.iter().any(|v| v.len() != r) {
        return Err(LidError::InvalidInput("i-vectors have different lengths".into()));
    }
    Ok(DMatrix::from_fn(rows.len(), r, |i, j| rows[i][j]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("l{i}")).collect()
    }

    fn blobs(k: usize, per: usize, r: usize, sep: f64, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = k * per;
        let labels: Vec<usize> = (0..n).map(|i| i / per).collect();
        let x = DMatrix::from_fn(n, r, |i, j| {
            let center = if j == labels[i] % r { sep } else { 0.0 };
            let sign = if labels[i] >= r { -1.0 } else { 1.0 };
            sign * center + rng.random_range(-1.0..1.0)
        });
        (x, labels)
    }

    #[test]
    fn separable_two_class_training_accuracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 40;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = DMatrix::from_fn(n, 3, |i, j| {
            let c = if j == 0 { if labels[i] == 0 { 10.0 } else { -10.0 } } else { 0.0 };
            c + rng.random_range(-1.0..1.0)
        });
        let m = train_logreg(&x, &labels, names(2), &TrainOptions::default()).unwrap();
        for i in 0..n {
            let p = predict_posteriors(&m, x.row(i).transpose().as_slice()).unwrap();
            assert_eq!(if p[0] > p[1] { 0 } else { 1 }, labels[i]);
        }
    }

    #[test]
    fn zero_weights_give_uniform_posteriors() {
        let m = LogRegModel::new(DMatrix::zeros(4, 3), names(4)).unwrap();
        let p = predict_posteriors(&m, &[1.0, -2.0]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn heavy_regularization_shrinks_weights() {
        let (x, y) = blobs(3, 10, 3, 4.0, 2);
        let opts = TrainOptions {
            l2_lambda: 1e6,
            ..TrainOptions::default()
        };
        let m = train_logreg(&x, &y, names(3), &opts).unwrap();
        for c in 0..3 {
            for j in 0..3 {
                assert!(m.weights[(c, j)].abs() < 1e-4);
            }
        }
        // Balanced classes: the bias stays near zero too, so posteriors are uniform.
        let p = predict_posteriors(&m, &[5.0, 5.0, 5.0]).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-2));
    }

    #[test]
    fn hand_two_class_softmax() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        let m = LogRegModel::new(w, names(2)).unwrap();
        let p = predict_posteriors(&m, &[1.0]).unwrap();
        assert!((p[0] - 0.8808).abs() < 1e-4);
        assert!((p[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-2.0..2.0));
        let m = LogRegModel::new(w.clone(), names(3)).unwrap();
        let shift: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let shifted = DMatrix::from_fn(3, 4, |c, j| w[(c, j)] + shift[j]);
        let m2 = LogRegModel::new(shifted, names(3)).unwrap();
        let x = [0.3, -1.2, 2.0];
        let a = predict_posteriors(&m, &x).unwrap();
        let b = predict_posteriors(&m2, &x).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (x, y) = blobs(3, 8, 4, 2.0, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = DMatrix::from_fn(3, 5, |_, _| rng.random_range(-0.5..0.5));
        let lambda = 0.01;
        let (_, g) = objective_and_gradient(&w, &x, &y, lambda);
        let h = 1e-5;
        for idx in 0..w.len() {
            let mut up = w.clone();
            up.as_mut_slice()[idx] += h;
            let mut down = w.clone();
            down.as_mut_slice()[idx] -= h;
            let num = (objective_and_gradient(&up, &x, &y, lambda).0 - objective_and_gradient(&down, &x, &y, lambda).0) / (2.0 * h);
            let ana = g.as_slice()[idx];
            let rel = (num - ana).abs() / (num.abs() + ana.abs()).max(1e-8);
            assert!(rel < 1e-6, "param {idx}: {num} vs {ana}");
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let (x, y) = blobs(2, 1, 2, 1.0, 0);
        assert!(train_logreg(&x, &y, names(3), &TrainOptions::default()).is_err());
        let mut dup = names(2);
        dup[1] = dup[0].clone();
        assert!(train_logreg(&x, &y, dup, &TrainOptions::default()).is_err());
        let (x, _) = blobs(2, 3, 2, 1.0, 0);
        assert!(train_logreg(&x, &[0; 6], names(2), &TrainOptions::default()).is_err());
        let m = LogRegModel::new(DMatrix::zeros(2, 3), names(2)).unwrap();
        assert!(predict_posteriors(&m, &[1.0]).is_err());
    }

    #[test]
    fn add_language_appends_class() {
        let (x, y) = blobs(3, 15, 3, 6.0, 3);
        let old_x = x.rows(0, 30).into_owned();
        let old_y = &y[..30];
        let opts = TrainOptions::default();
        let base = train_logreg(&old_x, old_y, names(2), &opts).unwrap();
        let new_x = x.rows(30, 15).into_owned();
        let grown = add_language(&base, "l2", &new_x, &old_x, old_y, &opts).unwrap();
        assert_eq!(grown.num_classes(), 3);
        assert_eq!(&grown.languages[..2], &base.languages[..]);
        assert!(add_language(&base, "l1", &new_x, &old_x, old_y, &opts).is_err());
    }
}
