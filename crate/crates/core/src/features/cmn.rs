use crate::matrix::FeatureMatrix;

/// Subtracts a sliding per-dimension mean.
///
/// The window spans `window_s / frame_shift_s` frames. A centered window is
/// slid inward at the utterance edges so it keeps its full width; a trailing
/// window covers the current and preceding frames. Utterances no longer than
/// the window get plain global mean subtraction.
pub fn sliding_cmn(feats: &FeatureMatrix, window_s: f64, center: bool) -> FeatureMatrix {
    let (rows, cols) = (feats.rows(), feats.cols());
    let width = ((window_s / feats.frame_shift_s).round() as usize).max(1);
    let mut out = feats.clone();
    if rows == 0 {
        return out;
    }
    if rows <= width {
        let mean = feats.column_means();
        for t in 0..rows {
            for (v, m) in out.row_mut(t).iter_mut().zip(&mean) {
                *v -= m;
            }
        }
        return out;
    }

    // prefix[t] holds the column sums of rows [0, t).
    let mut prefix = vec![0.0; (rows + 1) * cols];
    for t in 0..rows {
        for d in 0..cols {
            prefix[(t + 1) * cols + d] = prefix[t * cols + d] + feats.get(t, d);
        }
    }
    for t in 0..rows {
        let (start, end) = if center {
            let start = t.saturating_sub(width / 2).min(rows - width);
            (start, start + width)
        } else {
            ((t + 1).saturating_sub(width), t + 1)
        };
        let n = (end - start) as f64;
        for d in 0..cols {
            let mean = (prefix[end * cols + d] - prefix[start * cols + d]) / n;
            out.set(t, d, feats.get(t, d) - mean);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-5.0..5.0)).collect();
        FeatureMatrix::new(rows, cols, data, 0.01).unwrap()
    }

    /// Independent O(T*W) evaluation of the centered window rule.
    fn naive_centered(feats: &FeatureMatrix, width: usize) -> FeatureMatrix {
        let rows = feats.rows();
        let mut out = feats.clone();
        for t in 0..rows {
            let mut start = t as isize - (width / 2) as isize;
            if start < 0 {
                start = 0;
            }
            let mut end = start as usize + width;
            if end > rows {
                end = rows;
                start = (rows - width) as isize;
            }
            for d in 0..feats.cols() {
                let s: f64 = (start as usize..end).map(|u| feats.get(u, d)).sum();
                out.set(t, d, feats.get(t, d) - s / width as f64);
            }
        }
        out
    }

    #[test]
    fn short_utterance_is_globally_centered() {
        let f = random(120, 6, 1);
        let out = sliding_cmn(&f, 3.0, true);
        for m in out.column_means() {
            assert!(m.abs() < 1e-10);
        }
    }

    #[test]
    fn one_frame_window_zeroes_everything() {
        let f = random(50, 4, 2);
        let out = sliding_cmn(&f, 0.01, true);
        assert!(out.as_slice().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn matches_naive_three_second_window() {
        let f = random(600, 7, 3);
        let fast = sliding_cmn(&f, 3.0, true);
        let slow = naive_centered(&f, 300);
        for (a, b) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn trailing_window_uses_past_frames() {
        let f = random(40, 2, 4);
        let out = sliding_cmn(&f, 0.1, false);
        for t in 0..40 {
            let start = (t + 1usize).saturating_sub(10);
            for d in 0..2 {
                let m: f64 = (start..=t).map(|u| f.get(u, d)).sum::<f64>() / (t + 1 - start) as f64;
                assert!((out.get(t, d) - (f.get(t, d) - m)).abs() < 1e-10);
            }
        }
    }
}
