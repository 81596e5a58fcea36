use crate::error::{LidError, Result};

/// Posterior entries below this are dropped by [`PosteriorMatrix::prune`].
pub const PRUNE_THRESHOLD: f64 = 1e-5;

/// Sparse posterior row: `(class, probability)` pairs in ascending class order.
pub type PostRow = Vec<(u32, f64)>;

/// One posterior row per frame over `num_classes` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    pub num_classes: usize,
    pub rows: Vec<PostRow>,
}

impl PosteriorMatrix {
    pub fn new(num_classes: usize, rows: Vec<PostRow>) -> Self {
        Self { num_classes, rows }
    }

    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        let num_classes = rows.first().map_or(0, Vec::len);
        let rows = rows
            .iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(_, &p)| p != 0.0)
                    .map(|(c, &p)| (c as u32, p))
                    .collect()
            })
            .collect();
        Self { num_classes, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dense_row(&self, t: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.num_classes];
        for &(c, p) in &self.rows[t] {
            out[c as usize] += p;
        }
        out
    }

    /// Checks that each row is a probability vector within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for (t, row) in self.rows.iter().enumerate() {
            let mut sum = 0.0;
            for &(c, p) in row {
                if c as usize >= self.num_classes || !(p >= 0.0) || !p.is_finite() {
                    return Err(LidError::NotNormalized { frame: t, sum: p });
                }
                sum += p;
            }
            if (sum - 1.0).abs() > tol {
                return Err(LidError::NotNormalized { frame: t, sum });
            }
        }
        Ok(())
    }

    /// Drops entries below `threshold` and renormalizes each row. A row whose
    /// entries all fall below the threshold keeps only its largest entry.
    pub fn prune(&mut self, threshold: f64) {
        for row in &mut self.rows {
            let best = row
                .iter()
                .copied()
                .fold(None, |acc: Option<(u32, f64)>, e| match acc {
                    Some(a) if a.1 >= e.1 => Some(a),
                    _ => Some(e),
                });
            row.retain(|&(_, p)| p >= threshold);
            if row.is_empty() {
                if let Some((c, _)) = best {
                    row.push((c, 1.0));
                }
                continue;
            }
            let sum: f64 = row.iter().map(|e| e.1).sum();
            row.iter_mut().for_each(|e| e.1 /= sum);
        }
    }

    pub fn select(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.rows.len() {
            return Err(LidError::DimensionMismatch {
                context: "posterior row selection",
                expected: self.rows.len(),
                actual: keep.len(),
            });
        }
        Ok(Self {
            num_classes: self.num_classes,
            rows: self
                .rows
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(r, _)| r.clone())
                .collect(),
        })
    }

    pub fn truncate(&mut self, n: usize) {
        self.rows.truncate(n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prune_renormalizes() {
        let mut p = PosteriorMatrix::from_dense(&[vec![0.5, 0.499_995, 0.000_005]]);
        p.prune(PRUNE_THRESHOLD);
        assert_eq!(p.rows[0].len(), 2);
        p.validate(1e-12).unwrap();
    }

    #[test]
    fn validate_names_bad_frame() {
        let p = PosteriorMatrix::from_dense(&[vec![0.5, 0.5], vec![0.5, 0.4]]);
        match p.validate(1e-6) {
            Err(LidError::NotNormalized { frame, .. }) => assert_eq!(frame, 1),
            other => panic!("{other:?}"),
        }
    }
}
