//! Row-major frame matrix shared by every stage of the pipeline.

use crate::error::{LidError, Result};

/// Per-utterance `T x D` matrix; row `t` is the feature vector of frame `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    /// Frame shift in seconds, used by time-based operations such as CMN.
    pub frame_shift_s: f64,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, frame_shift_s: f64) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LidError::DimensionMismatch {
                context: "feature matrix payload",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            data,
            frame_shift_s,
        })
    }

    pub fn zeros(rows: usize, cols: usize, frame_shift_s: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            frame_shift_s,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>], frame_shift_s: f64) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(LidError::DimensionMismatch {
                    context: "feature matrix row",
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data, frame_shift_s)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn get(&self, t: usize, d: usize) -> f64 {
        self.data[t * self.cols + d]
    }

    pub fn set(&mut self, t: usize, d: usize, v: f64) {
        self.data[t * self.cols + d] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Keeps rows whose flag is set.
    pub fn select_rows(&self, keep: &[bool]) -> Result<Self> {
        if keep.len() != self.rows {
            return Err(LidError::DimensionMismatch {
                context: "row selection mask",
                expected: self.rows,
                actual: keep.len(),
            });
        }
        let mut data = Vec::with_capacity(self.data.len());
        let mut n = 0;
        for (row, &k) in self.iter_rows().zip(keep) {
            if k {
                data.extend_from_slice(row);
                n += 1;
            }
        }
        Self::new(n, self.cols, data, self.frame_shift_s)
    }

    /// First `n` rows.
    pub fn truncate_rows(&self, n: usize) -> Self {
        let n = n.min(self.rows);
        Self {
            rows: n,
            cols: self.cols,
            data: self.data[..n * self.cols].to_vec(),
            frame_shift_s: self.frame_shift_s,
        }
    }

    /// Column-wise concatenation `[self | other]`.
    pub fn hstack(&self, other: &FeatureMatrix) -> Result<Self> {
        if other.rows != self.rows {
            return Err(LidError::DimensionMismatch {
                context: "hstack rows",
                expected: self.rows,
                actual: other.rows,
            });
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for t in 0..self.rows {
            data.extend_from_slice(self.row(t));
            data.extend_from_slice(other.row(t));
        }
        Self::new(self.rows, cols, data, self.frame_shift_s)
    }

    pub fn first_cols(&self, n: usize) -> Result<Self> {
        if n > self.cols {
            return Err(LidError::DimensionMismatch {
                context: "column selection",
                expected: n,
                actual: self.cols,
            });
        }
        let mut data = Vec::with_capacity(self.rows * n);
        for row in self.iter_rows() {
            data.extend_from_slice(&row[..n]);
        }
        Self::new(self.rows, n, data, self.frame_shift_s)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Per-column mean over all rows.
    pub fn column_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for row in self.iter_rows() {
            for (acc, v) in m.iter_mut().zip(row) {
                *acc += v;
            }
        }
        let n = self.rows.max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}
