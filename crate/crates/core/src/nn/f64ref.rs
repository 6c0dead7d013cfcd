//! Plain-f64 matrix routines backing the slow reference re-evaluations used
//! by the finite-difference checks. These never touch the tape, so a loss
//! recomputed through them shares no code with the backward pass and is
//! accurate enough to difference with small steps.

use super::tensor::Tensor;

/// Converts a whole parameter list for the f64 re-evaluators.
pub fn mats(params: &[Tensor]) -> Vec<Mat> {
    params.iter().map(Mat::from_tensor).collect()
}

#[derive(Debug, Clone)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Mat { rows: t.rows, cols: t.cols, data: t.data.iter().map(|&x| x as f64).collect() }
    }

    pub fn from_f32_row(row: &[f32]) -> Self {
        Mat { rows: 1, cols: row.len(), data: row.iter().map(|&x| x as f64).collect() }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows);
        let mut out = Mat::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..b.cols {
                    out.data[i * b.cols + j] += a * b.data[k * b.cols + j];
                }
            }
        }
        out
    }

    /// `self * b^T`.
    pub fn matmul_nt(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.cols);
        let mut out = Mat::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            for j in 0..b.rows {
                let mut s = 0.0;
                for k in 0..self.cols {
                    s += self.data[i * self.cols + k] * b.data[j * b.cols + k];
                }
                out.data[i * b.rows + j] = s;
            }
        }
        out
    }

    pub fn add(&mut self, other: &Mat) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += y;
        }
    }

    pub fn add_row(&mut self, row: &Mat) {
        assert_eq!(row.rows, 1);
        assert_eq!(self.cols, row.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                self.data[r * self.cols + c] += row.data[c];
            }
        }
    }

    pub fn mul_row(&mut self, row: &Mat) {
        assert_eq!(row.rows, 1);
        assert_eq!(self.cols, row.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                self.data[r * self.cols + c] *= row.data[c];
            }
        }
    }

    pub fn relu(&mut self) {
        for x in &mut self.data {
            *x = x.max(0.0);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn normalize_rows(&mut self, eps: f64) {
        for r in 0..self.rows {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / row.len() as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
    }

    pub fn l2norm_rows(&mut self, eps: f64) {
        for r in 0..self.rows {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            let n = (row.iter().map(|x| x * x).sum::<f64>() + eps).sqrt();
            for x in row.iter_mut() {
                *x /= n;
            }
        }
    }

    pub fn softmax_rows(&mut self) {
        for r in 0..self.rows {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
    }

    pub fn log_softmax_rows(&mut self) {
        for r in 0..self.rows {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
    }

    pub fn concat_cols(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows);
        let cols = self.cols + other.cols;
        let mut out = Mat::zeros(self.rows, cols);
        for r in 0..self.rows {
            out.data[r * cols..r * cols + self.cols].copy_from_slice(self.row(r));
            out.data[r * cols + self.cols..(r + 1) * cols].copy_from_slice(other.row(r));
        }
        out
    }

    pub fn concat_rows(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.cols);
        let mut out = Mat::zeros(self.rows + other.rows, self.cols);
        out.data[..self.data.len()].copy_from_slice(&self.data);
        out.data[self.data.len()..].copy_from_slice(&other.data);
        out
    }
}
