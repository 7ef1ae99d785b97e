//! Plain row-major sample matrices that can cross thread boundaries.

use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "matrix {rows}x{cols} needs {} values",
            rows * cols
        );
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Matrix::new(rows.len(), cols, rows.iter().flatten().copied().collect())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.data[i * self.cols + j])
            .collect()
    }

    pub fn column_means(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|j| self.column(j).iter().sum::<f64>() / self.rows as f64)
            .collect()
    }

    pub fn column_stds(&self) -> Vec<f64> {
        let means = self.column_means();
        (0..self.cols)
            .map(|j| {
                let var = self
                    .column(j)
                    .iter()
                    .map(|v| (v - means[j]).powi(2))
                    .sum::<f64>()
                    / self.rows as f64;
                var.sqrt()
            })
            .collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix::new(idx.len(), self.cols, data)
    }

    /// Stack rows of `self` then `other`.
    pub fn vstack(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols);
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Matrix::new(self.rows + other.rows, self.cols, data)
    }

    /// Concatenate columns of `self` then `other`.
    pub fn hstack(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows);
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Matrix::new(self.rows, self.cols + other.cols, data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.rows, self.cols, self.data.clone()).expect("non-empty matrix")
    }

    pub fn from_tensor(t: &Tensor) -> Matrix {
        Matrix::new(t.rows(), t.cols(), t.to_vec())
    }

    /// CSV with header `x0,x1,...`; floats use the shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = (0..self.cols)
            .map(|j| format!("x{j}"))
            .collect::<Vec<_>>()
            .join(",");
        out.push('\n');
        for row in self.iter_rows() {
            let line = row
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",");
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Matrix, String> {
        let mut lines = text.lines();
        let header = lines.next().ok_or("empty csv")?;
        let cols = header.split(',').count();
        let mut data = Vec::new();
        let mut rows = 0;
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols {
                return Err(format!(
                    "line {}: expected {cols} fields, got {}",
                    n + 2,
                    fields.len()
                ));
            }
            for f in fields {
                data.push(
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| format!("line {}: {e}", n + 2))?,
                );
            }
            rows += 1;
        }
        Ok(Matrix::new(rows, cols, data))
    }
}

impl TryFrom<&Matrix> for Tensor {
    type Error = autodiff::AutodiffError;

    fn try_from(m: &Matrix) -> autodiff::Result<Tensor> {
        Tensor::matrix(m.rows, m.cols, m.data.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_lossless() {
        let m = Matrix::new(2, 2, vec![0.1, -1e-300, std::f64::consts::PI, 4.0]);
        let text = m.to_csv();
        assert!(text.starts_with("x0,x1\n"));
        assert_eq!(Matrix::from_csv(&text).unwrap(), m);
    }

    #[test]
    fn stacking() {
        let a = Matrix::new(1, 2, vec![1.0, 2.0]);
        let b = Matrix::new(1, 1, vec![3.0]);
        assert_eq!(a.hstack(&b).data, vec![1.0, 2.0, 3.0]);
        assert_eq!(a.vstack(&a).rows, 2);
    }
}
