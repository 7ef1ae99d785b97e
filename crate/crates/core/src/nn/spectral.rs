use super::{NnError, Result};
use crate::matrix::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralEstimate {
    /// `u^T W v`, the top singular value estimate.
    pub sigma: f64,
    /// `W / sigma`.
    pub w_hat: Matrix,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

fn normalize(x: &mut [f64]) -> Result<()> {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(NnError::ZeroMatrix);
    }
    x.iter_mut().for_each(|v| *v /= n);
    Ok(())
}

fn mat_t_vec(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        let ui = u[i];
        for (o, wij) in out.iter_mut().zip(&w[i * cols..(i + 1) * cols]) {
            *o += wij * ui;
        }
    }
    out
}

fn mat_vec(w: &[f64], rows: usize, cols: usize, v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|i| {
            w[i * cols..(i + 1) * cols]
                .iter()
                .zip(v)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

/// `iters` rounds of `v <- W^T u / |W^T u|`, `u <- W v / |W v|`, updating
/// `u` in place. Returns the final `v`.
pub fn power_iteration(
    w: &[f64],
    rows: usize,
    cols: usize,
    u: &mut [f64],
    iters: usize,
) -> Result<Vec<f64>> {
    let mut v = vec![0.0; cols];
    for _ in 0..iters {
        v = mat_t_vec(w, rows, cols, u);
        normalize(&mut v)?;
        let mut next = mat_vec(w, rows, cols, &v);
        normalize(&mut next)?;
        u.copy_from_slice(&next);
    }
    Ok(v)
}

/// `(sigma, v)` implied by the current `u` without refining it.
pub(crate) fn current_estimate(
    w: &[f64],
    rows: usize,
    cols: usize,
    u: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let mut v = mat_t_vec(w, rows, cols, u);
    normalize(&mut v)?;
    let wv = mat_vec(w, rows, cols, &v);
    Ok((wv.iter().zip(u).map(|(a, b)| a * b).sum(), v))
}

/// Power-iteration estimate of the top singular value and the normalized weight.
pub fn spectral_normalize(w: &Matrix, u: &[f64], iters: usize) -> Result<SpectralEstimate> {
    if iters == 0 {
        return Err(NnError::InvalidSpec(
            "power iteration needs at least one round".into(),
        ));
    }
    if u.len() != w.rows {
        return Err(NnError::DimMismatch {
            expected: w.rows,
            got: u.len(),
        });
    }
    if w.data.iter().all(|&v| v == 0.0) {
        return Err(NnError::ZeroMatrix);
    }
    let mut u = u.to_vec();
    normalize(&mut u)?;
    let v = power_iteration(&w.data, w.rows, w.cols, &mut u, iters)?;
    let wv = mat_vec(&w.data, w.rows, w.cols, &v);
    let sigma: f64 = wv.iter().zip(&u).map(|(a, b)| a * b).sum();
    let w_hat = Matrix::new(w.rows, w.cols, w.data.iter().map(|x| x / sigma).collect());
    Ok(SpectralEstimate { sigma, w_hat, u, v })
}
