//! Divergence estimators and mode-coverage diagnostics.
//!
//! All logs are natural, so JS divergence is bounded by ln 2.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("cannot build a histogram from an empty sample set")]
    EmptySamples,
    #[error("histogram needs bins >= 2 and lo < hi, got bins={bins}, lo={lo}, hi={hi}")]
    BadLayout { bins: usize, lo: f64, hi: f64 },
    #[error("histogram layouts differ")]
    LayoutMismatch,
    #[error("sample lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const KL_EPS: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub probs: Vec<f64>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.probs.len()
    }

    pub fn edges(&self) -> Vec<f64> {
        let w = (self.hi - self.lo) / self.bins() as f64;
        (0..=self.bins()).map(|i| self.lo + w * i as f64).collect()
    }

    fn same_layout(&self, other: &Histogram) -> Result<()> {
        if self.lo != other.lo || self.hi != other.hi || self.bins() != other.bins() {
            return Err(MetricsError::LayoutMismatch);
        }
        Ok(())
    }
}

/// Uniform-bin histogram; out-of-range samples land in the edge bins.
pub fn histogram(samples: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Histogram> {
    if bins < 2 || !(lo < hi) {
        return Err(MetricsError::BadLayout { bins, lo, hi });
    }
    if samples.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let mut counts = vec![0usize; bins];
    let scale = bins as f64 / (hi - lo);
    for &x in samples {
        let pos = ((x - lo) * scale).floor();
        let idx = if pos.is_nan() || pos < 0.0 {
            0
        } else {
            (pos as usize).min(bins - 1)
        };
        counts[idx] += 1;
    }
    let n = samples.len() as f64;
    Ok(Histogram {
        lo,
        hi,
        probs: counts.into_iter().map(|c| c as f64 / n).collect(),
    })
}

/// `sum P log((P + eps) / (Q + eps))`. With `eps = 0` the result may be infinite.
pub fn kl_with_eps(p: &Histogram, q: &Histogram, eps: f64) -> Result<f64> {
    p.same_layout(q)?;
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * ((a + eps) / (b + eps)).ln())
        .sum())
}

pub fn kl(p: &Histogram, q: &Histogram) -> Result<f64> {
    kl_with_eps(p, q, KL_EPS)
}

pub fn js(p: &Histogram, q: &Histogram) -> Result<f64> {
    p.same_layout(q)?;
    let mut total = 0.0;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            total += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            total += 0.5 * b * (b / m).ln();
        }
    }
    Ok(total.max(0.0))
}

/// Exact 1-D Wasserstein-1 between equal-size empirical samples via sorted matching.
pub fn w1_exact(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeStats {
    pub modes_covered: usize,
    pub high_quality_fraction: f64,
}

pub const MODE_RADIUS_MULT: f64 = 3.0;
pub const MODE_MIN_SHARE: f64 = 0.01;

/// Nearest-center assignment; a mode is covered when at least `min_share`
/// of all samples land within `radius_mult * std` of it.
pub fn mode_stats(
    samples: &Matrix,
    centers: &[Vec<f64>],
    std: f64,
    radius_mult: f64,
    min_share: f64,
) -> ModeStats {
    if samples.rows == 0 || centers.is_empty() {
        return ModeStats {
            modes_covered: 0,
            high_quality_fraction: 0.0,
        };
    }
    let radius2 = (radius_mult * std).powi(2);
    let mut close = vec![0usize; centers.len()];
    for row in samples.iter_rows() {
        let mut best = (0, f64::INFINITY);
        for (k, c) in centers.iter().enumerate() {
            let d2: f64 = row.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
            if d2 < best.1 {
                best = (k, d2);
            }
        }
        if best.1 <= radius2 {
            close[best.0] += 1;
        }
    }
    let n = samples.rows as f64;
    ModeStats {
        modes_covered: close.iter().filter(|&&c| c as f64 >= min_share * n).count(),
        high_quality_fraction: close.iter().sum::<usize>() as f64 / n,
    }
}

/// Share of real scores above `threshold` plus fake scores at or below it.
pub fn d_accuracy_at(p_real: &[f64], p_fake: &[f64], threshold: f64) -> f64 {
    let total = p_real.len() + p_fake.len();
    if total == 0 {
        return 0.0;
    }
    let hits = p_real.iter().filter(|&&p| p > threshold).count()
        + p_fake.iter().filter(|&&p| p <= threshold).count();
    hits as f64 / total as f64
}

pub fn d_accuracy(p_real: &[f64], p_fake: &[f64]) -> f64 {
    d_accuracy_at(p_real, p_fake, 0.5)
}

pub const METRICS_HEADER: &str = "step,d_loss,g_loss,kl,js,w1,modes_covered,hq_frac,d_acc";

/// One evaluation point. `extras` carries algorithm-specific diagnostics
/// (critic estimate, held-out L1, ...) that do not fit the fixed columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub kl: f64,
    pub js: f64,
    pub w1: f64,
    pub modes_covered: usize,
    pub high_quality_fraction: f64,
    pub d_accuracy: f64,
    #[serde(default)]
    pub extras: BTreeMap<String, f64>,
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.d_loss,
            self.g_loss,
            self.kl,
            self.js,
            self.w1,
            self.modes_covered,
            self.high_quality_fraction,
            self.d_accuracy
        )
    }
}
