use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::metrics::{
    self, histogram, js, kl, mode_stats, w1_exact, MODE_MIN_SHARE, MODE_RADIUS_MULT,
};
use crate::toydata::{DataError, DistributionSpec, Rng};

pub const EVAL_BINS: usize = 64;
/// Histogram half-width around the outermost centers, in component stds.
pub const RANGE_STDS: f64 = 4.8;

/// Reference sample and layout used to score generator output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalTarget {
    pub reference: Matrix,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub centers: Vec<Vec<f64>>,
    pub std: f64,
}

impl EvalTarget {
    pub fn new(reference: Matrix, centers: Vec<Vec<f64>>, std: f64) -> Self {
        let d = reference.cols;
        let mut lo = vec![0.0; d];
        let mut hi = vec![0.0; d];
        for j in 0..d {
            let (mn, mx) = centers
                .iter()
                .map(|c| c[j])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                    (a.min(v), b.max(v))
                });
            let margin = RANGE_STDS * std + 0.05 * (mx - mn);
            lo[j] = mn - margin;
            hi[j] = mx + margin;
        }
        EvalTarget {
            reference,
            lo,
            hi,
            centers,
            std,
        }
    }

    pub fn for_distribution(
        dist: &DistributionSpec,
        n: usize,
        rng: &mut Rng,
    ) -> Result<Self, DataError> {
        let reference = dist.sample(n, rng)?;
        Ok(EvalTarget::new(
            reference,
            dist.centers(),
            dist.component_std(),
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    /// Averaged over marginals for multi-dimensional data.
    pub kl: f64,
    pub js: f64,
    /// Mean of the per-axis exact Wasserstein-1 distances.
    pub w1: f64,
    pub modes_covered: usize,
    pub high_quality_fraction: f64,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

/// Score `generated` (same size as the reference) against the target.
pub fn score_samples(
    target: &EvalTarget,
    generated: &Matrix,
) -> Result<SampleScores, metrics::MetricsError> {
    let d = target.reference.cols;
    let (mut kl_sum, mut js_sum, mut w1_sum) = (0.0, 0.0, 0.0);
    for j in 0..d {
        let real = target.reference.column(j);
        let fake = generated.column(j);
        let p = histogram(&real, EVAL_BINS, target.lo[j], target.hi[j])?;
        let q = histogram(&fake, EVAL_BINS, target.lo[j], target.hi[j])?;
        kl_sum += kl(&p, &q)?;
        js_sum += js(&p, &q)?;
        w1_sum += w1_exact(&real, &fake)?;
    }
    let modes = mode_stats(
        generated,
        &target.centers,
        target.std,
        MODE_RADIUS_MULT,
        MODE_MIN_SHARE,
    );
    Ok(SampleScores {
        kl: kl_sum / d as f64,
        js: js_sum / d as f64,
        w1: w1_sum / d as f64,
        modes_covered: modes.modes_covered,
        high_quality_fraction: modes.high_quality_fraction,
        means: generated.column_means(),
        stds: generated.column_stds(),
    })
}

/// Mean per-dimension JS divergence between two equally shaped samples on
/// a fixed `[-4.8, 4.8]` layout (used for latent-vs-prior checks).
pub fn per_dim_js(a: &Matrix, b: &Matrix) -> Result<f64, metrics::MetricsError> {
    let mut total = 0.0;
    for j in 0..a.cols {
        let p = histogram(&a.column(j), EVAL_BINS, -RANGE_STDS, RANGE_STDS)?;
        let q = histogram(&b.column(j), EVAL_BINS, -RANGE_STDS, RANGE_STDS)?;
        total += js(&p, &q)?;
    }
    Ok(total / a.cols as f64)
}
