//! Seeded random streams and the synthetic target distributions.
//!
//! The generator is ChaCha8 keyed by `seed_from_u64(seed)`. Independent
//! substreams reuse the key and select a different ChaCha stream id, so a
//! run's randomness is fully determined by its 64-bit seed.

use std::f64::consts::PI;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("sample count must be at least 1")]
    ZeroSamples,
    #[error("invalid distribution: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    stream: u64,
    forks: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic child seed for a named role (network init, sweep cell, ...).
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    splitmix64(seed ^ splitmix64(label))
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            seed,
            stream,
            forks: 0,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// A named substream; the same label always yields the same stream.
    pub fn substream(&self, label: u64) -> Rng {
        Rng::with_stream(self.seed, splitmix64(self.stream ^ splitmix64(label)))
    }

    /// Next child stream in sequence.
    pub fn split(&mut self) -> Rng {
        self.forks += 1;
        self.substream(u64::MAX - self.forks)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::new(
            rows,
            cols,
            (0..rows * cols).map(|_| self.normal()).collect(),
        )
    }
}

/// Synthetic target distribution. Mixtures weight their modes uniformly and
/// use an isotropic Gaussian of the given `std` around each center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    #[serde(rename = "gaussian1d")]
    Gaussian1D { mean: f64, std: f64 },
    #[serde(rename = "ring")]
    MixtureRing { modes: usize, radius: f64, std: f64 },
    #[serde(rename = "grid")]
    MixtureGrid { side: usize, spacing: f64, std: f64 },
    #[serde(rename = "labeled")]
    LabeledMixture { centers: Vec<Vec<f64>>, std: f64 },
}

impl DistributionSpec {
    pub fn ring8() -> Self {
        DistributionSpec::MixtureRing {
            modes: 8,
            radius: 2.0,
            std: 0.05,
        }
    }

    /// Labeled mixture whose centers sit on a ring.
    pub fn labeled_ring(modes: usize, radius: f64, std: f64) -> Self {
        let centers = ring_centers(modes, radius);
        DistributionSpec::LabeledMixture { centers, std }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidSpec(m.to_string()));
        let std = self.component_std();
        if !(std > 0.0 && std.is_finite()) {
            return bad("std must be positive");
        }
        match self {
            DistributionSpec::MixtureRing { modes, radius, .. } => {
                if *modes == 0 {
                    return bad("ring needs at least one mode");
                }
                if !radius.is_finite() {
                    return bad("radius must be finite");
                }
            }
            DistributionSpec::MixtureGrid { side, .. } if *side == 0 => {
                return bad("grid side must be at least 1")
            }
            DistributionSpec::LabeledMixture { centers, .. } => {
                if centers.is_empty() {
                    return bad("labeled mixture needs at least one center");
                }
                let d = centers[0].len();
                if d == 0 || centers.iter().any(|c| c.len() != d) {
                    return bad("centers must share a positive dimension");
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            DistributionSpec::Gaussian1D { .. } => 1,
            DistributionSpec::LabeledMixture { centers, .. } => centers.first().map_or(0, Vec::len),
            _ => 2,
        }
    }

    pub fn component_std(&self) -> f64 {
        match self {
            DistributionSpec::Gaussian1D { std, .. }
            | DistributionSpec::MixtureRing { std, .. }
            | DistributionSpec::MixtureGrid { std, .. }
            | DistributionSpec::LabeledMixture { std, .. } => *std,
        }
    }

    /// Mode centers; a single Gaussian has one center at its mean.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        match self {
            DistributionSpec::Gaussian1D { mean, .. } => vec![vec![*mean]],
            DistributionSpec::MixtureRing { modes, radius, .. } => ring_centers(*modes, *radius),
            DistributionSpec::MixtureGrid { side, spacing, .. } => {
                let offset = (*side as f64 - 1.0) / 2.0;
                let mut out = Vec::with_capacity(side * side);
                for i in 0..*side {
                    for j in 0..*side {
                        out.push(vec![
                            (i as f64 - offset) * spacing,
                            (j as f64 - offset) * spacing,
                        ]);
                    }
                }
                out
            }
            DistributionSpec::LabeledMixture { centers, .. } => centers.clone(),
        }
    }

    pub fn num_modes(&self) -> usize {
        match self {
            DistributionSpec::Gaussian1D { .. } => 1,
            DistributionSpec::MixtureRing { modes, .. } => *modes,
            DistributionSpec::MixtureGrid { side, .. } => side * side,
            DistributionSpec::LabeledMixture { centers, .. } => centers.len(),
        }
    }

    /// i.i.d. draws; mixtures pick a mode uniformly then add Gaussian noise.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Matrix, DataError> {
        Ok(self.sample_labeled(n, rng)?.0)
    }

    /// Draws together with the index of the mode each draw came from.
    pub fn sample_labeled(
        &self,
        n: usize,
        rng: &mut Rng,
    ) -> Result<(Matrix, Vec<usize>), DataError> {
        if n == 0 {
            return Err(DataError::ZeroSamples);
        }
        self.validate()?;
        let centers = self.centers();
        let std = self.component_std();
        let d = self.dim();
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = if centers.len() == 1 {
                0
            } else {
                rng.below(centers.len())
            };
            for c in &centers[k] {
                data.push(c + std * rng.normal());
            }
            labels.push(k);
        }
        Ok((Matrix::new(n, d, data), labels))
    }

    /// Draws conditioned on given mode labels.
    pub fn sample_given(&self, labels: &[usize], rng: &mut Rng) -> Result<Matrix, DataError> {
        if labels.is_empty() {
            return Err(DataError::ZeroSamples);
        }
        self.validate()?;
        let centers = self.centers();
        let std = self.component_std();
        let mut data = Vec::with_capacity(labels.len() * self.dim());
        for &k in labels {
            let c = centers
                .get(k)
                .ok_or_else(|| DataError::InvalidSpec(format!("label {k} has no center")))?;
            data.extend(c.iter().map(|v| v + std * rng.normal()));
        }
        Ok(Matrix::new(labels.len(), self.dim(), data))
    }

    /// Exact log density; mixtures use log-sum-exp over modes.
    pub fn log_density(&self, x: &[f64]) -> Result<f64, DataError> {
        self.validate()?;
        if x.len() != self.dim() {
            return Err(DataError::InvalidSpec(format!(
                "point has dimension {}, distribution has {}",
                x.len(),
                self.dim()
            )));
        }
        let std = self.component_std();
        let d = x.len() as f64;
        let norm = -0.5 * d * (2.0 * PI).ln() - d * std.ln();
        let logs: Vec<f64> = self
            .centers()
            .iter()
            .map(|c| {
                let sq: f64 = c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
                norm - sq / (2.0 * std * std)
            })
            .collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        Ok(lse - (logs.len() as f64).ln())
    }
}

fn ring_centers(modes: usize, radius: f64) -> Vec<Vec<f64>> {
    (0..modes)
        .map(|j| {
            let a = 2.0 * PI * j as f64 / modes as f64;
            vec![radius * a.cos(), radius * a.sin()]
        })
        .collect()
}

/// Index of the nearest center for each sample row; ties go to the lowest index.
pub fn labels_for(centers: &[Vec<f64>], samples: &Matrix) -> Vec<usize> {
    samples
        .iter_rows()
        .map(|row| {
            let mut best = (0, f64::INFINITY);
            for (k, c) in centers.iter().enumerate() {
                let d: f64 = c.iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect()
}

/// Supervised pairs: `y = R(pi/4) x + noise_std * eps` with `x ~ N(0, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSet {
    pub x: Matrix,
    pub y: Matrix,
}

pub const PAIRED_NOISE_STD: f64 = 0.05;

/// Noise-free target for a paired input.
pub fn paired_target(x: &[f64]) -> [f64; 2] {
    let (s, c) = (PI / 4.0).sin_cos();
    [c * x[0] - s * x[1], s * x[0] + c * x[1]]
}

pub fn make_paired(n: usize, rng: &mut Rng) -> Result<PairedSet, DataError> {
    make_paired_with_noise(n, PAIRED_NOISE_STD, rng)
}

pub fn make_paired_with_noise(
    n: usize,
    noise_std: f64,
    rng: &mut Rng,
) -> Result<PairedSet, DataError> {
    if n == 0 {
        return Err(DataError::ZeroSamples);
    }
    let x = rng.normal_matrix(n, 2);
    let mut y = Matrix::zeros(n, 2);
    for i in 0..n {
        let t = paired_target(x.row(i));
        let row = y.row_mut(i);
        row[0] = t[0] + noise_std * rng.normal();
        row[1] = t[1] + noise_std * rng.normal();
    }
    Ok(PairedSet { x, y })
}

/// Two unaligned domains: A is ring(8, r=2, std=0.05); B is an independent
/// ring draw scaled by 0.5 and shifted by (2, 2).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoDomainSet {
    pub a: Matrix,
    pub b: Matrix,
}

pub fn domain_b_map(a: &[f64]) -> [f64; 2] {
    [0.5 * a[0] + 2.0, 0.5 * a[1] + 2.0]
}

pub fn domain_a_dist() -> DistributionSpec {
    DistributionSpec::ring8()
}

pub fn make_two_domain(n: usize, rng: &mut Rng) -> Result<TwoDomainSet, DataError> {
    let dist = domain_a_dist();
    let a = dist.sample(n, rng)?;
    let source = dist.sample(n, rng)?;
    let mut b = Matrix::zeros(n, 2);
    for i in 0..n {
        b.row_mut(i).copy_from_slice(&domain_b_map(source.row(i)));
    }
    Ok(TwoDomainSet { a, b })
}

#[cfg(test)]
#[allow(clippy::approx_constant)] // hand-computed oracle values
mod tests {
    use super::*;

    #[test]
    fn gaussian_sample_mean() {
        let d = DistributionSpec::Gaussian1D {
            mean: 4.0,
            std: 1.25,
        };
        let s = d.sample(100_000, &mut Rng::new(7)).unwrap();
        assert!((s.column_means()[0] - 4.0).abs() < 0.02);
    }

    #[test]
    fn degenerate_ring_hits_centers() {
        let d = DistributionSpec::MixtureRing {
            modes: 8,
            radius: 2.0,
            std: 1e-12,
        };
        let centers = d.centers();
        assert_eq!(centers.len(), 8);
        for (j, c) in centers.iter().enumerate() {
            let a = 2.0 * PI * j as f64 / 8.0;
            assert!((c[0] - 2.0 * a.cos()).abs() < 1e-15);
            assert!((c[1] - 2.0 * a.sin()).abs() < 1e-15);
        }
        let s = d.sample(500, &mut Rng::new(1)).unwrap();
        for row in s.iter_rows() {
            let near = centers
                .iter()
                .map(|c| ((c[0] - row[0]).powi(2) + (c[1] - row[1]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            assert!(near < 1e-9);
        }
    }

    #[test]
    fn sample_count_contract() {
        let d = DistributionSpec::ring8();
        assert_eq!(
            d.sample(0, &mut Rng::new(0)).unwrap_err(),
            DataError::ZeroSamples
        );
        let one = d.sample(1, &mut Rng::new(0)).unwrap();
        assert_eq!((one.rows, one.cols), (1, 2));
    }

    #[test]
    fn log_density_values() {
        let n01 = DistributionSpec::Gaussian1D {
            mean: 0.0,
            std: 1.0,
        };
        assert!((n01.log_density(&[0.0]).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        let d = DistributionSpec::Gaussian1D {
            mean: 4.0,
            std: 1.25,
        };
        let expected = -(1.25f64).ln() - 0.5 * (2.0 * PI).ln();
        assert!((d.log_density(&[4.0]).unwrap() - expected).abs() < 1e-12);
        assert!((expected + 1.142_082).abs() < 1e-6);
        for t in [0.1, 1.0, 3.7] {
            let a = d.log_density(&[4.0 + t]).unwrap();
            let b = d.log_density(&[4.0 - t]).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = DistributionSpec::Gaussian1D {
            mean: 0.0,
            std: 0.0,
        };
        assert!(bad.validate().is_err());
        let ring = DistributionSpec::MixtureRing {
            modes: 0,
            radius: 1.0,
            std: 0.1,
        };
        assert!(ring.sample(3, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn paired_rotation() {
        let t = paired_target(&[1.0, 0.0]);
        assert!((t[0] - 0.707_106_781).abs() < 1e-9);
        assert!((t[1] - 0.707_106_781).abs() < 1e-9);
        let set = make_paired_with_noise(5, 0.0, &mut Rng::new(3)).unwrap();
        for i in 0..5 {
            let t = paired_target(set.x.row(i));
            assert_eq!(set.y.row(i), &t);
        }
    }

    #[test]
    fn two_domain_affine_means() {
        let set = make_two_domain(20_000, &mut Rng::new(11)).unwrap();
        let (ma, mb) = (set.a.column_means(), set.b.column_means());
        for j in 0..2 {
            assert!((mb[j] - (0.5 * ma[j] + 2.0)).abs() < 0.05);
        }
    }

    #[test]
    fn labels_for_centers_and_ties() {
        let centers = vec![vec![0.0, 0.0], vec![2.0, 0.0]];
        let pts = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(labels_for(&centers, &pts), vec![1, 0, 0]);
    }

    #[test]
    fn substreams_are_reproducible_and_distinct() {
        let root = Rng::new(42);
        let mut a = root.substream(1);
        let mut b = root.substream(1);
        let mut c = root.substream(2);
        let (x, y, z) = (a.normal(), b.normal(), c.normal());
        assert_eq!(x.to_bits(), y.to_bits());
        assert_ne!(x.to_bits(), z.to_bits());
    }
}
