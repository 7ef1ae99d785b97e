use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::toydata::Rng;

/// Reservoir of past generator outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub capacity: usize,
    items: Vec<Vec<f64>>,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            items: Vec::with_capacity(capacity),
            inserted: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn items(&self) -> &[Vec<f64>] {
        &self.items
    }

    /// Reservoir insertion: after `n` inserts every one of them is retained
    /// with probability `capacity / n`.
    pub fn insert(&mut self, row: &[f64], rng: &mut Rng) {
        self.inserted += 1;
        if self.capacity == 0 {
            return;
        }
        if self.items.len() < self.capacity {
            self.items.push(row.to_vec());
        } else {
            let j = rng.below(self.inserted as usize);
            if j < self.capacity {
                self.items[j] = row.to_vec();
            }
        }
    }
}

/// Discriminator fake batch: `floor(mix_fraction * n)` rows drawn uniformly
/// from the buffer (when it has any), the rest fresh. Every fresh row is then
/// offered to the reservoir.
pub fn replay_mix(
    buffer: &mut ReplayBuffer,
    fresh: &Matrix,
    mix_fraction: f64,
    rng: &mut Rng,
) -> Matrix {
    let n = fresh.rows;
    let from_buffer = if buffer.is_empty() {
        0
    } else {
        ((mix_fraction.clamp(0.0, 1.0) * n as f64).floor() as usize).min(n)
    };
    let mut out = Matrix::zeros(n, fresh.cols);
    for i in 0..from_buffer {
        let j = rng.below(buffer.len());
        out.row_mut(i).copy_from_slice(&buffer.items[j]);
    }
    for i in from_buffer..n {
        out.row_mut(i).copy_from_slice(fresh.row(i - from_buffer));
    }
    for row in fresh.iter_rows() {
        buffer.insert(row, rng);
    }
    out
}

/// `x + std * N(0, I)`.
pub fn add_input_noise(x: &Matrix, std: f64, rng: &mut Rng) -> Matrix {
    if std == 0.0 {
        return x.clone();
    }
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| *v += std * rng.normal());
    out
}

/// Adds independent `N(0, sigma^2)` noise to every gradient entry.
pub fn dp_noise(grads: &mut [Vec<f64>], sigma: f64, rng: &mut Rng) {
    if sigma == 0.0 {
        return;
    }
    grads
        .iter_mut()
        .flatten()
        .for_each(|g| *g += sigma * rng.normal());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_buffer_gives_fresh_batch() {
        let mut rng = Rng::new(1);
        let mut buf = ReplayBuffer::new(10);
        let fresh = Matrix::new(4, 1, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(replay_mix(&mut buf, &fresh, 0.5, &mut rng), fresh);
        assert_eq!(buf.len(), 4);
        let out = replay_mix(&mut buf, &fresh, 0.0, &mut rng);
        assert_eq!(out, fresh);
        assert_eq!(buf.len(), 8);
    }

    #[test]
    fn mixing_uses_buffer_rows() {
        let mut rng = Rng::new(2);
        let mut buf = ReplayBuffer::new(10);
        replay_mix(
            &mut buf,
            &Matrix::new(2, 1, vec![-1.0, -2.0]),
            0.0,
            &mut rng,
        );
        let fresh = Matrix::new(4, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let out = replay_mix(&mut buf, &fresh, 0.5, &mut rng);
        assert!(out.data[..2].iter().all(|v| *v < 0.0));
        assert_eq!(&out.data[2..], &[1.0, 2.0]);
    }

    #[test]
    fn capacity_bound_and_uniform_retention() {
        let mut rng = Rng::new(3);
        let mut buf = ReplayBuffer::new(1000);
        for i in 0..10_000 {
            buf.insert(&[i as f64], &mut rng);
        }
        assert_eq!(buf.len(), 1000);
        assert_eq!(buf.inserted(), 10_000);
        // Retained items should be spread over the whole history.
        let early = buf.items().iter().filter(|r| r[0] < 5000.0).count();
        assert!((400..=600).contains(&early), "{early}");
    }

    #[test]
    fn input_noise_statistics() {
        let mut rng = Rng::new(4);
        let x = Matrix::zeros(40_000, 1);
        assert_eq!(add_input_noise(&x, 0.0, &mut rng), x);
        let noisy = add_input_noise(&x, 0.05, &mut rng);
        let n = noisy.rows as f64;
        let mean = noisy.column_means()[0];
        assert!(mean.abs() < 3.0 * 0.05 / n.sqrt());
        let var = noisy.column_stds()[0].powi(2);
        assert!((var - 0.0025).abs() < 0.0025 * 0.05);
    }

    #[test]
    fn dp_noise_scale() {
        let mut rng = Rng::new(5);
        let clean = vec![vec![0.3; 50_000], vec![-1.0; 50_000]];
        let mut g = clean.clone();
        dp_noise(&mut g, 0.0, &mut rng);
        assert_eq!(g, clean);
        dp_noise(&mut g, 0.1, &mut rng);
        let diffs: Vec<f64> = g
            .iter()
            .flatten()
            .zip(clean.iter().flatten())
            .map(|(a, b)| a - b)
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.1).abs() < 0.003, "{std}");
    }
}
