//! Minimal denoising diffusion baseline on the toy distributions.
//!
//! A noise-prediction MLP takes `x_t` with the scalar `t / T` appended and is
//! trained on closed-form forward jumps. Sampling is ancestral with fixed
//! variance `sigma_t = sqrt(beta_t)` and no noise on the final step.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{grad, AutodiffError, Graph};
use crate::matrix::Matrix;
use crate::metrics::MetricsRecord;
use crate::nn::{grad_values, Activation, Network, NetworkSpec, NnError, Optimizer, OptimizerKind};
use crate::toydata::{derive_seed, DataError, DistributionSpec, Rng};
use crate::trainers::{
    score_samples, EvalTarget, RunLog, RunStatus, TrainConfig, TrainError, DIVERGENCE_LIMIT,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffusionError {
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("timestep {t} outside 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleKind {
    Constant { beta: f64 },
    Linear { start: f64, end: f64 },
}

impl ScheduleKind {
    pub fn build(&self, steps: usize) -> Result<NoiseSchedule> {
        match *self {
            ScheduleKind::Constant { beta } => NoiseSchedule::constant(steps, beta),
            ScheduleKind::Linear { start, end } => NoiseSchedule::linear(steps, start, end),
        }
    }
}

/// `beta_1..beta_T` with `alpha_t = 1 - beta_t` and `alpha_bar_t` their running product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(DiffusionError::InvalidSchedule(
                "needs at least one step".into(),
            ));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..1.0).contains(*b)) {
            return Err(DiffusionError::InvalidSchedule(format!(
                "beta {b} outside [0, 1)"
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn constant(steps: usize, beta: f64) -> Result<Self> {
        NoiseSchedule::new(vec![beta; steps])
    }

    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        let betas = match steps {
            0 => Vec::new(),
            1 => vec![start],
            _ => (0..steps)
                .map(|i| start + (end - start) * i as f64 / (steps - 1) as f64)
                .collect(),
        };
        NoiseSchedule::new(betas)
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.len() {
            return Err(DiffusionError::StepOutOfRange {
                t,
                steps: self.len(),
            });
        }
        Ok(t - 1)
    }

    /// 1-indexed accessors.
    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.check(t)?])
    }
}

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps` with the given noise.
pub fn forward_diffuse_with(
    x0: &Matrix,
    t: usize,
    schedule: &NoiseSchedule,
    eps: &Matrix,
) -> Result<Matrix> {
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data
        .iter()
        .zip(&eps.data)
        .map(|(x, e)| a * x + b * e)
        .collect();
    Ok(Matrix::new(x0.rows, x0.cols, data))
}

/// Closed-form jump from `x0` to `x_t`.
pub fn forward_diffuse(
    x0: &Matrix,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Matrix> {
    schedule.check(t)?;
    let eps = rng.normal_matrix(x0.rows, x0.cols);
    forward_diffuse_with(x0, t, schedule, &eps)
}

/// Applies `x_s = sqrt(1 - beta_s) x_{s-1} + sqrt(beta_s) eps` for `s = 1..=t`.
pub fn forward_stepwise(
    x0: &Matrix,
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Matrix> {
    schedule.check(t)?;
    let mut x = x0.clone();
    for s in 1..=t {
        let b = schedule.beta(s)?;
        let (keep, add) = ((1.0 - b).sqrt(), b.sqrt());
        x.data
            .iter_mut()
            .for_each(|v| *v = keep * *v + add * rng.normal());
    }
    Ok(x)
}

/// Noise-prediction network: `[x_t || t/T] -> eps_hat`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    pub net: Network,
    pub data_dim: usize,
}

impl Denoiser {
    pub fn new(data_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let spec = NetworkSpec::mlp(
            data_dim + 1,
            hidden,
            Activation::Relu,
            data_dim,
            Activation::Identity,
        );
        Ok(Denoiser {
            net: Network::new(spec, seed)?,
            data_dim,
        })
    }

    fn input(x: &Matrix, ts: &[usize], steps: usize) -> Matrix {
        let time = Matrix::new(
            x.rows,
            1,
            ts.iter().map(|&t| t as f64 / steps as f64).collect(),
        );
        x.hstack(&time)
    }

    pub fn predict(&self, x: &Matrix, ts: &[usize], steps: usize) -> Result<Matrix> {
        Ok(self.net.eval(&Denoiser::input(x, ts, steps))?)
    }

    /// `mean_i |eps_hat_i - eps_i|^2` for the given draws, as a graph scalar
    /// bound to `graph` (gradients flow to the network parameters).
    fn loss(
        &self,
        graph: &Graph,
        x0: &Matrix,
        ts: &[usize],
        eps: &Matrix,
        schedule: &NoiseSchedule,
    ) -> Result<(crate::autodiff::Tensor, Vec<crate::autodiff::Tensor>)> {
        let mut xt = Matrix::zeros(x0.rows, x0.cols);
        for (i, &t) in ts.iter().enumerate() {
            let ab = schedule.alpha_bar(t)?;
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            for ((o, x), e) in xt.row_mut(i).iter_mut().zip(x0.row(i)).zip(eps.row(i)) {
                *o = a * x + b * e;
            }
        }
        let params = self.net.params.bind(graph);
        let input = Denoiser::input(&xt, ts, schedule.len()).to_tensor();
        let pred = self.net.forward(&params, &input)?.output;
        let loss = pred
            .sub(&eps.to_tensor())?
            .square()?
            .sum()?
            .scale(1.0 / x0.rows as f64)?;
        Ok((loss, params))
    }

    /// Loss on fixed draws, without recording a graph for later use.
    pub fn loss_value(
        &self,
        x0: &Matrix,
        ts: &[usize],
        eps: &Matrix,
        schedule: &NoiseSchedule,
    ) -> Result<f64> {
        Ok(self.loss(&Graph::new(), x0, ts, eps, schedule)?.0.item())
    }
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`.
pub fn reverse_sample(
    denoiser: &Denoiser,
    schedule: &NoiseSchedule,
    n: usize,
    rng: &mut Rng,
) -> Result<Matrix> {
    let steps = schedule.len();
    let mut x = rng.normal_matrix(n, denoiser.data_dim);
    for t in (1..=steps).rev() {
        let (beta, alpha, ab) = (
            schedule.beta(t)?,
            schedule.alpha(t)?,
            schedule.alpha_bar(t)?,
        );
        let ts = vec![t; n];
        let eps_hat = denoiser.predict(&x, &ts, steps)?;
        let coeff = if beta == 0.0 {
            0.0
        } else {
            beta / (1.0 - ab).sqrt()
        };
        let scale = 1.0 / alpha.sqrt();
        let sigma = if t > 1 { beta.sqrt() } else { 0.0 };
        for (v, e) in x.data.iter_mut().zip(&eps_hat.data) {
            *v = scale * (*v - coeff * e);
            if sigma > 0.0 {
                *v += sigma * rng.normal();
            }
        }
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub dist: DistributionSpec,
    pub schedule: NoiseSchedule,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserRun {
    pub denoiser: Denoiser,
    /// Training-batch loss at every step.
    pub losses: Vec<f64>,
    /// Loss on a fixed validation draw before and after training.
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub diverged: bool,
}

/// Fixed draw `(x0, t, eps)` for loss comparisons.
struct ValidationDraw {
    x0: Matrix,
    ts: Vec<usize>,
    eps: Matrix,
}

impl ValidationDraw {
    fn new(
        dist: &DistributionSpec,
        schedule: &NoiseSchedule,
        n: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let x0 = dist.sample(n, rng)?;
        let ts = (0..n).map(|_| 1 + rng.below(schedule.len())).collect();
        let eps = rng.normal_matrix(n, x0.cols);
        Ok(ValidationDraw { x0, ts, eps })
    }

    fn loss(&self, d: &Denoiser, schedule: &NoiseSchedule) -> Result<f64> {
        d.loss_value(&self.x0, &self.ts, &self.eps, schedule)
    }
}

struct DdpmTrainer {
    denoiser: Denoiser,
    opt: Optimizer,
    dist: DistributionSpec,
    schedule: NoiseSchedule,
    batch: usize,
    rng: Rng,
}

impl DdpmTrainer {
    fn new(
        dist: &DistributionSpec,
        schedule: &NoiseSchedule,
        hidden: &[usize],
        batch: usize,
        opt: Optimizer,
        seed: u64,
    ) -> Result<Self> {
        Ok(DdpmTrainer {
            denoiser: Denoiser::new(dist.dim(), hidden, derive_seed(seed, 1))?,
            opt,
            dist: dist.clone(),
            schedule: schedule.clone(),
            batch,
            rng: Rng::new(seed).substream(1),
        })
    }

    fn step(&mut self) -> Result<f64> {
        let x0 = self.dist.sample(self.batch, &mut self.rng)?;
        let ts: Vec<usize> = (0..self.batch)
            .map(|_| 1 + self.rng.below(self.schedule.len()))
            .collect();
        let eps = self.rng.normal_matrix(self.batch, x0.cols);
        let g = Graph::new();
        let (loss, params) = self.denoiser.loss(&g, &x0, &ts, &eps, &self.schedule)?;
        let value = loss.item();
        if !value.is_finite() || value.abs() > DIVERGENCE_LIMIT {
            return Ok(value);
        }
        let refs: Vec<_> = params.iter().collect();
        let grads = grad_values(&grad(&loss, &refs, false)?);
        self.opt.step(&mut self.denoiser.net.params, &grads)?;
        Ok(value)
    }
}

pub fn train_denoiser(cfg: &DenoiserConfig) -> Result<DenoiserRun> {
    let opt = Optimizer::new(OptimizerKind::adam(0.9, 0.999), cfg.lr);
    let mut trainer = DdpmTrainer::new(
        &cfg.dist,
        &cfg.schedule,
        &cfg.hidden,
        cfg.batch,
        opt,
        cfg.seed,
    )?;
    let val = ValidationDraw::new(
        &cfg.dist,
        &cfg.schedule,
        1024,
        &mut Rng::new(cfg.seed).substream(5),
    )?;
    let initial_val_loss = val.loss(&trainer.denoiser, &cfg.schedule)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut diverged = false;
    for _ in 0..cfg.steps {
        let l = trainer.step()?;
        losses.push(l);
        if !l.is_finite() || l.abs() > DIVERGENCE_LIMIT {
            diverged = true;
            break;
        }
    }
    let final_val_loss = val.loss(&trainer.denoiser, &cfg.schedule)?;
    Ok(DenoiserRun {
        denoiser: trainer.denoiser,
        losses,
        initial_val_loss,
        final_val_loss,
        diverged,
    })
}

fn to_train_error(e: DiffusionError) -> TrainError {
    match e {
        DiffusionError::Nn(e) => TrainError::Nn(e),
        DiffusionError::Data(e) => TrainError::Data(e),
        DiffusionError::Autodiff(e) => TrainError::Autodiff(e),
        other => TrainError::Config {
            key: "diffusion".into(),
            msg: other.to_string(),
        },
    }
}

/// Diffusion counterpart of the adversarial training loop, producing the
/// same run log. There is no discriminator: `d_loss` is reported as 0 and
/// `d_acc` as 0.5; `g_loss` is the denoiser's validation loss.
pub fn train_run(cfg: &TrainConfig) -> std::result::Result<RunLog, TrainError> {
    let start = Instant::now();
    let e = &cfg.experiment;
    let dist = cfg.data.distribution().ok_or_else(|| TrainError::Config {
        key: "data.kind".into(),
        msg: "ddpm needs a sampled distribution".into(),
    })?;
    let schedule = cfg
        .diffusion
        .schedule
        .build(cfg.diffusion.timesteps)
        .map_err(to_train_error)?;
    let opt = Optimizer::new(
        OptimizerKind::adam(cfg.optim.beta1, cfg.optim.beta2),
        cfg.diffusion.lr,
    );
    let mut trainer = DdpmTrainer::new(&dist, &schedule, &cfg.model.hidden, e.batch, opt, e.seed)
        .map_err(to_train_error)?;
    let root = Rng::new(e.seed);
    let target = EvalTarget::for_distribution(&dist, e.eval_samples, &mut root.substream(5))?;
    let val = ValidationDraw::new(&dist, &schedule, 1024, &mut root.substream(6))
        .map_err(to_train_error)?;
    let mut records = Vec::new();
    let mut status = RunStatus::Completed;
    let mut samples = Matrix::zeros(0, dist.dim());
    let mut updates = 0;

    let evaluate =
        |step: usize, den: &Denoiser| -> std::result::Result<(MetricsRecord, Matrix), TrainError> {
            let mut rng = root.substream(1000 + step as u64);
            let generated =
                reverse_sample(den, &schedule, e.eval_samples, &mut rng).map_err(to_train_error)?;
            let s = score_samples(&target, &generated)?;
            let mut extras = BTreeMap::new();
            for (j, (m, sd)) in s.means.iter().zip(&s.stds).enumerate() {
                extras.insert(format!("mean_{j}"), *m);
                extras.insert(format!("std_{j}"), *sd);
            }
            let record = MetricsRecord {
                step,
                d_loss: 0.0,
                g_loss: val.loss(den, &schedule).map_err(to_train_error)?,
                kl: s.kl,
                js: s.js,
                w1: s.w1,
                modes_covered: s.modes_covered,
                high_quality_fraction: s.high_quality_fraction,
                d_accuracy: 0.5,
                extras,
            };
            Ok((record, generated))
        };

    for step in 0..=e.steps {
        if step % e.eval_every == 0 || step == e.steps {
            let (record, generated) = evaluate(step, &trainer.denoiser)?;
            records.push(record);
            samples = generated;
        }
        if step == e.steps {
            break;
        }
        let l = trainer.step().map_err(to_train_error)?;
        updates += 1;
        if !l.is_finite() || l.abs() > DIVERGENCE_LIMIT {
            let (record, generated) = evaluate(step + 1, &trainer.denoiser)?;
            records.push(record);
            samples = generated;
            status = RunStatus::Diverged {
                step,
                reason: format!("denoiser loss became {l}"),
            };
            break;
        }
    }
    let mut resolved = cfg.clone();
    resolved.resolve();
    Ok(RunLog {
        config: resolved,
        records,
        samples,
        wall_time_secs: start.elapsed().as_secs_f64(),
        status,
        d_updates: 0,
        g_updates: updates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_invariants() {
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        assert_eq!(s.len(), 100);
        assert!(
            (s.beta(1).unwrap() - 1e-4).abs() < 1e-15
                && (s.beta(100).unwrap() - 0.02).abs() < 1e-15
        );
        for t in 2..=100 {
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
        assert!(s.alpha_bar(0).is_err() && s.alpha_bar(101).is_err());
        assert!(NoiseSchedule::constant(5, 1.0).is_err());
        assert!(NoiseSchedule::constant(0, 0.01).is_err());
        let c = NoiseSchedule::constant(3, 0.01).unwrap();
        assert!((c.alpha_bar(3).unwrap() - 0.99f64.powi(3)).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_is_identity() {
        let s = NoiseSchedule::constant(10, 0.0).unwrap();
        let x0 = Matrix::new(3, 1, vec![1.5, -2.0, 4.0]);
        assert_eq!(forward_diffuse(&x0, 10, &s, &mut Rng::new(0)).unwrap(), x0);
        assert!(forward_diffuse(&x0, 11, &s, &mut Rng::new(0)).is_err());

        let d = Denoiser::new(1, &[8], 0).unwrap();
        let mut a = Rng::new(4);
        let mut b = a.clone();
        let x_t = b.normal_matrix(5, 1);
        assert_eq!(reverse_sample(&d, &s, 5, &mut a).unwrap(), x_t);
    }

    #[test]
    fn forward_marginal_moments() {
        let x0 = DistributionSpec::Gaussian1D {
            mean: 4.0,
            std: 1.25,
        }
        .sample(10_000, &mut Rng::new(1))
        .unwrap();
        let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let ab = s.alpha_bar(100).unwrap();
        let xt = forward_diffuse(&x0, 100, &s, &mut Rng::new(2)).unwrap();
        let m = xt.column_means()[0];
        let var = ab * 1.25f64.powi(2) + 1.0 - ab;
        assert!((m - 4.0 * ab.sqrt()).abs() < 3.0 * (var / 1e4).sqrt() + 0.03);

        let long = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!(long.alpha_bar(1000).unwrap() < 1e-4);
        let xt = forward_diffuse(&x0, 1000, &long, &mut Rng::new(3)).unwrap();
        assert!(xt.column_means()[0].abs() < 0.05);
        assert!((xt.column_stds()[0].powi(2) - 1.0).abs() < 0.1);
    }

    #[test]
    fn stepwise_matches_closed_form_moments() {
        let x0 = Matrix::new(20_000, 1, vec![3.0; 20_000]);
        let s = NoiseSchedule::constant(30, 0.01).unwrap();
        let a = forward_diffuse(&x0, 30, &s, &mut Rng::new(5)).unwrap();
        let b = forward_stepwise(&x0, 30, &s, &mut Rng::new(6)).unwrap();
        let ab = s.alpha_bar(30).unwrap();
        let sd = (1.0 - ab).sqrt();
        let se = sd / (20_000f64).sqrt();
        for m in [&a, &b] {
            assert!((m.column_means()[0] - 3.0 * ab.sqrt()).abs() < 3.0 * se);
            assert!((m.column_stds()[0] - sd).abs() < 0.02 * sd);
        }
    }

    #[test]
    fn zero_output_network_has_unit_loss_per_dim() {
        let mut d = Denoiser::new(2, &[8], 0).unwrap();
        let last = d.net.params.tensors.len() - 2;
        d.net.params.tensors[last]
            .values
            .iter_mut()
            .for_each(|v| *v = 0.0);
        let dist = DistributionSpec::ring8();
        let s = NoiseSchedule::linear(50, 1e-4, 0.02).unwrap();
        let v = ValidationDraw::new(&dist, &s, 20_000, &mut Rng::new(9)).unwrap();
        let l = v.loss(&d, &s).unwrap();
        assert!((l - 2.0).abs() < 0.06, "{l}");
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let cfg = DenoiserConfig {
            dist: DistributionSpec::Gaussian1D {
                mean: 4.0,
                std: 1.25,
            },
            schedule: NoiseSchedule::linear(50, 1e-4, 0.05).unwrap(),
            steps: 200,
            batch: 32,
            lr: 1e-3,
            hidden: vec![16],
            seed: 3,
        };
        let a = train_denoiser(&cfg).unwrap();
        let b = train_denoiser(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.final_val_loss < a.initial_val_loss);
    }
}
