//! Alternating discriminator/generator training for every adversarial
//! family, with the stabilizers available as configuration switches.
//!
//! Each outer step runs `n_critic` discriminator updates followed by one
//! generator update. Randomness comes from named substreams of the run seed
//! (data, latent noise, regularizer noise, unrolling, evaluation), so a run
//! is a pure function of its config.

mod config;
mod eval;
mod stabilizers;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    DataSpec, DiffusionSection, ExperimentSection, GradClip, ModelSection, OptimChoice,
    OptimSection, Regularizers, ReplayConfig, TrainConfig, CONFIG_VERSION,
};
pub use eval::{per_dim_js, score_samples, EvalTarget, SampleScores, EVAL_BINS};
pub use stabilizers::{add_input_noise, dp_noise, replay_mix, ReplayBuffer};

use crate::autodiff::{concat, grad, AutodiffError, Graph, Tensor};
use crate::losses::{self, LossError};
use crate::matrix::Matrix;
use crate::metrics::{self, MetricsError, MetricsRecord, METRICS_HEADER};
use crate::models::{build_bundle, condition, pack, Algorithm, ModelBundle, ModelDims, ModelError};
use crate::nn::{
    clip_gradients, clip_weight_values, embed, grad_values, EmbeddingTable, Network, NnError,
    Optimizer,
};
use crate::toydata::{
    domain_b_map, make_paired_with_noise, make_two_domain, DataError, DistributionSpec, PairedSet,
    Rng, TwoDomainSet,
};

/// Losses beyond this magnitude (or non-finite) end the run as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { step: usize, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub config: TrainConfig,
    pub records: Vec<MetricsRecord>,
    /// Final generator output on the held-out evaluation inputs.
    pub samples: Matrix,
    pub wall_time_secs: f64,
    pub status: RunStatus,
    pub d_updates: usize,
    pub g_updates: usize,
}

impl RunLog {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    pub fn final_record(&self) -> Option<&MetricsRecord> {
        self.records.last()
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }

    /// Equality ignoring wall time.
    pub fn same_outcome(&self, other: &RunLog) -> bool {
        RunLog {
            wall_time_secs: 0.0,
            ..self.clone()
        } == RunLog {
            wall_time_secs: 0.0,
            ..other.clone()
        }
    }
}

/// Hooks fired during training, for instrumentation and invariant checks.
pub enum TrainEvent<'a> {
    CriticStep {
        step: usize,
        bundle: &'a ModelBundle,
    },
    GeneratorStep {
        step: usize,
        bundle: &'a ModelBundle,
    },
    Evaluated {
        record: &'a MetricsRecord,
    },
}

pub fn train(config: &TrainConfig) -> Result<RunLog> {
    train_observed(config, &mut |_| {})
}

pub fn train_observed(
    config: &TrainConfig,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<RunLog> {
    config.validate()?;
    if config.algorithm() == Algorithm::Ddpm {
        return crate::diffusion::train_run(config);
    }
    let start = Instant::now();
    let mut trainer = Trainer::new(config)?;
    let steps = config.experiment.steps;
    let every = config.experiment.eval_every;
    let mut records = Vec::new();
    let mut status = RunStatus::Completed;

    for step in 0..=steps {
        if step % every == 0 || step == steps {
            let record = trainer.evaluate(step)?;
            observer(TrainEvent::Evaluated { record: &record });
            records.push(record);
        }
        if step == steps {
            break;
        }
        match trainer.outer_step(step, observer)? {
            None => {}
            Some(reason) => {
                let record = trainer.evaluate(step + 1)?;
                observer(TrainEvent::Evaluated { record: &record });
                records.push(record);
                status = RunStatus::Diverged { step, reason };
                break;
            }
        }
    }

    let samples = trainer.generate(&trainer.heldout)?;
    let mut resolved = config.clone();
    resolved.resolve();
    Ok(RunLog {
        config: resolved,
        records,
        samples,
        wall_time_secs: start.elapsed().as_secs_f64(),
        status,
        d_updates: trainer.d_updates,
        g_updates: trainer.g_updates,
    })
}

fn check_loss(what: &str, v: f64) -> Option<String> {
    if !v.is_finite() || v.abs() > DIVERGENCE_LIMIT {
        Some(format!("{what} loss became {v}"))
    } else {
        None
    }
}

/// Latent batch for the generator; also returns the class labels (CGAN) or
/// categorical codes (InfoGAN, placed in the last `code_k` columns).
pub fn latent_batch(
    alg: Algorithm,
    dims: &ModelDims,
    n: usize,
    rng: &mut Rng,
) -> (Matrix, Vec<usize>) {
    match alg {
        Algorithm::Infogan => {
            let k = dims.code_k;
            let noise = dims.z_dim - k;
            let mut z = Matrix::zeros(n, dims.z_dim);
            let mut codes = Vec::with_capacity(n);
            for i in 0..n {
                let row = z.row_mut(i);
                for v in &mut row[..noise] {
                    *v = rng.normal();
                }
                let c = rng.below(k);
                row[noise + c] = 1.0;
                codes.push(c);
            }
            (z, codes)
        }
        Algorithm::Cgan => {
            let z = rng.normal_matrix(n, dims.z_dim);
            let labels = (0..n).map(|_| rng.below(dims.num_classes)).collect();
            (z, labels)
        }
        Algorithm::Aae => (rng.normal_matrix(n, dims.bottleneck()), Vec::new()),
        _ => (rng.normal_matrix(n, dims.z_dim), Vec::new()),
    }
}

/// Conditioning for the CGAN discriminator path.
struct CondCtx<'a> {
    table: &'a mut EmbeddingTable,
    opt: &'a mut Optimizer,
    real_labels: &'a [usize],
    fake_labels: &'a [usize],
}

/// Discriminator-side adversarial loss from outputs on real and fake inputs.
fn d_adv_loss(
    alg: Algorithm,
    reg: &Regularizers,
    out_r: &Tensor,
    out_f: &Tensor,
    in_r: &Tensor,
    in_f: &Tensor,
) -> Result<Tensor> {
    Ok(match alg {
        Algorithm::Vanilla | Algorithm::Cgan | Algorithm::Infogan | Algorithm::Aae => {
            losses::d_loss_minimax(out_r, out_f, reg.smoothing)?
        }
        Algorithm::WganClip | Algorithm::WganGp => losses::wgan_losses(out_r, out_f)?.0,
        Algorithm::Lsgan | Algorithm::Pix2pixToy | Algorithm::CycleganToy => {
            losses::lsgan_losses(out_r, out_f)?.0
        }
        Algorithm::Hinge => losses::hinge_losses(out_r, out_f)?.0,
        Algorithm::Ebgan => {
            let e_r = losses::reconstruction_energy(in_r, out_r)?;
            let e_f = losses::reconstruction_energy(in_f, out_f)?;
            losses::ebgan_losses(&e_r, &e_f)?.0
        }
        Algorithm::Ddpm => unreachable!("diffusion has no discriminator"),
    })
}

/// Generator-side adversarial loss from the discriminator output on fakes.
fn g_adv_loss(alg: Algorithm, reg: &Regularizers, out_f: &Tensor, in_f: &Tensor) -> Result<Tensor> {
    Ok(match alg {
        Algorithm::Vanilla | Algorithm::Cgan | Algorithm::Infogan | Algorithm::Aae => {
            losses::g_loss(reg.g_loss, out_f)?
        }
        Algorithm::WganClip | Algorithm::WganGp | Algorithm::Hinge => out_f.mean()?.neg()?,
        Algorithm::Lsgan | Algorithm::Pix2pixToy | Algorithm::CycleganToy => {
            losses::lsgan_losses(out_f, out_f)?.1
        }
        Algorithm::Ebgan => losses::reconstruction_energy(in_f, out_f)?.mean()?,
        Algorithm::Ddpm => unreachable!("diffusion has no discriminator"),
    })
}

/// One discriminator update on given real and fake samples. Handles input
/// noise, conditioning, packing, gradient penalty, gradient clipping,
/// gradient noise, and weight clipping. Returns the loss value.
#[allow(clippy::too_many_arguments)]
fn critic_update(
    alg: Algorithm,
    reg: &Regularizers,
    pack_k: usize,
    d: &mut Network,
    opt: &mut Optimizer,
    real: &Matrix,
    fake: &Matrix,
    cond: Option<CondCtx<'_>>,
    rng: &mut Rng,
) -> Result<f64> {
    let real = add_input_noise(real, reg.input_noise_std, rng);
    let fake = add_input_noise(fake, reg.input_noise_std, rng);
    let g = Graph::new();
    let dp = d.params.bind(&g);
    let (mut real_in, mut fake_in) = (real.to_tensor(), fake.to_tensor());
    let mut table_var = None;
    if let Some(c) = &cond {
        let t = g.var(&c.table.params.tensors[0].to_tensor());
        real_in = condition(&real_in, &embed(&t, c.real_labels)?)?;
        fake_in = condition(&fake_in, &embed(&t, c.fake_labels)?)?;
        table_var = Some(t);
    }
    let real_in = pack(&real_in, pack_k)?;
    let fake_in = pack(&fake_in, pack_k)?;
    let (nr, nf) = (real_in.rows(), fake_in.rows());
    let out = d
        .forward_train(&dp, &concat(0, &[&real_in, &fake_in])?)?
        .output;
    let out_r = out.slice(0, 0, nr)?;
    let out_f = out.slice(0, nr, nf)?;
    let mut loss = d_adv_loss(alg, reg, &out_r, &out_f, &real_in, &fake_in)?;
    if alg == Algorithm::WganGp && reg.gp_lambda > 0.0 {
        let d_ref = &*d;
        let gp = losses::gradient_penalty(
            &g,
            |x| Ok(d_ref.forward(&dp, x).map_err(nn_to_loss)?.output),
            &Matrix::from_tensor(&real_in),
            &Matrix::from_tensor(&fake_in),
            reg.gp_lambda,
            rng,
        )?;
        loss = loss.add(&gp)?;
    }
    let value = loss.item();
    if check_loss("discriminator", value).is_some() {
        return Ok(value);
    }
    let mut wrt: Vec<&Tensor> = dp.iter().collect();
    if let Some(t) = &table_var {
        wrt.push(t);
    }
    let mut grads = grad_values(&grad(&loss, &wrt, false)?);
    if let Some(c) = reg.grad_clip {
        clip_gradients(&mut grads, c.mode, c.bound);
    }
    dp_noise(&mut grads, reg.dp_noise_std, rng);
    if let Some(c) = cond {
        let table_grad = grads.pop().expect("embedding gradient");
        c.opt.step(&mut c.table.params, &[table_grad])?;
    }
    opt.step(&mut d.params, &grads)?;
    if alg == Algorithm::WganClip {
        clip_weight_values(&mut d.params, reg.clip_c);
    }
    Ok(value)
}

fn nn_to_loss(e: NnError) -> LossError {
    match e {
        NnError::Autodiff(a) => LossError::Autodiff(a),
        other => LossError::Autodiff(AutodiffError::Domain {
            op: "critic",
            detail: other.to_string(),
        }),
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fixed evaluation inputs drawn once per run.
#[derive(Clone, Debug)]
struct Heldout {
    z: Matrix,
    codes: Vec<usize>,
    ref_labels: Vec<usize>,
    paired: Option<PairedSet>,
    domains: Option<TwoDomainSet>,
    prior: Option<Matrix>,
}

#[derive(Clone)]
struct Trainer<'c> {
    cfg: &'c TrainConfig,
    alg: Algorithm,
    dims: ModelDims,
    bundle: ModelBundle,
    g_opt: Optimizer,
    d_opt: Optimizer,
    d2_opt: Optimizer,
    g_emb_opt: Optimizer,
    d_emb_opt: Optimizer,
    dist: Option<DistributionSpec>,
    data_rng: Rng,
    noise_rng: Rng,
    aux_rng: Rng,
    unroll_rng: Rng,
    replay: Option<ReplayBuffer>,
    target: EvalTarget,
    heldout: Heldout,
    d_updates: usize,
    g_updates: usize,
}

impl<'c> Trainer<'c> {
    fn new(cfg: &'c TrainConfig) -> Result<Self> {
        let alg = cfg.algorithm();
        let dims = cfg.model_dims();
        let seed = cfg.experiment.seed;
        let bundle = build_bundle(alg, &dims, seed)?;
        let root = Rng::new(seed);
        let mut eval_rng = root.substream(5);
        let kind = cfg.optimizer_kind();
        let dist = cfg.data.distribution();
        let n_eval = cfg.experiment.eval_samples;

        let (z, codes) = latent_batch(alg, &dims, n_eval, &mut eval_rng);
        let mut heldout = Heldout {
            z,
            codes,
            ref_labels: Vec::new(),
            paired: None,
            domains: None,
            prior: None,
        };
        let target = match &cfg.data {
            DataSpec::Paired { noise_std } => {
                let set = make_paired_with_noise(n_eval, *noise_std, &mut eval_rng)?;
                let t = EvalTarget::new(set.y.clone(), vec![vec![0.0, 0.0]], 1.0);
                heldout.paired = Some(set);
                t
            }
            DataSpec::TwoDomain => {
                let set = make_two_domain(n_eval, &mut eval_rng)?;
                let a = crate::toydata::domain_a_dist();
                let centers = a
                    .centers()
                    .iter()
                    .map(|c| domain_b_map(c).to_vec())
                    .collect();
                let t = EvalTarget::new(set.b.clone(), centers, 0.5 * a.component_std());
                heldout.domains = Some(set);
                t
            }
            _ => {
                let d = dist.as_ref().expect("sampled distribution");
                let (reference, labels) = d.sample_labeled(n_eval, &mut eval_rng)?;
                heldout.ref_labels = labels;
                EvalTarget::new(reference, d.centers(), d.component_std())
            }
        };
        if alg == Algorithm::Aae {
            heldout.prior = Some(eval_rng.normal_matrix(n_eval, dims.bottleneck()));
        }

        Ok(Trainer {
            cfg,
            alg,
            dims,
            bundle,
            g_opt: Optimizer::new(kind, cfg.lr_g()),
            d_opt: Optimizer::new(kind, cfg.lr_d()),
            d2_opt: Optimizer::new(kind, cfg.lr_d()),
            g_emb_opt: Optimizer::new(kind, cfg.lr_g()),
            d_emb_opt: Optimizer::new(kind, cfg.lr_d()),
            dist,
            data_rng: root.substream(1),
            noise_rng: root.substream(2),
            aux_rng: root.substream(3),
            unroll_rng: root.substream(4),
            replay: cfg
                .regularizers
                .replay
                .map(|r| ReplayBuffer::new(r.capacity)),
            target,
            heldout,
            d_updates: 0,
            g_updates: 0,
        })
    }

    fn reg(&self) -> &'c Regularizers {
        &self.cfg.regularizers
    }

    fn batch(&self) -> usize {
        self.cfg.experiment.batch
    }

    fn sample_real(&mut self) -> Result<(Matrix, Vec<usize>)> {
        let n = self.batch();
        let dist = self.dist.as_ref().expect("sampled distribution");
        Ok(dist.sample_labeled(n, &mut self.data_rng)?)
    }

    /// Runs `n_critic` discriminator updates and one generator update.
    /// Returns a reason string if the run diverged.
    fn outer_step(
        &mut self,
        step: usize,
        observer: &mut dyn FnMut(TrainEvent<'_>),
    ) -> Result<Option<String>> {
        for _ in 0..self.cfg.n_critic() {
            let loss = self.d_step()?;
            self.d_updates += 1;
            observer(TrainEvent::CriticStep {
                step,
                bundle: &self.bundle,
            });
            if let Some(reason) = check_loss("discriminator", loss) {
                return Ok(Some(reason));
            }
        }
        let loss = self.g_step()?;
        self.g_updates += 1;
        observer(TrainEvent::GeneratorStep {
            step,
            bundle: &self.bundle,
        });
        Ok(check_loss("generator", loss))
    }

    fn d_step(&mut self) -> Result<f64> {
        let alg = self.alg;
        let reg = self.reg();
        let k = self.dims.pack_k;
        let n = self.batch();
        match alg {
            Algorithm::Cgan => {
                let (real, real_labels) = self.sample_real()?;
                let (z, fake_labels) = latent_batch(alg, &self.dims, n, &mut self.noise_rng);
                let fake = self.generate_conditional(&z, &fake_labels)?;
                let b = &mut self.bundle;
                let cond = CondCtx {
                    table: b.d_embedding.as_mut().expect("cgan embedding"),
                    opt: &mut self.d_emb_opt,
                    real_labels: &real_labels,
                    fake_labels: &fake_labels,
                };
                critic_update(
                    alg,
                    reg,
                    k,
                    &mut b.discriminator,
                    &mut self.d_opt,
                    &real,
                    &fake,
                    Some(cond),
                    &mut self.aux_rng,
                )
            }
            Algorithm::Aae => {
                let (x, _) = self.sample_real()?;
                let b = &mut self.bundle;
                let fake = b.encoder.as_ref().expect("aae encoder").eval(&x)?;
                let real = self.noise_rng.normal_matrix(n, self.dims.bottleneck());
                critic_update(
                    alg,
                    reg,
                    k,
                    &mut b.discriminator,
                    &mut self.d_opt,
                    &real,
                    &fake,
                    None,
                    &mut self.aux_rng,
                )
            }
            Algorithm::Pix2pixToy => {
                let set = self.paired_batch()?;
                let b = &mut self.bundle;
                let y_hat = b.generator.eval(&set.x)?;
                let real = set.x.hstack(&set.y);
                let fake = set.x.hstack(&y_hat);
                critic_update(
                    alg,
                    reg,
                    k,
                    &mut b.discriminator,
                    &mut self.d_opt,
                    &real,
                    &fake,
                    None,
                    &mut self.aux_rng,
                )
            }
            Algorithm::CycleganToy => {
                let set = make_two_domain(n, &mut self.data_rng)?;
                let b = &mut self.bundle;
                let fake_b = b.generator.eval(&set.a)?;
                let fake_a = b
                    .generator2
                    .as_ref()
                    .expect("cyclegan reverse generator")
                    .eval(&set.b)?;
                let l_b = critic_update(
                    alg,
                    reg,
                    k,
                    &mut b.discriminator,
                    &mut self.d_opt,
                    &set.b,
                    &fake_b,
                    None,
                    &mut self.aux_rng,
                )?;
                let d_a = b.discriminator2.as_mut().expect("cyclegan second critic");
                let l_a = critic_update(
                    alg,
                    reg,
                    k,
                    d_a,
                    &mut self.d2_opt,
                    &set.a,
                    &fake_a,
                    None,
                    &mut self.aux_rng,
                )?;
                Ok(l_b + l_a)
            }
            _ => {
                let (real, _) = self.sample_real()?;
                let (z, _) = latent_batch(alg, &self.dims, n, &mut self.noise_rng);
                let mut fake = self.bundle.generator.eval(&z)?;
                if let (Some(buf), Some(rc)) = (self.replay.as_mut(), reg.replay) {
                    fake = replay_mix(buf, &fake, rc.mix_fraction, &mut self.aux_rng);
                }
                let b = &mut self.bundle;
                critic_update(
                    alg,
                    reg,
                    k,
                    &mut b.discriminator,
                    &mut self.d_opt,
                    &real,
                    &fake,
                    None,
                    &mut self.aux_rng,
                )
            }
        }
    }

    fn paired_batch(&mut self) -> Result<PairedSet> {
        let noise = match self.cfg.data {
            DataSpec::Paired { noise_std } => noise_std,
            _ => unreachable!("validated"),
        };
        Ok(make_paired_with_noise(
            self.batch(),
            noise,
            &mut self.data_rng,
        )?)
    }

    fn generate_conditional(&self, z: &Matrix, labels: &[usize]) -> Result<Matrix> {
        let table = self
            .bundle
            .g_embedding
            .as_ref()
            .expect("cgan embedding")
            .params
            .tensors[0]
            .to_tensor();
        let input = condition(&z.to_tensor(), &embed(&table, labels)?)?;
        let g = &self.bundle.generator;
        Ok(Matrix::from_tensor(
            &g.forward(&g.params.constants(), &input)?.output,
        ))
    }

    /// Copy of the discriminator advanced `unroll_k` steps, every step on the
    /// same real batch and on the fakes generated from `z`.
    fn unrolled_critic(&mut self, z: &Matrix) -> Result<Network> {
        let mut d = self.bundle.discriminator.clone();
        let mut opt = self.d_opt.clone();
        let dist = self.dist.clone().expect("sampled distribution");
        let real = dist.sample(self.batch(), &mut self.unroll_rng)?;
        let fake = self.bundle.generator.eval(z)?;
        let (alg, reg, k) = (self.alg, self.reg(), self.dims.pack_k);
        for _ in 0..self.cfg.experiment.unroll_k {
            critic_update(
                alg,
                reg,
                k,
                &mut d,
                &mut opt,
                &real,
                &fake,
                None,
                &mut self.unroll_rng,
            )?;
        }
        Ok(d)
    }

    fn noisy(&mut self, x: &Tensor) -> Result<Tensor> {
        let std = self.reg().input_noise_std;
        if std == 0.0 {
            return Ok(x.clone());
        }
        let noise = add_input_noise(&Matrix::zeros(x.rows(), x.cols()), std, &mut self.aux_rng);
        Ok(x.add(&noise.to_tensor())?)
    }

    fn g_step(&mut self) -> Result<f64> {
        let alg = self.alg;
        let reg = self.reg();
        let k = self.dims.pack_k;
        let n = self.batch();
        let g = Graph::new();
        match alg {
            Algorithm::Cgan => {
                let (z, labels) = latent_batch(alg, &self.dims, n, &mut self.noise_rng);
                let b = &self.bundle;
                let gp = b.generator.params.bind(&g);
                let g_table = g.var(
                    &b.g_embedding
                        .as_ref()
                        .expect("cgan embedding")
                        .params
                        .tensors[0]
                        .to_tensor(),
                );
                let d_table = b
                    .d_embedding
                    .as_ref()
                    .expect("cgan embedding")
                    .params
                    .tensors[0]
                    .to_tensor();
                let fake = b
                    .generator
                    .forward(&gp, &condition(&z.to_tensor(), &embed(&g_table, &labels)?)?)?
                    .output;
                let fake = self.noisy(&fake)?;
                let b = &self.bundle;
                let fake_in = pack(&condition(&fake, &embed(&d_table, &labels)?)?, k)?;
                let out = b
                    .discriminator
                    .forward(&b.discriminator.params.constants(), &fake_in)?;
                let loss = g_adv_loss(alg, reg, &out.output, &fake_in)?;
                let mut wrt: Vec<&Tensor> = gp.iter().collect();
                wrt.push(&g_table);
                let grads = grad_values(&grad(&loss, &wrt, false)?);
                let b = &mut self.bundle;
                let table = b.g_embedding.as_mut().expect("cgan embedding");
                let (table_grad, net_grads) = grads.split_last().expect("nonempty gradients");
                self.g_opt.step(&mut b.generator.params, net_grads)?;
                self.g_emb_opt
                    .step(&mut table.params, std::slice::from_ref(table_grad))?;
                Ok(loss.item())
            }
            Algorithm::Aae => {
                let (x, _) = self.sample_real()?;
                let b = &self.bundle;
                let enc = b.encoder.as_ref().expect("aae encoder");
                let ep = enc.params.bind(&g);
                let gp = b.generator.params.bind(&g);
                let xt = x.to_tensor();
                let latent = enc.forward(&ep, &xt)?.output;
                let recon = b.generator.forward(&gp, &latent)?.output;
                let mse = recon.sub(&xt)?.square()?.mean()?;
                let latent_in = pack(&self.noisy(&latent)?, k)?;
                let b = &self.bundle;
                let out = b
                    .discriminator
                    .forward(&b.discriminator.params.constants(), &latent_in)?;
                let loss = mse.add(&g_adv_loss(alg, reg, &out.output, &latent_in)?)?;
                let wrt: Vec<&Tensor> = ep.iter().chain(gp.iter()).collect();
                let grads = grad_values(&grad(&loss, &wrt, false)?);
                let b = &mut self.bundle;
                let enc = b.encoder.as_mut().expect("aae encoder");
                self.g_opt
                    .step_sets(&mut [&mut enc.params, &mut b.generator.params], &grads)?;
                Ok(loss.item())
            }
            Algorithm::Pix2pixToy => {
                let set = self.paired_batch()?;
                let b = &self.bundle;
                let gp = b.generator.params.bind(&g);
                let y_hat = b.generator.forward(&gp, &set.x.to_tensor())?.output;
                let d_in = pack(&self.noisy(&concat(1, &[&set.x.to_tensor(), &y_hat])?)?, k)?;
                let b = &self.bundle;
                let out = b
                    .discriminator
                    .forward(&b.discriminator.params.constants(), &d_in)?;
                let adv = g_adv_loss(alg, reg, &out.output, &d_in)?;
                let loss =
                    losses::composite_pix2pix_g(&adv, &y_hat, &set.y.to_tensor(), reg.l1_lambda)?;
                let wrt: Vec<&Tensor> = gp.iter().collect();
                let grads = grad_values(&grad(&loss, &wrt, false)?);
                self.g_opt.step(&mut self.bundle.generator.params, &grads)?;
                Ok(loss.item())
            }
            Algorithm::CycleganToy => {
                let set = make_two_domain(n, &mut self.data_rng)?;
                let b = &self.bundle;
                let (g_ab, g_ba) = (
                    &b.generator,
                    b.generator2.as_ref().expect("reverse generator"),
                );
                let (d_b, d_a) = (
                    &b.discriminator,
                    b.discriminator2.as_ref().expect("second critic"),
                );
                let p_ab = g_ab.params.bind(&g);
                let p_ba = g_ba.params.bind(&g);
                let (a, bt) = (set.a.to_tensor(), set.b.to_tensor());
                let fake_b = g_ab.forward(&p_ab, &a)?.output;
                let fake_a = g_ba.forward(&p_ba, &bt)?.output;
                let rec_a = g_ba.forward(&p_ba, &fake_b)?.output;
                let rec_b = g_ab.forward(&p_ab, &fake_a)?.output;
                let in_b = pack(&fake_b, k)?;
                let in_a = pack(&fake_a, k)?;
                let out_b = d_b.forward(&d_b.params.constants(), &in_b)?.output;
                let out_a = d_a.forward(&d_a.params.constants(), &in_a)?.output;
                let adv = g_adv_loss(alg, reg, &out_b, &in_b)?
                    .add(&g_adv_loss(alg, reg, &out_a, &in_a)?)?;
                let cyc = losses::cycle_loss(&a, &rec_a, &bt, &rec_b)?;
                let loss = adv.add(&cyc.scale(reg.cycle_lambda)?)?;
                let wrt: Vec<&Tensor> = p_ab.iter().chain(p_ba.iter()).collect();
                let grads = grad_values(&grad(&loss, &wrt, false)?);
                let b = &mut self.bundle;
                let g_ba = b.generator2.as_mut().expect("reverse generator");
                self.g_opt
                    .step_sets(&mut [&mut b.generator.params, &mut g_ba.params], &grads)?;
                Ok(loss.item())
            }
            _ => {
                let (z, codes) = latent_batch(alg, &self.dims, n, &mut self.noise_rng);
                let unrolled = if self.cfg.experiment.unroll_k > 0 {
                    Some(self.unrolled_critic(&z)?)
                } else {
                    None
                };
                let real = if reg.feature_matching_weight > 0.0 {
                    Some(self.sample_real()?.0)
                } else {
                    None
                };
                let gp = self.bundle.generator.params.bind(&g);
                let fake = self.bundle.generator.forward(&gp, &z.to_tensor())?.output;
                let fake_in = pack(&self.noisy(&fake)?, k)?;
                let d = unrolled.as_ref().unwrap_or(&self.bundle.discriminator);
                let dc = d.params.constants();
                let out = d.forward(&dc, &fake_in)?;
                let mut loss = g_adv_loss(alg, reg, &out.output, &fake_in)?;
                if let Some(real) = real {
                    let real_in = pack(&real.to_tensor(), k)?;
                    let f_real = d.forward(&dc, &real_in)?.features.expect("feature tap");
                    let f_fake = out.features.expect("feature tap");
                    let fm = losses::feature_matching_loss(&f_real, &f_fake)?;
                    loss = loss.add(&fm.scale(reg.feature_matching_weight)?)?;
                }
                let mut wrt: Vec<&Tensor> = gp.iter().collect();
                let qp;
                if alg == Algorithm::Infogan {
                    let q = self.bundle.q_net.as_ref().expect("infogan q network");
                    qp = q.params.bind(&g);
                    let logits = q.forward(&qp, &fake)?.output;
                    let aux = losses::infogan_aux_loss(&logits, &codes)?;
                    loss = loss.add(&aux.scale(reg.info_lambda)?)?;
                    wrt.extend(qp.iter());
                }
                let grads = grad_values(&grad(&loss, &wrt, false)?);
                let b = &mut self.bundle;
                match b.q_net.as_mut() {
                    Some(q) => self
                        .g_opt
                        .step_sets(&mut [&mut b.generator.params, &mut q.params], &grads)?,
                    None => self.g_opt.step(&mut b.generator.params, &grads)?,
                }
                Ok(loss.item())
            }
        }
    }

    /// Generator output on the held-out inputs.
    fn generate(&self, h: &Heldout) -> Result<Matrix> {
        let b = &self.bundle;
        Ok(match self.alg {
            Algorithm::Cgan => self.generate_conditional(&h.z, &h.codes)?,
            Algorithm::Pix2pixToy => b
                .generator
                .eval(&h.paired.as_ref().expect("paired set").x)?,
            Algorithm::CycleganToy => b
                .generator
                .eval(&h.domains.as_ref().expect("domain set").a)?,
            _ => b.generator.eval(&h.z)?,
        })
    }

    /// Discriminator scores on held-out real and generated inputs, and the
    /// decision threshold separating them.
    fn heldout_scores(&self, generated: &Matrix) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let b = &self.bundle;
        let h = &self.heldout;
        let k = self.dims.pack_k;
        let score = |d: &Network, x: &Matrix| -> Result<Matrix> {
            let packed = pack(&x.to_tensor(), k)?;
            Ok(Matrix::from_tensor(
                &d.forward(&d.params.constants(), &packed)?.output,
            ))
        };
        let (real, fake) = match self.alg {
            Algorithm::Cgan => {
                let table = b
                    .d_embedding
                    .as_ref()
                    .expect("cgan embedding")
                    .params
                    .tensors[0]
                    .to_tensor();
                let with = |x: &Matrix, labels: &[usize]| -> Result<Matrix> {
                    let e = Matrix::from_tensor(&embed(&table, labels)?);
                    Ok(x.hstack(&e))
                };
                (
                    with(&self.target.reference, &h.ref_labels)?,
                    with(generated, &h.codes)?,
                )
            }
            Algorithm::Aae => {
                let enc = b.encoder.as_ref().expect("aae encoder");
                (
                    h.prior.clone().expect("prior sample"),
                    enc.eval(&self.target.reference)?,
                )
            }
            Algorithm::Pix2pixToy => {
                let set = h.paired.as_ref().expect("paired set");
                (set.x.hstack(&set.y), set.x.hstack(generated))
            }
            _ => (self.target.reference.clone(), generated.clone()),
        };
        let (s_r, s_f) = (
            score(&b.discriminator, &real)?,
            score(&b.discriminator, &fake)?,
        );
        if self.alg == Algorithm::Ebgan {
            let energy = |x: &Matrix, out: &Matrix| -> Vec<f64> {
                let packed =
                    Matrix::from_tensor(&pack(&x.to_tensor(), k).expect("validated packing"));
                packed
                    .iter_rows()
                    .zip(out.iter_rows())
                    .map(|(a, r)| {
                        -a.iter().zip(r).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / a.len() as f64
                    })
                    .collect()
            };
            let (e_r, e_f) = (energy(&real, &s_r), energy(&fake, &s_f));
            let mid = 0.5 * (mean(&e_r) + mean(&e_f));
            return Ok((e_r, e_f, mid));
        }
        let threshold = if self.alg.probability_head() {
            0.5
        } else {
            0.0
        };
        Ok((s_r.data, s_f.data, threshold))
    }

    /// Loss values of the next outer iteration, computed on a throwaway copy.
    fn probe_losses(&self) -> Result<(f64, f64)> {
        let mut probe = self.clone();
        let mut d_total = 0.0;
        let n_critic = self.cfg.n_critic();
        for _ in 0..n_critic {
            d_total += probe.d_step()?;
        }
        let g_loss = probe.g_step()?;
        Ok((d_total / n_critic as f64, g_loss))
    }

    fn evaluate(&mut self, step: usize) -> Result<MetricsRecord> {
        let (d_loss, g_loss) = self.probe_losses()?;
        let generated = self.generate(&self.heldout)?;
        let scores = score_samples(&self.target, &generated)?;
        let (s_r, s_f, threshold) = self.heldout_scores(&generated)?;
        let mut extras = BTreeMap::new();
        for (j, (m, s)) in scores.means.iter().zip(&scores.stds).enumerate() {
            extras.insert(format!("mean_{j}"), *m);
            extras.insert(format!("std_{j}"), *s);
        }
        if self.alg.is_wgan() {
            extras.insert("critic_gap".into(), mean(&s_r) - mean(&s_f));
        }
        let b = &self.bundle;
        let h = &self.heldout;
        match self.alg {
            Algorithm::Cgan => {
                let labels = crate::toydata::labels_for(&self.target.centers, &generated);
                let hits = labels.iter().zip(&h.codes).filter(|(a, b)| a == b).count();
                extras.insert("cond_acc".into(), hits as f64 / labels.len() as f64);
            }
            Algorithm::Infogan => {
                let logits = b.q_net.as_ref().expect("q network").eval(&generated)?;
                let hits = logits
                    .iter_rows()
                    .zip(&h.codes)
                    .filter(|(row, c)| argmax(row) == **c)
                    .count();
                extras.insert("code_acc".into(), hits as f64 / h.codes.len() as f64);
            }
            Algorithm::Aae => {
                let latent = b
                    .encoder
                    .as_ref()
                    .expect("encoder")
                    .eval(&self.target.reference)?;
                extras.insert(
                    "latent_js".into(),
                    per_dim_js(&latent, h.prior.as_ref().expect("prior"))?,
                );
                let recon = b.generator.eval(&latent)?;
                let mse = recon
                    .data
                    .iter()
                    .zip(&self.target.reference.data)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    / recon.data.len() as f64;
                extras.insert("recon_mse".into(), mse);
            }
            Algorithm::Pix2pixToy => {
                let y = &h.paired.as_ref().expect("paired set").y;
                let l1 = generated
                    .data
                    .iter()
                    .zip(&y.data)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / y.data.len() as f64;
                extras.insert("heldout_l1".into(), l1);
            }
            Algorithm::CycleganToy => {
                let set = h.domains.as_ref().expect("domain set");
                let g_ba = b.generator2.as_ref().expect("reverse generator");
                let rec_a = g_ba.eval(&generated)?;
                let rec_b = b.generator.eval(&g_ba.eval(&set.b)?)?;
                let cyc = losses::cycle_loss(
                    &set.a.to_tensor(),
                    &rec_a.to_tensor(),
                    &set.b.to_tensor(),
                    &rec_b.to_tensor(),
                )?;
                extras.insert("cycle".into(), cyc.item());
            }
            _ => {}
        }
        Ok(MetricsRecord {
            step,
            d_loss,
            g_loss,
            kl: scores.kl,
            js: scores.js,
            w1: scores.w1,
            modes_covered: scores.modes_covered,
            high_quality_fraction: scores.high_quality_fraction,
            d_accuracy: metrics::d_accuracy_at(&s_r, &s_f, threshold),
            extras,
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(alg: Algorithm, data: DataSpec) -> TrainConfig {
        let mut c = TrainConfig::new(alg, data);
        c.experiment.steps = 6;
        c.experiment.batch = 8;
        c.experiment.eval_every = 3;
        c.experiment.eval_samples = 16;
        c.model.z_dim = 6;
        c.model.hidden = vec![8];
        c.diffusion.timesteps = 10;
        c
    }

    fn gauss() -> DataSpec {
        DataSpec::Gaussian1d {
            mean: 4.0,
            std: 1.25,
        }
    }

    fn ring(modes: usize) -> DataSpec {
        DataSpec::Ring {
            modes,
            radius: 2.0,
            std: 0.05,
        }
    }

    #[test]
    fn every_algorithm_runs() {
        for alg in Algorithm::ALL {
            let data = match alg {
                Algorithm::Pix2pixToy => DataSpec::Paired { noise_std: 0.05 },
                Algorithm::CycleganToy => DataSpec::TwoDomain,
                Algorithm::Cgan | Algorithm::Infogan => ring(4),
                _ => gauss(),
            };
            let log = train(&tiny(alg, data)).unwrap_or_else(|e| panic!("{alg:?}: {e}"));
            assert_eq!(
                log.records.iter().map(|r| r.step).collect::<Vec<_>>(),
                vec![0, 3, 6],
                "{alg:?}"
            );
            if alg != Algorithm::Ddpm {
                assert_eq!(log.g_updates, 6);
                assert_eq!(log.d_updates, 6 * log.config.n_critic());
            }
        }
    }

    #[test]
    fn identical_configs_identical_logs() {
        let mut c = tiny(Algorithm::WganGp, ring(8));
        c.regularizers.input_noise_std = 0.05;
        c.regularizers.dp_noise_std = 0.1;
        c.regularizers.replay = Some(ReplayConfig {
            capacity: 20,
            mix_fraction: 0.5,
        });
        c.model.pack_k = 2;
        let a = train(&c).unwrap();
        let b = train(&c).unwrap();
        assert!(a.same_outcome(&b));
        assert_eq!(a.metrics_csv(), b.metrics_csv());
        c.experiment.seed = 1;
        assert_ne!(train(&c).unwrap().metrics_csv(), a.metrics_csv());
    }

    #[test]
    fn unrolling_leaves_live_critic_untouched() {
        let mut c = tiny(Algorithm::Vanilla, ring(8));
        c.experiment.unroll_k = 3;
        let mut t = Trainer::new(&c).unwrap();
        let before = t.bundle.discriminator.params.fingerprint();
        let (z, _) = latent_batch(Algorithm::Vanilla, &t.dims, t.batch(), &mut Rng::new(9));
        let copy = t.unrolled_critic(&z).unwrap();
        assert_eq!(t.bundle.discriminator.params.fingerprint(), before);
        assert_ne!(copy.params.fingerprint(), before);
    }

    #[test]
    fn frozen_unroll_equals_plain_step() {
        let mut plain = tiny(Algorithm::Vanilla, ring(8));
        plain.optim.lr_d = Some(0.0);
        let mut unrolled = plain.clone();
        unrolled.experiment.unroll_k = 1;
        assert_eq!(
            train(&plain).unwrap().metrics_csv(),
            train(&unrolled).unwrap().metrics_csv()
        );
    }

    #[test]
    fn clipping_holds_after_each_critic_step() {
        let mut c = tiny(Algorithm::WganClip, gauss());
        c.optim.lr = Some(0.05);
        let mut worst: f64 = 0.0;
        let mut count = 0;
        train_observed(&c, &mut |e| {
            if let TrainEvent::CriticStep { bundle, .. } = e {
                worst = worst.max(bundle.discriminator.params.max_abs());
                count += 1;
            }
        })
        .unwrap();
        assert_eq!(count, 30);
        assert!(worst <= 0.01 + 1e-12);
    }

    #[test]
    fn divergence_is_reported_not_raised() {
        let mut c = tiny(Algorithm::WganGp, gauss());
        c.optim.kind = OptimChoice::Sgd;
        c.optim.lr = Some(1e12);
        let log = train(&c).unwrap();
        assert!(log.diverged(), "{:?}", log.status);
        assert!(!log.records.is_empty());
        assert!(log.metrics_csv().starts_with(METRICS_HEADER));
    }

    #[test]
    fn latent_codes_are_one_hot() {
        let dims = ModelDims {
            z_dim: 6,
            code_k: 3,
            ..ModelDims::default()
        };
        let (z, codes) = latent_batch(Algorithm::Infogan, &dims, 10, &mut Rng::new(0));
        for (row, c) in z.iter_rows().zip(&codes) {
            assert_eq!(
                &row[3..].iter().map(|v| *v as usize).collect::<Vec<_>>()[..],
                &{
                    let mut e = vec![0; 3];
                    e[*c] = 1;
                    e
                }[..]
            );
        }
    }
}
