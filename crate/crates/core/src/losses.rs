//! Adversarial objectives and auxiliary losses as graph-attached scalars.
//!
//! Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log so
//! saturated discriminators give large finite losses instead of infinities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{grad, AutodiffError, Graph, Tensor};
use crate::matrix::Matrix;
use crate::toydata::Rng;

pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("energies must be nonnegative, found {0}")]
    NegativeEnergy(f64),
    #[error("code {code} out of range for {classes} classes")]
    CodeOutOfRange { code: usize, classes: usize },
    #[error("critic must return one score per row, got shape {0:?}")]
    CriticShape(Vec<usize>),
    #[error("{what}: shapes {left:?} and {right:?} do not match")]
    ShapeMismatch {
        what: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("label smoothing needs 0 <= fake < real <= 1, got fake={fake}, real={real}")]
    InvalidSmoothing { real: f64, fake: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Loss families; each maps to one discriminator/generator objective pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    MinimaxBce,
    Nonsaturating,
    Wgan,
    WganGp,
    Lsgan,
    Hinge,
    Ebgan,
    InfoganAux,
    Pix2pix,
    Cycle,
    FeatureMatching,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingConfig {
    pub real_target: f64,
    pub fake_target: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            real_target: 1.0,
            fake_target: 0.0,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        let (r, f) = (self.real_target, self.fake_target);
        if !(0.0..=1.0).contains(&f) || !(0.0..=1.0).contains(&r) || f >= r {
            return Err(LossError::InvalidSmoothing { real: r, fake: f });
        }
        Ok(())
    }
}

fn same_shape(what: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch {
            what,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn clamp_probs(p: &Tensor) -> Result<Tensor> {
    Ok(p.max_scalar(PROB_EPS)?
        .neg()?
        .max_scalar(-(1.0 - PROB_EPS))?
        .neg()?)
}

/// Batch-mean binary cross-entropy against a constant target.
pub fn bce(p: &Tensor, target: f64) -> Result<Tensor> {
    let p = clamp_probs(p)?;
    let mut terms = Vec::new();
    if target != 0.0 {
        terms.push(p.log()?.scale(target)?);
    }
    if target != 1.0 {
        terms.push(p.neg()?.add_scalar(1.0)?.log()?.scale(1.0 - target)?);
    }
    let mut total = terms[0].clone();
    for t in &terms[1..] {
        total = total.add(t)?;
    }
    Ok(total.mean()?.neg()?)
}

/// `BCE(p_real, real_target) + BCE(p_fake, fake_target)`.
pub fn d_loss_minimax(
    p_real: &Tensor,
    p_fake: &Tensor,
    smoothing: SmoothingConfig,
) -> Result<Tensor> {
    smoothing.validate()?;
    Ok(bce(p_real, smoothing.real_target)?.add(&bce(p_fake, smoothing.fake_target)?)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// `mean log(1 - D(G(z)))`
    Saturating,
    /// `-mean log D(G(z))`
    Nonsaturating,
}

pub fn g_loss(kind: GeneratorLoss, p_fake: &Tensor) -> Result<Tensor> {
    let p = clamp_probs(p_fake)?;
    Ok(match kind {
        GeneratorLoss::Saturating => p.neg()?.add_scalar(1.0)?.log()?.mean()?,
        GeneratorLoss::Nonsaturating => p.log()?.mean()?.neg()?,
    })
}

/// Critic: `mean(s_fake) - mean(s_real)`; generator: `-mean(s_fake)`.
pub fn wgan_losses(s_real: &Tensor, s_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = s_fake.mean()?.sub(&s_real.mean()?)?;
    let g = s_fake.mean()?.neg()?;
    Ok((d, g))
}

/// `lambda * mean((|grad_x critic(x_hat)| - 1)^2)` on per-row random
/// interpolates `x_hat = e * real + (1 - e) * fake`, `e ~ U(0, 1)`.
///
/// The result stays attached to `graph` and is differentiable with respect
/// to whatever parameters `critic` binds on it.
pub fn gradient_penalty<F>(
    graph: &Graph,
    critic: F,
    real: &Matrix,
    fake: &Matrix,
    lambda: f64,
    rng: &mut Rng,
) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let mix: Vec<f64> = (0..real.rows).map(|_| rng.uniform()).collect();
    gradient_penalty_at(graph, critic, real, fake, &mix, lambda)
}

/// [`gradient_penalty`] with explicit per-row interpolation weights.
pub fn gradient_penalty_at<F>(
    graph: &Graph,
    mut critic: F,
    real: &Matrix,
    fake: &Matrix,
    mix: &[f64],
    lambda: f64,
) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    if real.rows != fake.rows || real.cols != fake.cols || mix.len() != real.rows {
        return Err(LossError::ShapeMismatch {
            what: "gradient_penalty",
            left: vec![real.rows, real.cols],
            right: vec![fake.rows, fake.cols],
        });
    }
    let mut interp = Matrix::zeros(real.rows, real.cols);
    for (i, &e) in mix.iter().enumerate().take(real.rows) {
        for ((o, r), f) in interp
            .row_mut(i)
            .iter_mut()
            .zip(real.row(i))
            .zip(fake.row(i))
        {
            *o = e * r + (1.0 - e) * f;
        }
    }
    let x_hat = graph.var(&interp.to_tensor());
    let scores = critic(&x_hat)?;
    if scores.shape() != [real.rows, 1] {
        return Err(LossError::CriticShape(scores.shape().to_vec()));
    }
    let g = grad(&scores.sum()?, &[&x_hat], true)?.remove(0);
    let norms = g.row_l2_norm()?;
    Ok(norms.add_scalar(-1.0)?.square()?.mean()?.scale(lambda)?)
}

/// Critic: `0.5 mean((v_r - 1)^2) + 0.5 mean(v_f^2)`; generator: `0.5 mean((v_f - 1)^2)`.
pub fn lsgan_losses(v_real: &Tensor, v_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = v_real
        .add_scalar(-1.0)?
        .square()?
        .mean()?
        .scale(0.5)?
        .add(&v_fake.square()?.mean()?.scale(0.5)?)?;
    let g = v_fake.add_scalar(-1.0)?.square()?.mean()?.scale(0.5)?;
    Ok((d, g))
}

/// Critic: `mean(max(0, 1 - s_r)) + mean(max(0, 1 + s_f))`; generator: `-mean(s_f)`.
pub fn hinge_losses(s_real: &Tensor, s_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    let d = s_real
        .neg()?
        .add_scalar(1.0)?
        .max_scalar(0.0)?
        .mean()?
        .add(&s_fake.add_scalar(1.0)?.max_scalar(0.0)?.mean()?)?;
    let g = s_fake.mean()?.neg()?;
    Ok((d, g))
}

/// Per-row mean squared reconstruction error, shape `[n x 1]`.
pub fn reconstruction_energy(x: &Tensor, recon: &Tensor) -> Result<Tensor> {
    same_shape("reconstruction_energy", x, recon)?;
    let d = x.cols() as f64;
    Ok(recon
        .sub(x)?
        .square()?
        .sum_to(&[x.rows(), 1])?
        .scale(1.0 / d)?)
}

/// Critic: `mean(E_real) - mean(E_fake)`; generator: `mean(E_fake)`. No margin term.
pub fn ebgan_losses(e_real: &Tensor, e_fake: &Tensor) -> Result<(Tensor, Tensor)> {
    if let Some(&v) = e_real
        .values()
        .iter()
        .chain(e_fake.values())
        .find(|&&v| v < 0.0)
    {
        return Err(LossError::NegativeEnergy(v));
    }
    let d = e_real.mean()?.sub(&e_fake.mean()?)?;
    let g = e_fake.mean()?;
    Ok((d, g))
}

/// Categorical cross-entropy of the code posterior: `-mean log softmax(q)[code]`.
pub fn infogan_aux_loss(q_logits: &Tensor, codes: &[usize]) -> Result<Tensor> {
    let (n, k) = (q_logits.rows(), q_logits.cols());
    if codes.len() != n {
        return Err(LossError::ShapeMismatch {
            what: "infogan_aux_loss",
            left: q_logits.shape().to_vec(),
            right: vec![codes.len()],
        });
    }
    let mut onehot = vec![0.0; n * k];
    for (i, &c) in codes.iter().enumerate() {
        if c >= k {
            return Err(LossError::CodeOutOfRange {
                code: c,
                classes: k,
            });
        }
        onehot[i * k + c] = 1.0;
    }
    let mask = Tensor::matrix(n, k, onehot)?;
    Ok(q_logits
        .log_softmax(1)?
        .mul(&mask)?
        .sum()?
        .scale(-1.0 / n as f64)?)
}

pub fn mean_abs_error(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mean_abs_error", a, b)?;
    Ok(a.sub(b)?.abs()?.mean()?)
}

/// `adv_term + lambda_l1 * mean|y_hat - y|`.
pub fn composite_pix2pix_g(
    adv_term: &Tensor,
    y_hat: &Tensor,
    y: &Tensor,
    lambda_l1: f64,
) -> Result<Tensor> {
    if lambda_l1 == 0.0 {
        same_shape("composite_pix2pix_g", y_hat, y)?;
        return Ok(adv_term.clone());
    }
    Ok(adv_term.add(&mean_abs_error(y_hat, y)?.scale(lambda_l1)?)?)
}

/// `mean|x_rec - x| + mean|y_rec - y|`.
pub fn cycle_loss(x: &Tensor, x_rec: &Tensor, y: &Tensor, y_rec: &Tensor) -> Result<Tensor> {
    Ok(mean_abs_error(x_rec, x)?.add(&mean_abs_error(y_rec, y)?)?)
}

/// Squared distance between the batch means of two feature sets.
pub fn feature_matching_loss(f_real: &Tensor, f_fake: &Tensor) -> Result<Tensor> {
    if f_real.cols() != f_fake.cols() {
        return Err(LossError::ShapeMismatch {
            what: "feature_matching_loss",
            left: f_real.shape().to_vec(),
            right: f_fake.shape().to_vec(),
        });
    }
    Ok(f_real
        .mean_rows()?
        .sub(&f_fake.mean_rows()?)?
        .square()?
        .sum()?)
}
