//! Finite-difference verification of every graph primitive and every loss.
//!
//! Each check draws randomized inputs, evaluates the reverse-mode gradient of
//! a scalar projection of the output, and compares it entry by entry with a
//! central difference. Inputs for kinked or domain-restricted operations are
//! drawn away from the kink or boundary so the derivative is well defined.

use serde::Serialize;
use thiserror::Error;

use crate::autodiff::{concat, finite_diff, grad, AutodiffError, Graph, OpKind, Tensor};
use crate::losses::{self, GeneratorLoss, LossError, SmoothingConfig};
use crate::matrix::Matrix;
use crate::toydata::Rng;

pub const DEFAULT_CASES: usize = 100;
pub const RTOL: f64 = 1e-5;
/// Tolerance for checks whose forward pass already contains a gradient.
pub const SECOND_ORDER_RTOL: f64 = 1e-4;
pub const ATOL: f64 = 1e-8;
const FD_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradCheckError {
    #[error("check `{name}` failed to evaluate: {source}")]
    Eval { name: String, source: LossError },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    pub rtol: f64,
    /// Largest `|analytic - numeric| / (atol + rtol * scale)`; at most 1 when passing.
    pub worst_ratio: f64,
    pub first_failure: Option<String>,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

type Func = Box<dyn Fn(&[Tensor]) -> Result<Tensor, LossError>>;

struct Case {
    inputs: Vec<Tensor>,
    f: Func,
}

/// Scalar projection `sum(y * w)` with fixed, unequal weights.
fn project(y: &Tensor) -> Result<Tensor, LossError> {
    if y.numel() == 1 {
        return Ok(y.sum()?);
    }
    let w: Vec<f64> = (0..y.numel())
        .map(|i| 0.5 + (i as f64 * 0.618_034).fract())
        .collect();
    let w = Tensor::new(y.shape().to_vec(), w)?;
    Ok(y.mul(&w)?.sum()?)
}

/// Compare analytic and numeric gradients for one case. Returns the worst
/// tolerance ratio and a description of the first offending entry.
fn run_case(case: &Case, rtol: f64) -> Result<(f64, Option<String>), LossError> {
    let g = Graph::new();
    let vars: Vec<Tensor> = case.inputs.iter().map(|t| g.var(t)).collect();
    let out = project(&(case.f)(&vars)?)?;
    let refs: Vec<&Tensor> = vars.iter().collect();
    let analytic = grad(&out, &refs, false)?;

    let mut worst = 0.0f64;
    let mut failure = None;
    for (k, input) in case.inputs.iter().enumerate() {
        let shape = input.shape().to_vec();
        let mut eval_err = None;
        let numeric = finite_diff(
            |x| {
                let mut probe = case.inputs.clone();
                probe[k] = Tensor::new(shape.clone(), x.to_vec()).expect("same shape");
                match (case.f)(&probe).and_then(|y| project(&y)) {
                    Ok(v) => v.item(),
                    Err(e) => {
                        eval_err.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            input.values(),
            FD_EPS,
        );
        if let Some(e) = eval_err {
            return Err(e);
        }
        for (i, (a, n)) in analytic[k].values().iter().zip(&numeric).enumerate() {
            let ratio = (a - n).abs() / (ATOL + rtol * a.abs().max(n.abs()));
            if !(ratio <= 1.0) && failure.is_none() {
                failure = Some(format!(
                    "input {k} entry {i}: analytic {a:e} vs numeric {n:e}"
                ));
            }
            worst = if ratio.is_nan() {
                f64::INFINITY
            } else {
                worst.max(ratio)
            };
        }
    }
    Ok((worst, failure))
}

fn run_check(
    name: &str,
    cases: usize,
    rtol: f64,
    rng: &mut Rng,
    make: &dyn Fn(&mut Rng) -> Case,
) -> Result<CheckResult, GradCheckError> {
    let mut result = CheckResult {
        name: name.to_string(),
        cases,
        failures: 0,
        rtol,
        worst_ratio: 0.0,
        first_failure: None,
    };
    for c in 0..cases {
        let case = make(rng);
        let (worst, failure) = run_case(&case, rtol).map_err(|source| GradCheckError::Eval {
            name: name.to_string(),
            source,
        })?;
        result.worst_ratio = result.worst_ratio.max(worst);
        if let Some(msg) = failure {
            result.failures += 1;
            result
                .first_failure
                .get_or_insert(format!("case {c}: {msg}"));
        }
    }
    Ok(result)
}

// Input generators.

fn dims(rng: &mut Rng) -> (usize, usize) {
    (1 + rng.below(4), 1 + rng.below(4))
}

fn filled(rows: usize, cols: usize, mut draw: impl FnMut() -> f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| draw()).collect()).expect("shape")
}

fn normal(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    filled(rows, cols, || rng.normal())
}

fn uniform(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    filled(rows, cols, || lo + (hi - lo) * rng.uniform())
}

/// Values at least `gap` away from `kink` on a random side.
fn away_from(rng: &mut Rng, rows: usize, cols: usize, kink: f64, gap: f64) -> Tensor {
    filled(rows, cols, || {
        let m = gap + 2.0 * rng.uniform();
        if rng.uniform() < 0.5 {
            kink - m
        } else {
            kink + m
        }
    })
}

fn case(inputs: Vec<Tensor>, f: impl Fn(&[Tensor]) -> Result<Tensor, LossError> + 'static) -> Case {
    Case {
        inputs,
        f: Box::new(f),
    }
}

fn unary(x: Tensor, f: impl Fn(&Tensor) -> Result<Tensor, AutodiffError> + 'static) -> Case {
    case(vec![x], move |v| Ok(f(&v[0])?))
}

/// One representative of every primitive, with the parameters drawn per case.
pub fn op_kinds() -> Vec<OpKind> {
    vec![
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::Neg,
        OpKind::Scale(0.0),
        OpKind::AddConst(0.0),
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Log,
        OpKind::Exp,
        OpKind::Square,
        OpKind::Sqrt,
        OpKind::Abs,
        OpKind::MaxConst(0.0),
        OpKind::Relu,
        OpKind::LeakyRelu(0.2),
        OpKind::Tanh,
        OpKind::Sigmoid,
        OpKind::LogSoftmax(0),
        OpKind::Concat(0),
        OpKind::SelectRows(Vec::new()),
        OpKind::RowL2Norm,
        OpKind::BroadcastTo(Vec::new()),
        OpKind::SumTo(Vec::new()),
        OpKind::Slice {
            axis: 0,
            start: 0,
            len: 0,
        },
        OpKind::ScatterRows {
            indices: Vec::new(),
            rows: 0,
        },
    ]
}

fn binary(rng: &mut Rng, kind: OpKind) -> Case {
    let (r, c) = dims(rng);
    let a = normal(rng, r, c);
    // A third of the cases exercise the one-row broadcast.
    let br = if rng.below(3) == 0 { 1 } else { r };
    let b = if kind == OpKind::Div {
        away_from(rng, br, c, 0.0, 0.5)
    } else {
        normal(rng, br, c)
    };
    let swap = br == 1 && kind != OpKind::Div && rng.below(2) == 0;
    let inputs = if swap { vec![b, a] } else { vec![a, b] };
    case(inputs, move |v| {
        let (x, y) = (&v[0], &v[1]);
        Ok(match kind {
            OpKind::Add => x.add(y)?,
            OpKind::Sub => x.sub(y)?,
            OpKind::Mul => x.mul(y)?,
            _ => x.div(y)?,
        })
    })
}

/// Random case for one primitive. The match is exhaustive so a new
/// primitive cannot be added without a check.
fn op_case(kind: &OpKind, rng: &mut Rng) -> Case {
    let (r, c) = dims(rng);
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => binary(rng, kind.clone()),
        OpKind::Neg => unary(normal(rng, r, c), |x| x.neg()),
        OpKind::Scale(_) => {
            let s = 3.0 * rng.normal();
            unary(normal(rng, r, c), move |x| x.scale(s))
        }
        OpKind::AddConst(_) => {
            let s = rng.normal();
            unary(normal(rng, r, c), move |x| x.add_scalar(s))
        }
        OpKind::MatMul => {
            let k = 1 + rng.below(4);
            case(vec![normal(rng, r, k), normal(rng, k, c)], |v| {
                Ok(v[0].matmul(&v[1])?)
            })
        }
        OpKind::Transpose => unary(normal(rng, r, c), |x| x.t()),
        OpKind::Sum => unary(normal(rng, r, c), |x| x.sum()),
        OpKind::Mean => unary(normal(rng, r, c), |x| x.mean()),
        OpKind::Log => unary(uniform(rng, r, c, 0.2, 3.0), |x| x.log()),
        OpKind::Exp => unary(uniform(rng, r, c, -2.0, 2.0), |x| x.exp()),
        OpKind::Square => unary(normal(rng, r, c), |x| x.square()),
        OpKind::Sqrt => unary(uniform(rng, r, c, 0.2, 3.0), |x| x.sqrt()),
        OpKind::Abs => unary(away_from(rng, r, c, 0.0, 0.05), |x| x.abs()),
        OpKind::MaxConst(_) => {
            let k = rng.normal();
            unary(away_from(rng, r, c, k, 0.05), move |x| x.max_scalar(k))
        }
        OpKind::Relu => unary(away_from(rng, r, c, 0.0, 0.05), |x| x.relu()),
        OpKind::LeakyRelu(_) => {
            let slope = 0.5 * rng.uniform();
            unary(away_from(rng, r, c, 0.0, 0.05), move |x| {
                x.leaky_relu(slope)
            })
        }
        OpKind::Tanh => unary(normal(rng, r, c), |x| x.tanh()),
        OpKind::Sigmoid => unary(normal(rng, r, c), |x| x.sigmoid()),
        OpKind::LogSoftmax(_) => {
            let axis = rng.below(2);
            unary(normal(rng, r, c).scale(2.0).expect("scale"), move |x| {
                x.log_softmax(axis)
            })
        }
        OpKind::Concat(_) => {
            let axis = rng.below(2);
            let parts = 2 + rng.below(2);
            let inputs = (0..parts)
                .map(|_| {
                    let extent = 1 + rng.below(3);
                    if axis == 0 {
                        normal(rng, extent, c)
                    } else {
                        normal(rng, r, extent)
                    }
                })
                .collect();
            case(inputs, move |v| {
                let refs: Vec<&Tensor> = v.iter().collect();
                Ok(concat(axis, &refs)?)
            })
        }
        OpKind::SelectRows(_) => {
            let n = 1 + rng.below(6);
            let idx: Vec<usize> = (0..n).map(|_| rng.below(r)).collect();
            unary(normal(rng, r, c), move |x| x.select_rows(&idx))
        }
        OpKind::RowL2Norm => {
            // Shift one coordinate so no row sits near the origin.
            let mut x = normal(rng, r, c).to_vec();
            for row in x.chunks_mut(c) {
                row[0] += if row[0] >= 0.0 { 0.3 } else { -0.3 };
            }
            unary(Tensor::matrix(r, c, x).expect("shape"), |x| x.row_l2_norm())
        }
        OpKind::BroadcastTo(_) => {
            let from = match rng.below(3) {
                0 => vec![1, c],
                1 => vec![r, 1],
                _ => vec![1],
            };
            let x = Tensor::new(
                from.clone(),
                (0..from.iter().product()).map(|_| rng.normal()).collect(),
            )
            .expect("shape");
            unary(x, move |x| x.broadcast_to(&[r, c]))
        }
        OpKind::SumTo(_) => {
            let to = match rng.below(3) {
                0 => vec![1, c],
                1 => vec![r, 1],
                _ => vec![1],
            };
            unary(normal(rng, r, c), move |x| x.sum_to(&to))
        }
        OpKind::Slice { .. } => {
            let axis = rng.below(2);
            let extent = if axis == 0 { r } else { c };
            let start = rng.below(extent);
            let len = 1 + rng.below(extent - start);
            unary(normal(rng, r, c), move |x| x.slice(axis, start, len))
        }
        OpKind::ScatterRows { .. } => {
            let rows = 1 + rng.below(5);
            let idx: Vec<usize> = (0..r).map(|_| rng.below(rows)).collect();
            unary(normal(rng, r, c), move |x| x.scatter_rows(&idx, rows))
        }
    }
}

fn probs(rng: &mut Rng, n: usize) -> Tensor {
    uniform(rng, n, 1, 0.05, 0.95)
}

fn column(rng: &mut Rng) -> usize {
    1 + rng.below(6)
}

/// Two-layer tanh critic whose parameters are `params[0..4]`.
fn tanh_critic(params: &[Tensor], x: &Tensor) -> Result<Tensor, AutodiffError> {
    x.matmul(&params[0])?
        .add(&params[1])?
        .tanh()?
        .matmul(&params[2])?
        .add(&params[3])
}

fn critic_params(rng: &mut Rng, d: usize, h: usize) -> Vec<Tensor> {
    vec![
        normal(rng, d, h),
        normal(rng, 1, h).scale(0.5).expect("scale"),
        normal(rng, h, 1),
        normal(rng, 1, 1),
    ]
}

/// Name and generator for every loss check, plus its tolerance.
type LossCheck = (&'static str, f64, fn(&mut Rng) -> Case);

fn loss_checks() -> Vec<LossCheck> {
    vec![
        ("bce", RTOL, |rng| {
            let n = column(rng);
            let target = [0.0, 1.0, rng.uniform()][rng.below(3)];
            case(vec![probs(rng, n)], move |v| losses::bce(&v[0], target))
        }),
        ("d_loss_minimax", RTOL, |rng| {
            let n = column(rng);
            let smoothing = if rng.below(2) == 0 {
                SmoothingConfig::default()
            } else {
                SmoothingConfig {
                    real_target: 0.9,
                    fake_target: 0.1,
                }
            };
            case(vec![probs(rng, n), probs(rng, n)], move |v| {
                losses::d_loss_minimax(&v[0], &v[1], smoothing)
            })
        }),
        ("g_loss_saturating", RTOL, |rng| {
            let n = column(rng);
            case(vec![probs(rng, n)], |v| {
                losses::g_loss(GeneratorLoss::Saturating, &v[0])
            })
        }),
        ("g_loss_nonsaturating", RTOL, |rng| {
            let n = column(rng);
            case(vec![probs(rng, n)], |v| {
                losses::g_loss(GeneratorLoss::Nonsaturating, &v[0])
            })
        }),
        ("wgan_critic", RTOL, |rng| {
            let n = column(rng);
            case(vec![normal(rng, n, 1), normal(rng, n, 1)], |v| {
                Ok(losses::wgan_losses(&v[0], &v[1])?.0)
            })
        }),
        ("wgan_generator", RTOL, |rng| {
            let n = column(rng);
            case(vec![normal(rng, n, 1), normal(rng, n, 1)], |v| {
                Ok(losses::wgan_losses(&v[0], &v[1])?.1)
            })
        }),
        ("gradient_penalty", SECOND_ORDER_RTOL, |rng| {
            let (n, d, h) = (1 + rng.below(5), 1 + rng.below(3), 2 + rng.below(4));
            let real = Matrix::from_tensor(&normal(rng, n, d));
            let fake = Matrix::from_tensor(&normal(rng, n, d));
            let mix: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let lambda = 10.0;
            case(critic_params(rng, d, h), move |p| {
                let graph = p[0].graph().cloned().unwrap_or_default();
                losses::gradient_penalty_at(
                    &graph,
                    |x| Ok(tanh_critic(p, x)?),
                    &real,
                    &fake,
                    &mix,
                    lambda,
                )
            })
        }),
        ("double_backprop", SECOND_ORDER_RTOL, |rng| {
            let (n, d, h) = (1 + rng.below(5), 1 + rng.below(3), 2 + rng.below(4));
            let x = normal(rng, n, d);
            case(critic_params(rng, d, h), move |p| {
                let graph = p[0].graph().cloned().unwrap_or_default();
                let xv = graph.var(&x);
                let gx = grad(&tanh_critic(p, &xv)?.sum()?, &[&xv], true)?.remove(0);
                Ok(gx.square()?.sum()?)
            })
        }),
        ("lsgan_critic", RTOL, |rng| {
            let n = column(rng);
            case(vec![normal(rng, n, 1), normal(rng, n, 1)], |v| {
                Ok(losses::lsgan_losses(&v[0], &v[1])?.0)
            })
        }),
        ("lsgan_generator", RTOL, |rng| {
            let n = column(rng);
            case(vec![normal(rng, n, 1), normal(rng, n, 1)], |v| {
                Ok(losses::lsgan_losses(&v[0], &v[1])?.1)
            })
        }),
        ("hinge_critic", RTOL, |rng| {
            let n = column(rng);
            let real = away_from(rng, n, 1, 1.0, 0.05);
            let fake = away_from(rng, n, 1, -1.0, 0.05);
            case(vec![real, fake], |v| {
                Ok(losses::hinge_losses(&v[0], &v[1])?.0)
            })
        }),
        ("hinge_generator", RTOL, |rng| {
            let n = column(rng);
            case(vec![normal(rng, n, 1), normal(rng, n, 1)], |v| {
                Ok(losses::hinge_losses(&v[0], &v[1])?.1)
            })
        }),
        ("reconstruction_energy", RTOL, |rng| {
            let (n, d) = dims(rng);
            case(vec![normal(rng, n, d), normal(rng, n, d)], |v| {
                losses::reconstruction_energy(&v[0], &v[1])
            })
        }),
        ("ebgan_critic", RTOL, |rng| {
            let n = column(rng);
            case(
                vec![uniform(rng, n, 1, 0.1, 2.0), uniform(rng, n, 1, 0.1, 2.0)],
                |v| Ok(losses::ebgan_losses(&v[0], &v[1])?.0),
            )
        }),
        ("ebgan_generator", RTOL, |rng| {
            let n = column(rng);
            case(
                vec![uniform(rng, n, 1, 0.1, 2.0), uniform(rng, n, 1, 0.1, 2.0)],
                |v| Ok(losses::ebgan_losses(&v[0], &v[1])?.1),
            )
        }),
        ("infogan_aux", RTOL, |rng| {
            let (n, k) = (column(rng), 2 + rng.below(4));
            let codes: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
            case(vec![normal(rng, n, k)], move |v| {
                losses::infogan_aux_loss(&v[0], &codes)
            })
        }),
        ("mean_abs_error", RTOL, |rng| {
            let (n, d) = dims(rng);
            let a = normal(rng, n, d);
            let gap = away_from(rng, n, d, 0.0, 0.05);
            let b = a.add(&gap).expect("same shape");
            case(vec![a, b], |v| losses::mean_abs_error(&v[0], &v[1]))
        }),
        ("composite_pix2pix_g", RTOL, |rng| {
            let (n, d) = dims(rng);
            let y = normal(rng, n, d);
            let y_hat = y.add(&away_from(rng, n, d, 0.0, 0.05)).expect("same shape");
            let lambda = 100.0 * rng.uniform();
            case(vec![Tensor::scalar(rng.normal()), y_hat, y], move |v| {
                losses::composite_pix2pix_g(&v[0], &v[1], &v[2], lambda)
            })
        }),
        ("cycle_loss", RTOL, |rng| {
            let (n, d) = dims(rng);
            let x = normal(rng, n, d);
            let y = normal(rng, n, d);
            let xr = x.add(&away_from(rng, n, d, 0.0, 0.05)).expect("same shape");
            let yr = y.add(&away_from(rng, n, d, 0.0, 0.05)).expect("same shape");
            case(vec![x, xr, y, yr], |v| {
                losses::cycle_loss(&v[0], &v[1], &v[2], &v[3])
            })
        }),
        ("feature_matching", RTOL, |rng| {
            let c = 1 + rng.below(4);
            let (a, b) = (column(rng), column(rng));
            case(vec![normal(rng, a, c), normal(rng, b, c)], |v| {
                losses::feature_matching_loss(&v[0], &v[1])
            })
        }),
    ]
}

/// Names of all checks in suite order.
pub fn check_names() -> Vec<&'static str> {
    let mut names: Vec<&'static str> = op_kinds().iter().map(|k| k.name()).collect();
    names.extend(loss_checks().iter().map(|c| c.0));
    names
}

/// Run every primitive and loss check with `cases` randomized cases each.
pub fn run_suite(cases: usize, seed: u64) -> Result<Vec<CheckResult>, GradCheckError> {
    let root = Rng::new(seed);
    let mut out = Vec::new();
    for (i, kind) in op_kinds().iter().enumerate() {
        let mut rng = root.substream(i as u64);
        out.push(run_check(kind.name(), cases, RTOL, &mut rng, &|r| {
            op_case(kind, r)
        })?);
    }
    for (i, (name, rtol, make)) in loss_checks().into_iter().enumerate() {
        let mut rng = root.substream(1000 + i as u64);
        out.push(run_check(name, cases, rtol, &mut rng, &make)?);
    }
    Ok(out)
}

/// Run a single named check.
pub fn run_named(
    name: &str,
    cases: usize,
    seed: u64,
) -> Option<Result<CheckResult, GradCheckError>> {
    let mut rng = Rng::new(seed).substream(7);
    if let Some(kind) = op_kinds().into_iter().find(|k| k.name() == name) {
        return Some(run_check(name, cases, RTOL, &mut rng, &|r| {
            op_case(&kind, r)
        }));
    }
    let (name, rtol, make) = loss_checks().into_iter().find(|c| c.0 == name)?;
    Some(run_check(name, cases, rtol, &mut rng, &make))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut names = check_names();
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // `x * detach(x)` has gradient x, not 2x; the check must notice.
        let c = case(vec![Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap()], |v| {
            Ok(v[0].mul(&v[0].detach())?)
        });
        let (worst, failure) = run_case(&c, RTOL).unwrap();
        assert!(worst > 1.0 && failure.is_some());
    }

    #[test]
    fn a_few_cases_of_everything_pass() {
        for r in run_suite(DEFAULT_CASES, 11).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}
