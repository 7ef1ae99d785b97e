//! Forward evaluation of each [`OpKind`] on plain value buffers.

use super::{AutodiffError, OpKind, Result};

pub(crate) struct Buf<'a> {
    pub shape: &'a [usize],
    pub data: &'a [f64],
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn mismatch(op: &OpKind, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op: op.name(),
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn require_matrix<'a>(op: &OpKind, b: &Buf<'a>) -> Result<(usize, usize)> {
    if b.shape.len() != 2 {
        return Err(mismatch(op, &[b.shape]));
    }
    Ok((b.shape[0], b.shape[1]))
}

/// `from` can be broadcast to `to` when it holds a single element, or when
/// it has the same rank and every extent is either 1 or equal.
pub(crate) fn broadcastable(from: &[usize], to: &[usize]) -> bool {
    if numel(from) == 1 {
        return true;
    }
    from.len() == to.len() && from.iter().zip(to).all(|(f, t)| *f == 1 || f == t)
}

/// Flat index in `small` of the element that broadcasts onto `flat` in `big`.
fn reduced_index(mut flat: usize, big: &[usize], small: &[usize]) -> usize {
    if numel(small) == 1 {
        return 0;
    }
    let mut out = 0;
    let mut stride = 1;
    for axis in (0..big.len()).rev() {
        let coord = flat % big[axis];
        flat /= big[axis];
        if small[axis] != 1 {
            out += coord * stride;
        }
        stride *= small[axis];
    }
    out
}

fn unary(b: &Buf, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>) {
    (b.shape.to_vec(), b.data.iter().map(|&x| f(x)).collect())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: buffers are sized m*k, k*n and m*n with row-major strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

pub(crate) fn eval(op: &OpKind, inputs: &[Buf]) -> Result<(Vec<usize>, Vec<f64>)> {
    let arity = match op {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul => 2,
        OpKind::Concat(_) => inputs.len().max(1),
        _ => 1,
    };
    if inputs.len() != arity {
        return Err(mismatch(
            op,
            &inputs.iter().map(|b| b.shape).collect::<Vec<_>>(),
        ));
    }
    let x = &inputs[0];
    Ok(match op {
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let y = &inputs[1];
            if x.shape != y.shape {
                return Err(mismatch(op, &[x.shape, y.shape]));
            }
            let f: fn(f64, f64) -> f64 = match op {
                OpKind::Add => |a, b| a + b,
                OpKind::Sub => |a, b| a - b,
                OpKind::Mul => |a, b| a * b,
                _ => |a, b| a / b,
            };
            if matches!(op, OpKind::Div) && y.data.contains(&0.0) {
                return Err(AutodiffError::Domain {
                    op: op.name(),
                    detail: "division by zero".into(),
                });
            }
            let data = x.data.iter().zip(y.data).map(|(&a, &b)| f(a, b)).collect();
            (x.shape.to_vec(), data)
        }
        OpKind::Neg => unary(x, |v| -v),
        OpKind::Scale(c) => unary(x, |v| c * v),
        OpKind::AddConst(c) => unary(x, |v| v + c),
        OpKind::MatMul => {
            let y = &inputs[1];
            let (m, k) = require_matrix(op, x)?;
            let (k2, n) = require_matrix(op, y)?;
            if k != k2 {
                return Err(mismatch(op, &[x.shape, y.shape]));
            }
            (vec![m, n], matmul(x.data, y.data, m, k, n))
        }
        OpKind::Transpose => {
            let (r, c) = require_matrix(op, x)?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x.data[i * c + j];
                }
            }
            (vec![c, r], out)
        }
        OpKind::Sum => (vec![1], vec![x.data.iter().sum()]),
        OpKind::Mean => {
            let n = x.data.len().max(1) as f64;
            (vec![1], vec![x.data.iter().sum::<f64>() / n])
        }
        OpKind::Log => {
            if let Some(v) = x.data.iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(AutodiffError::Domain {
                    op: op.name(),
                    detail: format!("log of non-positive value {v}"),
                });
            }
            unary(x, f64::ln)
        }
        OpKind::Exp => unary(x, f64::exp),
        OpKind::Square => unary(x, |v| v * v),
        OpKind::Sqrt => {
            if let Some(v) = x.data.iter().find(|&&v| v < 0.0 || v.is_nan()) {
                return Err(AutodiffError::Domain {
                    op: op.name(),
                    detail: format!("sqrt of negative value {v}"),
                });
            }
            unary(x, f64::sqrt)
        }
        OpKind::Abs => unary(x, f64::abs),
        OpKind::MaxConst(c) => unary(x, |v| v.max(*c)),
        OpKind::Relu => unary(x, |v| v.max(0.0)),
        OpKind::LeakyRelu(s) => unary(x, |v| if v > 0.0 { v } else { s * v }),
        OpKind::Tanh => unary(x, f64::tanh),
        OpKind::Sigmoid => unary(x, sigmoid),
        OpKind::LogSoftmax(axis) => {
            let (r, c) = require_matrix(op, x)?;
            if *axis > 1 {
                return Err(mismatch(op, &[x.shape]));
            }
            let mut out = x.data.to_vec();
            let (lanes, len, lane_stride, elem_stride) = if *axis == 1 {
                (r, c, c, 1)
            } else {
                (c, r, 1, c)
            };
            for lane in 0..lanes {
                let base = lane * lane_stride;
                let at = |i: usize| base + i * elem_stride;
                let max = (0..len)
                    .map(|i| x.data[at(i)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = max
                    + (0..len)
                        .map(|i| (x.data[at(i)] - max).exp())
                        .sum::<f64>()
                        .ln();
                for i in 0..len {
                    out[at(i)] = x.data[at(i)] - lse;
                }
            }
            (vec![r, c], out)
        }
        OpKind::Concat(axis) => {
            for b in inputs {
                require_matrix(op, b)?;
            }
            let shapes: Vec<&[usize]> = inputs.iter().map(|b| b.shape).collect();
            match axis {
                0 => {
                    let c = x.shape[1];
                    if inputs.iter().any(|b| b.shape[1] != c) {
                        return Err(mismatch(op, &shapes));
                    }
                    let rows = inputs.iter().map(|b| b.shape[0]).sum();
                    let data = inputs.iter().flat_map(|b| b.data.iter().copied()).collect();
                    (vec![rows, c], data)
                }
                1 => {
                    let r = x.shape[0];
                    if inputs.iter().any(|b| b.shape[0] != r) {
                        return Err(mismatch(op, &shapes));
                    }
                    let cols: usize = inputs.iter().map(|b| b.shape[1]).sum();
                    let mut data = Vec::with_capacity(r * cols);
                    for i in 0..r {
                        for b in inputs {
                            let w = b.shape[1];
                            data.extend_from_slice(&b.data[i * w..(i + 1) * w]);
                        }
                    }
                    (vec![r, cols], data)
                }
                _ => return Err(mismatch(op, &shapes)),
            }
        }
        OpKind::SelectRows(indices) => {
            let (r, c) = require_matrix(op, x)?;
            let mut data = Vec::with_capacity(indices.len() * c);
            for &i in indices {
                if i >= r {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: op.name(),
                        index: i,
                        extent: r,
                    });
                }
                data.extend_from_slice(&x.data[i * c..(i + 1) * c]);
            }
            (vec![indices.len(), c], data)
        }
        OpKind::ScatterRows { indices, rows } => {
            let (r, c) = require_matrix(op, x)?;
            if r != indices.len() {
                return Err(mismatch(op, &[x.shape]));
            }
            let mut data = vec![0.0; rows * c];
            for (src, &dst) in indices.iter().enumerate() {
                if dst >= *rows {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: op.name(),
                        index: dst,
                        extent: *rows,
                    });
                }
                for j in 0..c {
                    data[dst * c + j] += x.data[src * c + j];
                }
            }
            (vec![*rows, c], data)
        }
        OpKind::RowL2Norm => {
            let (r, c) = require_matrix(op, x)?;
            let data = (0..r)
                .map(|i| {
                    x.data[i * c..(i + 1) * c]
                        .iter()
                        .map(|v| v * v)
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            (vec![r, 1], data)
        }
        OpKind::BroadcastTo(to) => {
            if !broadcastable(x.shape, to) || to.contains(&0) {
                return Err(mismatch(op, &[x.shape, to]));
            }
            let n = numel(to);
            let data = if x.data.len() == 1 {
                vec![x.data[0]; n]
            } else if x.shape == to.as_slice() {
                x.data.to_vec()
            } else {
                (0..n)
                    .map(|i| x.data[reduced_index(i, to, x.shape)])
                    .collect()
            };
            (to.clone(), data)
        }
        OpKind::SumTo(to) => {
            if !broadcastable(to, x.shape) {
                return Err(mismatch(op, &[x.shape, to]));
            }
            let mut data = vec![0.0; numel(to)];
            if x.shape == to.as_slice() {
                data.copy_from_slice(x.data);
            } else {
                for (i, v) in x.data.iter().enumerate() {
                    data[reduced_index(i, x.shape, to)] += v;
                }
            }
            (to.clone(), data)
        }
        OpKind::Slice { axis, start, len } => {
            let (r, c) = require_matrix(op, x)?;
            let extent = if *axis == 0 { r } else { c };
            if *axis > 1 || *len == 0 || start + len > extent {
                return Err(mismatch(op, &[x.shape]));
            }
            if *axis == 0 {
                (vec![*len, c], x.data[start * c..(start + len) * c].to_vec())
            } else {
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&x.data[i * c + start..i * c + start + len]);
                }
                (vec![r, *len], data)
            }
        }
    })
}
