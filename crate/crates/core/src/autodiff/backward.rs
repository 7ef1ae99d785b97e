use std::collections::HashMap;

use super::tensor::Node;
use super::{concat, AutodiffError, OpKind, Result, Tensor};

/// Gradients of the scalar `output` with respect to each tensor in `wrt`.
///
/// With `create_graph` set, the adjoint computation is itself recorded on
/// the output's graph and the returned tensors are graph-attached.
pub fn grad(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.numel() != 1 {
        return Err(AutodiffError::NonScalarOutput(output.shape().to_vec()));
    }
    let out_ref = output.node.as_ref().ok_or(AutodiffError::DetachedOutput)?;
    let graph = out_ref.graph.clone();
    let out_id = out_ref.id;

    let mut targets = Vec::with_capacity(wrt.len());
    for (i, t) in wrt.iter().enumerate() {
        match &t.node {
            Some(n) if n.graph.same(&graph) => targets.push(n.id),
            _ => return Err(AutodiffError::NotOnGraph(i)),
        }
    }

    // Snapshot the nodes the output can depend on; adjoint nodes recorded
    // below are appended after `out_id` and never revisited.
    let nodes: Vec<Node> = (0..=out_id).map(|i| graph.node(i)).collect();
    let mut wanted = vec![false; nodes.len()];
    for &t in &targets {
        if t <= out_id {
            wanted[t] = true;
        }
    }
    // A node is worth differentiating through only if some target feeds it.
    for (i, node) in nodes.iter().enumerate() {
        if !wanted[i] && node.inputs.iter().any(|&j| wanted[j]) {
            wanted[i] = true;
        }
    }

    let as_input = |id: usize| -> Tensor {
        let v = nodes[id].value.clone();
        if create_graph {
            v.attached(graph.clone(), id)
        } else {
            v
        }
    };

    let mut adjoint: Vec<Option<Tensor>> = vec![None; nodes.len()];
    let mut results: HashMap<usize, Tensor> = HashMap::new();
    adjoint[out_id] = Some(Tensor::full(output.shape(), 1.0));

    for id in (0..=out_id).rev() {
        let Some(upstream) = adjoint[id].take() else {
            continue;
        };
        if targets.contains(&id) {
            results.insert(id, upstream.clone());
        }
        let node = &nodes[id];
        let Some(op) = &node.op else { continue };
        if !node.inputs.iter().any(|&j| wanted[j]) {
            continue;
        }
        let inputs: Vec<Tensor> = node.inputs.iter().map(|&j| as_input(j)).collect();
        let y = as_input(id);
        let contribs = vjp(op, &inputs, &y, &upstream, |k| wanted[node.inputs[k]])?;
        for (k, c) in contribs.into_iter().enumerate() {
            let Some(c) = c else { continue };
            let j = node.inputs[k];
            if !wanted[j] {
                continue;
            }
            adjoint[j] = Some(match adjoint[j].take() {
                Some(prev) => prev.add(&c)?,
                None => c,
            });
        }
    }

    Ok(targets
        .iter()
        .zip(wrt)
        .map(|(id, t)| {
            results
                .get(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect())
}

fn constant_like(x: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    Tensor::new(
        x.shape().to_vec(),
        x.values().iter().map(|&v| f(v)).collect(),
    )
}

/// Adjoint contributions of one node, expressed with graph operations.
fn vjp(
    op: &OpKind,
    inputs: &[Tensor],
    y: &Tensor,
    g: &Tensor,
    needed: impl Fn(usize) -> bool,
) -> Result<Vec<Option<Tensor>>> {
    let x = &inputs[0];
    let one = |t: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(t?)]) };
    match op {
        OpKind::Add => Ok(vec![Some(g.clone()), Some(g.clone())]),
        OpKind::Sub => Ok(vec![Some(g.clone()), Some(g.neg()?)]),
        OpKind::Mul => {
            let b = &inputs[1];
            Ok(vec![
                if needed(0) { Some(g.mul(b)?) } else { None },
                if needed(1) { Some(g.mul(x)?) } else { None },
            ])
        }
        OpKind::Div => {
            let b = &inputs[1];
            Ok(vec![
                if needed(0) { Some(g.div(b)?) } else { None },
                if needed(1) {
                    Some(g.mul(y)?.div(b)?.neg()?)
                } else {
                    None
                },
            ])
        }
        OpKind::Neg => one(g.neg()),
        OpKind::Scale(c) => one(g.scale(*c)),
        OpKind::AddConst(_) => Ok(vec![Some(g.clone())]),
        OpKind::MatMul => {
            let b = &inputs[1];
            Ok(vec![
                if needed(0) {
                    Some(g.matmul(&b.t()?)?)
                } else {
                    None
                },
                if needed(1) {
                    Some(x.t()?.matmul(g)?)
                } else {
                    None
                },
            ])
        }
        OpKind::Transpose => one(g.t()),
        OpKind::Sum => one(g.broadcast_to(x.shape())),
        OpKind::Mean => one(g.broadcast_to(x.shape())?.scale(1.0 / x.numel() as f64)),
        OpKind::Log => one(g.div(x)),
        OpKind::Exp => one(g.mul(y)),
        OpKind::Square => one(g.mul(&x.scale(2.0)?)),
        OpKind::Sqrt => one(g.scale(0.5)?.div(y)),
        OpKind::Abs => one(g.mul(&constant_like(x, |v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })?)),
        OpKind::MaxConst(c) => one(g.mul(&constant_like(x, |v| if v > *c { 1.0 } else { 0.0 })?)),
        OpKind::Relu => one(g.mul(&constant_like(x, |v| if v > 0.0 { 1.0 } else { 0.0 })?)),
        OpKind::LeakyRelu(s) => one(g.mul(&constant_like(x, |v| if v > 0.0 { 1.0 } else { *s })?)),
        OpKind::Tanh => one(g.mul(&y.square()?.neg()?.add_scalar(1.0)?)),
        OpKind::Sigmoid => one(g.mul(&y.mul(&y.neg()?.add_scalar(1.0)?)?)),
        OpKind::LogSoftmax(axis) => {
            let reduced = if *axis == 1 {
                vec![x.rows(), 1]
            } else {
                vec![1, x.cols()]
            };
            let total = g.sum_to(&reduced)?.broadcast_to(x.shape())?;
            one(g.sub(&y.exp()?.mul(&total)?))
        }
        OpKind::Concat(axis) => {
            let mut offset = 0;
            let mut out = Vec::with_capacity(inputs.len());
            for (k, part) in inputs.iter().enumerate() {
                let width = part.shape()[*axis];
                out.push(if needed(k) {
                    Some(g.slice(*axis, offset, width)?)
                } else {
                    None
                });
                offset += width;
            }
            Ok(out)
        }
        OpKind::SelectRows(indices) => one(g.scatter_rows(indices, x.rows())),
        OpKind::ScatterRows { indices, .. } => one(g.select_rows(indices)),
        // x = 0 whenever y = 0, so clamping the denominator selects the zero subgradient.
        OpKind::RowL2Norm => one(g
            .div(&y.max_scalar(f64::MIN_POSITIVE)?)?
            .broadcast_to(x.shape())?
            .mul(x)),
        OpKind::BroadcastTo(_) => one(g.sum_to(x.shape())),
        OpKind::SumTo(_) => one(g.broadcast_to(x.shape())),
        OpKind::Slice { axis, start, len } => {
            let (r, c) = (x.rows(), x.cols());
            let extent = if *axis == 0 { r } else { c };
            let pad = |n: usize| {
                if *axis == 0 {
                    Tensor::zeros(&[n, c])
                } else {
                    Tensor::zeros(&[r, n])
                }
            };
            let mut parts = Vec::new();
            let before = pad(*start);
            let after = pad(extent - start - len);
            if *start > 0 {
                parts.push(&before);
            }
            parts.push(g);
            if start + len < extent {
                parts.push(&after);
            }
            one(concat(*axis, &parts))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;

    #[test]
    fn sum_of_squares() {
        let g = Graph::new();
        let x = g.var(&Tensor::vector(&[1.0, 2.0, 3.0]));
        let y = x.square().unwrap().sum().unwrap();
        let dx = grad(&y, &[&x], false).unwrap();
        assert_eq!(dx[0].values(), &[2.0, 4.0, 6.0]);
        assert!(!dx[0].is_attached());
    }

    #[test]
    fn second_derivative_of_cube() {
        let g = Graph::new();
        let x = g.var(&Tensor::vector(&[2.0]));
        let y = x.square().unwrap().mul(&x).unwrap().sum().unwrap();
        let dx = grad(&y, &[&x], true).unwrap();
        assert_eq!(dx[0].values(), &[12.0]);
        assert!(dx[0].is_attached());
        let d2 = grad(&dx[0].sum().unwrap(), &[&x], false).unwrap();
        assert_eq!(d2[0].values(), &[12.0]);
    }

    #[test]
    fn leaky_relu_mean() {
        let g = Graph::new();
        let x = g.var(&Tensor::vector(&[-1.0, 1.0]));
        let y = x.leaky_relu(0.2).unwrap().mean().unwrap();
        let dx = grad(&y, &[&x], false).unwrap();
        assert!((dx[0].values()[0] - 0.1).abs() < 1e-15);
        assert!((dx[0].values()[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_consumers_accumulate() {
        let g = Graph::new();
        let x = g.var(&Tensor::vector(&[3.0]));
        // y = x*x + 5x, dy/dx = 2x + 5
        let y = x
            .mul(&x)
            .unwrap()
            .add(&x.scale(5.0).unwrap())
            .unwrap()
            .sum()
            .unwrap();
        assert_eq!(grad(&y, &[&x], false).unwrap()[0].values(), &[11.0]);
    }

    #[test]
    fn unused_wrt_gets_zeros() {
        let g = Graph::new();
        let x = g.var(&Tensor::vector(&[1.0]));
        let z = g.var(&Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let y = x.exp().unwrap().sum().unwrap();
        let grads = grad(&y, &[&x, &z], false).unwrap();
        assert_eq!(grads[1].values(), &[0.0, 0.0]);
    }

    #[test]
    fn error_paths() {
        let g = Graph::new();
        let x = g.var(&Tensor::vector(&[1.0, 2.0]));
        assert!(matches!(
            grad(&x, &[&x], false),
            Err(AutodiffError::NonScalarOutput(_))
        ));
        let detached = Tensor::scalar(1.0);
        assert_eq!(
            grad(&detached, &[&x], false).unwrap_err(),
            AutodiffError::DetachedOutput
        );
        let y = x.sum().unwrap();
        let other = Graph::new().var(&Tensor::scalar(0.0));
        assert_eq!(
            grad(&y, &[&other], false).unwrap_err(),
            AutodiffError::NotOnGraph(0)
        );
        assert_eq!(
            grad(&y, &[&Tensor::scalar(0.0)], false).unwrap_err(),
            AutodiffError::NotOnGraph(0)
        );
    }
}
