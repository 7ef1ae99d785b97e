use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{self, Buf};
use super::{AutodiffError, OpKind, Result};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Append-only record of operations. Cloning a `Graph` clones the handle.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

struct GraphInner {
    id: u64,
    nodes: Vec<Node>,
}

#[derive(Clone)]
pub(crate) struct Node {
    /// `None` for leaves.
    pub op: Option<OpKind>,
    pub inputs: Vec<usize>,
    /// Saved forward value (detached).
    pub value: Tensor,
    pub requires_grad: bool,
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub graph: Graph,
    pub id: usize,
}

/// Row-major 64-bit float array, optionally attached to a [`Graph`] node.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    pub(crate) node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("values", &self.data)
            .field("node", &self.node.as_ref().map(|n| n.id))
            .finish()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            inner: Rc::new(RefCell::new(GraphInner {
                id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
                nodes: Vec::new(),
            })),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Attach a copy of `t` as a differentiable leaf.
    pub fn var(&self, t: &Tensor) -> Tensor {
        self.leaf(t, true)
    }

    /// Attach a copy of `t` as a leaf that never receives gradient.
    pub fn constant(&self, t: &Tensor) -> Tensor {
        self.leaf(t, false)
    }

    fn leaf(&self, t: &Tensor, requires_grad: bool) -> Tensor {
        let value = t.detach();
        let id = self.push(Node {
            op: None,
            inputs: Vec::new(),
            value: value.clone(),
            requires_grad,
        });
        value.attached(self.clone(), id)
    }

    fn push(&self, node: Node) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        inner.nodes.len() - 1
    }

    pub(crate) fn node(&self, id: usize) -> Node {
        self.inner.borrow().nodes[id].clone()
    }

    pub(crate) fn same(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Recompute every recorded node from its inputs' saved values and
    /// report whether each result is bit-identical to what was recorded.
    pub fn replay_matches(&self) -> Result<bool> {
        let nodes = self.inner.borrow().nodes.clone();
        for node in &nodes {
            let Some(op) = &node.op else { continue };
            let bufs: Vec<Buf> = node
                .inputs
                .iter()
                .map(|&i| Buf {
                    shape: &nodes[i].value.shape,
                    data: &nodes[i].value.data,
                })
                .collect();
            let (shape, data) = kernels::eval(op, &bufs)?;
            let same_bits = data
                .iter()
                .zip(node.value.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if shape != node.value.shape || !same_bits {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) || kernels::numel(&shape) != values.len() {
            return Err(AutodiffError::BadShape {
                shape,
                len: values.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: Rc::new(values),
            node: None,
        })
    }

    /// Matrix from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        Self::matrix(rows.len(), cols, rows.iter().flatten().copied().collect())
    }

    /// A `[1 x n]` row vector.
    pub fn row(values: &[f64]) -> Self {
        Self::new(
            vec![1, values.len().max(1)],
            if values.is_empty() {
                vec![0.0]
            } else {
                values.to_vec()
            },
        )
        .expect("row shape matches its values")
    }

    pub fn vector(values: &[f64]) -> Self {
        Self::new(vec![values.len()], values.to_vec()).expect("non-empty vector")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Rc::new(vec![v]),
            node: None,
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(vec![v; kernels::numel(shape)]),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    /// Row `i` of a matrix.
    pub fn row_values(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    pub fn graph(&self) -> Option<&Graph> {
        self.node.as_ref().map(|n| &n.graph)
    }

    /// Same values, no graph handle.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    pub(crate) fn attached(mut self, graph: Graph, id: usize) -> Tensor {
        self.node = Some(NodeRef { graph, id });
        self
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    fn buf(&self) -> Buf<'_> {
        Buf {
            shape: &self.shape,
            data: &self.data,
        }
    }

    /// Evaluate `op` and record it when any input is graph-attached.
    pub fn apply(op: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
        let mut graph: Option<Graph> = None;
        for t in inputs {
            if let Some(n) = &t.node {
                match &graph {
                    Some(g) if !g.same(&n.graph) => {
                        return Err(AutodiffError::GraphMismatch(op.name()))
                    }
                    Some(_) => {}
                    None => graph = Some(n.graph.clone()),
                }
            }
        }

        // Elementwise binaries broadcast a one-row operand across the batch;
        // the broadcast is recorded explicitly so its adjoint is a row sum.
        if op.is_binary_elementwise() && inputs.len() == 2 && inputs[0].shape != inputs[1].shape {
            let (a, b) = (inputs[0], inputs[1]);
            let one_row = |s: &[usize], t: &[usize]| {
                s.len() == 2 && t.len() == 2 && s[0] == 1 && s[1] == t[1]
            };
            if one_row(&a.shape, &b.shape) {
                let a = a.broadcast_to(&b.shape)?;
                return Tensor::apply(op, &[&a, b]);
            }
            if one_row(&b.shape, &a.shape) {
                let b = b.broadcast_to(&a.shape)?;
                return Tensor::apply(op, &[a, &b]);
            }
            return Err(AutodiffError::ShapeMismatch {
                op: op.name(),
                shapes: vec![a.shape.clone(), b.shape.clone()],
            });
        }

        let bufs: Vec<Buf> = inputs.iter().map(|t| t.buf()).collect();
        let (shape, data) = kernels::eval(&op, &bufs)?;
        let out = Tensor {
            shape,
            data: Rc::new(data),
            node: None,
        };
        let Some(graph) = graph else { return Ok(out) };

        let mut ids = Vec::with_capacity(inputs.len());
        let mut requires_grad = false;
        for t in inputs {
            let id = match t.node_id() {
                Some(id) => id,
                None => graph.constant(t).node_id().expect("constant is attached"),
            };
            requires_grad |= graph.inner.borrow().nodes[id].requires_grad;
            ids.push(id);
        }
        let id = graph.push(Node {
            op: Some(op),
            inputs: ids,
            value: out.clone(),
            requires_grad,
        });
        Ok(out.attached(graph, id))
    }

    fn un(&self, op: OpKind) -> Result<Tensor> {
        Tensor::apply(op, &[self])
    }

    fn bin(&self, op: OpKind, other: &Tensor) -> Result<Tensor> {
        Tensor::apply(op, &[self, other])
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.bin(OpKind::Add, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.bin(OpKind::Sub, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.bin(OpKind::Mul, other)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.bin(OpKind::Div, other)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.bin(OpKind::MatMul, other)
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.un(OpKind::Neg)
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.un(OpKind::Scale(c))
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        self.un(OpKind::AddConst(c))
    }

    pub fn t(&self) -> Result<Tensor> {
        self.un(OpKind::Transpose)
    }

    pub fn sum(&self) -> Result<Tensor> {
        self.un(OpKind::Sum)
    }

    pub fn mean(&self) -> Result<Tensor> {
        self.un(OpKind::Mean)
    }

    pub fn log(&self) -> Result<Tensor> {
        self.un(OpKind::Log)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.un(OpKind::Exp)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.un(OpKind::Square)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.un(OpKind::Sqrt)
    }

    pub fn abs(&self) -> Result<Tensor> {
        self.un(OpKind::Abs)
    }

    pub fn max_scalar(&self, c: f64) -> Result<Tensor> {
        self.un(OpKind::MaxConst(c))
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.un(OpKind::Relu)
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        self.un(OpKind::LeakyRelu(slope))
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.un(OpKind::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.un(OpKind::Sigmoid)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        self.un(OpKind::LogSoftmax(axis))
    }

    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        self.un(OpKind::SelectRows(indices.to_vec()))
    }

    pub fn scatter_rows(&self, indices: &[usize], rows: usize) -> Result<Tensor> {
        self.un(OpKind::ScatterRows {
            indices: indices.to_vec(),
            rows,
        })
    }

    pub fn row_l2_norm(&self) -> Result<Tensor> {
        self.un(OpKind::RowL2Norm)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        self.un(OpKind::BroadcastTo(shape.to_vec()))
    }

    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        self.un(OpKind::SumTo(shape.to_vec()))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        self.un(OpKind::Slice { axis, start, len })
    }

    /// Mean over rows, giving `[1 x cols]`.
    pub fn mean_rows(&self) -> Result<Tensor> {
        let r = self.rows() as f64;
        self.sum_to(&[1, self.cols()])?.scale(1.0 / r)
    }
}

pub fn concat(axis: usize, parts: &[&Tensor]) -> Result<Tensor> {
    if parts.len() == 1 {
        return Ok(parts[0].clone());
    }
    Tensor::apply(OpKind::Concat(axis), parts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_by_hand() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.values(), &[3.0, 7.0]);
    }

    #[test]
    fn sigmoid_of_zero() {
        assert_eq!(Tensor::row(&[0.0]).sigmoid().unwrap().values(), &[0.5]);
    }

    #[test]
    fn concat_columns() {
        let c = concat(1, &[&Tensor::row(&[1.0, 2.0]), &Tensor::row(&[3.0])]).unwrap();
        assert_eq!(c.shape(), &[1, 3]);
        assert_eq!(c.values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        match a.matmul(&b) {
            Err(AutodiffError::ShapeMismatch { op, shapes }) => {
                assert_eq!(op, "matmul");
                assert_eq!(shapes, vec![vec![2, 3], vec![2, 3]]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn log_of_nonpositive_is_domain_error() {
        let err = Tensor::vector(&[1.0, 0.0]).log().unwrap_err();
        assert!(matches!(err, AutodiffError::Domain { op: "log", .. }));
    }

    #[test]
    fn one_row_broadcast() {
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::row(&[10.0, 20.0]);
        assert_eq!(x.add(&b).unwrap().values(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(b.sub(&x).unwrap().values(), &[9.0, 18.0, 7.0, 16.0]);
        let bad = Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap();
        assert!(x.add(&bad).is_err());
    }

    #[test]
    fn detached_inputs_are_not_recorded() {
        let g = Graph::new();
        let x = Tensor::vector(&[1.0, 2.0]);
        assert!(!x.square().unwrap().is_attached());
        let v = g.var(&x);
        let y = v.mul(&x).unwrap();
        assert!(y.is_attached());
        // var, auto-inserted constant, product
        assert_eq!(g.len(), 3);
    }

    #[test]
    fn mixing_graphs_is_an_error() {
        let (g1, g2) = (Graph::new(), Graph::new());
        let a = g1.var(&Tensor::scalar(1.0));
        let b = g2.var(&Tensor::scalar(2.0));
        assert_eq!(a.add(&b).unwrap_err(), AutodiffError::GraphMismatch("add"));
    }

    #[test]
    fn replay_is_bit_exact() {
        let g = Graph::new();
        let x = g.var(&Tensor::matrix(2, 3, vec![0.3, -1.2, 2.0, 0.7, 0.1, -0.4]).unwrap());
        let w = g.var(&Tensor::matrix(3, 2, vec![0.5, -0.25, 1.5, 0.2, -0.9, 0.33]).unwrap());
        let y = x
            .matmul(&w)
            .unwrap()
            .tanh()
            .unwrap()
            .log_softmax(1)
            .unwrap()
            .sum()
            .unwrap();
        assert!(y.is_attached());
        assert!(g.replay_matches().unwrap());
    }

    #[test]
    fn bad_shape_rejected() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }
}
