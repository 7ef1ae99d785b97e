/// Primitive operations understood by the graph.
///
/// The first block is the user-facing set; the structural kinds at the end
/// exist so that every vector-Jacobian product can be expressed with graph
/// primitives (broadcast/reduce pairs, slice/concat, gather/scatter).
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    AddConst(f64),
    MatMul,
    Transpose,
    /// Reduce every element to a single-element tensor of shape `[1]`.
    Sum,
    Mean,
    Log,
    Exp,
    Square,
    Sqrt,
    Abs,
    MaxConst(f64),
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    LogSoftmax(usize),
    Concat(usize),
    SelectRows(Vec<usize>),
    /// Euclidean norm of each row of a matrix, giving `[rows x 1]`.
    RowL2Norm,
    BroadcastTo(Vec<usize>),
    SumTo(Vec<usize>),
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Adjoint of `SelectRows`: rows of the input are added into a zero
    /// matrix with `rows` rows at the given indices.
    ScatterRows {
        indices: Vec<usize>,
        rows: usize,
    },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Neg => "negate",
            OpKind::Scale(_) => "scale",
            OpKind::AddConst(_) => "add_const",
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
            OpKind::Abs => "abs",
            OpKind::MaxConst(_) => "max_const",
            OpKind::Relu => "relu",
            OpKind::LeakyRelu(_) => "leaky_relu",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::LogSoftmax(_) => "log_softmax",
            OpKind::Concat(_) => "concat",
            OpKind::SelectRows(_) => "select_rows",
            OpKind::RowL2Norm => "row_l2_norm",
            OpKind::BroadcastTo(_) => "broadcast_to",
            OpKind::SumTo(_) => "sum_to",
            OpKind::Slice { .. } => "slice",
            OpKind::ScatterRows { .. } => "scatter_rows",
        }
    }

    pub(crate) fn is_binary_elementwise(&self) -> bool {
        matches!(self, OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div)
    }
}
