//! Tape-based reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Calling
//! [`Tape::backward`] on a scalar node replays the record in reverse and
//! accumulates gradients into every node that the loss depends on. Nodes are
//! identified by lightweight [`Var`] handles.
//!
//! Parameters live outside the tape in a [`Params`] bundle; each training step
//! loads them as leaves, runs the forward pass, and reads the gradients back
//! before handing them to [`adam_step`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("tensor data of length {len} does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("non-finite gradient for parameter `{name}` at flat index {index}")]
    NonFiniteGradient { name: String, index: usize },
}

/// Dense row-major array of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(AutodiffError::DataLength { shape, len: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last dimension (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows when the tensor is viewed as `[numel / cols, cols]`.
    pub fn rows(&self) -> usize {
        self.data.len().checked_div(self.cols()).unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations understood by [`Tape::apply`].
///
/// Matrix operations treat their inputs as 2-D (`[rows, cols]`); row-wise
/// operations act on the last dimension.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// `a @ b`, or `a @ bᵀ` when `transpose_rhs` is set.
    MatMul {
        transpose_rhs: bool,
    },
    /// Elementwise sum. The right operand may also be a single row that is
    /// broadcast over every row of the left operand.
    Add,
    /// Elementwise product of equal shapes.
    Mul,
    Scale(f64),
    Relu,
    Softmax,
    LogSoftmax,
    /// Inputs `(x, gain, bias)`; normalizes each row of `x`.
    LayerNorm {
        eps: f64,
    },
    /// Gathers rows `ids` from the single input table.
    Embedding {
        ids: Vec<usize>,
    },
    /// Inverted dropout with a mask drawn from `seed`.
    Dropout {
        rate: f64,
        seed: u64,
    },
    /// Concatenates 2-D inputs along `axis` (0 = rows, 1 = columns).
    Concat {
        axis: usize,
    },
    Mean,
    Sum,
    SliceRows {
        start: usize,
        end: usize,
    },
    SliceCols {
        start: usize,
        end: usize,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul { .. } => "matmul",
            Primitive::Add => "add",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::Relu => "relu",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log-softmax",
            Primitive::LayerNorm { .. } => "layer-norm",
            Primitive::Embedding { .. } => "embedding",
            Primitive::Dropout { .. } => "dropout",
            Primitive::Concat { .. } => "concat",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::SliceRows { .. } => "slice-rows",
            Primitive::SliceCols { .. } => "slice-cols",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        transpose_rhs: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
        broadcast: bool,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Relu {
        a: usize,
    },
    Softmax {
        a: usize,
    },
    LogSoftmax {
        a: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Dropout {
        a: usize,
        mask: Vec<f64>,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    Mean {
        a: usize,
    },
    Sum {
        a: usize,
    },
    SliceRows {
        a: usize,
        start: usize,
    },
    SliceCols {
        a: usize,
        start: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Computation record for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of `v`; zeros when nothing reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape: node.value.shape.clone(),
                data: g.clone(),
            },
            None => Tensor::zeros(node.value.shape.clone()),
        }
    }

    /// Drops every node recorded after the first `len`, so a tape can be
    /// reused for repeated evaluations on top of shared leaves.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul { transpose_rhs: false }, &[a, b])
    }

    /// `a @ bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul { transpose_rhs: true }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.apply(Primitive::Scale(factor), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::LogSoftmax, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        self.apply(Primitive::LayerNorm { eps }, &[x, gain, bias])
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.apply(Primitive::Embedding { ids: ids.to_vec() }, &[table])
    }

    pub fn dropout(&mut self, a: Var, rate: f64, seed: u64) -> Result<Var> {
        self.apply(Primitive::Dropout { rate, seed }, &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, inputs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::SliceRows { start, end }, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.apply(Primitive::SliceCols { start, end }, &[a])
    }

    /// Applies `prim` to `inputs` and records the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let name = prim.name();
        let arity = match prim {
            Primitive::MatMul { .. } | Primitive::Add | Primitive::Mul => Some(2),
            Primitive::LayerNorm { .. } => Some(3),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(AutodiffError::InvalidArgument {
                    op: name,
                    msg: format!("expected {n} inputs, got {}", inputs.len()),
                });
            }
        }
        let requires_grad = self.needs(inputs);
        match prim {
            Primitive::MatMul { transpose_rhs } => {
                let (a, b) = (inputs[0], inputs[1]);
                let sa = self.shape(a).to_vec();
                let sb = self.shape(b).to_vec();
                let mismatch = || AutodiffError::ShapeMismatch {
                    op: name,
                    lhs: sa.clone(),
                    rhs: sb.clone(),
                };
                if sa.len() != 2 || sb.len() != 2 {
                    return Err(mismatch());
                }
                let (m, k) = (sa[0], sa[1]);
                let n = if transpose_rhs {
                    if sb[1] != k {
                        return Err(mismatch());
                    }
                    sb[0]
                } else {
                    if sb[0] != k {
                        return Err(mismatch());
                    }
                    sb[1]
                };
                let mut out = vec![0.0; m * n];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if transpose_rhs {
                    matmul_nt(av, bv, m, k, n, &mut out);
                } else {
                    matmul_nn(av, bv, m, k, n, &mut out);
                }
                let value = Tensor {
                    shape: vec![m, n],
                    data: out,
                };
                Ok(self.push(
                    value,
                    requires_grad,
                    Op::MatMul {
                        a: a.0,
                        b: b.0,
                        transpose_rhs,
                        m,
                        k,
                        n,
                    },
                ))
            }
            Primitive::Add => {
                let (a, b) = (inputs[0], inputs[1]);
                let ta = self.value(a);
                let tb = self.value(b);
                let broadcast = if ta.shape == tb.shape {
                    false
                } else if tb.rows() == 1 && tb.cols() == ta.cols() && ta.shape.len() == 2 {
                    true
                } else {
                    return Err(AutodiffError::ShapeMismatch {
                        op: name,
                        lhs: ta.shape.clone(),
                        rhs: tb.shape.clone(),
                    });
                };
                let mut data = ta.data.clone();
                if broadcast {
                    let c = ta.cols();
                    for row in data.chunks_mut(c) {
                        for (x, y) in row.iter_mut().zip(&tb.data) {
                            *x += y;
                        }
                    }
                } else {
                    for (x, y) in data.iter_mut().zip(&tb.data) {
                        *x += y;
                    }
                }
                let value = Tensor {
                    shape: ta.shape.clone(),
                    data,
                };
                Ok(self.push(
                    value,
                    requires_grad,
                    Op::Add {
                        a: a.0,
                        b: b.0,
                        broadcast,
                    },
                ))
            }
            Primitive::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let ta = self.value(a);
                let tb = self.value(b);
                if ta.shape != tb.shape {
                    return Err(AutodiffError::ShapeMismatch {
                        op: name,
                        lhs: ta.shape.clone(),
                        rhs: tb.shape.clone(),
                    });
                }
                let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
                let value = Tensor {
                    shape: ta.shape.clone(),
                    data,
                };
                Ok(self.push(value, requires_grad, Op::Mul { a: a.0, b: b.0 }))
            }
            Primitive::Scale(factor) => {
                let a = inputs[0];
                let ta = self.value(a);
                let value = Tensor {
                    shape: ta.shape.clone(),
                    data: ta.data.iter().map(|x| x * factor).collect(),
                };
                Ok(self.push(value, requires_grad, Op::Scale { a: a.0, factor }))
            }
            Primitive::Relu => {
                let a = inputs[0];
                let ta = self.value(a);
                let value = Tensor {
                    shape: ta.shape.clone(),
                    data: ta.data.iter().map(|&x| x.max(0.0)).collect(),
                };
                Ok(self.push(value, requires_grad, Op::Relu { a: a.0 }))
            }
            Primitive::Softmax => {
                let a = inputs[0];
                let ta = self.value(a);
                let mut data = ta.data.clone();
                let c = ta.cols();
                if c > 0 {
                    for row in data.chunks_mut(c) {
                        softmax_in_place(row);
                    }
                }
                let value = Tensor {
                    shape: ta.shape.clone(),
                    data,
                };
                Ok(self.push(value, requires_grad, Op::Softmax { a: a.0 }))
            }
            Primitive::LogSoftmax => {
                let a = inputs[0];
                let ta = self.value(a);
                let mut data = ta.data.clone();
                let c = ta.cols();
                if c > 0 {
                    for row in data.chunks_mut(c) {
                        log_softmax_in_place(row);
                    }
                }
                let value = Tensor {
                    shape: ta.shape.clone(),
                    data,
                };
                Ok(self.push(value, requires_grad, Op::LogSoftmax { a: a.0 }))
            }
            Primitive::LayerNorm { eps } => {
                let (x, gain, bias) = (inputs[0], inputs[1], inputs[2]);
                let tx = self.value(x);
                let c = tx.cols();
                let tg = self.value(gain);
                let tb = self.value(bias);
                if tg.numel() != c || tb.numel() != c {
                    return Err(AutodiffError::ShapeMismatch {
                        op: name,
                        lhs: tx.shape.clone(),
                        rhs: tg.shape.clone(),
                    });
                }
                if !(eps > 0.0) {
                    return Err(AutodiffError::InvalidArgument {
                        op: name,
                        msg: format!("eps must be positive, got {eps}"),
                    });
                }
                let rows = tx.rows();
                let mut normed = vec![0.0; tx.numel()];
                let mut inv_std = vec![0.0; rows];
                let mut data = vec![0.0; tx.numel()];
                for r in 0..rows {
                    let row = &tx.data[r * c..(r + 1) * c];
                    let mu = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    inv_std[r] = inv;
                    for j in 0..c {
                        let h = (row[j] - mu) * inv;
                        normed[r * c + j] = h;
                        data[r * c + j] = h * tg.data[j] + tb.data[j];
                    }
                }
                let value = Tensor {
                    shape: tx.shape.clone(),
                    data,
                };
                Ok(self.push(
                    value,
                    requires_grad,
                    Op::LayerNorm {
                        x: x.0,
                        gain: gain.0,
                        bias: bias.0,
                        normed,
                        inv_std,
                    },
                ))
            }
            Primitive::Embedding { ids } => {
                let table = inputs[0];
                let tt = self.value(table);
                if tt.shape.len() != 2 {
                    return Err(AutodiffError::ShapeMismatch {
                        op: name,
                        lhs: tt.shape.clone(),
                        rhs: vec![ids.len()],
                    });
                }
                let (vocab, d) = (tt.shape[0], tt.shape[1]);
                if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
                    return Err(AutodiffError::InvalidArgument {
                        op: name,
                        msg: format!("id {bad} out of range for table with {vocab} rows"),
                    });
                }
                let mut data = Vec::with_capacity(ids.len() * d);
                for &i in &ids {
                    data.extend_from_slice(&tt.data[i * d..(i + 1) * d]);
                }
                let value = Tensor {
                    shape: vec![ids.len(), d],
                    data,
                };
                Ok(self.push(value, requires_grad, Op::Embedding { table: table.0, ids }))
            }
            Primitive::Dropout { rate, seed } => {
                let a = inputs[0];
                if !(0.0..1.0).contains(&rate) {
                    return Err(AutodiffError::InvalidArgument {
                        op: name,
                        msg: format!("rate must lie in [0, 1), got {rate}"),
                    });
                }
                if rate == 0.0 {
                    return Ok(a);
                }
                let ta = self.value(a);
                let keep = 1.0 - rate;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mask: Vec<f64> = (0..ta.numel())
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                let value = Tensor {
                    shape: ta.shape.clone(),
                    data: ta.data.iter().zip(&mask).map(|(x, m)| x * m).collect(),
                };
                Ok(self.push(value, requires_grad, Op::Dropout { a: a.0, mask }))
            }
            Primitive::Concat { axis } => {
                if inputs.is_empty() || axis > 1 {
                    return Err(AutodiffError::InvalidArgument {
                        op: name,
                        msg: format!("need at least one input and axis 0 or 1 (axis {axis})"),
                    });
                }
                let first = self.shape(inputs[0]).to_vec();
                if first.len() != 2 {
                    return Err(AutodiffError::ShapeMismatch {
                        op: name,
                        lhs: first.clone(),
                        rhs: first,
                    });
                }
                for v in &inputs[1..] {
                    let s = self.shape(*v);
                    if s.len() != 2 || s[1 - axis] != first[1 - axis] {
                        return Err(AutodiffError::ShapeMismatch {
                            op: name,
                            lhs: first,
                            rhs: s.to_vec(),
                        });
                    }
                }
                let value = if axis == 0 {
                    let rows = inputs.iter().map(|v| self.shape(*v)[0]).sum();
                    let mut data = Vec::with_capacity(rows * first[1]);
                    for v in inputs {
                        data.extend_from_slice(self.value(*v).data());
                    }
                    Tensor {
                        shape: vec![rows, first[1]],
                        data,
                    }
                } else {
                    let rows = first[0];
                    let cols: usize = inputs.iter().map(|v| self.shape(*v)[1]).sum();
                    let mut data = Vec::with_capacity(rows * cols);
                    for r in 0..rows {
                        for v in inputs {
                            data.extend_from_slice(self.value(*v).row(r));
                        }
                    }
                    Tensor {
                        shape: vec![rows, cols],
                        data,
                    }
                };
                let ids = inputs.iter().map(|v| v.0).collect();
                Ok(self.push(value, requires_grad, Op::Concat { inputs: ids, axis }))
            }
            Primitive::Mean | Primitive::Sum => {
                let a = inputs[0];
                let ta = self.value(a);
                if ta.numel() == 0 {
                    return Err(AutodiffError::InvalidArgument {
                        op: name,
                        msg: "empty tensor".into(),
                    });
                }
                let total: f64 = ta.data.iter().sum();
                if matches!(prim, Primitive::Mean) {
                    let n = ta.numel() as f64;
                    Ok(self.push(Tensor::scalar(total / n), requires_grad, Op::Mean { a: a.0 }))
                } else {
                    Ok(self.push(Tensor::scalar(total), requires_grad, Op::Sum { a: a.0 }))
                }
            }
            Primitive::SliceRows { start, end } => {
                let a = inputs[0];
                let ta = self.value(a);
                if ta.shape.len() != 2 || start >= end || end > ta.shape[0] {
                    return Err(AutodiffError::InvalidArgument {
                        op: name,
                        msg: format!("rows {start}..{end} of shape {:?}", ta.shape),
                    });
                }
                let c = ta.shape[1];
                let value = Tensor {
                    shape: vec![end - start, c],
                    data: ta.data[start * c..end * c].to_vec(),
                };
                Ok(self.push(value, requires_grad, Op::SliceRows { a: a.0, start }))
            }
            Primitive::SliceCols { start, end } => {
                let a = inputs[0];
                let ta = self.value(a);
                if ta.shape.len() != 2 || start >= end || end > ta.shape[1] {
                    return Err(AutodiffError::InvalidArgument {
                        op: name,
                        msg: format!("cols {start}..{end} of shape {:?}", ta.shape),
                    });
                }
                let rows = ta.shape[0];
                let mut data = Vec::with_capacity(rows * (end - start));
                for r in 0..rows {
                    data.extend_from_slice(&ta.row(r)[start..end]);
                }
                let value = Tensor {
                    shape: vec![rows, end - start],
                    data,
                };
                Ok(self.push(value, requires_grad, Op::SliceCols { a: a.0, start }))
            }
        }
    }

    /// Back-propagates from the scalar `loss` into every node it depends on.
    ///
    /// Gradients accumulate; call [`Tape::zero_grad`] to start over.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads = Grads {
            nodes: &self.nodes,
            grads: &mut self.grads,
        };
        grads.accumulate(loss.0, |g| g[0] += 1.0);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            let mut grads = Grads {
                nodes: &self.nodes,
                grads: &mut self.grads,
            };
            propagate(&mut grads, &self.nodes[id], &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }
}

struct Grads<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl Grads<'_> {
    fn requires(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn value(&self, id: usize) -> &Tensor {
        &self.nodes[id].value
    }

    fn accumulate(&mut self, id: usize, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[id];
        if !node.requires_grad {
            return;
        }
        let n = node.value.numel();
        let g = self.grads[id].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }
}

fn propagate(nodes: &mut Grads<'_>, node: &Node, g: &[f64]) {
    let all = nodes.nodes;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            transpose_rhs,
            m,
            k,
            n,
        } => {
            if nodes.requires(a) {
                let bv = &all[b].value.data;
                nodes.accumulate(a, |ga| {
                    // dA = dC @ Bᵀ, or dC @ B when B was transposed
                    if transpose_rhs {
                        matmul_nn(g, bv, m, n, k, ga);
                    } else {
                        matmul_nt_acc(g, bv, m, n, k, ga);
                    }
                });
            }
            if nodes.requires(b) {
                let av = &all[a].value.data;
                nodes.accumulate(b, |gb| {
                    if transpose_rhs {
                        // dB[j, :] += dC[i, j] * A[i, :]
                        for i in 0..m {
                            let arow = &av[i * k..(i + 1) * k];
                            for j in 0..n {
                                let s = g[i * n + j];
                                if s != 0.0 {
                                    let brow = &mut gb[j * k..(j + 1) * k];
                                    for (x, y) in brow.iter_mut().zip(arow) {
                                        *x += s * y;
                                    }
                                }
                            }
                        }
                    } else {
                        // dB[p, :] += A[i, p] * dC[i, :]
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let s = av[i * k + p];
                                if s != 0.0 {
                                    let brow = &mut gb[p * n..(p + 1) * n];
                                    for (x, y) in brow.iter_mut().zip(grow) {
                                        *x += s * y;
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
        &Op::Add { a, b, broadcast } => {
            nodes.accumulate(a, |ga| add_assign(ga, g));
            if broadcast {
                let c = nodes.value(b).numel();
                nodes.accumulate(b, |gb| {
                    for row in g.chunks(c) {
                        add_assign(gb, row);
                    }
                });
            } else {
                nodes.accumulate(b, |gb| add_assign(gb, g));
            }
        }
        &Op::Mul { a, b } => {
            if nodes.requires(a) {
                let bv = &all[b].value.data;
                nodes.accumulate(a, |ga| {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv.iter()) {
                        *x += gi * bi;
                    }
                });
            }
            if nodes.requires(b) {
                let av = &all[a].value.data;
                nodes.accumulate(b, |gb| {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av.iter()) {
                        *x += gi * ai;
                    }
                });
            }
        }
        &Op::Scale { a, factor } => nodes.accumulate(a, |ga| {
            for (x, gi) in ga.iter_mut().zip(g) {
                *x += factor * gi;
            }
        }),
        &Op::Relu { a } => {
            let out = &node.value.data;
            nodes.accumulate(a, |ga| {
                for ((x, gi), o) in ga.iter_mut().zip(g).zip(out) {
                    if *o > 0.0 {
                        *x += gi;
                    }
                }
            })
        }
        &Op::Softmax { a } => {
            let y = &node.value.data;
            let c = node.value.cols();
            nodes.accumulate(a, |ga| {
                for ((gr, yr), dr) in ga.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                    for ((x, p), d) in gr.iter_mut().zip(yr).zip(dr) {
                        *x += p * (d - dot);
                    }
                }
            })
        }
        &Op::LogSoftmax { a } => {
            let y = &node.value.data;
            let c = node.value.cols();
            nodes.accumulate(a, |ga| {
                for ((gr, yr), dr) in ga.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                    let total: f64 = dr.iter().sum();
                    for ((x, lp), d) in gr.iter_mut().zip(yr).zip(dr) {
                        *x += d - lp.exp() * total;
                    }
                }
            })
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normed,
            inv_std,
        } => {
            let (x, gain, bias) = (*x, *gain, *bias);
            let c = node.value.cols();
            nodes.accumulate(bias, |gb| {
                for row in g.chunks(c) {
                    add_assign(gb, row);
                }
            });
            nodes.accumulate(gain, |gg| {
                for (row, hrow) in g.chunks(c).zip(normed.chunks(c)) {
                    for ((x, d), h) in gg.iter_mut().zip(row).zip(hrow) {
                        *x += d * h;
                    }
                }
            });
            if nodes.requires(x) {
                let gv = &all[gain].value.data;
                nodes.accumulate(x, |gx| {
                    let cf = c as f64;
                    for (r, inv) in inv_std.iter().enumerate() {
                        let d = &g[r * c..(r + 1) * c];
                        let h = &normed[r * c..(r + 1) * c];
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..c {
                            let dh = d[j] * gv[j];
                            sum_dh += dh;
                            sum_dh_h += dh * h[j];
                        }
                        let out = &mut gx[r * c..(r + 1) * c];
                        for j in 0..c {
                            let dh = d[j] * gv[j];
                            out[j] += inv / cf * (cf * dh - sum_dh - h[j] * sum_dh_h);
                        }
                    }
                });
            }
        }
        Op::Embedding { table, ids } => {
            let d = node.value.cols();
            nodes.accumulate(*table, |gt| {
                for (r, &i) in ids.iter().enumerate() {
                    add_assign(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                }
            })
        }
        Op::Dropout { a, mask } => nodes.accumulate(*a, |ga| {
            for ((x, gi), m) in ga.iter_mut().zip(g).zip(mask) {
                *x += gi * m;
            }
        }),
        Op::Concat { inputs, axis } => {
            let total_cols = node.value.cols();
            let mut offset = 0;
            for &id in inputs {
                let shape = nodes.value(id).shape.clone();
                let (r, c) = (shape[0], shape[1]);
                if *axis == 0 {
                    nodes.accumulate(id, |gi| add_assign(gi, &g[offset * c..(offset + r) * c]));
                    offset += r;
                } else {
                    nodes.accumulate(id, |gi| {
                        for row in 0..r {
                            let src = &g[row * total_cols + offset..row * total_cols + offset + c];
                            add_assign(&mut gi[row * c..(row + 1) * c], src);
                        }
                    });
                    offset += c;
                }
            }
        }
        &Op::Mean { a } => {
            let n = nodes.value(a).numel() as f64;
            let s = g[0] / n;
            nodes.accumulate(a, |ga| ga.iter_mut().for_each(|x| *x += s));
        }
        &Op::Sum { a } => {
            let s = g[0];
            nodes.accumulate(a, |ga| ga.iter_mut().for_each(|x| *x += s));
        }
        &Op::SliceRows { a, start } => {
            let c = node.value.cols();
            nodes.accumulate(a, |ga| add_assign(&mut ga[start * c..start * c + g.len()], g));
        }
        &Op::SliceCols { a, start } => {
            let width = node.value.cols();
            let c = nodes.value(a).cols();
            nodes.accumulate(a, |ga| {
                for (r, row) in g.chunks(width).enumerate() {
                    add_assign(&mut ga[r * c + start..r * c + start + width], row);
                }
            })
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (x, y) in dst.iter_mut().zip(src) {
        *x += y;
    }
}

/// out[m×n] += a[m×k] @ b[k×n]
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
}

/// out[m×n] = a[m×k] @ b[n×k]ᵀ
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
}

fn matmul_nt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators let the compiler vectorize the reduction
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        total += a[i] * b[i];
    }
    total
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Loads every parameter onto `tape` as a trainable leaf.
    pub fn load(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }
}

/// Adam hyperparameters together with the inverse square-root schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay: `p -= lr_t * weight_decay * p` each step.
    pub weight_decay: f64,
    /// Linear warmup length in updates. Zero means a constant rate of `lr`.
    pub warmup_updates: u64,
    pub warmup_init_lr: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_updates: 4000,
            warmup_init_lr: 1e-7,
        }
    }
}

impl AdamConfig {
    /// Learning rate used for the `step`-th update (1-based).
    ///
    /// The rate rises linearly from `warmup_init_lr` over `warmup_updates`
    /// completed updates and then decays with the inverse square root of the
    /// update count.
    pub fn learning_rate(&self, step: u64) -> f64 {
        if self.warmup_updates == 0 {
            return self.lr;
        }
        let done = step.saturating_sub(1);
        let w = self.warmup_updates as f64;
        if done < self.warmup_updates {
            self.warmup_init_lr + done as f64 * (self.lr - self.warmup_init_lr) / w
        } else {
            self.lr * w.sqrt() / (done as f64).sqrt()
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    /// Number of completed steps.
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, i: usize) -> &[f64] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[f64] {
        &self.v[i]
    }
}

/// One bias-corrected Adam update of `params` with `grads`.
///
/// Fails before touching any parameter if a gradient is not finite.
pub fn adam_step(params: &mut Params, grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() {
        return Err(AutodiffError::InvalidArgument {
            op: "adam",
            msg: format!("{} gradients for {} parameters", grads.len(), params.len()),
        });
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.get(i).shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adam",
                lhs: params.get(i).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if let Some(index) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(AutodiffError::NonFiniteGradient {
                name: params.name(i).to_string(),
                index,
            });
        }
    }
    state.t += 1;
    let cfg = &state.config;
    let lr = cfg.learning_rate(state.t);
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, g) in grads.iter().enumerate() {
        let p = params.get_mut(i).data_mut();
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for j in 0..p.len() {
            let gj = g.data[j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            if cfg.weight_decay != 0.0 {
                p[j] -= lr * cfg.weight_decay * p[j];
            }
            p[j] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares analytic gradients against central differences.
///
/// `loss_fn` receives a fresh tape and the parameters loaded onto it and must
/// return a scalar. At most `max_coords` coordinates per parameter are probed
/// (all of them when the tensor is smaller), chosen with `seed`. Returns the
/// largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`. The
/// floor keeps roundoff in the differences of gradients that are exactly
/// zero (around `1e-11` for unit-scale losses) from reading as large
/// relative errors.
pub fn grad_check<F>(mut loss_fn: F, params: &[Tensor], eps_fd: f64, max_coords: usize, seed: u64) -> Result<f64>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(AutodiffError::NonFiniteLoss(v));
        }
        tape.backward(loss)?;
        vars.iter().map(|&v| tape.grad(v)).collect()
    };

    let mut eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(AutodiffError::NonFiniteLoss(v));
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, param) in params.iter().enumerate() {
        let n = param.numel();
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, max_coords).into_vec()
        };
        for c in coords {
            let orig = param.data[c];
            work[pi].data[c] = orig + eps_fd;
            let up = eval(&work)?;
            work[pi].data[c] = orig - eps_fd;
            let down = eval(&work)?;
            work[pi].data[c] = orig;
            let numeric = (up - down) / (2.0 * eps_fd);
            let a = analytic[pi].data[c];
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul_returns_rhs() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let a = tape.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.5, 0.25, 7.0, -1.0]).unwrap());
        let out = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(out), tape.value(a));
    }

    #[test]
    fn log_softmax_rows_exponentiate_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.log_softmax(x).unwrap();
        let total: f64 = tape.value(y).data().iter().map(|v| v.exp()).sum();
        assert!(close(total, 1.0, 1e-9));
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1e4, -1e4, 0.0, -1e4, -1e4, 1e4]).unwrap());
        let s = tape.softmax(x).unwrap();
        let l = tape.log_softmax(x).unwrap();
        assert!(tape.value(s).data().iter().all(|v| v.is_finite()));
        assert!(tape.value(l).data().iter().all(|v| v.is_finite()));
        for r in 0..2 {
            let total: f64 = tape.value(s).row(r).iter().sum();
            assert!(close(total, 1.0, 1e-9));
        }
    }

    #[test]
    fn matmul_shape_error_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn log_softmax_pick_gradient_is_softmax_minus_onehot() {
        let logits = vec![0.3, -1.2, 2.0, 0.7];
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(1, 4, logits.clone()).unwrap());
        let lp = tape.log_softmax(x).unwrap();
        let pick = tape.constant(Tensor::matrix(1, 4, vec![0.0, 0.0, -1.0, 0.0]).unwrap());
        let prod = tape.mul(lp, pick).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        let mut p = logits.clone();
        softmax_in_place(&mut p);
        p[2] -= 1.0;
        for (g, e) in tape.grad(x).data().iter().zip(&p) {
            assert!(close(*g, *e, 1e-12));
        }
        // and by central differences
        let f = |z: &[f64]| {
            let mut r = z.to_vec();
            log_softmax_in_place(&mut r);
            -r[2]
        };
        for c in 0..4 {
            let mut up = logits.clone();
            let mut dn = logits.clone();
            up[c] += 1e-6;
            dn[c] -= 1e-6;
            let fd = (f(&up) - f(&dn)) / 2e-6;
            assert!(close(fd, p[c], 1e-8));
        }
    }

    #[test]
    fn repeated_backward_after_reset_is_deterministic() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::matrix(2, 2, vec![0.5, -1.0, 2.0, 0.1]).unwrap());
        let s = tape.softmax(w).unwrap();
        let l = tape.log_softmax(s).unwrap();
        let loss = tape.mean(l).unwrap();
        tape.backward(loss).unwrap();
        let first = tape.grad(w);
        tape.zero_grad();
        tape.backward(loss).unwrap();
        assert_eq!(first, tape.grad(w));
    }

    #[test]
    fn unreachable_nodes_get_zero_grad() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let b = tape.param(Tensor::new(vec![3], vec![4.0, 5.0, 6.0]).unwrap());
        let loss = tape.sum(a).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(vec![2]));
        assert!(matches!(tape.backward(a), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn dropout_rate_validated_and_seeded() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::new(vec![64], vec![1.0; 64]).unwrap());
        assert!(tape.dropout(a, 1.0, 0).is_err());
        let d1 = tape.dropout(a, 0.5, 9).unwrap();
        let d2 = tape.dropout(a, 0.5, 9).unwrap();
        assert_eq!(tape.value(d1), tape.value(d2));
        assert!(tape.value(d1).data().iter().all(|&v| v == 0.0 || v == 2.0));
        assert_eq!(tape.dropout(a, 0.0, 3).unwrap(), a);
    }

    #[test]
    fn zero_gradient_only_applies_decay() {
        let mut params = Params::new();
        params.push("w", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let mut cfg = AdamConfig {
            warmup_updates: 0,
            ..AdamConfig::default()
        };
        cfg.weight_decay = 0.0;
        let mut state = AdamState::new(cfg.clone(), &params);
        adam_step(&mut params, &[Tensor::zeros(vec![2])], &mut state).unwrap();
        assert_eq!(params.get(0).data(), &[1.0, -2.0]);

        cfg.weight_decay = 0.1;
        let mut state = AdamState::new(cfg, &params);
        adam_step(&mut params, &[Tensor::zeros(vec![2])], &mut state).unwrap();
        assert!(close(params.get(0).data()[0], 1.0 - 1e-3 * 0.1, 1e-15));
    }

    #[test]
    fn first_adam_step_moves_by_lr_times_sign() {
        // m̂ = g and v̂ = g² after one step, so the update is -lr·g/(|g|+eps)
        for g in [0.37, -5.0, 1e-3] {
            let mut params = Params::new();
            params.push("w", Tensor::scalar(0.0));
            let cfg = AdamConfig {
                warmup_updates: 0,
                weight_decay: 0.0,
                ..AdamConfig::default()
            };
            let lr = cfg.lr;
            let mut state = AdamState::new(cfg, &params);
            adam_step(&mut params, &[Tensor::scalar(g)], &mut state).unwrap();
            let expected = -lr * g.signum();
            assert!(close(params.get(0).item(), expected, 1e-6));
            assert!(((params.get(0).item() - expected) / lr).abs() < 1e-4);
            assert_eq!(state.t, 1);
        }
    }

    #[test]
    fn warmup_starts_near_init_and_rises() {
        let cfg = AdamConfig::default();
        assert!(close(cfg.learning_rate(1), 1e-7, 1e-12));
        let mut prev = 0.0;
        for step in 1..=4001 {
            let lr = cfg.learning_rate(step);
            assert!(lr > prev, "not rising at {step}");
            prev = lr;
        }
        assert!(close(cfg.learning_rate(4001), 1e-3, 1e-12));
        assert!(cfg.learning_rate(8001) < cfg.learning_rate(4001));
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut params = Params::new();
        params.push("encoder.w", Tensor::zeros(vec![3]));
        let mut state = AdamState::new(AdamConfig::default(), &params);
        let g = Tensor::new(vec![3], vec![0.0, f64::NAN, 0.0]).unwrap();
        let err = adam_step(&mut params, &[g], &mut state).unwrap_err();
        assert!(err.to_string().contains("encoder.w"));
        assert_eq!(state.t, 0);
    }

    #[test]
    fn grad_check_quadratic() {
        let w = Tensor::new(vec![3], vec![0.5, -1.5, 2.0]).unwrap();
        let err = grad_check(
            |tape, vars| {
                let sq = tape.mul(vars[0], vars[0])?;
                tape.sum(sq)
            },
            &[w],
            1e-5,
            100,
            0,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn grad_check_rejects_non_finite_loss() {
        let w = Tensor::new(vec![1], vec![f64::INFINITY]).unwrap();
        let res = grad_check(|tape, vars| tape.sum(vars[0]), &[w], 1e-5, 10, 0);
        assert!(matches!(res, Err(AutodiffError::NonFiniteLoss(_))));
    }
}
