use super::{DType, ParamId, ParamStore, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Neg,
    Relu,
    Sigmoid,
    Log,
    Exp,
    Abs,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Binary(Binary, Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Unary, Var),
    PowAbs(Var, f64),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// Ordered record of executed ops. Nodes are appended as ops run, so the
/// vector is already in topological order and backward is a reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as a leaf. A trainable input (`grad` present) becomes a
    /// gradient sink; its incoming gradient is reset to zero on the graph copy.
    pub fn input(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.zero_grad();
        self.push_node(value, Op::Leaf, None)
    }

    /// Records a non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t.detached(), Op::Leaf, None)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Records a parameter from `store` as a trainable leaf tied to `id`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).detached().requires_grad();
        self.push_node(value, Op::Leaf, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.is_trainable()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    /// Parameter leaves with their accumulated gradients.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.value.grad()?)))
    }

    fn push_node(&mut self, value: Tensor, op: Op, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, op, param });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        dims: Vec<usize>,
        mut data: Vec<f64>,
        inputs: &[Var],
        op: Op,
    ) -> Result<Var, TensorError> {
        let dtype = inputs
            .iter()
            .map(|v| self.nodes[v.0].value.dtype())
            .fold(DType::F64, DType::join);
        if dtype == DType::F32 {
            data.iter_mut().for_each(|v| *v = dtype.round(*v));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let mut value = Tensor::with_dtype(dims, data, dtype)?;
        if inputs.iter().any(|v| self.requires_grad(*v)) {
            value = value.requires_grad();
        }
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        Ok(self.push_node(value, op, None))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize), TensorError> {
        match self.dims(v) {
            [m, n] => Ok((*m, *n)),
            d => Err(TensorError::DimMismatch {
                op,
                lhs: d.to_vec(),
                rhs: vec![],
            }),
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let out = matmul_nn(self.data(a), self.data(b), m, k, n);
        self.push("matmul", vec![m, n], out, &[a, b], Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.matrix_dims("transpose", a)?;
        let out = transpose(self.data(a), m, n);
        self.push("transpose", vec![n, m], out, &[a], Op::Transpose(a))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, TensorError> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Min => "minimum",
            Binary::Max => "maximum",
        };
        let out_dims = broadcast_dims(name, self.dims(a), self.dims(b))?;
        let (xa, xb) = (self.data(a), self.data(b));
        let n = out_dims.iter().product::<usize>();
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
            Binary::Min => x.min(y),
            Binary::Max => x.max(y),
        };
        let out = (0..n)
            .map(|i| f(xa[i % xa.len()], xb[i % xb.len()]))
            .collect();
        self.push(name, out_dims, out, &[a, b], Op::Binary(kind, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Div, a, b)
    }

    /// Elementwise minimum; on ties the gradient flows to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Min, a, b)
    }

    /// Elementwise maximum; on ties the gradient flows to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Max, a, b)
    }

    /// `x[m×n] + row[n]`, the row added to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, TensorError> {
        let (m, n) = self.matrix_dims("add_row", x)?;
        if self.value(row).numel() != n || self.value(row).rank() > 1 {
            return Err(TensorError::DimMismatch {
                op: "add_row",
                lhs: vec![m, n],
                rhs: self.dims(row).to_vec(),
            });
        }
        let r = self.data(row);
        let out = self
            .data(x)
            .chunks(n)
            .flat_map(|xr| xr.iter().zip(r).map(|(a, b)| a + b))
            .collect();
        self.push("add_row", vec![m, n], out, &[x, row], Op::AddRow(x, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let out = self.data(a).iter().map(|v| v * s).collect();
        let dims = self.dims(a).to_vec();
        self.push("scale", dims, out, &[a], Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let out = self.data(a).iter().map(|v| v + s).collect();
        let dims = self.dims(a).to_vec();
        self.push("add_scalar", dims, out, &[a], Op::AddScalar(a))
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var, TensorError> {
        let name = match kind {
            Unary::Neg => "neg",
            Unary::Relu => "relu",
            Unary::Sigmoid => "sigmoid",
            Unary::Log => "log",
            Unary::Exp => "exp",
            Unary::Abs => "abs",
        };
        if kind == Unary::Log && self.data(a).iter().any(|&v| v <= 0.0) {
            return Err(TensorError::DomainError { op: name });
        }
        let out = self
            .data(a)
            .iter()
            .map(|&v| match kind {
                Unary::Neg => -v,
                Unary::Relu => v.max(0.0),
                Unary::Sigmoid => sigmoid(v),
                Unary::Log => v.ln(),
                Unary::Exp => v.exp(),
                Unary::Abs => v.abs(),
            })
            .collect();
        let dims = self.dims(a).to_vec();
        self.push(name, dims, out, &[a], Op::Unary(kind, a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Neg, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Sigmoid, a)
    }

    /// Natural log; fails with `DomainError` on any value `<= 0`.
    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Log, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Exp, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Abs, a)
    }

    /// `|a|^p` for `p >= 1`.
    pub fn pow_abs(&mut self, a: Var, p: f64) -> Result<Var, TensorError> {
        if p < 1.0 {
            return Err(TensorError::DomainError { op: "pow_abs" });
        }
        let out = self.data(a).iter().map(|v| v.abs().powf(p)).collect();
        let dims = self.dims(a).to_vec();
        self.push("pow_abs", dims, out, &[a], Op::PowAbs(a, p))
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        let out = self.data(a).iter().map(|v| v.clamp(lo, hi)).collect();
        let dims = self.dims(a).to_vec();
        self.push("clamp", dims, out, &[a], Op::Clamp(a, lo, hi))
    }

    // ---- row-wise -------------------------------------------------------

    /// Row softmax with max-subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = self.matrix_dims("softmax_rows", a)?;
        let x = self.data(a);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut out = Vec::with_capacity(m * n);
        for row in x.chunks(n) {
            out.extend(softmax(row));
        }
        self.push("softmax_rows", vec![m, n], out, &[a], Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with learned `gain[n]` and `bias[n]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = self.matrix_dims("layer_norm", x)?;
        for p in [gain, bias] {
            if self.value(p).numel() != n {
                return Err(TensorError::DimMismatch {
                    op: "layer_norm",
                    lhs: vec![m, n],
                    rhs: self.dims(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let mut xhat = Vec::with_capacity(m * n);
        let mut rstd = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in self.data(x).chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.push(
            "layer_norm",
            vec![m, n],
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    // ---- reductions and structure ---------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.data(a).iter().sum();
        self.push("sum", vec![], vec![s], &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.data(a);
        let s = x.iter().sum::<f64>() / x.len() as f64;
        self.push("mean", vec![], vec![s], &[a], Op::Mean(a))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (m, n) = self.matrix_dims("slice_cols", a)?;
        if len == 0 || start + len > n {
            return Err(TensorError::DimMismatch {
                op: "slice_cols",
                lhs: vec![m, n],
                rhs: vec![start, len],
            });
        }
        let out = self
            .data(a)
            .chunks(n)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        self.push("slice_cols", vec![m, len], out, &[a], Op::SliceCols { x: a, start })
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts.first().ok_or(TensorError::BadShape {
            dims: vec![],
            len: 0,
        })?;
        let (m, _) = self.matrix_dims("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.matrix_dims("concat_cols", p)?;
            if pm != m {
                return Err(TensorError::DimMismatch {
                    op: "concat_cols",
                    lhs: vec![m],
                    rhs: vec![pm, pn],
                });
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        self.push("concat_cols", vec![m, total], out, parts, Op::ConcatCols(parts.to_vec()))
    }

    /// Rows of a 2-D tensor picked by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let (m, n) = self.matrix_dims("gather_rows", a)?;
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(TensorError::DimMismatch {
                op: "gather_rows",
                lhs: vec![m, n],
                rhs: rows.to_vec(),
            });
        }
        let x = self.data(a);
        let out = rows
            .iter()
            .flat_map(|&r| x[r * n..(r + 1) * n].iter().copied())
            .collect();
        self.push(
            "gather_rows",
            vec![rows.len(), n],
            out,
            &[a],
            Op::GatherRows(a, rows.to_vec()),
        )
    }

    pub fn reshape(&mut self, a: Var, dims: Vec<usize>) -> Result<Var, TensorError> {
        let x = self.data(a).to_vec();
        if dims.iter().product::<usize>() != x.len() {
            return Err(TensorError::DimMismatch {
                op: "reshape",
                lhs: self.dims(a).to_vec(),
                rhs: dims,
            });
        }
        self.push("reshape", dims, x, &[a], Op::Reshape(a))
    }

    /// Column `j` of a 2-D tensor as a 1-D tensor.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var, TensorError> {
        let c = self.slice_cols(a, j, 1)?;
        let m = self.dims(c)[0];
        self.reshape(c, vec![m])
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a single-element `loss`. Gradients are added to the
    /// accumulator of every trainable node, so repeated calls accumulate until
    /// [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(TensorError::NotScalar(root.dims().to_vec()));
        }
        if !root.is_trainable() {
            return Err(TensorError::DisconnectedGraph);
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if let Some(acc) = self.nodes[i].value.grad_mut() {
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
            self.propagate(i, &g, &mut pending);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut send = |v: Var, contribution: Vec<f64>| {
            if !self.requires_grad(v) {
                return;
            }
            match &mut pending[v.0] {
                Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.dims(*a)[0], self.dims(*a)[1]);
                let n = self.dims(*b)[1];
                if self.requires_grad(*a) {
                    send(*a, matmul_nt(g, self.data(*b), m, n, k));
                }
                if self.requires_grad(*b) {
                    send(*b, matmul_tn(self.data(*a), g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.dims(*a)[0], self.dims(*a)[1]);
                send(*a, transpose(g, n, m));
            }
            Op::Binary(kind, a, b) => {
                let (xa, xb) = (self.data(*a), self.data(*b));
                let (na, nb) = (xa.len(), xb.len());
                let mut ga = vec![0.0; na];
                let mut gb = vec![0.0; nb];
                for (idx, &gi) in g.iter().enumerate() {
                    let (u, v) = (xa[idx % na], xb[idx % nb]);
                    let (da, db) = match kind {
                        Binary::Add => (1.0, 1.0),
                        Binary::Sub => (1.0, -1.0),
                        Binary::Mul => (v, u),
                        Binary::Div => (1.0 / v, -u / (v * v)),
                        Binary::Min => {
                            if u <= v {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                        Binary::Max => {
                            if u >= v {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                    };
                    ga[idx % na] += gi * da;
                    gb[idx % nb] += gi * db;
                }
                send(*a, ga);
                send(*b, gb);
            }
            Op::AddRow(x, row) => {
                let n = self.value(*row).numel();
                let mut gr = vec![0.0; n];
                for chunk in g.chunks(n) {
                    gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                send(*x, g.to_vec());
                send(*row, gr);
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(a) => send(*a, g.to_vec()),
            Op::Unary(kind, a) => {
                let x = self.data(*a);
                let d = g
                    .iter()
                    .zip(x)
                    .zip(y)
                    .map(|((gi, &xi), &yi)| {
                        gi * match kind {
                            Unary::Neg => -1.0,
                            Unary::Relu => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => yi * (1.0 - yi),
                            Unary::Log => 1.0 / xi,
                            Unary::Exp => yi,
                            Unary::Abs => xi.signum() * (xi != 0.0) as u8 as f64,
                        }
                    })
                    .collect();
                send(*a, d);
            }
            Op::PowAbs(a, p) => {
                let d = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(gi, &xi)| {
                        if xi == 0.0 {
                            0.0
                        } else {
                            gi * p * xi.abs().powf(p - 1.0) * xi.signum()
                        }
                    })
                    .collect();
                send(*a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let d = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(gi, &xi)| if xi < *lo || xi > *hi { 0.0 } else { *gi })
                    .collect();
                send(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let n = self.dims(*a)[1];
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(y.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    d.extend(gr.iter().zip(yr).map(|(gi, yi)| yi * (gi - dot)));
                }
                send(*a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.dims(*x)[1];
                let gw = self.data(*gain);
                let mut dx = Vec::with_capacity(g.len());
                let mut dgain = vec![0.0; n];
                let mut dbias = vec![0.0; n];
                for ((gr, hr), r) in g.chunks(n).zip(xhat.chunks(n)).zip(rstd) {
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..n {
                        let dh = gr[j] * gw[j];
                        mean_d += dh;
                        mean_dh += dh * hr[j];
                        dgain[j] += gr[j] * hr[j];
                        dbias[j] += gr[j];
                    }
                    mean_d /= n as f64;
                    mean_dh /= n as f64;
                    for j in 0..n {
                        let dh = gr[j] * gw[j];
                        dx.push(r * (dh - mean_d - hr[j] * mean_dh));
                    }
                }
                send(*x, dx);
                send(*gain, dgain);
                send(*bias, dbias);
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                send(*a, vec![g[0] / n as f64; n]);
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (self.dims(*x)[0], self.dims(*x)[1]);
                let len = node.value.dims()[1];
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                send(*x, d);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.dims()[1];
                let mut off = 0;
                for &p in parts {
                    let (m, w) = (self.dims(p)[0], self.dims(p)[1]);
                    let d = (0..m)
                        .flat_map(|i| g[i * total + off..i * total + off + w].iter().copied())
                        .collect();
                    send(p, d);
                    off += w;
                }
            }
            Op::GatherRows(a, rows) => {
                let n = self.dims(*a)[1];
                let mut d = vec![0.0; self.value(*a).numel()];
                for (k, &r) in rows.iter().enumerate() {
                    d[r * n..(r + 1) * n]
                        .iter_mut()
                        .zip(&g[k * n..(k + 1) * n])
                        .for_each(|(a, b)| *a += b);
                }
                send(*a, d);
            }
            Op::Reshape(a) => send(*a, g.to_vec()),
        }
    }
}

fn broadcast_dims(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    let (na, nb) = (a.iter().product::<usize>(), b.iter().product::<usize>());
    if a == b || nb == 1 {
        Ok(a.to_vec())
    } else if na == 1 {
        Ok(b.to_vec())
    } else {
        Err(TensorError::DimMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a[m×n] · b[k×n]ᵀ`
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            out[i * k + j] = arow.iter().zip(&b[j * n..(j + 1) * n]).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[m×k]ᵀ · b[m×n]`, with `a` stored row-major as `[m×k]`.
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let api = a[i * k + p];
            if api == 0.0 {
                continue;
            }
            for (o, &bv) in out[p * n..(p + 1) * n].iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(dims, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![3, 2], vec![1., 2., 3., 4., 5., 6.]));
        let i = g.constant(Tensor::identity(3));
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.data(y), g.data(x));

        let a = g.constant(t(vec![2, 2], vec![1., 2., 3., 4.]));
        let b = g.constant(t(vec![2, 1], vec![1., 1.]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.dims(c), &[2, 1]);
        assert_eq!(g.data(c), &[3., 7.]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::DimMismatch { .. })));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![2, 2], vec![0.0, 3f64.ln(), 5.0, 5.0]));
        let s = g.softmax_rows(x).unwrap();
        let y = g.data(s);
        assert!((y[0] - 0.25).abs() < 1e-15);
        assert!((y[1] - 0.75).abs() < 1e-15);
        assert_eq!(&y[2..], &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![1, 2], vec![f64::NAN, 0.0]));
        assert_eq!(g.softmax_rows(x), Err(TensorError::NonFinite { op: "softmax_rows" }));
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let x = g.constant(t(vec![2], vec![-2.0, 3.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.data(r), &[0.0, 3.0]);
        let z = g.scalar(0.0);
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.item(s), 0.5);
        assert_eq!(g.log(x), Err(TensorError::DomainError { op: "log" }));
    }

    #[test]
    fn scalar_broadcast_only() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![3]));
        assert!(g.add(a, b).is_err());
        let s = g.scalar(2.0);
        let c = g.add(a, s).unwrap();
        assert_eq!(g.data(c), &[2.0; 6]);
    }

    #[test]
    fn backward_sum_and_square() {
        let mut g = Graph::new();
        let w = g.input(&t(vec![2], vec![1.0, 2.0]).requires_grad());
        let l = g.sum(w).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0]);

        let mut g = Graph::new();
        let w = g.input(&t(vec![2], vec![1.0, 2.0]).requires_grad());
        let sq = g.mul(w, w).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
        // repeated calls accumulate
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[4.0, 8.0]);
        g.zero_grad();
        g.backward(l).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let w = g.input(&Tensor::zeros(vec![2]).requires_grad());
        assert_eq!(g.backward(w), Err(TensorError::NotScalar(vec![2])));
        let c = g.constant(Tensor::zeros(vec![2]));
        let l = g.sum(c).unwrap();
        assert_eq!(g.backward(l), Err(TensorError::DisconnectedGraph));
    }

    #[test]
    fn f32_propagates_and_rounds() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::with_dtype(vec![1], vec![1.0], DType::F32).unwrap());
        let b = g.constant(t(vec![1], vec![0.1]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).dtype(), DType::F32);
        assert_eq!(g.item(c), (1.1f64) as f32 as f64);
    }
}
