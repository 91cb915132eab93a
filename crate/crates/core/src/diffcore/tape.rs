//! Tape recording and the reverse sweep.
//!
//! Every primitive appends one node holding its forward value. `backward`
//! walks the nodes from the loss down to index 0, which is a reverse
//! topological order because a node can only reference earlier nodes.

use super::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw};
use super::{DiffError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which way a normalization or reduction runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Each row independently (reduce across columns).
    PerRow,
    /// Each column independently (reduce across rows).
    PerCol,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Elu(Var, f64),
    Square(Var),
    XLogX(Var),
    SoftmaxRows(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    RowSums(Var),
    ColSums(Var),
    ArgReduce(Var, usize),
    L2NormRows(Var),
    MaskedFill(Var, Vec<bool>),
}

struct Node {
    op: Op,
    value: Option<Tensor>,
    requires_grad: bool,
}

const BRANCH_SEED: u64 = 0xcbf2_9ce4_8422_2325;

/// Reverse-mode recording of one computation.
///
/// Parameters are read from a borrowed [`ParamStore`] rather than copied in.
pub struct Tape<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamStore>,
    param_vars: Vec<Option<Var>>,
    backward_done: bool,
    branches: u64,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
            backward_done: false,
            branches: BRANCH_SEED,
        }
    }

    pub fn with_params(params: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::with_capacity(1024),
            params: Some(params),
            param_vars: vec![None; params.len()],
            backward_done: false,
            branches: BRANCH_SEED,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Fingerprint of the branch taken by every piecewise op recorded so far
    /// (ReLU, ELU, max, min). Two evaluations with equal signatures lie on the
    /// same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    fn record_branch(&mut self, b: u64) {
        self.branches = (self.branches ^ b).wrapping_mul(0x0100_0000_01b3);
    }

    fn record_signs(&mut self, a: Var) {
        let mut h = self.branches;
        for &x in self.value(a).data() {
            h = (h ^ u64::from(x > 0.0)).wrapping_mul(0x0100_0000_01b3);
        }
        self.branches = h;
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input tensor. Gradients are retained only if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// The node for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param(id.0),
            value: None,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => &self
                .params
                .expect("parameter node on a tape without a store")
                .tensors()[*i],
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast, DiffError> {
        let [ar, ac] = self.shape(a);
        let [br, bc] = self.shape(b);
        if ar == br && ac == bc {
            Ok(Bcast::Same)
        } else if br == 1 && bc == 1 {
            Ok(Bcast::Scalar)
        } else if br == 1 && bc == ac {
            Ok(Bcast::Row)
        } else if bc == 1 && br == ar {
            Ok(Bcast::Col)
        } else {
            Err(DiffError::ShapeMismatch {
                op,
                lhs: [ar, ac],
                rhs: [br, bc],
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var, DiffError> {
        let bc = self.bcast(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b);
        let (rows, cols) = (av.rows(), av.cols());
        let (x, y) = (av.data(), bv.data());
        let mut out = Vec::with_capacity(x.len());
        match bc {
            Bcast::Same => out.extend(x.iter().zip(y).map(|(&p, &q)| f(p, q))),
            Bcast::Scalar => out.extend(x.iter().map(|&p| f(p, y[0]))),
            Bcast::Row => {
                for row in x.chunks_exact(cols.max(1)) {
                    out.extend(row.iter().zip(y).map(|(&p, &q)| f(p, q)));
                }
            }
            Bcast::Col => {
                for (row, &q) in x.chunks_exact(cols.max(1)).zip(y) {
                    out.extend(row.iter().map(|&p| f(p, q)));
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(make(a, b, bc), Tensor::new(rows, cols, out)?, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(op, out, rg)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: [m, k],
                rhs: [k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_raw(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::new(m, n, out)?, rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let [m, k] = self.shape(a);
        let [n, k2] = self.shape(b);
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul_bt",
                lhs: [m, k],
                rhs: [n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_raw(
            self.value(a).data(),
            self.value(b).data(),
            m,
            k,
            n,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMulBt(a, b), Tensor::new(m, n, out)?, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(Op::Transpose(a), out, rg)
    }

    // ---- elementwise binary (rhs broadcasts as row, column or scalar) ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x * k, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, |x| x + k, Op::AddScalar(a))
    }

    /// Elementwise product with a constant of the same shape (dropout masks, band masks).
    pub fn mul_const(&mut self, a: Var, k: &Tensor) -> Result<Var, DiffError> {
        let av = self.value(a);
        if av.shape() != k.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "mul_const",
                lhs: av.shape(),
                rhs: k.shape(),
            });
        }
        let out: Vec<f64> = av.data().iter().zip(k.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.rows(), av.cols(), out)?;
        let rg = self.rg(a);
        Ok(self.push(Op::MulConst(a, k.data().to_vec()), t, rg))
    }

    // ---- elementwise unary ----------------------------------------------

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(DiffError::Domain { op: "log" });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, DiffError> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(DiffError::Domain { op: "sqrt" });
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.record_signs(a);
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn elu(&mut self, a: Var, alpha: f64) -> Var {
        self.record_signs(a);
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { alpha * x.exp_m1() },
            Op::Elu(a, alpha),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `x·ln x` with `0·ln 0 := 0`; the entropy building block.
    pub fn xlogx(&mut self, a: Var) -> Result<Var, DiffError> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(DiffError::Domain { op: "xlogx" });
        }
        Ok(self.unary(a, xlogx, Op::XLogX(a)))
    }

    // ---- normalization ----------------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: Axis) -> Var {
        match axis {
            Axis::PerRow => self.softmax_rows(a),
            Axis::PerCol => {
                let t = self.transpose(a);
                let s = self.softmax_rows(t);
                self.transpose(s)
            }
        }
    }

    fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = av.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            let mut z = 0.0;
            for &x in row {
                let e = (x - max).exp();
                z += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= z;
            }
        }
        let rg = self.rg(a);
        self.push(
            Op::SoftmaxRows(a),
            Tensor::new(rows, cols, out).unwrap(),
            rg,
        )
    }

    /// Overwrite entries where `mask` is true with `fill`. Filled entries receive no gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var, DiffError> {
        let av = self.value(a);
        if mask.len() != av.len() {
            return Err(DiffError::ShapeMismatch {
                op: "masked_fill",
                lhs: av.shape(),
                rhs: [mask.len(), 1],
            });
        }
        let out: Vec<f64> = av
            .data()
            .iter()
            .zip(mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let t = Tensor::new(av.rows(), av.cols(), out)?;
        let rg = self.rg(a);
        Ok(self.push(Op::MaskedFill(a, mask.to_vec()), t, rg))
    }

    // ---- structure --------------------------------------------------------

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let av = self.value(a);
        if start + len > av.rows() {
            return Err(DiffError::OutOfRange {
                op: "slice_rows",
                index: start + len,
                len: av.rows(),
            });
        }
        let c = av.cols();
        let out = av.data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(len, c, out)?;
        let rg = self.rg(a);
        Ok(self.push(Op::SliceRows(a, start), t, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(DiffError::OutOfRange {
                op: "slice_cols",
                index: start + len,
                len: av.cols(),
            });
        }
        let mut out = Vec::with_capacity(av.rows() * len);
        for r in 0..av.rows() {
            out.extend_from_slice(&av.row_slice(r)[start..start + len]);
        }
        let t = Tensor::new(av.rows(), len, out)?;
        let rg = self.rg(a);
        Ok(self.push(Op::SliceCols(a, start), t, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let cols = self.shape(parts[0])[1];
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: [rows, cols],
                    rhs: pv.shape(),
                });
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatRows(parts.to_vec()),
            Tensor::new(rows, cols, out)?,
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let rows = self.shape(parts[0])[0];
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != rows {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: [rows, cols],
                    rhs: s,
                });
            }
            cols += s[1];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::new(rows, cols, out)?,
            rg,
        ))
    }

    /// Row lookup (embedding tables). Output row `i` is row `indices[i]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var, DiffError> {
        let av = self.value(a);
        let c = av.cols();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= av.rows() {
                return Err(DiffError::OutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: av.rows(),
                });
            }
            out.extend_from_slice(av.row_slice(i));
        }
        let t = Tensor::new(indices.len(), c, out)?;
        let rg = self.rg(a);
        Ok(self.push(Op::GatherRows(a, indices.to_vec()), t, rg))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`: `PerRow` gives `r × 1`, `PerCol` gives `1 × c`.
    pub fn reduce_sum(&mut self, a: Var, axis: Axis) -> Var {
        let av = self.value(a);
        let rg = self.rg(a);
        match axis {
            Axis::PerRow => {
                let out: Vec<f64> = (0..av.rows())
                    .map(|r| av.row_slice(r).iter().sum())
                    .collect();
                self.push(Op::RowSums(a), Tensor::column(out), rg)
            }
            Axis::PerCol => {
                let mut out = vec![0.0; av.cols()];
                for r in 0..av.rows() {
                    for (o, x) in out.iter_mut().zip(av.row_slice(r)) {
                        *o += x;
                    }
                }
                self.push(Op::ColSums(a), Tensor::row(out), rg)
            }
        }
    }

    pub fn reduce_mean(&mut self, a: Var, axis: Axis) -> Var {
        let [r, c] = self.shape(a);
        let n = match axis {
            Axis::PerRow => c,
            Axis::PerCol => r,
        };
        let s = self.reduce_sum(a, axis);
        self.scale(s, 1.0 / n as f64)
    }

    /// Global maximum; ties route the gradient to the first maximal index.
    pub fn reduce_max(&mut self, a: Var) -> Result<Var, DiffError> {
        self.arg_reduce(a, |x, best| x > best)
    }

    /// Global minimum; ties route the gradient to the first minimal index.
    pub fn reduce_min(&mut self, a: Var) -> Result<Var, DiffError> {
        self.arg_reduce(a, |x, best| x < best)
    }

    fn arg_reduce(&mut self, a: Var, better: impl Fn(f64, f64) -> bool) -> Result<Var, DiffError> {
        let data = self.value(a).data();
        if data.is_empty() {
            return Err(DiffError::Empty { op: "reduce" });
        }
        let mut idx = 0;
        for (i, &x) in data.iter().enumerate().skip(1) {
            if better(x, data[idx]) {
                idx = i;
            }
        }
        let v = data[idx];
        self.record_branch(idx as u64);
        let rg = self.rg(a);
        Ok(self.push(Op::ArgReduce(a, idx), Tensor::scalar(v), rg))
    }

    /// Euclidean norm of each row, `r × 1`.
    pub fn l2_norm_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out: Vec<f64> = (0..av.rows())
            .map(|r| av.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(a);
        self.push(Op::L2NormRows(a), Tensor::column(out), rg)
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. A tape supports one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, DiffError> {
        if self.backward_done {
            return Err(DiffError::DoubleBackward);
        }
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(DiffError::NonScalarLoss { shape });
        }
        self.backward_done = true;

        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        let mut kept: Vec<Option<Tensor>> = vec![None; n];

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let out_shape = self.value(Var(i)).shape();
            match &self.nodes[i].op {
                Op::Leaf | Op::Param(_) => {
                    kept[i] = Some(Tensor::new(out_shape[0], out_shape[1], g)?);
                }
                op => self.propagate(op, Var(i), &g, &mut grads),
            }
        }
        Ok(Gradients { grads: kept })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).len()]);
        f(slot);
    }

    fn propagate(&self, op: &Op, out: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = self.value(out);
        let (rows, cols) = (y.rows(), y.cols());
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let [m, k] = self.shape(*a);
                let n = cols;
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| matmul_bt_raw(g, bv, m, n, k, ga));
                self.accumulate(grads, *b, |gb| matmul_at_raw(av, g, m, k, n, gb));
            }
            Op::MatMulBt(a, b) => {
                // y = a bᵀ, a: m×k, b: n×k
                let [m, k] = self.shape(*a);
                let n = cols;
                let bv = self.value(*b).data();
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| matmul_raw(g, bv, m, n, k, ga));
                self.accumulate(grads, *b, |gb| matmul_at_raw(g, av, m, n, k, gb));
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, |ga| {
                    // y is rows×cols, a is cols×rows
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[c * rows + r] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, |ga| {
                    for (x, gi) in ga.iter_mut().zip(g) {
                        *x += gi;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    reduce_bcast(g, rows, cols, *bc, |idx, v| gb[idx] += sign * v);
                });
            }
            Op::Mul(a, b, bc) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                self.accumulate(grads, *a, |ga| {
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[r * cols + c] * bval(bv, *bc, r, c);
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    let mut i = 0;
                    reduce_bcast(g, rows, cols, *bc, |idx, v| {
                        gb[idx] += v * av.data()[i];
                        i += 1;
                    });
                });
            }
            Op::Div(a, b, bc) => {
                let bv = self.value(*b);
                self.accumulate(grads, *a, |ga| {
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[r * cols + c] / bval(bv, *bc, r, c);
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    // d(a/b)/db = -y/b
                    let mut i = 0;
                    reduce_bcast(g, rows, cols, *bc, |idx, v| {
                        let (r, c) = (i / cols, i % cols);
                        gb[idx] -= v * y.data()[i] / bval(bv, *bc, r, c);
                        i += 1;
                    });
                });
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, |ga| {
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += k * gi;
                }
            }),
            Op::AddScalar(a) => self.accumulate(grads, *a, |ga| {
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += gi;
                }
            }),
            Op::MulConst(a, k) => self.accumulate(grads, *a, |ga| {
                for ((x, gi), ki) in ga.iter_mut().zip(g).zip(k) {
                    *x += gi * ki;
                }
            }),
            Op::Exp(a) => self.elementwise(grads, *a, g, |_, y| y, y),
            Op::Log(a) => self.elementwise(grads, *a, g, |x, _| 1.0 / x, y),
            Op::Sqrt(a) => self.elementwise(grads, *a, g, |_, y| 0.5 / y, y),
            Op::Tanh(a) => self.elementwise(grads, *a, g, |_, y| 1.0 - y * y, y),
            Op::Sigmoid(a) => self.elementwise(grads, *a, g, |_, y| y * (1.0 - y), y),
            Op::Relu(a) => {
                self.elementwise(grads, *a, g, |x, _| if x > 0.0 { 1.0 } else { 0.0 }, y)
            }
            Op::Elu(a, alpha) => {
                let alpha = *alpha;
                self.elementwise(
                    grads,
                    *a,
                    g,
                    |x, y| if x > 0.0 { 1.0 } else { y + alpha },
                    y,
                )
            }
            Op::Square(a) => self.elementwise(grads, *a, g, |x, _| 2.0 * x, y),
            Op::XLogX(a) => self.elementwise(
                grads,
                *a,
                g,
                |x, _| if x > 0.0 { x.ln() + 1.0 } else { 0.0 },
                y,
            ),
            Op::SoftmaxRows(a) => self.accumulate(grads, *a, |ga| {
                for r in 0..rows {
                    let yr = y.row_slice(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        ga[r * cols + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }),
            Op::SliceRows(a, start) => {
                let off = start * cols;
                self.accumulate(grads, *a, |ga| {
                    for (x, gi) in ga[off..off + g.len()].iter_mut().zip(g) {
                        *x += gi;
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let src_cols = self.shape(*a)[1];
                self.accumulate(grads, *a, |ga| {
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * src_cols + start + c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, |gp| {
                        for (x, gi) in gp.iter_mut().zip(&g[off..off + n]) {
                            *x += gi;
                        }
                    });
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col_off = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    self.accumulate(grads, p, |gp| {
                        for r in 0..rows {
                            for c in 0..pc {
                                gp[r * pc + c] += g[r * cols + col_off + c];
                            }
                        }
                    });
                    col_off += pc;
                }
            }
            Op::GatherRows(a, idx) => self.accumulate(grads, *a, |ga| {
                for (i, &src) in idx.iter().enumerate() {
                    for c in 0..cols {
                        ga[src * cols + c] += g[i * cols + c];
                    }
                }
            }),
            Op::Sum(a) => self.accumulate(grads, *a, |ga| {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }),
            Op::RowSums(a) => {
                let src_cols = self.shape(*a)[1];
                self.accumulate(grads, *a, |ga| {
                    for (r, gr) in g.iter().enumerate() {
                        for x in &mut ga[r * src_cols..(r + 1) * src_cols] {
                            *x += gr;
                        }
                    }
                });
            }
            Op::ColSums(a) => {
                let src_rows = self.shape(*a)[0];
                self.accumulate(grads, *a, |ga| {
                    for r in 0..src_rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[c];
                        }
                    }
                });
            }
            Op::ArgReduce(a, idx) => self.accumulate(grads, *a, |ga| ga[*idx] += g[0]),
            Op::L2NormRows(a) => {
                let av = self.value(*a);
                let src_cols = av.cols();
                self.accumulate(grads, *a, |ga| {
                    for r in 0..av.rows() {
                        let norm = y.data()[r];
                        if norm == 0.0 {
                            continue;
                        }
                        for c in 0..src_cols {
                            ga[r * src_cols + c] += g[r] * av.get(r, c) / norm;
                        }
                    }
                });
            }
            Op::MaskedFill(a, mask) => self.accumulate(grads, *a, |ga| {
                for ((x, gi), &m) in ga.iter_mut().zip(g).zip(mask) {
                    if !m {
                        *x += gi;
                    }
                }
            }),
        }
    }

    fn elementwise(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        g: &[f64],
        deriv: impl Fn(f64, f64) -> f64,
        y: &Tensor,
    ) {
        let x = self.value(a).data();
        self.accumulate(grads, a, |ga| {
            for i in 0..ga.len() {
                ga[i] += g[i] * deriv(x[i], y.data()[i]);
            }
        });
    }
}

#[inline]
fn bval(b: &Tensor, bc: Bcast, r: usize, c: usize) -> f64 {
    match bc {
        Bcast::Same => b.get(r, c),
        Bcast::Row => b.get(0, c),
        Bcast::Col => b.get(r, 0),
        Bcast::Scalar => b.get(0, 0),
    }
}

/// Visit every output gradient entry in row-major order with the index it
/// folds into on the broadcast operand.
fn reduce_bcast(g: &[f64], rows: usize, cols: usize, bc: Bcast, mut f: impl FnMut(usize, f64)) {
    for r in 0..rows {
        for c in 0..cols {
            let idx = match bc {
                Bcast::Same => r * cols + c,
                Bcast::Row => c,
                Bcast::Col => r,
                Bcast::Scalar => 0,
            };
            f(idx, g[r * cols + c]);
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Gradients produced by [`Tape::backward`], retained for leaves and parameters.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf or parameter node; `None` if it did not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Per-parameter gradients aligned with `store`; unused parameters get zeros.
    pub fn param_grads(&self, tape: &Tape<'_>, store: &ParamStore) -> Vec<Tensor> {
        let mut out = store.zeros_like();
        for (i, slot) in tape.param_vars.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = self.wrt(*v) {
                    out[i] = g.clone();
                }
            }
        }
        out
    }

    /// Adds parameter gradients into `acc` scaled by `weight`.
    pub fn accumulate_params(&self, tape: &Tape<'_>, acc: &mut [Tensor], weight: f64) {
        for (i, slot) in tape.param_vars.iter().enumerate() {
            if let Some(g) = slot.and_then(|v| self.wrt(v)) {
                for (a, x) in acc[i].data_mut().iter_mut().zip(g.data()) {
                    *a += weight * x;
                }
            }
        }
    }
}
