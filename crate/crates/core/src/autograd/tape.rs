use super::kernels::{self, ConvDims, NormSaved};
use super::tensor::numel;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward rule for operations defined outside this module.
pub trait CustomBackward<S: Scalar>: Send + Sync {
    /// Returns one gradient per input, `None` where `needs[i]` is false.
    fn backward(&self, grad_out: &[S], inputs: &[&[S]], needs: &[bool]) -> Vec<Option<Vec<S>>>;
}

enum Op<S: Scalar> {
    Leaf,
    MatMul(usize, usize),
    AddBias(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    Sum(usize),
    Tanh(usize),
    Sigmoid(usize),
    LeakyRelu(usize, S),
    Softmax(usize),
    LogClamp(usize, S),
    Pick(usize, Vec<usize>),
    Conv1d {
        x: usize,
        w: usize,
        dims: ConvDims,
    },
    MaxPool1d(usize, Vec<usize>),
    ChannelNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        dims: [usize; 3],
        saved: NormSaved<S>,
    },
    GradReverse(usize, S),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Custom(Vec<usize>, Box<dyn CustomBackward<S>>),
}

struct Node<S: Scalar> {
    shape: Vec<usize>,
    value: Vec<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Record of executed operations for reverse-mode differentiation.
///
/// Values are computed eagerly as operations are recorded; `backward`
/// walks the records once in reverse order. Gradients are retained for
/// leaves only.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Tape::new()
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<S>, op: Op<S>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        // Nothing upstream needs a gradient: drop the saved backward state.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as a leaf; it receives a gradient iff it requires one.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        let rg = t.requires_grad();
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<S>) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} vs {} values",
                value.len()
            )));
        }
        Ok(self.push(shape, value, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.req(v)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shape is consistent")
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn as_matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!(
                "{op} expects a rank-2 tensor, got {s:?}"
            ))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.as_matrix(a, "matmul")?;
        let (k2, n) = self.as_matrix(b, "matmul")?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm_raw(
            m,
            k,
            n,
            S::one(),
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            S::zero(),
            &mut out,
            n as isize,
            1,
        );
        let rg = self.req(a) || self.req(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a.0, b.0), rg))
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(b) != [n] {
            return Err(dim_err("add_bias", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b);
        let out: Vec<S> = self
            .value(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(bv).map(|(&a, &c)| a + c))
            .collect();
        let rg = self.req(x) || self.req(b);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias(x.0, b.0), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<(Vec<S>, bool)> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((out, self.req(a) || self.req(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, rg) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a.0, b.0), rg))
    }

    pub fn scale(&mut self, x: Var, c: S) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.req(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x.0, c), rg)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<S>();
        let rg = self.req(x);
        self.push(Vec::new(), vec![s], Op::Sum(x.0), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.req(x);
        self.push(self.shape(x).to_vec(), out, op, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x.0))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Var {
        self.unary(
            x,
            |v| if v > S::zero() { v } else { v * slope },
            Op::LeakyRelu(x.0, slope),
        )
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamp(&mut self, x: Var, floor: S) -> Var {
        self.unary(x, |v| v.max(floor).ln(), Op::LogClamp(x.0, floor))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::Shape(format!(
                "softmax axis {axis} invalid for shape {:?}",
                self.shape(x)
            )));
        }
        if axis == rank - 1 {
            return Ok(self.softmax_last(x));
        }
        let mut axes: Vec<usize> = (0..rank).filter(|&a| a != axis).collect();
        axes.push(axis);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let moved = self.permute(x, &axes)?;
        let y = self.softmax_last(moved);
        self.permute(y, &inverse)
    }

    fn softmax_last(&mut self, x: Var) -> Var {
        let n = *self.shape(x).last().unwrap_or(&1);
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(n) {
            let m = row.iter().copied().fold(S::neg_infinity(), S::max);
            let start = out.len();
            let mut z = S::zero();
            for &v in row {
                let e = (v - m).exp();
                z += e;
                out.push(e);
            }
            out[start..].iter_mut().for_each(|e| *e = *e / z);
        }
        let rg = self.req(x);
        self.push(self.shape(x).to_vec(), out, Op::Softmax(x.0), rg)
    }

    /// Selects `x[r, index[r]]` for every row of a matrix.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.as_matrix(x, "pick")?;
        if index.len() != rows {
            return Err(dim_err("pick", self.shape(x), &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= cols) {
            return Err(Error::Parameter(format!(
                "pick index {bad} out of range for {cols} columns"
            )));
        }
        let v = self.value(x);
        let out = index
            .iter()
            .enumerate()
            .map(|(r, &i)| v[r * cols + i])
            .collect();
        let rg = self.req(x);
        Ok(self.push(vec![rows], out, Op::Pick(x.0, index.to_vec()), rg))
    }

    /// Valid cross-correlation. `x` is `[C_in, L]` or `[N, C_in, L]`,
    /// `kernels` is `[C_out, C_in, K]`.
    pub fn conv1d(&mut self, x: Var, kernels: Var, stride: usize) -> Result<Var> {
        let (batched, batch, cin, len) = match *self.shape(x) {
            [c, l] => (false, 1, c, l),
            [n, c, l] => (true, n, c, l),
            ref s => {
                return Err(Error::Shape(format!(
                    "conv1d input must be rank 2 or 3, got {s:?}"
                )))
            }
        };
        let [cout, cin_w, k] = *self.shape(kernels) else {
            return Err(Error::Shape(format!(
                "conv1d kernels must be rank 3, got {:?}",
                self.shape(kernels)
            )));
        };
        if cin != cin_w {
            return Err(dim_err("conv1d", self.shape(x), self.shape(kernels)));
        }
        if stride == 0 {
            return Err(Error::Parameter("conv1d stride must be positive".into()));
        }
        let lout = kernels::conv_out_len(len, k, stride).ok_or_else(|| {
            Error::InvalidLength(format!("kernel length {k} exceeds input length {len}"))
        })?;
        let dims = ConvDims {
            batch,
            cin,
            len,
            cout,
            k,
            stride,
            lout,
        };
        let out = kernels::conv1d_forward(self.value(x), self.value(kernels), &dims);
        let shape = if batched {
            vec![batch, cout, lout]
        } else {
            vec![cout, lout]
        };
        let rg = self.req(x) || self.req(kernels);
        Ok(self.push(
            shape,
            out,
            Op::Conv1d {
                x: x.0,
                w: kernels.0,
                dims,
            },
            rg,
        ))
    }

    /// Non-overlapping max pooling over the last axis; trailing remainder
    /// elements are dropped.
    pub fn max_pool1d(&mut self, x: Var, window: usize) -> Result<Var> {
        if window == 0 {
            return Err(Error::Parameter(
                "max_pool1d window must be positive".into(),
            ));
        }
        let len = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::Shape("max_pool1d on a scalar".into()))?;
        if window > len {
            return Err(Error::InvalidLength(format!(
                "pool window {window} exceeds length {len}"
            )));
        }
        let (out, arg) = kernels::max_pool_forward(self.value(x), len, window);
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = len / window;
        let rg = self.req(x);
        Ok(self.push(shape, out, Op::MaxPool1d(x.0, arg), rg))
    }

    /// Normalizes every (sample, channel) row over time, then applies a
    /// per-channel gain and offset. `x` is `[C, L]` or `[N, C, L]`.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (batch, channels, len) = match *self.shape(x) {
            [c, l] => (1, c, l),
            [n, c, l] => (n, c, l),
            ref s => {
                return Err(Error::Shape(format!(
                    "channel_norm input must be rank 2 or 3, got {s:?}"
                )))
            }
        };
        if self.shape(gamma) != [channels] || self.shape(beta) != [channels] {
            return Err(dim_err("channel_norm", self.shape(x), self.shape(gamma)));
        }
        let (out, saved) = kernels::channel_norm_forward(
            self.value(x),
            batch,
            channels,
            len,
            self.value(gamma),
            self.value(beta),
            eps,
        );
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        let op = Op::ChannelNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            dims: [batch, channels, len],
            saved,
        };
        Ok(self.push(self.shape(x).to_vec(), out, op, rg))
    }

    /// Identity on the forward pass; scales the upstream gradient by `-lambda`.
    pub fn gradient_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0) {
            return Err(Error::Parameter(format!(
                "reversal strength must be non-negative, got {lambda}"
            )));
        }
        let out = self.value(x).to_vec();
        let rg = self.req(x);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::GradReverse(x.0, S::lit(lambda)),
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(dim_err("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.req(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x.0), rg))
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::Parameter(format!(
                "invalid permutation {axes:?} for shape {shape:?}"
            )));
        }
        let out = kernels::permute(self.value(x), &shape, axes);
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        let rg = self.req(x);
        Ok(self.push(out_shape, out, Op::Permute(x.0, axes.to_vec()), rg))
    }

    /// Rows `start..start + count` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (rows, cols) = self.as_matrix(x, "slice_rows")?;
        if count == 0 || start + count > rows {
            return Err(Error::Parameter(format!(
                "row slice {start}+{count} out of {rows}"
            )));
        }
        let out = self.value(x)[start * cols..(start + count) * cols].to_vec();
        let rg = self.req(x);
        Ok(self.push(vec![count, cols], out, Op::SliceRows(x.0, start), rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.as_matrix(x, "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::Parameter(format!(
                "column slice {start}+{len} out of {cols}"
            )));
        }
        let v = self.value(x);
        let out = (0..rows)
            .flat_map(|r| v[r * cols + start..r * cols + start + len].iter().copied())
            .collect();
        let rg = self.req(x);
        Ok(self.push(vec![rows, len], out, Op::SliceCols(x.0, start), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Parameter("concat of zero parts".into()))?;
        let (_, cols) = self.as_matrix(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.as_matrix(p, "concat_rows")?;
            if c != cols {
                return Err(dim_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Parameter("concat of zero parts".into()))?;
        let (rows, _) = self.as_matrix(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.as_matrix(p, "concat_cols")?;
            if r != rows {
                return Err(dim_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            vec![rows, total],
            out,
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            rg,
        ))
    }

    /// Records an externally computed value with its own backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Vec<usize>,
        value: Vec<S>,
        rule: Box<dyn CustomBackward<S>>,
    ) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::Shape(format!(
                "custom op shape {shape:?} vs {} values",
                value.len()
            )));
        }
        let rg = inputs.iter().any(|&v| self.req(v));
        Ok(self.push(
            shape,
            value,
            Op::Custom(inputs.iter().map(|v| v.0).collect(), rule),
            rg,
        ))
    }

    /// Reverse pass from a scalar loss. Leaves that require a gradient but
    /// do not influence the loss receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::State("backward on an empty tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![S::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, gi) in self.backward_node(i, &g) {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(gi),
                }
            }
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && g.is_none() {
                *g = Some(vec![S::zero(); node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[S]) -> Vec<(usize, Vec<S>)> {
        let node = &self.nodes[i];
        let val = |j: usize| self.nodes[j].value.as_slice();
        let needs = |j: usize| self.nodes[j].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let n = self.nodes[b].shape[1];
                if needs(a) {
                    let mut da = vec![S::zero(); m * k];
                    S::gemm_raw(
                        m,
                        n,
                        k,
                        S::one(),
                        g,
                        n as isize,
                        1,
                        val(b),
                        1,
                        n as isize,
                        S::zero(),
                        &mut da,
                        k as isize,
                        1,
                    );
                    out.push((a, da));
                }
                if needs(b) {
                    let mut db = vec![S::zero(); k * n];
                    S::gemm_raw(
                        k,
                        m,
                        n,
                        S::one(),
                        val(a),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        S::zero(),
                        &mut db,
                        n as isize,
                        1,
                    );
                    out.push((b, db));
                }
            }
            &Op::AddBias(x, b) => {
                if needs(x) {
                    out.push((x, g.to_vec()));
                }
                if needs(b) {
                    let n = self.nodes[b].value.len();
                    let mut db = vec![S::zero(); n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    out.push((b, db));
                }
            }
            &Op::Add(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.to_vec()));
            }
            &Op::Sub(a, b) => {
                out.push((a, g.to_vec()));
                out.push((b, g.iter().map(|&v| -v).collect()));
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    out.push((a, g.iter().zip(val(b)).map(|(&gv, &bv)| gv * bv).collect()));
                }
                if needs(b) {
                    out.push((b, g.iter().zip(val(a)).map(|(&gv, &av)| gv * av).collect()));
                }
            }
            &Op::Scale(x, c) => out.push((x, g.iter().map(|&v| v * c).collect())),
            &Op::Sum(x) => out.push((x, vec![g[0]; self.nodes[x].value.len()])),
            &Op::Tanh(x) => {
                let y = &node.value;
                out.push((
                    x,
                    g.iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * (S::one() - yv * yv))
                        .collect(),
                ));
            }
            &Op::Sigmoid(x) => {
                let y = &node.value;
                out.push((
                    x,
                    g.iter()
                        .zip(y)
                        .map(|(&gv, &yv)| gv * yv * (S::one() - yv))
                        .collect(),
                ));
            }
            &Op::LeakyRelu(x, slope) => {
                let xv = val(x);
                out.push((
                    x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > S::zero() { gv } else { gv * slope })
                        .collect(),
                ));
            }
            &Op::LogClamp(x, floor) => {
                let xv = val(x);
                out.push((
                    x,
                    g.iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v > floor { gv / v } else { S::zero() })
                        .collect(),
                ));
            }
            &Op::Softmax(x) => {
                let n = *node.shape.last().unwrap_or(&1);
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(node.value.chunks(n)) {
                    let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<S>();
                    dx.extend(gr.iter().zip(yr).map(|(&gv, &yv)| yv * (gv - dot)));
                }
                out.push((x, dx));
            }
            Op::Pick(x, index) => {
                let cols = self.nodes[*x].shape[1];
                let mut dx = vec![S::zero(); self.nodes[*x].value.len()];
                for (r, &i) in index.iter().enumerate() {
                    dx[r * cols + i] += g[r];
                }
                out.push((*x, dx));
            }
            Op::Conv1d { x, w, dims } => {
                let (dx, dw) =
                    kernels::conv1d_backward(val(*x), val(*w), g, dims, needs(*x), needs(*w));
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
            }
            Op::MaxPool1d(x, arg) => {
                let mut dx = vec![S::zero(); self.nodes[*x].value.len()];
                for (&a, &gv) in arg.iter().zip(g) {
                    dx[a] += gv;
                }
                out.push((*x, dx));
            }
            Op::ChannelNorm {
                x,
                gamma,
                beta,
                dims,
                saved,
            } => {
                let [b, c, l] = *dims;
                let (dx, dg, db) = kernels::channel_norm_backward(g, saved, b, c, l, val(*gamma));
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            &Op::GradReverse(x, lambda) => out.push((x, g.iter().map(|&v| v * -lambda).collect())),
            &Op::Reshape(x) => out.push((x, g.to_vec())),
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                out.push((*x, kernels::permute(g, &node.shape, &inverse)));
            }
            &Op::SliceRows(x, start) => {
                let cols = node.shape[1];
                let mut dx = vec![S::zero(); self.nodes[x].value.len()];
                dx[start * cols..start * cols + g.len()].copy_from_slice(g);
                out.push((x, dx));
            }
            &Op::SliceCols(x, start) => {
                let (rows, len) = (node.shape[0], node.shape[1]);
                let cols = self.nodes[x].shape[1];
                let mut dx = vec![S::zero(); rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                out.push((x, dx));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    if needs(p) {
                        out.push((p, g[off..off + n].to_vec()));
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p].shape[1];
                    if needs(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        out.push((p, dp));
                    }
                    off += w;
                }
            }
            Op::Custom(inputs, rule) => {
                let values: Vec<&[S]> = inputs.iter().map(|&j| val(j)).collect();
                let need: Vec<bool> = inputs.iter().map(|&j| needs(j)).collect();
                for (&j, gj) in inputs.iter().zip(rule.backward(g, &values, &need)) {
                    if let Some(gj) = gj {
                        out.push((j, gj));
                    }
                }
            }
        }
        out
    }
}

#[inline]
fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}
