use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is a single row repeated over every lhs row
    Rows,
}

/// Batch-norm operating mode.
#[derive(Clone, Debug)]
pub enum NormMode<'a> {
    /// Normalize with the batch (row) statistics.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

/// Per-column statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance (biased when only one row is present).
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softmax(Var, usize),
    Concat(Vec<Var>, usize),
    MaxPool(Var, Vec<usize>),
    MeanPool(Var, usize),
    L2Normalize(Var, usize, f64),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Sum(Var),
    Mean(Var),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    GatherRows(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    SliceCols(Var, usize, usize),
    RepeatRows(Var),
    Clamp(Var, f64, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Softmax(..) => "softmax",
            Op::Concat(..) => "concat",
            Op::MaxPool(..) => "max_pool",
            Op::MeanPool(..) => "mean_pool",
            Op::L2Normalize(..) => "l2_normalize",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Exp(_) => "exp",
            Op::GatherRows(..) => "gather_rows",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::SliceCols(..) => "slice_cols",
            Op::RepeatRows(_) => "repeat_rows",
            Op::Clamp(..) => "clamp",
        }
    }
}

/// Names accepted by [`with_backward_fault`].
pub const OP_NAMES: &[&str] = &[
    "matmul", "add", "sub", "mul", "scale", "relu", "leaky_relu", "softmax", "concat", "max_pool", "mean_pool",
    "l2_normalize", "batch_norm", "sum", "mean", "square", "sqrt", "exp", "gather_rows", "transpose", "reshape",
    "slice_cols", "repeat_rows", "clamp",
];

thread_local! {
    static FAULT: std::cell::Cell<Option<&'static str>> = const { std::cell::Cell::new(None) };
}

/// Run `f` with the backward pass of every `op` node deliberately wrong
/// (its upstream gradient scaled by 1.5) on the current thread. Used as a
/// negative control for gradient checks.
pub fn with_backward_fault<T>(op: &'static str, f: impl FnOnce() -> T) -> T {
    let prev = FAULT.with(|c| c.replace(Some(op)));
    let out = f();
    FAULT.with(|c| c.set(prev));
    out
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode differentiation tape.
///
/// Operations append nodes in creation order, which is a topological order;
/// [`Graph::backward`] walks it once in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Split a shape around `axis` into `(outer, len, inner)`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn bcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Bcast> {
    if a == b {
        return Ok(Bcast::Same);
    }
    if a.len() == 2 {
        let n = a[1];
        if b == [n] || b == [1, n] {
            return Ok(Bcast::Rows);
        }
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) => {
                self.requires_grad(*a) || self.requires_grad(*b)
            }
            Op::Concat(vs, _) => vs.iter().any(|v| self.requires_grad(*v)),
            Op::BatchNorm { x, gamma, beta, .. } => {
                self.requires_grad(*x) || self.requires_grad(*gamma) || self.requires_grad(*beta)
            }
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Softmax(a, _)
            | Op::MaxPool(a, _)
            | Op::MeanPool(a, _)
            | Op::L2Normalize(a, _, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Exp(a)
            | Op::GatherRows(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SliceCols(a, _, _)
            | Op::RepeatRows(a)
            | Op::Clamp(a, _, _) => self.requires_grad(*a),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, op)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, Bcast)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let mode = bcast(name, ta.shape(), tb.shape())?;
        let data = match mode {
            Bcast::Same => ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Rows => {
                let n = tb.len();
                ta.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, tb.data()[i % n]))
                    .collect()
            }
        };
        Ok((Tensor::new(ta.shape().to_vec(), data)?, mode))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), k, 1, tb.data(), n, 1, 0.0, &mut c);
        let value = Tensor::new(vec![m, n], c)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Elementwise sum; `b` may be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, mode) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b, mode)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, mode) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b, mode)))
    }

    /// Elementwise (Hadamard) product with row broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, mode) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b, mode)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, alpha), |x| if x > 0.0 { x } else { alpha * x })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let s = self.shape(a);
        if axis >= s.len() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: s.to_vec(),
                rhs: vec![axis],
            });
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let t = self.value(a);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let x = t.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let mx = (0..len).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for i in 0..len {
                    let e = (x[at(i)] - mx).exp();
                    y[at(i)] = e;
                    s += e;
                }
                for i in 0..len {
                    y[at(i)] /= s;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), y)?;
        Ok(self.push(value, Op::Softmax(a, axis)))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len() && (0..s.len()).all(|d| d == axis || s[d] == base[d]);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis)))
    }

    /// Maximum over `axis`, removing it. Gradient routes to the first maximal entry.
    pub fn max_pool(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("max_pool", a, axis)?;
        let t = self.value(a);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        if len == 0 {
            return Err(Error::InvalidArgument("max_pool over empty axis".into()));
        }
        let x = t.data();
        let mut y = Vec::with_capacity(outer * inner);
        let mut arg = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for j in 0..inner {
                let mut best = (o * len) * inner + j;
                for i in 1..len {
                    let at = (o * len + i) * inner + j;
                    if x[at] > x[best] {
                        best = at;
                    }
                }
                y.push(x[best]);
                arg.push(best);
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, y)?;
        Ok(self.push(value, Op::MaxPool(a, arg)))
    }

    pub fn mean_pool(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_pool", a, axis)?;
        let t = self.value(a);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let x = t.data();
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                for j in 0..inner {
                    y[o * inner + j] += x[(o * len + i) * inner + j];
                }
            }
        }
        for v in &mut y {
            *v /= len as f64;
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, y)?;
        Ok(self.push(value, Op::MeanPool(a, axis)))
    }

    /// `x / max(||x||, eps)` along `axis`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis("l2_normalize", a, axis)?;
        let t = self.value(a);
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let x = t.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let norm = (0..len).map(|i| x[at(i)] * x[at(i)]).sum::<f64>().sqrt().max(eps);
                for i in 0..len {
                    y[at(i)] = x[at(i)] / norm;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), y)?;
        Ok(self.push(value, Op::L2Normalize(a, axis, eps)))
    }

    /// Batch normalization of an `m x n` input over its rows, with per-column
    /// affine `gamma`, `beta` of length `n`. In training mode also returns the
    /// batch statistics so the caller can update running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: tx.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (tx.shape()[0], tx.shape()[1]);
        for p in [gamma, beta] {
            let s = self.shape(p);
            if s != [n] {
                return Err(Error::ShapeMismatch {
                    op: "batch_norm",
                    lhs: tx.shape().to_vec(),
                    rhs: s.to_vec(),
                });
            }
        }
        let xd = tx.data();
        let (mean, var_biased, stats) = match mode {
            NormMode::Train => {
                let mut mean = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        mean[j] += xd[i * n + j];
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                let mut var = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        let d = xd[i * n + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                let unbiased: Vec<f64> = if m > 1 {
                    var.iter().map(|v| v / (m - 1) as f64).collect()
                } else {
                    var.clone()
                };
                var.iter_mut().for_each(|v| *v /= m as f64);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != n || var.len() != n {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm",
                        lhs: vec![n],
                        rhs: vec![mean.len()],
                    });
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let h = (xd[i * n + j] - mean[j]) * inv_std[j];
                xhat[i * n + j] = h;
                y[i * n + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(vec![m, n], y)?;
        let train = stats.is_some();
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        );
        Ok((v, stats))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Rows of a rank-2 tensor picked by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::InvalidArgument(format!("gather_rows index {bad} out of {m} rows")));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&t.data()[r * n..(r + 1) * n]);
        }
        let value = Tensor::new(vec![rows.len(), n], data)?;
        Ok(self.push(value, Op::GatherRows(a, rows.to_vec())))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = t.data()[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], data)?;
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || start > end || end > t.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: t.shape().to_vec(),
                rhs: vec![start, end],
            });
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&t.data()[i * n + start..i * n + end]);
        }
        let value = Tensor::new(vec![m, end - start], data)?;
        Ok(self.push(value, Op::SliceCols(a, start, end)))
    }

    /// Stack `m` copies of a row vector (`[n]` or `[1, n]`) into `m x n`.
    pub fn repeat_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let t = self.value(a);
        let n = match t.shape() {
            [n] | [1, n] => *n,
            s => {
                return Err(Error::ShapeMismatch {
                    op: "repeat_rows",
                    lhs: s.to_vec(),
                    rhs: vec![m],
                })
            }
        };
        let mut data = Vec::with_capacity(m * n);
        for _ in 0..m {
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(value, Op::RepeatRows(a)))
    }

    /// Gradient of the last `backward` root with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.shape(v).to_vec(), g.clone()).ok()
    }

    /// Gradient of the last root wrt `v`, zeros if no path existed.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    /// Reverse sweep from a scalar root, storing gradients of every node that
    /// requires them. Contributions from multiple uses add up.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = self.shape(root);
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(rs.to_vec()));
        }
        let fault = FAULT.with(|c| c.get());
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if fault == Some(self.nodes[i].op.name()) {
                let bad: Vec<f64> = g.iter().map(|v| 1.5 * v).collect();
                self.backprop_node(i, &bad, &mut grads);
            } else {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        // drop gradients of nodes that do not require them
        for (i, g) in grads.iter_mut().enumerate() {
            if !self.nodes[i].requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let need = |v: Var| self.nodes[v.0].requires_grad;
        // accumulate `f(k)` into the gradient buffer of `v`
        macro_rules! acc {
            ($v:expr, |$k:ident| $e:expr) => {{
                let v = $v;
                if need(v) {
                    let buf = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
                    for $k in 0..buf.len() {
                        buf[$k] += $e;
                    }
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if need(*a) {
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; m * k]);
                    // dA = G * B^T
                    gemm(m, n, k, g, n, 1, tb.data(), 1, n, 1.0, buf);
                }
                if need(*b) {
                    let buf = grads[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                    // dB = A^T * G
                    gemm(k, m, n, ta.data(), 1, k, g, n, 1, 1.0, buf);
                }
            }
            Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc!(*a, |k| g[k]);
                match mode {
                    Bcast::Same => acc!(*b, |k| sign * g[k]),
                    Bcast::Rows => {
                        if need(*b) {
                            let n = self.value(*b).len();
                            let buf = grads[b.0].get_or_insert_with(|| vec![0.0; n]);
                            for (k, gv) in g.iter().enumerate() {
                                buf[k % n] += sign * gv;
                            }
                        }
                    }
                }
            }
            Op::Mul(a, b, mode) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                match mode {
                    Bcast::Same => {
                        acc!(*a, |k| g[k] * tb.data()[k]);
                        acc!(*b, |k| g[k] * ta.data()[k]);
                    }
                    Bcast::Rows => {
                        let n = tb.len();
                        acc!(*a, |k| g[k] * tb.data()[k % n]);
                        if need(*b) {
                            let buf = grads[b.0].get_or_insert_with(|| vec![0.0; n]);
                            for (k, gv) in g.iter().enumerate() {
                                buf[k % n] += gv * ta.data()[k];
                            }
                        }
                    }
                }
            }
            Op::Scale(a, c) => acc!(*a, |k| g[k] * c),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc!(*a, |k| if x[k] > 0.0 { g[k] } else { 0.0 });
            }
            Op::LeakyRelu(a, alpha) => {
                let x = self.value(*a).data();
                acc!(*a, |k| if x[k] > 0.0 { g[k] } else { alpha * g[k] });
            }
            Op::Square(a) => {
                let x = self.value(*a).data();
                acc!(*a, |k| 2.0 * x[k] * g[k]);
            }
            Op::Sqrt(a) => {
                let y = out.data();
                acc!(*a, |k| 0.5 * g[k] / y[k]);
            }
            Op::Exp(a) => {
                let y = out.data();
                acc!(*a, |k| g[k] * y[k]);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a).data();
                acc!(*a, |k| if x[k] > *lo && x[k] < *hi { g[k] } else { 0.0 });
            }
            Op::Softmax(a, axis) => {
                if need(*a) {
                    let y = out.data();
                    let (outer, len, inner) = axis_split(out.shape(), *axis);
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; y.len()]);
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let dot: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..len {
                                buf[at(i)] += y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = axis_split(out.shape(), *axis);
                let total = out.shape()[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.shape(*p)[*axis] * inner;
                    if need(*p) {
                        let buf = grads[p.0].get_or_insert_with(|| vec![0.0; chunk * outer]);
                        for o in 0..outer {
                            for c in 0..chunk {
                                buf[o * chunk + c] += g[o * total + offset + c];
                            }
                        }
                    }
                    offset += chunk;
                }
            }
            Op::MaxPool(a, arg) => {
                if need(*a) {
                    let n = self.value(*a).len();
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; n]);
                    for (k, &src) in arg.iter().enumerate() {
                        buf[src] += g[k];
                    }
                }
            }
            Op::MeanPool(a, axis) => {
                if need(*a) {
                    let t = self.value(*a);
                    let (outer, len, inner) = axis_split(t.shape(), *axis);
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; t.len()]);
                    for o in 0..outer {
                        for i in 0..len {
                            for j in 0..inner {
                                buf[(o * len + i) * inner + j] += g[o * inner + j] / len as f64;
                            }
                        }
                    }
                }
            }
            Op::L2Normalize(a, axis, eps) => {
                if need(*a) {
                    let x = self.value(*a).data();
                    let y = out.data();
                    let (outer, len, inner) = axis_split(out.shape(), *axis);
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; y.len()]);
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let norm = (0..len).map(|i| x[at(i)] * x[at(i)]).sum::<f64>().sqrt();
                            if norm > *eps {
                                let dot: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                                for i in 0..len {
                                    buf[at(i)] += (g[at(i)] - y[at(i)] * dot) / norm;
                                }
                            } else {
                                for i in 0..len {
                                    buf[at(i)] += g[at(i)] / eps;
                                }
                            }
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; n];
                let mut sum_gx = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        sum_g[j] += g[i * n + j];
                        sum_gx[j] += g[i * n + j] * xhat[i * n + j];
                    }
                }
                acc!(*gamma, |k| sum_gx[k]);
                acc!(*beta, |k| sum_g[k]);
                if need(*x) {
                    let buf = grads[x.0].get_or_insert_with(|| vec![0.0; m * n]);
                    let mf = m as f64;
                    for i in 0..m {
                        for j in 0..n {
                            let k = i * n + j;
                            buf[k] += if *train {
                                gam[j] * inv_std[j] / mf * (mf * g[k] - sum_g[j] - xhat[k] * sum_gx[j])
                            } else {
                                gam[j] * inv_std[j] * g[k]
                            };
                        }
                    }
                }
            }
            Op::Sum(a) => acc!(*a, |_k| g[0]),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc!(*a, |_k| g[0] / n);
            }
            Op::GatherRows(a, rows) => {
                if need(*a) {
                    let t = self.value(*a);
                    let n = t.shape()[1];
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; t.len()]);
                    for (r, &src) in rows.iter().enumerate() {
                        for c in 0..n {
                            buf[src * n + c] += g[r * n + c];
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[1], out.shape()[0]);
                // out is n x m; input is m x n
                acc!(*a, |k| g[(k % n) * m + k / n]);
            }
            Op::Reshape(a) => acc!(*a, |k| g[k]),
            Op::SliceCols(a, start, end) => {
                if need(*a) {
                    let t = self.value(*a);
                    let (m, n) = (t.shape()[0], t.shape()[1]);
                    let w = end - start;
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; m * n]);
                    for i in 0..m {
                        for c in 0..w {
                            buf[i * n + start + c] += g[i * w + c];
                        }
                    }
                }
            }
            Op::RepeatRows(a) => {
                if need(*a) {
                    let n = self.value(*a).len();
                    let buf = grads[a.0].get_or_insert_with(|| vec![0.0; n]);
                    for (k, gv) in g.iter().enumerate() {
                        buf[k % n] += gv;
                    }
                }
            }
        }
    }
}
