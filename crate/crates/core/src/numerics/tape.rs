use crate::scalar::Scalar;

use super::{NumericsError, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Reduction axis for `sum` / `mean`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Collapse rows, giving `[1, cols]`.
    Rows,
    /// Collapse columns, giving `[rows, 1]`.
    Cols,
    /// Collapse everything, giving `[1, 1]`.
    All,
}

/// The kernels a tape can record. Saved activations live in [`Saved`].
#[derive(Clone, Debug, PartialEq)]
pub enum KernelOp<T> {
    MatMul,
    /// Elementwise add; the second operand may be a `[1, cols]` row added to every row.
    Add,
    Hadamard,
    Tanh,
    Relu,
    /// Square root; the adjoint is taken as 0 where the output is 0.
    Sqrt,
    /// Row-wise softmax.
    Softmax,
    /// Row-wise normalisation followed by the affine `gain`, `bias` rows.
    LayerNorm { eps: T },
    /// Row gather from a table; serves as embedding lookup and row selection.
    Gather { indices: Vec<usize> },
    Sum { axis: Axis },
    Mean { axis: Axis },
    Concat { axis: Axis },
    Slice { axis: Axis, start: usize, end: usize },
    ScalarMul { factor: T },
    Transpose,
    /// Mean over rows of `-log softmax(logits_r)[target_r]`.
    CrossEntropy { targets: Vec<usize> },
    /// Divides every row by its own sum.
    NormalizeRows,
}

impl<T> KernelOp<T> {
    pub fn name(&self) -> &'static str {
        match self {
            KernelOp::MatMul => "matmul",
            KernelOp::Add => "add",
            KernelOp::Hadamard => "hadamard",
            KernelOp::Tanh => "tanh",
            KernelOp::Relu => "relu",
            KernelOp::Sqrt => "sqrt",
            KernelOp::Softmax => "softmax",
            KernelOp::LayerNorm { .. } => "layer_norm",
            KernelOp::Gather { .. } => "embedding_lookup",
            KernelOp::Sum { .. } => "sum",
            KernelOp::Mean { .. } => "mean",
            KernelOp::Concat { .. } => "concat",
            KernelOp::Slice { .. } => "slice",
            KernelOp::ScalarMul { .. } => "scalar_mul",
            KernelOp::Transpose => "transpose",
            KernelOp::CrossEntropy { .. } => "cross_entropy_from_logits",
            KernelOp::NormalizeRows => "normalize_rows",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            KernelOp::MatMul | KernelOp::Add | KernelOp::Hadamard => Some(2),
            KernelOp::LayerNorm { .. } => Some(3),
            KernelOp::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

#[derive(Clone, Debug)]
enum Saved<T> {
    None,
    /// Normalised input and per-row reciprocal std.
    LayerNorm { xhat: Tensor<T>, rstd: Vec<T> },
    /// Softmax probabilities of the logits.
    Probs(Tensor<T>),
    /// Row sums of the input.
    RowSums(Vec<T>),
    /// Column (or row) extents of concatenated inputs.
    Extents(Vec<usize>),
    /// Whether the second Add operand was broadcast.
    Broadcast(bool),
}

#[derive(Clone, Debug)]
struct Node<T> {
    op: Option<KernelOp<T>>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    saved: Saved<T>,
}

/// Recorded operation graph. Nodes are appended in evaluation order, so the
/// node list is already a topological order.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

/// Adjoints of one output with respect to every recorded node.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`, or `None` when the output does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, with zeros for nodes the output does not reach.
    pub fn wrt(&self, var: Var) -> Tensor<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor<T> {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

fn mismatch(expected: &[usize], got: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Reject NaN/Inf values at record time.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn contains(&self, var: Var) -> bool {
        var.0 < self.nodes.len()
    }

    /// Adds an input tensor (parameter, constant or data) to the graph.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(None, Vec::new(), value, Saved::None)
    }

    fn push(&mut self, op: Option<KernelOp<T>>, inputs: Vec<Var>, value: Tensor<T>, saved: Saved<T>) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            saved,
        });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and appends the result to the graph.
    pub fn record(&mut self, op: KernelOp<T>, inputs: &[Var]) -> Result<Var, NumericsError> {
        if let Some(n) = op.arity() {
            if inputs.len() != n {
                return Err(NumericsError::UnsupportedKernel(format!(
                    "{} takes {} inputs, got {}",
                    op.name(),
                    n,
                    inputs.len()
                )));
            }
        }
        for &v in inputs {
            if !self.contains(v) {
                return Err(NumericsError::NotInTrace);
            }
            if !self.nodes[v.0].value.is_matrix() {
                return Err(NumericsError::UnsupportedKernel(format!(
                    "{} on rank-{} tensor",
                    op.name(),
                    self.nodes[v.0].value.rank()
                )));
            }
        }
        let (value, saved) = self.eval(&op, inputs)?;
        if self.check_finite && !value.all_finite() {
            return Err(NumericsError::NonFinite(op.name()));
        }
        Ok(self.push(Some(op), inputs.to_vec(), value, saved))
    }

    fn eval(&self, op: &KernelOp<T>, inputs: &[Var]) -> Result<(Tensor<T>, Saved<T>), NumericsError> {
        let x = |i: usize| &self.nodes[inputs[i].0].value;
        let out = match op {
            KernelOp::MatMul => {
                let (a, b) = (x(0), x(1));
                if a.cols() != b.rows() {
                    return Err(mismatch(&[a.cols(), b.cols()], b.shape()));
                }
                (a.matmul(b)?, Saved::None)
            }
            KernelOp::Add => {
                let (a, b) = (x(0), x(1));
                if a.shape() == b.shape() {
                    (a.zip_map(b, |p, q| p + q), Saved::Broadcast(false))
                } else if b.rows() == 1 && b.cols() == a.cols() {
                    let mut out = a.clone();
                    for r in 0..out.rows() {
                        for (o, &bias) in out.row_mut(r).iter_mut().zip(b.data()) {
                            *o = *o + bias;
                        }
                    }
                    (out, Saved::Broadcast(true))
                } else {
                    return Err(mismatch(a.shape(), b.shape()));
                }
            }
            KernelOp::Hadamard => {
                let (a, b) = (x(0), x(1));
                if a.shape() != b.shape() {
                    return Err(mismatch(a.shape(), b.shape()));
                }
                (a.zip_map(b, |p, q| p * q), Saved::None)
            }
            KernelOp::Tanh => (x(0).map(|v| v.tanh()), Saved::None),
            KernelOp::Relu => (x(0).map(|v| v.max(T::zero())), Saved::None),
            KernelOp::Sqrt => {
                if x(0).data().iter().any(|&v| v < T::zero()) {
                    return Err(NumericsError::Domain("sqrt of a negative value"));
                }
                (x(0).map(|v| v.sqrt()), Saved::None)
            }
            KernelOp::Softmax => (softmax_rows(x(0)), Saved::None),
            KernelOp::LayerNorm { eps } => {
                let (a, gain, bias) = (x(0), x(1), x(2));
                let d = a.cols();
                if gain.shape() != [1, d] || bias.shape() != [1, d] {
                    return Err(mismatch(&[1, d], gain.shape()));
                }
                let (xhat, rstd) = normalize(a, *eps);
                let mut out = xhat.clone();
                for r in 0..out.rows() {
                    for ((o, &g), &b) in out.row_mut(r).iter_mut().zip(gain.data()).zip(bias.data()) {
                        *o = *o * g + b;
                    }
                }
                (out, Saved::LayerNorm { xhat, rstd })
            }
            KernelOp::Gather { indices } => {
                let table = x(0);
                let d = table.cols();
                let mut data = Vec::with_capacity(indices.len() * d);
                for &i in indices {
                    if i >= table.rows() {
                        return Err(mismatch(&[table.rows()], &[i]));
                    }
                    data.extend_from_slice(table.row(i));
                }
                (Tensor::matrix(indices.len(), d, data)?, Saved::None)
            }
            KernelOp::Sum { axis } => (reduce(x(0), *axis, false), Saved::None),
            KernelOp::Mean { axis } => (reduce(x(0), *axis, true), Saved::None),
            KernelOp::Concat { axis } => {
                if inputs.is_empty() {
                    return Err(NumericsError::UnsupportedKernel("concat of nothing".into()));
                }
                let parts: Vec<&Tensor<T>> = (0..inputs.len()).map(x).collect();
                concat(&parts, *axis)?
            }
            KernelOp::Slice { axis, start, end } => (slice(x(0), *axis, *start, *end)?, Saved::None),
            KernelOp::ScalarMul { factor } => (x(0).scale(*factor), Saved::None),
            KernelOp::Transpose => (x(0).transpose(), Saved::None),
            KernelOp::CrossEntropy { targets } => {
                let logits = x(0);
                if targets.len() != logits.rows() || targets.is_empty() {
                    return Err(mismatch(&[logits.rows()], &[targets.len()]));
                }
                let probs = softmax_rows(logits);
                let mut loss = T::zero();
                for (r, &t) in targets.iter().enumerate() {
                    if t >= logits.cols() {
                        return Err(mismatch(&[logits.cols()], &[t]));
                    }
                    loss = loss - log_softmax_at(logits.row(r), t);
                }
                let loss = loss / T::of_usize(targets.len());
                (Tensor::scalar(loss), Saved::Probs(probs))
            }
            KernelOp::NormalizeRows => {
                let a = x(0);
                let sums: Vec<T> = (0..a.rows()).map(|r| a.row(r).iter().copied().sum()).collect();
                let out = Tensor::from_fn(a.rows(), a.cols(), |r, c| a.at(r, c) / sums[r]);
                (out, Saved::RowSums(sums))
            }
        };
        Ok(out)
    }

    /// Reverse sweep from a scalar `output`, returning adjoints for every node
    /// recorded before it (intermediates included).
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, NumericsError> {
        if !self.contains(output) {
            return Err(NumericsError::NotInTrace);
        }
        let out_val = &self.nodes[output.0].value;
        if out_val.len() != 1 {
            return Err(NumericsError::NonScalarOutput(out_val.shape().to_vec()));
        }
        self.backward_with(output, Tensor::full(out_val.shape(), T::one()))
    }

    /// Reverse sweep seeded with `seed` (same shape as `output`); a
    /// vector-Jacobian product for non-scalar outputs.
    pub fn backward_with(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>, NumericsError> {
        if !self.contains(output) {
            return Err(NumericsError::NotInTrace);
        }
        if self.nodes[output.0].value.shape() != seed.shape() {
            return Err(mismatch(self.nodes[output.0].value.shape(), seed.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, op, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node<T>, op: &KernelOp<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let input = |i: usize| &self.nodes[node.inputs[i].0].value;
        let mut acc = |i: usize, delta: Tensor<T>| {
            let slot = &mut grads[node.inputs[i].0];
            match slot {
                Some(existing) => existing.add_assign(&delta),
                None => *slot = Some(delta),
            }
        };
        let y = &node.value;
        match op {
            KernelOp::MatMul => {
                acc(0, matmul_nt(g, input(1)));
                acc(1, matmul_tn(input(0), g));
            }
            KernelOp::Add => {
                acc(0, g.clone());
                if matches!(node.saved, Saved::Broadcast(true)) {
                    acc(1, reduce(g, Axis::Rows, false));
                } else {
                    acc(1, g.clone());
                }
            }
            KernelOp::Hadamard => {
                acc(0, g.zip_map(input(1), |a, b| a * b));
                acc(1, g.zip_map(input(0), |a, b| a * b));
            }
            KernelOp::Tanh => acc(0, g.zip_map(y, |a, t| a * (T::one() - t * t))),
            KernelOp::Relu => acc(0, g.zip_map(input(0), |a, v| if v > T::zero() { a } else { T::zero() })),
            KernelOp::Sqrt => acc(
                0,
                g.zip_map(y, |a, s| if s > T::zero() { a / (s + s) } else { T::zero() }),
            ),
            KernelOp::Softmax => {
                let mut d = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let dot: T = g.row(r).iter().zip(y.row(r)).map(|(&a, &p)| a * p).sum();
                    for ((o, &a), &p) in d.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = p * (a - dot);
                    }
                }
                acc(0, d);
            }
            KernelOp::LayerNorm { .. } => {
                let Saved::LayerNorm { xhat, rstd } = &node.saved else {
                    unreachable!("layer_norm saves its normalised input")
                };
                let gain = input(1);
                let d = xhat.cols();
                let inv_d = T::one() / T::of_usize(d);
                let mut dx = Tensor::zeros(xhat.shape());
                let mut dgain = Tensor::zeros(&[1, d]);
                for r in 0..xhat.rows() {
                    let (gr, xr) = (g.row(r), xhat.row(r));
                    let mut mean_dxh = T::zero();
                    let mut mean_dxh_xh = T::zero();
                    for c in 0..d {
                        let dxh = gr[c] * gain.data()[c];
                        mean_dxh = mean_dxh + dxh;
                        mean_dxh_xh = mean_dxh_xh + dxh * xr[c];
                        dgain.data_mut()[c] = dgain.data()[c] + gr[c] * xr[c];
                    }
                    mean_dxh = mean_dxh * inv_d;
                    mean_dxh_xh = mean_dxh_xh * inv_d;
                    let out = dx.row_mut(r);
                    for c in 0..d {
                        let dxh = gr[c] * gain.data()[c];
                        out[c] = rstd[r] * (dxh - mean_dxh - xr[c] * mean_dxh_xh);
                    }
                }
                acc(0, dx);
                acc(1, dgain);
                acc(2, reduce(g, Axis::Rows, false));
            }
            KernelOp::Gather { indices } => {
                let table = input(0);
                let mut d = Tensor::zeros(table.shape());
                for (r, &i) in indices.iter().enumerate() {
                    for (o, &v) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                acc(0, d);
            }
            KernelOp::Sum { axis } | KernelOp::Mean { axis } => {
                let a = input(0);
                let count = match axis {
                    Axis::Rows => a.rows(),
                    Axis::Cols => a.cols(),
                    Axis::All => a.len(),
                };
                let k = if matches!(op, KernelOp::Mean { .. }) {
                    T::one() / T::of_usize(count)
                } else {
                    T::one()
                };
                let d = Tensor::from_fn(a.rows(), a.cols(), |r, c| match axis {
                    Axis::Rows => g.at(0, c) * k,
                    Axis::Cols => g.at(r, 0) * k,
                    Axis::All => g.item() * k,
                });
                acc(0, d);
            }
            KernelOp::Concat { axis } => {
                let Saved::Extents(extents) = &node.saved else {
                    unreachable!("concat saves its input extents")
                };
                let mut start = 0;
                for (i, &len) in extents.iter().enumerate() {
                    let part = slice(g, *axis, start, start + len).expect("extents match the output");
                    acc(i, part);
                    start += len;
                }
            }
            KernelOp::Slice { axis, start, .. } => {
                let a = input(0);
                let mut d = Tensor::zeros(a.shape());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let (rr, cc) = match axis {
                            Axis::Rows => (r + start, c),
                            _ => (r, c + start),
                        };
                        d.set(rr, cc, g.at(r, c));
                    }
                }
                acc(0, d);
            }
            KernelOp::ScalarMul { factor } => acc(0, g.scale(*factor)),
            KernelOp::Transpose => acc(0, g.transpose()),
            KernelOp::CrossEntropy { targets } => {
                let Saved::Probs(probs) = &node.saved else {
                    unreachable!("cross entropy saves probabilities")
                };
                let k = g.item() / T::of_usize(targets.len());
                let mut d = probs.scale(k);
                for (r, &t) in targets.iter().enumerate() {
                    let v = d.at(r, t);
                    d.set(r, t, v - k);
                }
                acc(0, d);
            }
            KernelOp::NormalizeRows => {
                let Saved::RowSums(sums) = &node.saved else {
                    unreachable!("normalize_rows saves row sums")
                };
                let mut d = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let dot: T = g.row(r).iter().zip(y.row(r)).map(|(&a, &p)| a * p).sum();
                    for (o, &a) in d.row_mut(r).iter_mut().zip(g.row(r)) {
                        *o = (a - dot) / sums[r];
                    }
                }
                acc(0, d);
            }
        }
    }

    // Convenience wrappers over `record`.

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.record(KernelOp::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.record(KernelOp::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let neg = self.scalar_mul(b, -T::one())?;
        self.add(a, neg)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.record(KernelOp::Hadamard, &[a, b])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.record(KernelOp::Tanh, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.record(KernelOp::Relu, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.record(KernelOp::Sqrt, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.record(KernelOp::Softmax, &[a])
    }

    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: T) -> Result<Var, NumericsError> {
        self.record(KernelOp::LayerNorm { eps }, &[a, gain, bias])
    }

    pub fn gather(&mut self, table: Var, indices: Vec<usize>) -> Result<Var, NumericsError> {
        self.record(KernelOp::Gather { indices }, &[table])
    }

    pub fn sum(&mut self, a: Var, axis: Axis) -> Result<Var, NumericsError> {
        self.record(KernelOp::Sum { axis }, &[a])
    }

    pub fn mean(&mut self, a: Var, axis: Axis) -> Result<Var, NumericsError> {
        self.record(KernelOp::Mean { axis }, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var, NumericsError> {
        self.record(KernelOp::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, end: usize) -> Result<Var, NumericsError> {
        self.record(KernelOp::Slice { axis, start, end }, &[a])
    }

    pub fn scalar_mul(&mut self, a: Var, factor: T) -> Result<Var, NumericsError> {
        self.record(KernelOp::ScalarMul { factor }, &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.record(KernelOp::Transpose, &[a])
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var, NumericsError> {
        self.record(KernelOp::CrossEntropy { targets }, &[logits])
    }

    pub fn normalize_rows(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.record(KernelOp::NormalizeRows, &[a])
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let mut out = a.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn log_softmax_at<T: Scalar>(row: &[T], t: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row[t] - lse
}

/// Row-wise `(x - mean) / sqrt(var + eps)` with the biased variance.
pub fn normalize<T: Scalar>(a: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let d = T::of_usize(a.cols());
    let mut out = a.clone();
    let mut rstds = Vec::with_capacity(a.rows());
    for r in 0..a.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().copied().sum::<T>() / d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
        let rstd = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * rstd;
        }
        rstds.push(rstd);
    }
    (out, rstds)
}

fn reduce<T: Scalar>(a: &Tensor<T>, axis: Axis, mean: bool) -> Tensor<T> {
    let (rows, cols) = (a.rows(), a.cols());
    let (out, count) = match axis {
        Axis::Rows => (
            Tensor::from_fn(1, cols, |_, c| (0..rows).map(|r| a.at(r, c)).sum()),
            rows,
        ),
        Axis::Cols => (
            Tensor::from_fn(rows, 1, |r, _| a.row(r).iter().copied().sum()),
            cols,
        ),
        Axis::All => (Tensor::scalar(a.sum()), a.len()),
    };
    if mean {
        out.scale(T::one() / T::of_usize(count))
    } else {
        out
    }
}

fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: Axis) -> Result<(Tensor<T>, Saved<T>), NumericsError> {
    let first = parts[0];
    match axis {
        Axis::Rows => {
            let cols = first.cols();
            let mut data = Vec::new();
            let mut extents = Vec::new();
            for p in parts {
                if p.cols() != cols {
                    return Err(mismatch(&[p.rows(), cols], p.shape()));
                }
                data.extend_from_slice(p.data());
                extents.push(p.rows());
            }
            let rows = extents.iter().sum();
            Ok((Tensor::matrix(rows, cols, data)?, Saved::Extents(extents)))
        }
        Axis::Cols => {
            let rows = first.rows();
            for p in parts {
                if p.rows() != rows {
                    return Err(mismatch(&[rows, p.cols()], p.shape()));
                }
            }
            let extents: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
            let cols = extents.iter().sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(p.row(r));
                }
            }
            Ok((Tensor::matrix(rows, cols, data)?, Saved::Extents(extents)))
        }
        Axis::All => Err(NumericsError::UnsupportedKernel("concat along all axes".into())),
    }
}

fn slice<T: Scalar>(a: &Tensor<T>, axis: Axis, start: usize, end: usize) -> Result<Tensor<T>, NumericsError> {
    match axis {
        Axis::Rows if start <= end && end <= a.rows() => {
            Tensor::matrix(end - start, a.cols(), a.data()[start * a.cols()..end * a.cols()].to_vec())
        }
        Axis::Cols if start <= end && end <= a.cols() => {
            Ok(Tensor::from_fn(a.rows(), end - start, |r, c| a.at(r, c + start)))
        }
        _ => Err(mismatch(a.shape(), &[start, end])),
    }
}

/// `a · bᵀ`
fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(a.rows(), b.rows(), |i, j| {
        a.row(i).iter().zip(b.row(j)).map(|(&x, &y)| x * y).fold(T::zero(), |s, v| s + v)
    })
}

/// `aᵀ · b`
fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[k, m]);
    for r in 0..n {
        let b_row = b.row(r);
        for (i, &av) in a.row(r).iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out.row_mut(i).iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(2, 3, &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = tape.sum(x, Axis::All).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0; 6]);
    }

    #[test]
    fn tanh_at_zero_has_unit_slope() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[3, 2]));
        let y = tape.tanh(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
        let s = tape.sum(y, Axis::All).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(x).data(), &[1.0; 6]);
    }

    #[test]
    fn softmax_rows_normalised() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(2, 3, &[1.0, 2.0, 3.0, -50.0, 0.0, 50.0]));
        let y = tape.softmax(x).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_moments() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(2, 4, &[1.0, 2.0, 3.0, 10.0, -4.0, 0.5, 0.25, 7.0]));
        let g = tape.leaf(Tensor::full(&[1, 4], 1.0));
        let b = tape.leaf(Tensor::zeros(&[1, 4]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        for r in 0..2 {
            let row = tape.value(y).row(r);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() <= 1e-10);
            assert!((var - 1.0).abs() <= 1e-8);
        }
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::<f64>::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(NumericsError::ShapeMismatch { .. })));
        let c = tape.leaf(Tensor::<f64>::zeros(&[3, 3]));
        assert!(matches!(tape.hadamard(a, c), Err(NumericsError::ShapeMismatch { .. })));
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::<f64>::zeros(&[2, 3]));
        assert!(matches!(tape.backward(a), Err(NumericsError::NonScalarOutput(_))));
        let other: Tape<f64> = Tape::new();
        assert!(matches!(other.backward(a), Err(NumericsError::NotInTrace)));
    }

    #[test]
    fn finite_checks_reject_nan() {
        let mut tape = Tape::new().with_finite_checks(true);
        let a = tape.leaf(t(1, 2, &[f64::INFINITY, 1.0]));
        let b = tape.leaf(t(1, 2, &[f64::NEG_INFINITY, 1.0]));
        assert!(matches!(tape.add(a, b), Err(NumericsError::NonFinite(_))));
    }

    #[test]
    fn linearity_of_backward() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 3, &[0.3, -0.7, 1.1]));
        let a = tape.tanh(x).unwrap();
        let a = tape.sum(a, Axis::All).unwrap();
        let b = tape.hadamard(x, x).unwrap();
        let b = tape.sum(b, Axis::All).unwrap();
        let both = tape.add(a, b).unwrap();
        let ga = tape.backward(a).unwrap().wrt(x);
        let gb = tape.backward(b).unwrap().wrt(x);
        let gs = tape.backward(both).unwrap().wrt(x);
        for i in 0..3 {
            assert!((gs.data()[i] - ga.data()[i] - gb.data()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn intermediates_receive_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(1, 2, &[2.0, 3.0]));
        let h = tape.scalar_mul(x, 3.0).unwrap();
        let s = tape.sum(h, Axis::All).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(h).data(), &[1.0, 1.0]);
        assert_eq!(g.wrt(x).data(), &[3.0, 3.0]);
    }
}
