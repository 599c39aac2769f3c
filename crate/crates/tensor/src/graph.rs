//! Tape of recorded operations and their reverse-mode rules.
//!
//! Nodes are appended in evaluation order, so the tape index order is already
//! a topological order and the backward sweep is a single reverse scan.

use std::collections::HashMap;

use crate::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    AddBias {
        input: Var,
        bias: Var,
    },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sin(Var),
    Cos(Var),
    Asin(Var),
    Sqrt(Var),
    Square(Var),
    Atan2 {
        y: Var,
        x: Var,
    },
    Sum(Var),
    Mean(Var),
    MeanAxis {
        input: Var,
        axis: usize,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    L1Normalize {
        input: Var,
        axis: usize,
    },
    Conv1d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dilation: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::AddBias { .. } => "add_bias",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Asin(..) => "asin",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Atan2 { .. } => "atan2",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Softmax { .. } => "softmax",
            Op::L1Normalize { .. } => "l1_normalize",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
    param: Option<ParamId>,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    backward_done: bool,
    fault: Option<(String, f64)>,
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv2d_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (size + 2 * padding)
        .checked_sub(kernel)
        .map(|span| span / stride + 1)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Test hook: scales the input gradients produced by every `op_name`
    /// backward rule by `factor`. Used to prove the gradient checker catches
    /// a broken rule.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, op_name: &str, factor: f64) {
        self.fault = Some((op_name.to_string(), factor));
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf input whose gradient is tracked (readable via [`Graph::grad`]).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn asin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Asin(a), f64::asin)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Elementwise `atan2(y, x)`.
    pub fn atan2(&mut self, y: Var, x: Var) -> Result<Var> {
        self.zip_with(y, x, Op::Atan2 { y, x }, f64::atan2)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(TensorError::Dimension {
                op,
                msg: format!("axis {axis} out of range for rank {rank}"),
            });
        }
        Ok(())
    }

    /// Mean over `axis`, which is removed from the shape (a rank-1 input
    /// yields shape `[1]`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", a, axis)?;
        let t = self.value(a);
        let (outer, n, inner) = axis_extents(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for j in 0..inner {
                    out[o * inner + j] += t.data()[(o * n + i) * inner + j];
                }
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        let mut shape: Vec<usize> = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MeanAxis { input: a, axis }, rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let t = self.value(a);
        let (outer, n, inner) = axis_extents(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let max = (0..n).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..n {
                    let e = (x[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    out[at(i)] /= total;
                }
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax { input: a, axis }, rg))
    }

    /// Divides by the sum along `axis`. Inputs are expected to be
    /// nonnegative with a positive sum (e.g. softmax outputs).
    pub fn l1_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("l1_normalize", a, axis)?;
        let t = self.value(a);
        let (outer, n, inner) = axis_extents(t.shape(), axis);
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * n + i) * inner + j;
                let total: f64 = (0..n).map(|i| x[at(i)]).sum();
                for i in 0..n {
                    out[at(i)] = x[at(i)] / total;
                }
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::L1Normalize { input: a, axis }, rg))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::Dimension {
                op: "transpose",
                msg: format!("expected a matrix, got shape {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let out = transpose_raw(self.value(a).data(), m, n);
        let out = Tensor::new(&[n, m], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape).map_err(|_| TensorError::Dimension {
            op: "reshape",
            msg: format!("cannot reshape {:?} into {shape:?}", self.shape(a)),
        })?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| TensorError::Dimension {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        self.check_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        for &v in &inputs[1..] {
            let s = self.shape(v);
            let conform = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !conform {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let total: usize = inputs.iter().map(|&v| self.shape(v)[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let n = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", a, axis)?;
        let t = self.value(a);
        let (outer, n, inner) = axis_extents(t.shape(), axis);
        if len == 0 || start + len > n {
            return Err(TensorError::Dimension {
                op: "narrow",
                msg: format!("range {start}..{} outside axis of length {n}", start + len),
            });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&t.data()[from..from + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(&shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            Op::Narrow {
                input: a,
                axis,
                start,
            },
            rg,
        ))
    }

    /// Single element `index` of a tensor, as shape `[1]`.
    pub fn element(&mut self, a: Var, index: usize) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.narrow(flat, 0, index, 1)
    }

    /// Adds `bias` (length = last extent of `input`) to every row.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (s, sb) = (self.shape(input), self.shape(bias));
        let cols = *s.last().unwrap_or(&0);
        if sb != [cols] {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: s.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(input).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b[i % cols];
        }
        let rg = self.rg(&[input, bias]);
        Ok(self.push(out, Op::AddBias { input, bias }, rg))
    }

    /// Dilated causal convolution over time.
    ///
    /// `input` is `[c_in, time]`, `weight` is `[c_out, c_in, kernel]`, and the
    /// optional `bias` is `[c_out]`. The sequence is left-padded with
    /// `(kernel - 1) * dilation` zeros so the output keeps the input length and
    /// output step `t` reads only input steps `<= t`. Tap `kernel - 1` is
    /// aligned with the current step.
    pub fn conv1d_causal(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dilation: usize,
    ) -> Result<Var> {
        if dilation == 0 {
            return Err(TensorError::Config("dilation must be positive".into()));
        }
        let (sx, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[0] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (c_in, time) = (sx[0], sx[1]);
        let (c_out, kernel) = (sw[0], sw[2]);
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv1d",
                    lhs: sw,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![0.0; c_out * time];
        for o in 0..c_out {
            let b = bias.map_or(0.0, |b| self.value(b).data()[o]);
            for t in 0..time {
                let mut acc = b;
                for c in 0..c_in {
                    for j in 0..kernel {
                        let shift = (kernel - 1 - j) * dilation;
                        if t >= shift {
                            acc += w[(o * c_in + c) * kernel + j] * x[c * time + t - shift];
                        }
                    }
                }
                out[o * time + t] = acc;
            }
        }
        let out = Tensor::new(&[c_out, time], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            out,
            Op::Conv1d {
                input,
                weight,
                bias,
                dilation,
            },
            rg,
        ))
    }

    /// 2-D convolution with square kernels, symmetric zero padding and
    /// stride. `input` is `[c_in, h, w]`, `weight` is `[c_out, c_in, k, k]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(TensorError::Config("stride must be positive".into()));
        }
        let (sx, sw) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sw,
            });
        }
        let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
        let (c_out, k) = (sw[0], sw[2]);
        let (Some(ho), Some(wo)) = (
            conv2d_out(h, k, stride, padding),
            conv2d_out(wd, k, stride, padding),
        ) else {
            return Err(TensorError::Dimension {
                op: "conv2d",
                msg: format!("input {sx:?} smaller than kernel {k}"),
            });
        };
        if let Some(b) = bias {
            if self.shape(b) != [c_out] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: sw,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let mut out = vec![0.0; c_out * ho * wo];
        for o in 0..c_out {
            let b = bias.map_or(0.0, |b| self.value(b).data()[o]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b;
                    for c in 0..c_in {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += w[((o * c_in + c) * k + ky) * k + kx]
                                    * x[(c * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        let out = Tensor::new(&[c_out, ho, wo], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Clears all node gradients so [`Graph::backward`] may run again.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Populates the gradient of every node that requires one and writes
    /// parameter gradients into `params`; parameters loaded into the graph
    /// that the loss does not reach get a zero gradient. Fails without side effects if this
    /// graph already holds gradients or if any touched parameter in `params`
    /// still carries a gradient from an earlier pass; gradients never
    /// accumulate silently.
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(TensorError::Contract(
                "gradients already populated; call zero_grads before a second backward".into(),
            ));
        }
        if let Some(p) = self
            .params
            .keys()
            .map(|&id| params.get(id))
            .find(|p| p.grad.is_some())
        {
            return Err(TensorError::Contract(format!(
                "parameter `{}` already has a gradient; call zero_grads first",
                p.name
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let mut contribs = self.input_grads(node, &g);
            if let Some((name, factor)) = &self.fault {
                if name == node.op.name() {
                    for (_, d) in &mut contribs {
                        d.iter_mut().for_each(|v| *v *= factor);
                    }
                }
            }
            for (v, d) in contribs {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(d),
                }
            }
            grads[id] = Some(g);
        }

        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                let shape = self.nodes[id].value.shape().to_vec();
                let t = Tensor::new(&shape, g).expect("gradient shape matches value");
                if let Some(pid) = self.nodes[id].param {
                    params.get_mut(pid).grad = Some(t.clone());
                }
                self.nodes[id].grad = Some(t);
            }
        }
        for &pid in self.params.keys() {
            let p = params.get_mut(pid);
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
        self.backward_done = true;
        Ok(())
    }

    /// Vector-Jacobian products of `node` for upstream gradient `g`.
    fn input_grads(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| self.nodes[v.0].value.data();
        let y = node.value.data();
        let map1 = |a: Var, f: &dyn Fn(usize) -> f64| -> Vec<(Var, Vec<f64>)> {
            vec![(a, (0..g.len()).map(f).collect())]
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(xb).map(|(g, x)| g * x).collect()),
                    (*b, g.iter().zip(xa).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Scale(a, c) => map1(*a, &|i| g[i] * c),
            Op::AddScalar(a) | Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Relu(a) => {
                let x = val(*a);
                map1(*a, &|i| if x[i] > 0.0 { g[i] } else { 0.0 })
            }
            Op::Tanh(a) => map1(*a, &|i| g[i] * (1.0 - y[i] * y[i])),
            Op::Sigmoid(a) => map1(*a, &|i| g[i] * y[i] * (1.0 - y[i])),
            Op::Sin(a) => {
                let x = val(*a);
                map1(*a, &|i| g[i] * x[i].cos())
            }
            Op::Cos(a) => {
                let x = val(*a);
                map1(*a, &|i| -g[i] * x[i].sin())
            }
            Op::Asin(a) => {
                let x = val(*a);
                map1(*a, &|i| g[i] / (1.0 - x[i] * x[i]).sqrt())
            }
            // zero subgradient at the origin keeps RMSE of an exact fit finite
            Op::Sqrt(a) => map1(*a, &|i| if y[i] == 0.0 { 0.0 } else { g[i] / (2.0 * y[i]) }),
            Op::Square(a) => {
                let x = val(*a);
                map1(*a, &|i| 2.0 * x[i] * g[i])
            }
            Op::Atan2 { y: vy, x: vx } => {
                let (ys, xs) = (val(*vy), val(*vx));
                let r2 = |i: usize| xs[i] * xs[i] + ys[i] * ys[i];
                vec![
                    (*vy, (0..g.len()).map(|i| g[i] * xs[i] / r2(i)).collect()),
                    (*vx, (0..g.len()).map(|i| -g[i] * ys[i] / r2(i)).collect()),
                ]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::MeanAxis { input, axis } => {
                let shape = self.nodes[input.0].value.shape();
                let (outer, n, inner) = axis_extents(shape, *axis);
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for i in 0..n {
                        for j in 0..inner {
                            d[(o * n + i) * inner + j] = g[o * inner + j] / n as f64;
                        }
                    }
                }
                vec![(*input, d)]
            }
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = axis_extents(node.value.shape(), *axis);
                let mut d = vec![0.0; g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        let dot: f64 = (0..n).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..n {
                            d[at(i)] = y[at(i)] * (g[at(i)] - dot);
                        }
                    }
                }
                vec![(*input, d)]
            }
            Op::L1Normalize { input, axis } => {
                let x = val(*input);
                let (outer, n, inner) = axis_extents(node.value.shape(), *axis);
                let mut d = vec![0.0; g.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let at = |i: usize| (o * n + i) * inner + j;
                        let total: f64 = (0..n).map(|i| x[at(i)]).sum();
                        let dot: f64 = (0..n).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..n {
                            d[at(i)] = (g[at(i)] - dot) / total;
                        }
                    }
                }
                vec![(*input, d)]
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bt = transpose_raw(val(*b), k, n);
                let at = transpose_raw(val(*a), m, k);
                vec![
                    (*a, matmul_raw(g, &bt, m, n, k)),
                    (*b, matmul_raw(&at, g, k, m, n)),
                ]
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                vec![(*a, transpose_raw(g, s[0], s[1]))]
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = axis_extents(shape, *axis);
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(val(*v).len()))
                    .collect();
                for o in 0..outer {
                    let mut offset = 0;
                    for (k, v) in inputs.iter().enumerate() {
                        let n = self.nodes[v.0].value.shape()[*axis];
                        let from = (o * total + offset) * inner;
                        parts[k].extend_from_slice(&g[from..from + n * inner]);
                        offset += n;
                    }
                }
                inputs.iter().copied().zip(parts).collect()
            }
            Op::Narrow { input, axis, start } => {
                let shape = self.nodes[input.0].value.shape();
                let (outer, n, inner) = axis_extents(shape, *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    let from = (o * n + start) * inner;
                    d[from..from + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*input, d)]
            }
            Op::AddBias { input, bias } => {
                let cols = val(*bias).len();
                let mut db = vec![0.0; cols];
                for (i, v) in g.iter().enumerate() {
                    db[i % cols] += v;
                }
                vec![(*input, g.to_vec()), (*bias, db)]
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                dilation,
            } => {
                let (x, w) = (val(*input), val(*weight));
                let sw = self.nodes[weight.0].value.shape();
                let (c_out, c_in, kernel) = (sw[0], sw[1], sw[2]);
                let time = x.len() / c_in;
                let mut dx = vec![0.0; x.len()];
                let mut dw = vec![0.0; w.len()];
                let mut db = vec![0.0; c_out];
                for o in 0..c_out {
                    for t in 0..time {
                        let go = g[o * time + t];
                        db[o] += go;
                        for c in 0..c_in {
                            for j in 0..kernel {
                                let shift = (kernel - 1 - j) * dilation;
                                if t >= shift {
                                    let wi = (o * c_in + c) * kernel + j;
                                    let xi = c * time + t - shift;
                                    dx[xi] += go * w[wi];
                                    dw[wi] += go * x[xi];
                                }
                            }
                        }
                    }
                }
                let mut out = vec![(*input, dx), (*weight, dw)];
                out.extend(bias.map(|b| (b, db)));
                out
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (x, w) = (val(*input), val(*weight));
                let sx = self.nodes[input.0].value.shape();
                let sw = self.nodes[weight.0].value.shape();
                let so = node.value.shape();
                let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
                let (c_out, k) = (sw[0], sw[2]);
                let (ho, wo) = (so[1], so[2]);
                let mut dx = vec![0.0; x.len()];
                let mut dw = vec![0.0; w.len()];
                let mut db = vec![0.0; c_out];
                for o in 0..c_out {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let go = g[(o * ho + oy) * wo + ox];
                            db[o] += go;
                            for c in 0..c_in {
                                for ky in 0..k {
                                    let iy = (oy * stride + ky) as isize - *padding as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * stride + kx) as isize - *padding as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let wi = ((o * c_in + c) * k + ky) * k + kx;
                                        let xi = (c * h + iy as usize) * wd + ix as usize;
                                        dx[xi] += go * w[wi];
                                        dw[wi] += go * x[xi];
                                    }
                                }
                            }
                        }
                    }
                }
                let mut out = vec![(*input, dx), (*weight, dw)];
                out.extend(bias.map(|b| (b, db)));
                out
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}
