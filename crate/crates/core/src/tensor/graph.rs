//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation pushes a node
//! holding its output value and the inputs it needs for the backward pass, so
//! node order is a topological order and [`Graph::backward`] is a single
//! reverse sweep. Gradients are kept only for leaves created with
//! [`Graph::param`]; constants from [`Graph::input`] never receive one.

use super::kernels::{self, ConvGeom};
use super::{nchw, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Statistics source for batch normalization.
#[derive(Clone, Debug)]
pub enum BatchNormMode<T> {
    /// Normalize with batch statistics; the returned node exposes them via
    /// [`Graph::batchnorm_stats`].
    Train { eps: T },
    /// Normalize with fixed running statistics.
    Eval { mean: Vec<T>, var: Vec<T>, eps: T },
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Neg,
    Log,
    Square,
    Abs,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    ScalarMul(Var, T),
    AddScalar(Var, T),
    Clamp(Var, T, T),
    LeakyRelu(Var, T),
    /// `x / divisor * factor` with both constants detached.
    ScaleByConst { input: Var, divisor: T, factor: T },
    SumAxes { input: Var, axes: Vec<usize> },
    MeanAxes { input: Var, axes: Vec<usize>, count: usize },
    Reshape(Var),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    BatchNorm { input: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T>, train: bool },
    Upsample2x(Var),
    Blur { input: Var, kernel: Vec<T> },
    Linear { input: Var, weight: Var, bias: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
    /// Batch statistics (mean, biased var) recorded by train-mode batch norm.
    stats: Option<(Vec<f64>, Vec<f64>)>,
}

/// Recording of a computation, differentiated by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
            stats: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, absent until a backward pass reaches it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Mean and biased variance recorded by a train-mode [`Graph::batchnorm2d`] node.
    pub fn batchnorm_stats(&self, v: Var) -> Option<&(Vec<f64>, Vec<f64>)> {
        self.nodes[v.0].stats.as_ref()
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if kind == Unary::Log {
            if let Some(min) = xv.data().iter().copied().reduce(T::min) {
                if !(min > T::zero()) {
                    return Err(Error::NonPositiveLog { min: min.as_f64() });
                }
            }
        }
        let f: fn(T) -> T = match kind {
            Unary::Neg => |v| -v,
            Unary::Log => |v| v.ln(),
            Unary::Square => |v| v * v,
            Unary::Abs => |v| v.abs(),
            Unary::Sigmoid => |v| T::one() / (T::one() + (-v).exp()),
        };
        let out = xv.map(f);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Unary(kind, x), rg))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    /// Natural log; errors with the minimum offending value on non-positive input.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Square, x)
    }

    /// `|x|`, with subgradient 0 at 0.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let out = if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(av.shape().to_vec(), data)?
        } else if bv.numel() == 1 {
            let y = bv.data()[0];
            av.map(|x| f(x, y))
        } else if av.numel() == 1 {
            let x = av.data()[0];
            bv.map(|y| f(x, y))
        } else {
            return Err(Error::shape(
                match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                    Binary::Div => "div",
                },
                "operand shape",
                av.shape(),
                bv.shape(),
            ));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scalar_mul(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.rg(x);
        self.push(out, Op::ScalarMul(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x, c), rg)
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the interval
    /// or at an endpoint that was not exceeded.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        let out = self.value(x).map(|v| v.max(lo).min(hi));
        let rg = self.rg(x);
        Ok(self.push(out, Op::Clamp(x, lo, hi), rg))
    }

    /// `x` if `x >= 0`, else `slope * x`; derivative at 0 is 1.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        if slope < T::zero() || slope >= T::one() {
            return Err(Error::InvalidArgument(format!("leaky slope {slope} outside [0,1)")));
        }
        let out = self
            .value(x)
            .map(|v| if v >= T::zero() { v } else { slope * v });
        let rg = self.rg(x);
        Ok(self.push(out, Op::LeakyRelu(x, slope), rg))
    }

    /// `x / divisor * factor`, treating both as constants.
    pub fn scale_by_const(&mut self, x: Var, divisor: T, factor: T) -> Var {
        let out = self.value(x).map(|v| v / divisor * factor);
        let rg = self.rg(x);
        self.push(out, Op::ScaleByConst { input: x, divisor, factor }, rg)
    }

    fn reduce_shape(op: &'static str, shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut count = 1;
        for a in axes {
            if *a >= shape.len() {
                return Err(Error::shape(op, "axis", format!("< {}", shape.len()), a));
            }
        }
        for (i, &d) in shape.iter().enumerate() {
            if axes.contains(&i) {
                count *= d;
            } else {
                out.push(d);
            }
        }
        Ok((out, count))
    }

    fn sum_axes_raw(value: &Tensor<T>, axes: &[usize], out_shape: &[usize]) -> Tensor<T> {
        let shape = value.shape();
        let mut out = vec![T::zero(); out_shape.iter().product()];
        let out_strides = strides_skipping(shape, axes);
        for (flat, &v) in value.data().iter().enumerate() {
            let o = map_index(flat, shape, &out_strides);
            out[o] = out[o] + v;
        }
        Tensor {
            shape: out_shape.to_vec(),
            data: out,
        }
    }

    /// Sum over `axes`, or over everything when `axes` is `None`.
    pub fn sum(&mut self, x: Var, axes: Option<&[usize]>) -> Result<Var> {
        let value = self.value(x);
        if value.numel() == 0 {
            return Err(Error::EmptyReduction { op: "sum" });
        }
        let all: Vec<usize> = (0..value.rank()).collect();
        let axes = axes.map(<[usize]>::to_vec).unwrap_or(all);
        let (out_shape, _) = Self::reduce_shape("sum", value.shape(), &axes)?;
        let out = Self::sum_axes_raw(value, &axes, &out_shape);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SumAxes { input: x, axes }, rg))
    }

    pub fn mean(&mut self, x: Var, axes: Option<&[usize]>) -> Result<Var> {
        let value = self.value(x);
        if value.numel() == 0 {
            return Err(Error::EmptyReduction { op: "mean" });
        }
        let all: Vec<usize> = (0..value.rank()).collect();
        let axes = axes.map(<[usize]>::to_vec).unwrap_or(all);
        let (out_shape, count) = Self::reduce_shape("mean", value.shape(), &axes)?;
        let inv = T::one() / T::from_f64(count as f64);
        let out = Self::sum_axes_raw(value, &axes, &out_shape).map(|v| v * inv);
        let rg = self.rg(x);
        Ok(self.push(out, Op::MeanAxes { input: x, axes, count }, rg))
    }

    /// Maximum over all elements as a detached constant node.
    pub fn max(&mut self, x: Var) -> Result<Var> {
        let m = self
            .value(x)
            .max_value()
            .ok_or(Error::EmptyReduction { op: "max" })?;
        Ok(self.input(Tensor::scalar(m)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let [n, cin, h, w] = nchw("conv2d", self.value(input).shape())?;
        let [cout, wcin, kh, kw] = nchw("conv2d", self.value(weight).shape())?;
        if wcin != cin {
            return Err(Error::shape("conv2d", "input channels", wcin, cin));
        }
        if kh > h + 2 * padding {
            return Err(Error::shape("conv2d", "kernel height", format!("<= {}", h + 2 * padding), kh));
        }
        if kw > w + 2 * padding {
            return Err(Error::shape("conv2d", "kernel width", format!("<= {}", w + 2 * padding), kw));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("conv2d", "bias", [cout], self.value(b).shape()));
            }
        }
        let geom = ConvGeom {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
        };
        let data = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::new([n, cout, geom.ho, geom.wo], data)?;
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { input, weight, bias, geom }, rg))
    }

    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<T>,
    ) -> Result<Var> {
        let shape = nchw("batchnorm2d", self.value(input).shape())?;
        let c = shape[1];
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::shape("batchnorm2d", name, [c], self.value(v).shape()));
            }
        }
        let hw = shape[2] * shape[3];
        if shape[0] * hw == 0 {
            return Err(Error::EmptyReduction { op: "batchnorm2d" });
        }
        let (mean, inv_std, train, stats) = match mode {
            BatchNormMode::Train { eps } => {
                let (m, v) = kernels::channel_stats(self.value(input).data(), shape[0], c, hw);
                let mean: Vec<T> = m.iter().map(|&x| T::from_f64(x)).collect();
                let inv: Vec<T> = v
                    .iter()
                    .map(|&x| T::from_f64(1.0 / (x + eps.as_f64()).sqrt()))
                    .collect();
                (mean, inv, true, Some((m, v)))
            }
            BatchNormMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm2d", "running stats", c, mean.len()));
                }
                let inv = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv, false, None)
            }
        };
        let data = kernels::batchnorm_apply(
            self.value(input).data(),
            shape,
            &mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let out = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        let v = self.push(
            out,
            Op::BatchNorm { input, gamma, beta, mean, inv_std, train },
            rg,
        );
        self.nodes[v.0].stats = stats;
        Ok(v)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let shape = nchw("upsample_nearest2x", self.value(x).shape())?;
        let data = kernels::upsample2x_forward(self.value(x).data(), shape);
        let out = Tensor::new([shape[0], shape[1], shape[2] * 2, shape[3] * 2], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample2x(x), rg))
    }

    /// Depthwise separable filtering with a symmetric 1-D kernel and reflect padding.
    pub fn blur(&mut self, x: Var, kernel: &[T]) -> Result<Var> {
        let shape = nchw("blur", self.value(x).shape())?;
        let k = kernel.len();
        if k.is_multiple_of(2) {
            return Err(Error::InvalidArgument("blur kernel length must be odd".into()));
        }
        if shape[2] < k || shape[3] < k {
            return Err(Error::shape("blur", "spatial size", format!(">= {k}"), [shape[2], shape[3]]));
        }
        let data = kernels::blur_forward(self.value(x).data(), shape, kernel);
        let out = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Blur { input: x, kernel: kernel.to_vec() }, rg))
    }

    /// `x[n,k] * weight[m,k]^T + bias[m]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let (n, k) = match xs[..] {
            [n, k] => (n, k),
            _ => return Err(Error::shape("linear", "input rank", 2, xs.len())),
        };
        let m = match ws[..] {
            [m, wk] if wk == k => m,
            _ => return Err(Error::shape("linear", "weight", format!("[_, {k}]"), ws)),
        };
        if self.value(bias).shape() != [m] {
            return Err(Error::shape("linear", "bias", [m], self.value(bias).shape()));
        }
        let data = kernels::linear_forward(
            self.value(x).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            n,
            k,
            m,
        );
        let out = Tensor::new([n, m], data)?;
        let rg = self.rg(x) || self.rg(weight) || self.rg(bias);
        Ok(self.push(out, Op::Linear { input: x, weight, bias }, rg))
    }

    /// Mean negative log-softmax of the labelled class over `[n, k]` logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        let (n, k) = match shape[..] {
            [n, k] => (n, k),
            _ => return Err(Error::shape("cross_entropy", "logits rank", 2, shape.len())),
        };
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", "label count", n, labels.len()));
        }
        if n == 0 {
            return Err(Error::EmptyReduction { op: "cross_entropy" });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range [0,{k})")));
        }
        let data = self.value(logits).data();
        let mut loss = 0.0;
        for (row, &l) in data.chunks(k).zip(labels) {
            let mx = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v.as_f64() - mx).exp()).sum::<f64>().ln();
            loss += lse - row[l].as_f64();
        }
        let probs = kernels::softmax_rows(data, k);
        let out = Tensor::scalar(T::from_f64(loss / n as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    /// Accumulates `d root / d leaf` into every differentiable leaf reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        if !self.rg(root) {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        pending[root.0] = Some(Tensor::full(root_value.shape().to_vec(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    accumulate(&mut self.nodes[i].grad, g);
                }
                continue;
            }
            for (input, grad) in self.local_grads(i, &g)? {
                if self.rg(input) {
                    accumulate(&mut pending[input.0], grad);
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        let zip_map = |x: &Tensor<T>, f: &dyn Fn(T, T) -> T| -> Tensor<T> {
            Tensor {
                shape: x.shape.clone(),
                data: x.data.iter().zip(&g.data).map(|(&a, &b)| f(a, b)).collect(),
            }
        };
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::Unary(kind, x) => {
                let xv = self.value(*x);
                let yv = &node.value;
                let gx = match kind {
                    Unary::Neg => g.map(|v| -v),
                    Unary::Log => zip_map(xv, &|x, g| g / x),
                    Unary::Square => zip_map(xv, &|x, g| (x + x) * g),
                    Unary::Abs => zip_map(xv, &|x, g| {
                        if x > T::zero() {
                            g
                        } else if x < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    }),
                    Unary::Sigmoid => zip_map(yv, &|y, g| g * y * (T::one() - y)),
                };
                vec![(*x, gx)]
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let full_shape = node.value.shape();
                let at = |t: &Tensor<T>, idx: usize| if t.numel() == 1 { t.data[0] } else { t.data[idx] };
                let mut ga = Vec::with_capacity(g.numel());
                let mut gb = Vec::with_capacity(g.numel());
                for (idx, &gv) in g.data.iter().enumerate() {
                    let (x, y) = (at(av, idx), at(bv, idx));
                    let (da, db) = match kind {
                        Binary::Add => (gv, gv),
                        Binary::Sub => (gv, -gv),
                        Binary::Mul => (gv * y, gv * x),
                        Binary::Div => (gv / y, -gv * x / (y * y)),
                    };
                    ga.push(da);
                    gb.push(db);
                }
                let fold = |t: &Tensor<T>, grads: Vec<T>| -> Tensor<T> {
                    if t.shape() == full_shape {
                        Tensor { shape: t.shape.clone(), data: grads }
                    } else {
                        Tensor { shape: t.shape.clone(), data: vec![grads.into_iter().sum()] }
                    }
                };
                vec![(*a, fold(av, ga)), (*b, fold(bv, gb))]
            }
            Op::ScalarMul(x, c) => vec![(*x, g.map(|v| v * *c))],
            Op::AddScalar(x, _) => vec![(*x, g.clone())],
            Op::Clamp(x, lo, hi) => {
                vec![(*x, zip_map(self.value(*x), &|x, g| if x < *lo || x > *hi { T::zero() } else { g }))]
            }
            Op::LeakyRelu(x, slope) => {
                vec![(*x, zip_map(self.value(*x), &|x, g| if x >= T::zero() { g } else { *slope * g }))]
            }
            Op::ScaleByConst { input, divisor, factor } => {
                let s = *factor / *divisor;
                vec![(*input, g.map(|v| v * s))]
            }
            Op::SumAxes { input, axes } => {
                vec![(*input, broadcast_back(self.value(*input).shape(), axes, g, T::one()))]
            }
            Op::MeanAxes { input, axes, count } => {
                let inv = T::one() / T::from_f64(*count as f64);
                vec![(*input, broadcast_back(self.value(*input).shape(), axes, g, inv))]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(self.value(*x).shape().to_vec())?)],
            Op::Conv2d { input, weight, bias, geom } => {
                let need = (
                    self.rg(*input),
                    self.rg(*weight),
                    bias.is_some_and(|b| self.rg(b)),
                );
                let (gi, gw, gb) = kernels::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g.data(),
                    need,
                );
                let mut out = Vec::new();
                if let Some(gi) = gi {
                    out.push((*input, Tensor::new(self.value(*input).shape().to_vec(), gi)?));
                }
                if let Some(gw) = gw {
                    out.push((*weight, Tensor::new(self.value(*weight).shape().to_vec(), gw)?));
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    out.push((*b, Tensor::from_vec(gb)));
                }
                out
            }
            Op::BatchNorm { input, gamma, beta, mean, inv_std, train } => {
                let shape = nchw("batchnorm2d", self.value(*input).shape())?;
                let (gx, ggamma, gbeta) = kernels::batchnorm_backward(
                    self.value(*input).data(),
                    shape,
                    mean,
                    inv_std,
                    self.value(*gamma).data(),
                    g.data(),
                    *train,
                );
                vec![
                    (*input, Tensor::new(shape.to_vec(), gx)?),
                    (*gamma, Tensor::from_vec(ggamma)),
                    (*beta, Tensor::from_vec(gbeta)),
                ]
            }
            Op::Upsample2x(x) => {
                let shape = nchw("upsample_nearest2x", self.value(*x).shape())?;
                let gi = kernels::upsample2x_backward(g.data(), shape);
                vec![(*x, Tensor::new(shape.to_vec(), gi)?)]
            }
            Op::Blur { input, kernel } => {
                let shape = nchw("blur", self.value(*input).shape())?;
                let gi = kernels::blur_backward(g.data(), shape, kernel);
                vec![(*input, Tensor::new(shape.to_vec(), gi)?)]
            }
            Op::Linear { input, weight, bias } => {
                let xs = self.value(*input).shape();
                let (n, k) = (xs[0], xs[1]);
                let m = self.value(*weight).shape()[0];
                let (gx, gw, gb) = kernels::linear_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g.data(),
                    n,
                    k,
                    m,
                );
                vec![
                    (*input, Tensor::new([n, k], gx)?),
                    (*weight, Tensor::new([m, k], gw)?),
                    (*bias, Tensor::from_vec(gb)),
                ]
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let shape = self.value(*logits).shape().to_vec();
                let (n, k) = (shape[0], shape[1]);
                let scale = g.data[0] / T::from_f64(n as f64);
                let mut gl = probs.clone();
                for (row, &l) in gl.chunks_mut(k).zip(labels) {
                    row[l] = row[l] - T::one();
                    for v in row.iter_mut() {
                        *v = *v * scale;
                    }
                }
                vec![(*logits, Tensor::new(shape, gl)?)]
            }
        };
        Ok(out)
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (a, b) in existing.data.iter_mut().zip(g.data) {
                *a = *a + b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Row-major strides of the reduced tensor laid over the full shape; reduced axes get 0.
fn strides_skipping(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if !axes.contains(&i) {
            strides[i] = acc;
            acc *= shape[i];
        }
    }
    strides
}

fn map_index(mut flat: usize, shape: &[usize], strides: &[usize]) -> usize {
    let mut o = 0;
    for i in (0..shape.len()).rev() {
        let d = shape[i];
        o += (flat % d) * strides[i];
        flat /= d;
    }
    o
}

fn broadcast_back<T: Element>(shape: &[usize], axes: &[usize], g: &Tensor<T>, scale: T) -> Tensor<T> {
    let strides = strides_skipping(shape, axes);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|flat| g.data[map_index(flat, shape, &strides)] * scale)
        .collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}
