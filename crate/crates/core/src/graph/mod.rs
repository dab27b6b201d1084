//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value,
//! and [`Graph::backward`] walks the tape once in reverse. Leaves are either
//! parameters (gradients requested) or constants (never differentiated).
//! Nodes whose inputs are all constant are themselves constant and are
//! skipped on the way back.
//!
//! Constants can borrow their tensor (`constant_ref`), so large weights are
//! not copied into every per-iteration tape.

mod kernels;

use alloc::borrow::Cow;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::tensor::Tensor;

pub use kernels::{channel_covariance, contextual_forward, huber, AxisMap};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<'a> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    ScalarMul(Var, Var),
    ScalarAdd(Var, Var),
    ScalarPow(Var, Var),
    Powf(Var, f64),
    ChannelMix {
        x: Var,
        weights: Vec<f64>,
        out_channels: usize,
    },
    ChannelScale(Var, Var),
    ChannelBias(Var, Var),
    Resample {
        x: Var,
        rows: Cow<'a, AxisMap>,
        cols: Cow<'a, AxisMap>,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
        gain: f64,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Linear {
        weight: Var,
        x: Var,
        bias: Option<Var>,
    },
    GlobalAvgPool(Var),
    Sum(Var),
    MeanSquaredError(Var, Var),
    MeanAbsoluteError(Var, Var),
    CovarianceHuber {
        x: Var,
        target: Vec<f64>,
        delta: f64,
    },
    Contextual {
        source: Var,
        target: Cow<'a, Tensor>,
        bandwidth: f64,
    },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op<'a>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` is a
    /// constant or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op<'a>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    pub fn param_ref(&mut self, t: &'a Tensor) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "node {v:?} is not a scalar");
        t.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `x * scale + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| v * scale + shift);
        let rg = self.rg(&[x]);
        self.push(value, Op::Affine { x, scale }, rg)
    }

    /// Multiplies every element of `x` by the single-element node `s`.
    pub fn scalar_mul(&mut self, x: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let value = self.value(x).map(|v| v * k);
        let rg = self.rg(&[x, s]);
        self.push(value, Op::ScalarMul(x, s), rg)
    }

    pub fn scalar_add(&mut self, x: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let value = self.value(x).map(|v| v + k);
        let rg = self.rg(&[x, s]);
        self.push(value, Op::ScalarAdd(x, s), rg)
    }

    /// `max(x, 0)^p` with a learnable exponent `p`. Non-positive bases map to
    /// zero with zero gradient.
    pub fn scalar_pow(&mut self, x: Var, p: Var) -> Var {
        let e = self.scalar(p);
        let value = self.value(x).map(|v| if v > 0.0 { v.powf(e) } else { 0.0 });
        let rg = self.rg(&[x, p]);
        self.push(value, Op::ScalarPow(x, p), rg)
    }

    /// Elementwise `x^e` for a constant exponent; `x` must be positive.
    pub fn powf(&mut self, x: Var, e: f64) -> Var {
        let value = self.value(x).map(|v| v.powf(e));
        let rg = self.rg(&[x]);
        self.push(value, Op::Powf(x, e), rg)
    }

    /// Per-pixel linear map between channels: `out[o] = sum_i w[o][i] * x[i]`.
    /// `weights` is row-major `[out_channels, in_channels]`.
    pub fn channel_mix(&mut self, x: Var, weights: &[f64], out_channels: usize) -> Var {
        let value = kernels::channel_mix(self.value(x), weights, out_channels);
        let rg = self.rg(&[x]);
        self.push(
            value,
            Op::ChannelMix {
                x,
                weights: weights.to_vec(),
                out_channels,
            },
            rg,
        )
    }

    /// Scales channel `c` of a `[C, H, W]` node by `s[c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Var {
        let value = kernels::channel_scale(self.value(x), self.value(s));
        let rg = self.rg(&[x, s]);
        self.push(value, Op::ChannelScale(x, s), rg)
    }

    pub fn channel_bias(&mut self, x: Var, b: Var) -> Var {
        let value = kernels::channel_bias(self.value(x), self.value(b));
        let rg = self.rg(&[x, b]);
        self.push(value, Op::ChannelBias(x, b), rg)
    }

    /// Separable linear resampling of a `[C, H, W]` node: `rows` maps the
    /// height axis, `cols` the width axis.
    pub fn resample(&mut self, x: Var, rows: Cow<'a, AxisMap>, cols: Cow<'a, AxisMap>) -> Var {
        let value = kernels::resample(self.value(x), &rows, &cols);
        let rg = self.rg(&[x]);
        self.push(value, Op::Resample { x, rows, cols }, rg)
    }

    /// Zero-padded 2-D convolution. `weight` is `[out, in, kh, kw]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let value = kernels::conv2d(
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        );
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        self.push(
            value,
            Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                pad,
            },
            rg,
        )
    }

    /// `gain * (x if x > 0 else slope * x)`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64, gain: f64) -> Var {
        let value = self
            .value(x)
            .map(|v| gain * if v > 0.0 { v } else { slope * v });
        let rg = self.rg(&[x]);
        self.push(value, Op::LeakyRelu { x, slope, gain }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0, 1.0)
    }

    /// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (value, argmax) = kernels::max_pool2(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::MaxPool2 { x, argmax }, rg)
    }

    /// Dense layer `weight · x + bias` with `weight` shaped `[out, in]`.
    pub fn linear(&mut self, weight: Var, x: Var, bias: Option<Var>) -> Var {
        let value = kernels::linear(
            self.value(weight),
            self.value(x),
            bias.map(|b| self.value(b)),
        );
        let mut inputs = vec![weight, x];
        inputs.extend(bias);
        let rg = self.rg(&inputs);
        self.push(value, Op::Linear { weight, x, bias }, rg)
    }

    /// Mean over the spatial axes of a `[C, H, W]` node, giving `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (c, h, w) = self.value(x).chw();
        let n = (h * w) as f64;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / n)
            .collect();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[c], data), Op::GlobalAvgPool(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.affine(s, 1.0 / n, 0.0)
    }

    /// Sum of single-element nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Var {
        let mut iter = terms.iter();
        let Some(&first) = iter.next() else {
            return self.constant(Tensor::scalar(0.0));
        };
        iter.fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let value = kernels::mean_squared_error(self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(value), Op::MeanSquaredError(a, b), rg)
    }

    pub fn mae(&mut self, a: Var, b: Var) -> Var {
        let value = kernels::mean_absolute_error(self.value(a), self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(value), Op::MeanAbsoluteError(a, b), rg)
    }

    /// Sum of elementwise Huber penalties between the mean-centred channel
    /// covariance of `x` (`[C, H, W]`) and a fixed `C x C` target.
    pub fn covariance_huber(&mut self, x: Var, target: &[f64], delta: f64) -> Var {
        let value = kernels::covariance_huber(self.value(x), target, delta);
        let rg = self.rg(&[x]);
        self.push(
            Tensor::scalar(value),
            Op::CovarianceHuber {
                x,
                target: target.to_vec(),
                delta,
            },
            rg,
        )
    }

    /// Contextual (best-match) feature loss of `source` against a fixed
    /// `target` feature map. Gradients flow to `source` only.
    pub fn contextual(&mut self, source: Var, target: Cow<'a, Tensor>, bandwidth: f64) -> Var {
        let value = kernels::contextual_forward(self.value(source), &target, bandwidth);
        let rg = self.rg(&[source]);
        self.push(
            Tensor::scalar(value),
            Op::Contextual {
                source,
                target,
                bandwidth,
            },
            rg,
        )
    }

    /// Gradients of the single-element node `loss` with respect to every
    /// parameter it depends on.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<'a>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Affine { x, scale } => {
                let k = *scale;
                self.accumulate(grads, *x, g.map(|v| v * k));
            }
            Op::ScalarMul(x, s) => {
                let k = self.scalar(*s);
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.map(|v| v * k));
                }
                if self.wants(*s) {
                    let d = dot(g.data(), self.value(*x).data());
                    self.accumulate(grads, *s, Tensor::scalar(d));
                }
            }
            Op::ScalarAdd(x, s) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*s) {
                    self.accumulate(grads, *s, Tensor::scalar(g.sum()));
                }
            }
            Op::ScalarPow(x, p) => {
                let e = self.scalar(*p);
                let xv = self.value(*x);
                if self.wants(*x) {
                    let gx = g.zip_map(xv, |gv, v| {
                        if v > 0.0 {
                            gv * e * v.powf(e - 1.0)
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(grads, *x, gx);
                }
                if self.wants(*p) {
                    let y = &node.value;
                    let mut d = 0.0;
                    for ((gv, v), yv) in g.data().iter().zip(xv.data()).zip(y.data()) {
                        if *v > 0.0 {
                            d += gv * yv * v.ln();
                        }
                    }
                    self.accumulate(grads, *p, Tensor::scalar(d));
                }
            }
            Op::Powf(x, e) => {
                let e = *e;
                let gx = g.zip_map(self.value(*x), |gv, v| gv * e * v.powf(e - 1.0));
                self.accumulate(grads, *x, gx);
            }
            Op::ChannelMix {
                x,
                weights,
                out_channels,
            } => {
                let gx = kernels::channel_mix_backward(g, weights, *out_channels);
                self.accumulate(grads, *x, gx);
            }
            Op::ChannelScale(x, s) => {
                if self.wants(*x) {
                    self.accumulate(grads, *x, kernels::channel_scale(g, self.value(*s)));
                }
                if self.wants(*s) {
                    let gs = kernels::channel_dot(g, self.value(*x));
                    self.accumulate(grads, *s, gs);
                }
            }
            Op::ChannelBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, kernels::channel_sum(g));
                }
            }
            Op::Resample { x, rows, cols } => {
                let (c, h, w) = self.value(*x).chw();
                let gx = kernels::resample_transpose(g, rows, cols, c, h, w);
                self.accumulate(grads, *x, gx);
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                stride,
                pad,
            } => {
                let (gx, gw, gb) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*weight),
                    g,
                    *stride,
                    *pad,
                    self.wants(*x),
                    self.wants(*weight),
                    bias.is_some_and(|b| self.wants(b)),
                );
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *weight, gw);
                }
                if let (Some(b), Some(gb)) = (bias, gb) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::LeakyRelu { x, slope, gain } => {
                let (slope, gain) = (*slope, *gain);
                let gx = g.zip_map(self.value(*x), |gv, v| {
                    gain * if v > 0.0 { gv } else { slope * gv }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                for (gv, &idx) in g.data().iter().zip(argmax) {
                    gx.data_mut()[idx] += gv;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Linear { weight, x, bias } => {
                let wv = self.value(*weight);
                let xv = self.value(*x);
                let (out, inp) = (wv.shape()[0], wv.shape()[1]);
                if self.wants(*weight) {
                    let mut gw = vec![0.0; out * inp];
                    for o in 0..out {
                        let go = g.data()[o];
                        if go != 0.0 {
                            for (dst, xi) in gw[o * inp..(o + 1) * inp].iter_mut().zip(xv.data()) {
                                *dst = go * xi;
                            }
                        }
                    }
                    self.accumulate(grads, *weight, Tensor::new(&[out, inp], gw));
                }
                if self.wants(*x) {
                    let mut gx = vec![0.0; inp];
                    for o in 0..out {
                        let go = g.data()[o];
                        for (dst, wi) in gx.iter_mut().zip(&wv.data()[o * inp..(o + 1) * inp]) {
                            *dst += go * wi;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(xv.shape(), gx));
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        self.accumulate(
                            grads,
                            *b,
                            Tensor::new(self.value(*b).shape(), g.data().to_vec()),
                        );
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let (c, h, w) = self.value(*x).chw();
                let n = h * w;
                let mut gx = Vec::with_capacity(c * n);
                for ch in 0..c {
                    let v = g.data()[ch] / n as f64;
                    gx.extend(core::iter::repeat_n(v, n));
                }
                self.accumulate(grads, *x, Tensor::new(&[c, h, w], gx));
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gv));
            }
            Op::MeanSquaredError(a, b) => {
                let gv = g.data()[0];
                let av = self.value(*a);
                let bv = self.value(*b);
                let k = 2.0 * gv / av.len() as f64;
                let diff = av.zip_map(bv, |x, y| k * (x - y));
                if self.wants(*b) {
                    self.accumulate(grads, *b, diff.map(|v| -v));
                }
                self.accumulate(grads, *a, diff);
            }
            Op::MeanAbsoluteError(a, b) => {
                let gv = g.data()[0];
                let av = self.value(*a);
                let k = gv / av.len() as f64;
                let sign = av.zip_map(self.value(*b), |x, y| {
                    if x > y {
                        k
                    } else if x < y {
                        -k
                    } else {
                        0.0
                    }
                });
                if self.wants(*b) {
                    self.accumulate(grads, *b, sign.map(|v| -v));
                }
                self.accumulate(grads, *a, sign);
            }
            Op::CovarianceHuber { x, target, delta } => {
                let mut gx = kernels::covariance_huber_backward(self.value(*x), target, *delta);
                let gv = g.data()[0];
                gx.data_mut().iter_mut().for_each(|v| *v *= gv);
                self.accumulate(grads, *x, gx);
            }
            Op::Contextual {
                source,
                target,
                bandwidth,
            } => {
                let mut gs = kernels::contextual_backward(self.value(*source), target, *bandwidth);
                let gv = g.data()[0];
                gs.data_mut().iter_mut().for_each(|v| *v *= gv);
                self.accumulate(grads, *source, gs);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
