//! The recording tape.
//!
//! Every operation appends a node holding its forward value and enough context to
//! compute vector-Jacobian products. A graph lives on one thread; build a fresh one
//! per forward pass.

use std::cell::{Ref, RefCell};

use super::conv::{self, ConvGeometry, ConvShape};
use super::resize;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LOG_FLOOR: f64 = 1e-12;

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Conv {
        input: Var,
        weight: Var,
        bias: Var,
        shape: ConvShape,
    },
    Resize {
        input: Var,
    },
    GlobalAvg(Var),
    GlobalMax {
        input: Var,
        argmax: Vec<usize>,
    },
    ScaleChannels {
        x: Var,
        scale: Var,
    },
    Sum(Var),
    Bce {
        pred: Var,
        target: Vec<f64>,
    },
    Dice {
        pred: Var,
        target: Vec<f64>,
        eps: f64,
    },
    Smooth {
        pred: Var,
        wx: Vec<f64>,
        wy: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients of a scalar with respect to the tracked leaves of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the leaf is untracked or does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "shape",
            format!("{}: {:?} vs {:?}", what, a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        None => *slot = Some(delta),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A constant input; no gradient is produced for it.
    pub fn input(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A tracked leaf whose gradient `backward` reports.
    pub fn param(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            same_shape(&ta, &tb, "add")?;
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            Tensor::new(ta.shape(), data)?
        };
        Ok(self.push(value, Op::Add(a, b), self.tracked(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            same_shape(&ta, &tb, "mul")?;
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
            Tensor::new(ta.shape(), data)?
        };
        Ok(self.push(value, Op::Mul(a, b), self.tracked(&[a, b])))
    }

    pub fn scalar_mul(&self, a: Var, k: f64) -> Var {
        let value = self.value(a).map(|x| k * x);
        self.push(value, Op::ScalarMul(a, k), self.tracked(&[a]))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), self.tracked(&[a]))
    }

    pub fn relu(&self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(value, Op::Relu(a), self.tracked(&[a]))
    }

    /// Channel-wise concatenation of `[B,C_k,H,W]` operands.
    pub fn concat_channels(&self, parts: &[Var]) -> Result<Var> {
        let value = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
            let refs: Vec<&Tensor> = vals.iter().map(|r| &**r).collect();
            Tensor::concat_channels(&refs)?
        };
        Ok(self.push(value, Op::Concat(parts.to_vec()), self.tracked(parts)))
    }

    /// Cross-correlation of `input [B,Cin,H,W]` with `weight [Cout,Cin,kH,kW]` plus `bias [Cout]`.
    pub fn conv2d(&self, input: Var, weight: Var, bias: Var, geom: ConvGeometry) -> Result<Var> {
        let (value, shape) = {
            let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
            let shape = ConvShape::infer(x.shape(), w.shape(), b.shape(), geom)?;
            let out = conv::forward(x.data(), w.data(), b.data(), &shape);
            (Tensor::new(shape.output_shape(), out)?, shape)
        };
        let op = Op::Conv {
            input,
            weight,
            bias,
            shape,
        };
        Ok(self.push(value, op, self.tracked(&[input, weight, bias])))
    }

    /// Corner-aligned bilinear resize of a `[B,C,H,W]` tensor to `[B,C,out_h,out_w]`.
    pub fn bilinear_resize(&self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 {
            return Err(Error::dim("height", "target height must be at least 1"));
        }
        if out_w == 0 {
            return Err(Error::dim("width", "target width must be at least 1"));
        }
        let value = {
            let x = self.value(input);
            let (b, c, h, w) = x.dims4()?;
            if h == 0 || w == 0 {
                return Err(Error::dim("spatial", "cannot resize an empty plane"));
            }
            if (h, w) == (out_h, out_w) {
                x.clone()
            } else {
                Tensor::new([b, c, out_h, out_w], resize::forward(x.data(), b * c, h, w, out_h, out_w))?
            }
        };
        Ok(self.push(value, Op::Resize { input }, self.tracked(&[input])))
    }

    pub fn global_avg_pool(&self, input: Var) -> Result<Var> {
        let value = {
            let x = self.value(input);
            let (b, c, h, w) = x.dims4()?;
            if h * w == 0 {
                return Err(Error::dim("spatial", "global pooling over an empty plane"));
            }
            let data = x
                .data()
                .chunks(h * w)
                .map(|p| p.iter().sum::<f64>() / (h * w) as f64)
                .collect();
            Tensor::new([b, c, 1, 1], data)?
        };
        Ok(self.push(value, Op::GlobalAvg(input), self.tracked(&[input])))
    }

    /// Per-channel spatial maximum; the gradient goes to the first maximal position.
    pub fn global_max_pool(&self, input: Var) -> Result<Var> {
        let (value, argmax) = {
            let x = self.value(input);
            let (b, c, h, w) = x.dims4()?;
            if h * w == 0 {
                return Err(Error::dim("spatial", "global pooling over an empty plane"));
            }
            let mut argmax = Vec::with_capacity(b * c);
            let mut data = Vec::with_capacity(b * c);
            for p in x.data().chunks(h * w) {
                let mut best = 0;
                for (i, &v) in p.iter().enumerate() {
                    if v > p[best] {
                        best = i;
                    }
                }
                argmax.push(best);
                data.push(p[best]);
            }
            (Tensor::new([b, c, 1, 1], data)?, argmax)
        };
        Ok(self.push(value, Op::GlobalMax { input, argmax }, self.tracked(&[input])))
    }

    /// `x[b,c,h,w] * scale[b,c]` with `scale` shaped `[B,C,1,1]`.
    pub fn scale_channels(&self, x: Var, scale: Var) -> Result<Var> {
        let value = {
            let (tx, ts) = (self.value(x), self.value(scale));
            let (b, c, h, w) = tx.dims4()?;
            if ts.shape() != [b, c, 1, 1] {
                return Err(Error::dim(
                    "channels",
                    format!("scale {:?} does not match features {:?}", ts.shape(), tx.shape()),
                ));
            }
            let plane = h * w;
            let mut data = tx.data().to_vec();
            for (i, chunk) in data.chunks_mut(plane).enumerate() {
                let k = ts.data()[i];
                chunk.iter_mut().for_each(|v| *v *= k);
            }
            Tensor::new(tx.shape(), data)?
        };
        Ok(self.push(value, Op::ScaleChannels { x, scale }, self.tracked(&[x, scale])))
    }

    /// Sum of all entries as a one-element tensor.
    pub fn sum(&self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), self.tracked(&[a]))
    }

    /// Mean binary cross-entropy against a fixed target, logs floored at 1e-12.
    pub fn bce(&self, pred: Var, target: &Tensor) -> Result<Var> {
        let value = {
            let s = self.value(pred);
            same_shape(&s, target, "bce")?;
            let n = s.len() as f64;
            let total: f64 = s
                .data()
                .iter()
                .zip(target.data())
                .map(|(&p, &g)| -(g * p.max(LOG_FLOOR).ln() + (1.0 - g) * (1.0 - p).max(LOG_FLOOR).ln()))
                .sum();
            Tensor::scalar(total / n)
        };
        let op = Op::Bce {
            pred,
            target: target.data().to_vec(),
        };
        Ok(self.push(value, op, self.tracked(&[pred])))
    }

    /// Dice loss `1 - (2 sum(s g) + eps) / (sum(s) + sum(g) + eps)` per batch item, averaged.
    pub fn dice(&self, pred: Var, target: &Tensor, eps: f64) -> Result<Var> {
        let value = {
            let s = self.value(pred);
            same_shape(&s, target, "dice")?;
            let batch = s.shape()[0].max(1);
            let per = s.len() / batch;
            let mut total = 0.0;
            for (sp, gp) in s.data().chunks(per).zip(target.data().chunks(per)) {
                let inter: f64 = sp.iter().zip(gp).map(|(a, b)| a * b).sum();
                let union: f64 = sp.iter().sum::<f64>() + gp.iter().sum::<f64>();
                total += 1.0 - (2.0 * inter + eps) / (union + eps);
            }
            Tensor::scalar(total / batch as f64)
        };
        let op = Op::Dice {
            pred,
            target: target.data().to_vec(),
            eps,
        };
        Ok(self.push(value, op, self.tracked(&[pred])))
    }

    /// Edge-aware first-order smoothness of a `[B,1,H,W]` map.
    ///
    /// `wx`, `wy` are the per-difference weights (`[B,H,W-1]` and `[B,H-1,W]`
    /// flattened). The loss is the average of the two axis means of `w * |ds|`.
    pub(crate) fn smoothness_weighted(&self, pred: Var, wx: Vec<f64>, wy: Vec<f64>) -> Result<Var> {
        let value = {
            let s = self.value(pred);
            let (b, c, h, w) = s.dims4()?;
            if c != 1 {
                return Err(Error::dim("channels", "smoothness expects a single-channel map"));
            }
            if wx.len() != b * h * (w.saturating_sub(1)) || wy.len() != b * h.saturating_sub(1) * w {
                return Err(Error::dim("spatial", "edge weights do not match the map"));
            }
            Tensor::scalar(smooth_value(s.data(), b, h, w, &wx, &wy))
        };
        Ok(self.push(value, Op::Smooth { pred, wx, wy }, self.tracked(&[pred])))
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[output.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut acc: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            acc[output.0] = Some(vec![1.0]);
        }
        for i in (0..=output.0).rev() {
            let Some(grad) = acc[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let wants = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    leaves[i] = Some(Tensor::new(node.value.shape(), grad)?);
                }
                Op::Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut acc[a.0], grad.clone());
                    }
                    if wants(*b) {
                        accumulate(&mut acc[b.0], grad);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if wants(*a) {
                        accumulate(&mut acc[a.0], grad.iter().zip(vb).map(|(g, y)| g * y).collect());
                    }
                    if wants(*b) {
                        accumulate(&mut acc[b.0], grad.iter().zip(va).map(|(g, x)| g * x).collect());
                    }
                }
                Op::ScalarMul(a, k) => {
                    accumulate(&mut acc[a.0], grad.iter().map(|g| g * k).collect());
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    accumulate(&mut acc[a.0], grad.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect());
                }
                Op::Relu(a) => {
                    let x = nodes[a.0].value.data();
                    accumulate(
                        &mut acc[a.0],
                        grad.iter().zip(x).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect(),
                    );
                }
                Op::Concat(parts) => {
                    let (b, _, h, w) = node.value.dims4()?;
                    let plane = h * w;
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for p in parts {
                        let pc = nodes[p.0].value.shape()[1];
                        if wants(*p) {
                            let mut g = Vec::with_capacity(b * pc * plane);
                            for bi in 0..b {
                                let base = (bi * total + offset) * plane;
                                g.extend_from_slice(&grad[base..base + pc * plane]);
                            }
                            accumulate(&mut acc[p.0], g);
                        }
                        offset += pc;
                    }
                }
                Op::Conv {
                    input,
                    weight,
                    bias,
                    shape,
                } => {
                    let need = (wants(*input), wants(*weight), wants(*bias));
                    let g = conv::backward(
                        nodes[input.0].value.data(),
                        nodes[weight.0].value.data(),
                        &grad,
                        shape,
                        need,
                    );
                    if let Some(d) = g.input {
                        accumulate(&mut acc[input.0], d);
                    }
                    if let Some(d) = g.weight {
                        accumulate(&mut acc[weight.0], d);
                    }
                    if let Some(d) = g.bias {
                        accumulate(&mut acc[bias.0], d);
                    }
                }
                Op::Resize { input } => {
                    let (b, c, h, w) = nodes[input.0].value.dims4()?;
                    let (_, _, oh, ow) = node.value.dims4()?;
                    let d = if (h, w) == (oh, ow) {
                        grad
                    } else {
                        resize::backward(&grad, b * c, h, w, oh, ow)
                    };
                    accumulate(&mut acc[input.0], d);
                }
                Op::GlobalAvg(input) => {
                    let (_, _, h, w) = nodes[input.0].value.dims4()?;
                    let plane = h * w;
                    let inv = 1.0 / plane as f64;
                    let d = grad.iter().flat_map(|g| std::iter::repeat(g * inv).take(plane)).collect();
                    accumulate(&mut acc[input.0], d);
                }
                Op::GlobalMax { input, argmax } => {
                    let (_, _, h, w) = nodes[input.0].value.dims4()?;
                    let plane = h * w;
                    let mut d = vec![0.0; nodes[input.0].value.len()];
                    for (i, (&g, &am)) in grad.iter().zip(argmax).enumerate() {
                        d[i * plane + am] = g;
                    }
                    accumulate(&mut acc[input.0], d);
                }
                Op::ScaleChannels { x, scale } => {
                    let tx = &nodes[x.0].value;
                    let ts = nodes[scale.0].value.data();
                    let (_, _, h, w) = tx.dims4()?;
                    let plane = h * w;
                    if wants(*scale) {
                        let d = grad
                            .chunks(plane)
                            .zip(tx.data().chunks(plane))
                            .map(|(g, v)| g.iter().zip(v).map(|(a, b)| a * b).sum())
                            .collect();
                        accumulate(&mut acc[scale.0], d);
                    }
                    if wants(*x) {
                        let mut d = grad;
                        for (i, chunk) in d.chunks_mut(plane).enumerate() {
                            chunk.iter_mut().for_each(|v| *v *= ts[i]);
                        }
                        accumulate(&mut acc[x.0], d);
                    }
                }
                Op::Sum(a) => {
                    let n = nodes[a.0].value.len();
                    accumulate(&mut acc[a.0], vec![grad[0]; n]);
                }
                Op::Bce { pred, target } => {
                    let s = nodes[pred.0].value.data();
                    let scale = grad[0] / s.len() as f64;
                    let d = s
                        .iter()
                        .zip(target)
                        .map(|(&p, &g)| {
                            let pos = if p > LOG_FLOOR { -g / p } else { 0.0 };
                            let neg = if 1.0 - p > LOG_FLOOR { (1.0 - g) / (1.0 - p) } else { 0.0 };
                            scale * (pos + neg)
                        })
                        .collect();
                    accumulate(&mut acc[pred.0], d);
                }
                Op::Dice { pred, target, eps } => {
                    let s = nodes[pred.0].value.data();
                    let batch = nodes[pred.0].value.shape()[0].max(1);
                    let per = s.len() / batch;
                    let mut d = Vec::with_capacity(s.len());
                    for (sp, gp) in s.chunks(per).zip(target.chunks(per)) {
                        let inter: f64 = sp.iter().zip(gp).map(|(a, b)| a * b).sum();
                        let union: f64 = sp.iter().sum::<f64>() + gp.iter().sum::<f64>();
                        let den = union + eps;
                        let num = 2.0 * inter + eps;
                        for &g in gp {
                            let ratio = (2.0 * g * den - num) / (den * den);
                            d.push(-grad[0] * ratio / batch as f64);
                        }
                    }
                    accumulate(&mut acc[pred.0], d);
                }
                Op::Smooth { pred, wx, wy } => {
                    let (b, _, h, w) = nodes[pred.0].value.dims4()?;
                    let d = smooth_grad(nodes[pred.0].value.data(), b, h, w, wx, wy, grad[0]);
                    accumulate(&mut acc[pred.0], d);
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

fn smooth_value(s: &[f64], b: usize, h: usize, w: usize, wx: &[f64], wy: &[f64]) -> f64 {
    let mut sx = 0.0;
    let mut sy = 0.0;
    for bi in 0..b {
        let p = &s[bi * h * w..(bi + 1) * h * w];
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                sx += wx[(bi * h + y) * (w - 1) + x] * (p[y * w + x + 1] - p[y * w + x]).abs();
            }
        }
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                sy += wy[(bi * (h - 1) + y) * w + x] * (p[(y + 1) * w + x] - p[y * w + x]).abs();
            }
        }
    }
    let mx = if wx.is_empty() { 0.0 } else { sx / wx.len() as f64 };
    let my = if wy.is_empty() { 0.0 } else { sy / wy.len() as f64 };
    0.5 * (mx + my)
}

fn smooth_grad(s: &[f64], b: usize, h: usize, w: usize, wx: &[f64], wy: &[f64], upstream: f64) -> Vec<f64> {
    let mut d = vec![0.0; s.len()];
    let kx = if wx.is_empty() { 0.0 } else { 0.5 * upstream / wx.len() as f64 };
    let ky = if wy.is_empty() { 0.0 } else { 0.5 * upstream / wy.len() as f64 };
    let sign = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    for bi in 0..b {
        let off = bi * h * w;
        for y in 0..h {
            for x in 0..w.saturating_sub(1) {
                let i = off + y * w + x;
                let g = kx * wx[(bi * h + y) * (w - 1) + x] * sign(s[i + 1] - s[i]);
                d[i + 1] += g;
                d[i] -= g;
            }
        }
        for y in 0..h.saturating_sub(1) {
            for x in 0..w {
                let i = off + y * w + x;
                let g = ky * wy[(bi * (h - 1) + y) * w + x] * sign(s[i + w] - s[i]);
                d[i + w] += g;
                d[i] -= g;
            }
        }
    }
    d
}
