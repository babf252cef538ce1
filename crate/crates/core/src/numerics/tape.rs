//! Reverse-mode differentiation over a linear tape of recorded ops.
//!
//! Every op appends one node holding its output value. `backward` walks the
//! tape from the loss node towards the leaves, so gradient contributions are
//! accumulated in a fixed order and identical inputs give identical bits.

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<u32>,
    },
    Upsample2(Var),
    Concat(Vec<Var>),
    MulConst {
        input: Var,
        factor: Vec<f64>,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    CeSum {
        logits: Var,
        target: Vec<u8>,
        ignore: u8,
    },
    BceSum {
        pred: Var,
        target: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Clamp applied to probabilities before taking logarithms in BCE.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar w.r.t. every tracked node reached from it.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`, or zeros if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("shape"),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn reached(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn check(name: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, tracked: bool) -> Result<Var> {
        check(name, value.data())?;
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A leaf whose gradient is collected by `backward`.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.push("param", value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Copies `v` into a fresh untracked leaf, cutting the graph.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let geom = ConvGeom::new(x.shape(), k.shape(), stride, padding)?;
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [geom.cout] {
                return Err(Error::Shape(format!(
                    "conv2d bias shape {bs:?} does not match {} output channels",
                    geom.cout
                )));
            }
        }
        let out = kernels::conv2d_forward(
            x.data(),
            k.data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::new(vec![geom.cout, geom.oh, geom.ow], out)?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let tracked = self.tracked(&deps);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            tracked,
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        let t = self.tracked(&[x]);
        self.push("relu", value, Op::Relu(x), t)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let t = self.tracked(&[x]);
        self.push("leaky_relu", value, Op::LeakyRelu(x, slope), t)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(sigmoid);
        let t = self.tracked(&[x]);
        self.push("sigmoid", value, Op::Sigmoid(x), t)
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("maxpool2 needs even extents, got {h}×{w}")));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(x).data(), c, h, w);
        let value = Tensor::new(vec![c, h / 2, w / 2], out)?;
        let t = self.tracked(&[x]);
        self.push("maxpool2", value, Op::MaxPool2 { input: x, argmax }, t)
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let out = kernels::upsample2_forward(self.value(x).data(), c, h, w);
        let value = Tensor::new(vec![c, 2 * h, 2 * w], out)?;
        let t = self.tracked(&[x]);
        self.push("upsample2", value, Op::Upsample2(x), t)
    }

    /// Concatenates C×H×W tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (_, h, w) = self.value(parts[0]).chw()?;
        let mut c_total = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (c, ph, pw) = self.value(p).chw()?;
            if (ph, pw) != (h, w) {
                return Err(Error::Shape(format!(
                    "concat spatial mismatch: {h}×{w} vs {ph}×{pw}"
                )));
            }
            c_total += c;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![c_total, h, w], data)?;
        let t = self.tracked(parts);
        self.push("concat", value, Op::Concat(parts.to_vec()), t)
    }

    /// Elementwise product with a constant factor tensor of the same length.
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        if factor.len() != self.value(x).len() {
            return Err(Error::Shape("mul_const factor length mismatch".into()));
        }
        let xv = self.value(x);
        let data = xv.data().iter().zip(&factor).map(|(a, b)| a * b).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let t = self.tracked(&[x]);
        self.push("mul_const", value, Op::MulConst { input: x, factor }, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "add shape mismatch {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let t = self.tracked(&[a, b]);
        self.push("add", value, Op::Add(a, b), t)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        let t = self.tracked(&[x]);
        self.push("scale", value, Op::Scale(x, s), t)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        let t = self.tracked(&[x]);
        self.push("sum", value, Op::Sum(x), t)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).mean());
        let t = self.tracked(&[x]);
        self.push("mean", value, Op::Mean(x), t)
    }

    /// Mean over all entries, keeping a C×1×1 layout for a 3-D input.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let m = self.mean(x)?;
        let v = self.value(m).clone().reshape(vec![1, 1, 1])?;
        let t = self.tracked(&[m]);
        // reshape is the identity on the flat buffer
        self.push("spatial_mean", v, Op::Scale(m, 1.0), t)
    }

    /// Sum over non-ignored pixels of `-log softmax(logits)[target]`.
    ///
    /// Returns the scalar sum node and the number of pixels that counted.
    pub fn softmax_ce_sum(&mut self, logits: Var, target: &[u8], ignore: u8) -> Result<(Var, usize)> {
        let (c, h, w) = self.value(logits).chw()?;
        let hw = h * w;
        if target.len() != hw {
            return Err(Error::Shape(format!(
                "cross-entropy target has {} pixels, logits have {hw}",
                target.len()
            )));
        }
        let lv = self.value(logits).data();
        let mut lsm = vec![0.0; c];
        let mut total = 0.0;
        let mut count = 0;
        for (p, &t) in target.iter().enumerate() {
            if t == ignore {
                continue;
            }
            if t as usize >= c {
                return Err(Error::Domain(format!(
                    "target class {t} at pixel {p} outside [0, {c})"
                )));
            }
            kernels::log_softmax_at(lv, c, hw, p, &mut lsm);
            total -= lsm[t as usize];
            count += 1;
        }
        let tr = self.tracked(&[logits]);
        let v = self.push(
            "softmax_ce",
            Tensor::scalar(total),
            Op::CeSum {
                logits,
                target: target.to_vec(),
                ignore,
            },
            tr,
        )?;
        Ok((v, count))
    }

    /// Mean cross-entropy over non-ignored pixels; zero when none count.
    pub fn softmax_ce(&mut self, logits: Var, target: &[u8], ignore: u8) -> Result<Var> {
        let (sum, count) = self.softmax_ce_sum(logits, target, ignore)?;
        let inv = if count == 0 { 0.0 } else { 1.0 / count as f64 };
        self.scale(sum, inv)
    }

    /// Sum over entries of `-[t ln p + (1-t) ln(1-p)]` with `p` clamped to `[ε, 1-ε]`.
    pub fn bce_sum(&mut self, pred: Var, target: f64) -> Result<Var> {
        let total = self
            .value(pred)
            .data()
            .iter()
            .map(|&p| bce_term(p, target))
            .sum();
        let t = self.tracked(&[pred]);
        self.push("bce", Tensor::scalar(total), Op::BceSum { pred, target }, t)
    }

    /// Mean binary cross-entropy against a constant target.
    pub fn bce(&mut self, pred: Var, target: f64) -> Result<Var> {
        let n = self.value(pred).len();
        let s = self.bce_sum(pred, target)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Back-propagates from scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], to: Var, g: Vec<f64>) -> Result<()> {
        if !self.nodes[to.0].tracked {
            return Ok(());
        }
        check("backward", &g)?;
        accumulate(&mut grads[to.0], g);
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let want = (
                    self.is_tracked(*input),
                    self.is_tracked(*kernel),
                    bias.is_some_and(|b| self.is_tracked(b)),
                );
                let cg = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    g,
                    geom,
                    want,
                );
                if let Some(dx) = cg.input {
                    self.send(grads, *input, dx)?;
                }
                if let Some(dk) = cg.kernel {
                    self.send(grads, *kernel, dk)?;
                }
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    self.send(grads, *b, db)?;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.send(grads, *x, dx)?;
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v > 0.0 { *g } else { slope * g })
                    .collect();
                self.send(grads, *x, dx)?;
            }
            Op::Sigmoid(x) => {
                let dx = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, &s)| g * s * (1.0 - s))
                    .collect();
                self.send(grads, *x, dx)?;
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![0.0; self.value(*input).len()];
                for (gi, &a) in g.iter().zip(argmax) {
                    dx[a as usize] += gi;
                }
                self.send(grads, *input, dx)?;
            }
            Op::Upsample2(x) => {
                let (c, h, w) = self.value(*x).chw()?;
                self.send(grads, *x, kernels::upsample2_backward(g, c, h, w))?;
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.send(grads, p, g[offset..offset + n].to_vec())?;
                    offset += n;
                }
            }
            Op::MulConst { input, factor } => {
                let dx = g.iter().zip(factor).map(|(a, b)| a * b).collect();
                self.send(grads, *input, dx)?;
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.to_vec())?;
                self.send(grads, *b, g.to_vec())?;
            }
            Op::Scale(x, s) => {
                self.send(grads, *x, g.iter().map(|v| v * s).collect())?;
            }
            Op::Sum(x) => {
                self.send(grads, *x, vec![g[0]; self.value(*x).len()])?;
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.send(grads, *x, vec![g[0] / n as f64; n])?;
            }
            Op::CeSum {
                logits,
                target,
                ignore,
            } => {
                let lv = self.value(*logits);
                let (c, h, w) = lv.chw()?;
                let hw = h * w;
                let mut dx = vec![0.0; lv.len()];
                let mut lsm = vec![0.0; c];
                for (p, &t) in target.iter().enumerate() {
                    if t == *ignore {
                        continue;
                    }
                    kernels::log_softmax_at(lv.data(), c, hw, p, &mut lsm);
                    for k in 0..c {
                        let onehot = if k == t as usize { 1.0 } else { 0.0 };
                        dx[k * hw + p] = g[0] * (lsm[k].exp() - onehot);
                    }
                }
                self.send(grads, *logits, dx)?;
            }
            Op::BceSum { pred, target } => {
                let dx = self
                    .value(*pred)
                    .data()
                    .iter()
                    .map(|&p| g[0] * bce_grad(p, *target))
                    .collect();
                self.send(grads, *pred, dx)?;
            }
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn bce_term(p: f64, t: f64) -> f64 {
    let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
}

#[inline]
fn bce_grad(p: f64, t: f64) -> f64 {
    if !(BCE_EPS..=1.0 - BCE_EPS).contains(&p) {
        return 0.0;
    }
    -t / p + (1.0 - t) / (1.0 - p)
}
