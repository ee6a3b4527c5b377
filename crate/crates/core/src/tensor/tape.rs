//! Reverse-mode automatic differentiation over a recorded operation list.

use super::kernels;
use super::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Floor applied to probabilities before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
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
    Conv3x3 {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    Conv1x1 {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Log(Var),
    SoftmaxChannels(Var),
    /// Scalar function whose local gradient was computed eagerly.
    ScalarFn {
        input: Var,
        local_grad: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations; each node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf marked gradient-requiring.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// 3x3 cross-correlation, stride 1, zero padding 1.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (c_in, h, w) = self.value(input).chw()?;
        let ks = self.value(kernel).shape().to_vec();
        let [c_out, k_in, 3, 3] = ks[..] else {
            return Err(shape_err!(
                "conv2d kernel must be [C_out,C_in,3,3], got {ks:?}"
            ));
        };
        if k_in != c_in {
            return Err(shape_err!(
                "conv2d kernel expects {k_in} input channels, input has {c_in}"
            ));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(shape_err!(
                "conv2d bias must be [{c_out}], got {:?}",
                self.value(bias).shape()
            ));
        }
        let out = kernels::conv3x3_forward(
            self.value(input).data(),
            c_in,
            h,
            w,
            self.value(kernel).data(),
            self.value(bias).data(),
            c_out,
        );
        let rg = self.rg(input) || self.rg(kernel) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(vec![c_out, h, w], out),
            Op::Conv3x3 {
                input,
                kernel,
                bias,
            },
            rg,
        ))
    }

    /// Pointwise (1x1) convolution with weight `[C_out, C_in]`.
    pub fn conv1x1(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (c_in, h, w) = self.value(input).chw()?;
        let ws = self.value(weight).shape().to_vec();
        let [c_out, k_in] = ws[..] else {
            return Err(shape_err!(
                "conv1x1 weight must be [C_out,C_in], got {ws:?}"
            ));
        };
        if k_in != c_in {
            return Err(shape_err!(
                "conv1x1 weight expects {k_in} input channels, input has {c_in}"
            ));
        }
        if self.value(bias).shape() != [c_out] {
            return Err(shape_err!(
                "conv1x1 bias must be [{c_out}], got {:?}",
                self.value(bias).shape()
            ));
        }
        let out = kernels::conv1x1_forward(
            self.value(input).data(),
            c_in,
            h * w,
            self.value(weight).data(),
            self.value(bias).data(),
            c_out,
        );
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(vec![c_out, h, w], out),
            Op::Conv1x1 {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, factor), rg)
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = kernels::sum(self.value(x).data());
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Natural log of `max(x, 1e-12)`.
    pub fn log(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| v.max(LOG_FLOOR).ln()).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(value, Op::Log(x), rg)
    }

    /// Softmax over the channel axis of a `[C, H, W]` tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if c < 2 {
            return Err(shape_err!(
                "softmax_channels needs at least 2 channels, got {c}"
            ));
        }
        let value = softmax_channels(self.value(x).data(), c, h * w);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![c, h, w], value),
            Op::SoftmaxChannels(x),
            rg,
        ))
    }

    /// Records a scalar `f(input)` whose value and gradient were computed by the caller.
    pub fn scalar_fn(&mut self, input: Var, value: f64, local_grad: Vec<f64>) -> Result<Var> {
        if local_grad.len() != self.value(input).numel() {
            return Err(shape_err!(
                "scalar_fn gradient has {} entries, input has {}",
                local_grad.len(),
                self.value(input).numel()
            ));
        }
        if !value.is_finite() || local_grad.iter().any(|g| !g.is_finite()) {
            return Err(invalid!(
                "scalar_fn produced a non-finite value or gradient"
            ));
        }
        let rg = self.rg(input);
        Ok(self.push(
            Tensor::scalar(value),
            Op::ScalarFn { input, local_grad },
            rg,
        ))
    }

    /// Gradients of `loss` with respect to every gradient-requiring node.
    ///
    /// Gradient-requiring leaves that `loss` does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut grads = self.propagate(loss, 0)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(self.wrap(grads))
    }

    /// Gradient of `loss` with respect to a single node, visiting only nodes
    /// recorded after `target`. Nothing on the tape is modified.
    pub fn gradient_wrt(&self, loss: Var, target: Var) -> Result<Tensor> {
        let mut grads = self.propagate(loss, target.0)?;
        let g = grads[target.0]
            .take()
            .unwrap_or_else(|| vec![0.0; self.value(target).numel()]);
        Ok(Tensor::from_parts(self.value(target).shape().to_vec(), g))
    }

    fn wrap(&self, grads: Vec<Option<Vec<f64>>>) -> Gradients {
        Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
                .collect(),
        }
    }

    fn propagate(&self, loss: Var, stop: usize) -> Result<Vec<Option<Vec<f64>>>> {
        if loss.0 >= self.nodes.len() {
            return Err(invalid!("loss node {} is not on this tape", loss.0));
        }
        if self.value(loss).numel() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (stop..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, stop, &mut grads);
            // Keep intermediate gradients only where a caller may ask for them.
            if i == stop {
                grads[i] = Some(g);
            }
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, stop: usize, g: Vec<f64>) {
        if v.0 < stop || !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var, stop: usize) -> bool {
        v.0 >= stop && self.rg(v)
    }

    fn backward_node(&self, node: &Node, g: &[f64], stop: usize, grads: &mut [Option<Vec<f64>>]) {
        match node.op {
            Op::Leaf => {}
            Op::Conv3x3 {
                input,
                kernel,
                bias,
            } => {
                let (c_in, h, w) = self.value(input).chw().expect("checked at record time");
                let c_out = self.value(kernel).shape()[0];
                let want_params = self.wants(kernel, stop) || self.wants(bias, stop);
                let (gi, gk, gb) = kernels::conv3x3_backward(
                    self.value(input).data(),
                    c_in,
                    h,
                    w,
                    self.value(kernel).data(),
                    c_out,
                    g,
                    self.wants(input, stop),
                    want_params,
                );
                if let Some(gi) = gi {
                    self.accumulate(grads, input, stop, gi);
                }
                if let Some(gk) = gk {
                    self.accumulate(grads, kernel, stop, gk);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, bias, stop, gb);
                }
            }
            Op::Conv1x1 {
                input,
                weight,
                bias,
            } => {
                let (c_in, h, w) = self.value(input).chw().expect("checked at record time");
                let c_out = self.value(weight).shape()[0];
                let want_params = self.wants(weight, stop) || self.wants(bias, stop);
                let (gi, gw, gb) = kernels::conv1x1_backward(
                    self.value(input).data(),
                    c_in,
                    h * w,
                    self.value(weight).data(),
                    c_out,
                    g,
                    self.wants(input, stop),
                    want_params,
                );
                if let Some(gi) = gi {
                    self.accumulate(grads, input, stop, gi);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, weight, stop, gw);
                }
                if let Some(gb) = gb {
                    self.accumulate(grads, bias, stop, gb);
                }
            }
            Op::Relu(x) => {
                let xs = self.value(x).data();
                let gx = g
                    .iter()
                    .zip(xs)
                    .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, x, stop, gx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, stop, g.to_vec());
                self.accumulate(grads, b, stop, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.wants(a, stop) {
                    self.accumulate(
                        grads,
                        a,
                        stop,
                        g.iter().zip(vb).map(|(x, y)| x * y).collect(),
                    );
                }
                if self.wants(b, stop) {
                    self.accumulate(
                        grads,
                        b,
                        stop,
                        g.iter().zip(va).map(|(x, y)| x * y).collect(),
                    );
                }
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, x, stop, g.iter().map(|v| v * f).collect());
            }
            Op::Sum(x) => {
                self.accumulate(grads, x, stop, vec![g[0]; self.value(x).numel()]);
            }
            Op::Log(x) => {
                let xs = self.value(x).data();
                let gx = g
                    .iter()
                    .zip(xs)
                    .map(|(&gi, &xi)| if xi >= LOG_FLOOR { gi / xi } else { 0.0 })
                    .collect();
                self.accumulate(grads, x, stop, gx);
            }
            Op::SoftmaxChannels(x) => {
                let p = node.value.data();
                let c = node.value.shape()[0];
                let plane = p.len() / c;
                let mut gx = vec![0.0; p.len()];
                for j in 0..plane {
                    let dotp: f64 = (0..c).map(|k| g[k * plane + j] * p[k * plane + j]).sum();
                    for k in 0..c {
                        let idx = k * plane + j;
                        gx[idx] = p[idx] * (g[idx] - dotp);
                    }
                }
                self.accumulate(grads, x, stop, gx);
            }
            Op::ScalarFn {
                input,
                ref local_grad,
            } => {
                self.accumulate(
                    grads,
                    input,
                    stop,
                    local_grad.iter().map(|v| v * g[0]).collect(),
                );
            }
        }
    }
}

/// Max-subtracted softmax over channels of a `[C, plane]` buffer.
pub(crate) fn softmax_channels(x: &[f64], c: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for j in 0..plane {
        let max = (0..c)
            .map(|k| x[k * plane + j])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in 0..c {
            let e = (x[k * plane + j] - max).exp();
            out[k * plane + j] = e;
            z += e;
        }
        for k in 0..c {
            out[k * plane + j] /= z;
        }
    }
    out
}
