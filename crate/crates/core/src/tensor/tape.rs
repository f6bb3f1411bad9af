//! Reverse-mode differentiation on a Wengert list.

use super::backend::{checked_div, Backend};
use super::kernels::{self, GroupNormCache, Padding};
use super::{Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Square(Var),
    Silu(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, k: Var, b: Option<Var>, pad: Padding },
    GroupNorm { x: Var, gamma: Var, beta: Var, cache: GroupNormCache },
    ChannelAffine { x: Var, scale: Var, shift: Var },
    Concat(Vec<Var>),
    Upsample2(Var),
    Downsample2(Var),
    Sum(Var),
    Mean(Var),
    StopGradient,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in evaluation order. Confined to one thread; build one
/// tape per sample and drop it after the backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// A differentiable input (parameter or input we want gradients for).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn get(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn rg_opt(&self, v: Option<Var>) -> bool {
        v.is_some_and(|v| self.nodes[v.0].requires_grad)
    }

    /// Reverse sweep from a scalar `loss`. Every node at or before `loss` is
    /// visited exactly once, in reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let out = &self.nodes[loss.0].value;
        if out.len() != 1 {
            return Err(TensorError::NonScalarLoss(out.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(out.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let mut send = |v: Var, t: Tensor| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(acc) => acc.axpy(1.0, &t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                send(*a, kernels::unbroadcast(g.clone(), val(a).shape()))?;
                send(*b, kernels::unbroadcast(g.clone(), val(b).shape()))?;
            }
            Op::Sub(a, b) => {
                send(*a, kernels::unbroadcast(g.clone(), val(a).shape()))?;
                send(*b, kernels::unbroadcast(g.map(|v| -v), val(b).shape()))?;
            }
            Op::Mul(a, b) => {
                let ga = kernels::binary("mul", g, val(b), |x, y| x * y)?;
                let gb = kernels::binary("mul", g, val(a), |x, y| x * y)?;
                send(*a, kernels::unbroadcast(ga, val(a).shape()))?;
                send(*b, kernels::unbroadcast(gb, val(b).shape()))?;
            }
            Op::Div(a, b) => {
                let ga = kernels::binary("div", g, val(b), |x, y| x / y)?;
                // d(a/b)/db = -(a/b)/b
                let q = kernels::binary("div", out, val(b), |x, y| -x / y)?;
                let gb = kernels::binary("mul", g, &q, |x, y| x * y)?;
                send(*a, kernels::unbroadcast(ga, val(a).shape()))?;
                send(*b, kernels::unbroadcast(gb, val(b).shape()))?;
            }
            Op::Square(a) => {
                send(*a, g.zip_map(val(a), |gv, x| 2.0 * gv * x)?)?;
            }
            Op::Silu(a) => {
                send(*a, g.zip_map(val(a), |gv, x| gv * kernels::silu_deriv(x))?)?;
            }
            Op::Linear { x, w, b } => {
                let (gx, gw, gb) = kernels::linear_backward(val(x), val(w), g);
                send(*x, gx)?;
                send(*w, gw)?;
                if let Some(b) = b {
                    send(*b, gb)?;
                }
            }
            Op::Conv2d { x, k, b, pad } => {
                let need_x = self.nodes[x.0].requires_grad;
                let (gx, gk, gb) = kernels::conv2d_backward(val(x), val(k), g, *pad, need_x);
                if let Some(gx) = gx {
                    send(*x, gx)?;
                }
                send(*k, gk)?;
                if let Some(b) = b {
                    send(*b, gb)?;
                }
            }
            Op::GroupNorm { x, gamma, beta, cache } => {
                let c = g.shape()[0];
                let gxhat = kernels::channel_scale_shift(g, Some(val(gamma).data()), None);
                send(*x, kernels::group_norm_normalized_tangent(cache, &gxhat))?;
                send(*gamma, kernels::channel_dot(g, &cache.normalized, c))?;
                send(*beta, kernels::channel_sum(g, c))?;
            }
            Op::ChannelAffine { x, scale, shift } => {
                let c = g.shape()[0];
                let s: Vec<f64> = val(scale).data().iter().map(|v| 1.0 + v).collect();
                send(*x, kernels::channel_scale_shift(g, Some(&s), None))?;
                send(*scale, kernels::channel_dot(g, val(x), c))?;
                send(*shift, kernels::channel_sum(g, c))?;
            }
            Op::Concat(parts) => {
                let sizes: Vec<usize> = parts.iter().map(|p| val(p).shape()[0]).collect();
                for (p, gp) in parts.iter().zip(kernels::split_channels(g, &sizes)) {
                    send(*p, gp)?;
                }
            }
            Op::Upsample2(a) => send(*a, kernels::upsample2_adjoint(g))?,
            Op::Downsample2(a) => send(*a, kernels::downsample2_adjoint(g))?,
            Op::Sum(a) => send(*a, Tensor::full(val(a).shape(), g.item()))?,
            Op::Mean(a) => {
                let n = val(a).len() as f64;
                send(*a, Tensor::full(val(a).shape(), g.item() / n))?;
            }
        }
        Ok(())
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero when `v` does not reach the loss.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.get(v).shape()),
        }
    }
}

/// `dloss/dp` for every `p` in `params`.
pub fn grad(tape: &Tape, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
    let g = tape.backward(loss)?;
    Ok(params.iter().map(|&p| g.wrt(tape, p)).collect())
}

impl Backend for Tape {
    type Value = Var;

    fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        self.get(*v)
    }

    fn add(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let t = kernels::binary("add", self.get(*a), self.get(*b), |x, y| x + y)?;
        let rg = self.rg(&[*a, *b]);
        Ok(self.push(t, Op::Add(*a, *b), rg))
    }

    fn sub(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let t = kernels::binary("sub", self.get(*a), self.get(*b), |x, y| x - y)?;
        let rg = self.rg(&[*a, *b]);
        Ok(self.push(t, Op::Sub(*a, *b), rg))
    }

    fn mul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let t = kernels::binary("mul", self.get(*a), self.get(*b), |x, y| x * y)?;
        let rg = self.rg(&[*a, *b]);
        Ok(self.push(t, Op::Mul(*a, *b), rg))
    }

    fn div(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let t = checked_div(self.get(*a), self.get(*b))?;
        let rg = self.rg(&[*a, *b]);
        Ok(self.push(t, Op::Div(*a, *b), rg))
    }

    fn square(&mut self, a: &Var) -> Result<Var> {
        let t = self.get(*a).map(|v| v * v);
        let rg = self.rg(&[*a]);
        Ok(self.push(t, Op::Square(*a), rg))
    }

    fn silu(&mut self, a: &Var) -> Result<Var> {
        let t = self.get(*a).map(kernels::silu);
        let rg = self.rg(&[*a]);
        Ok(self.push(t, Op::Silu(*a), rg))
    }

    fn linear(&mut self, x: &Var, w: &Var, b: Option<&Var>) -> Result<Var> {
        let t = kernels::linear(self.get(*x), self.get(*w), b.map(|b| self.get(*b)))?;
        let rg = self.rg(&[*x, *w]) || self.rg_opt(b.copied());
        Ok(self.push(t, Op::Linear { x: *x, w: *w, b: b.copied() }, rg))
    }

    fn conv2d(&mut self, x: &Var, k: &Var, b: Option<&Var>, pad: Padding) -> Result<Var> {
        let t = kernels::conv2d(self.get(*x), self.get(*k), b.map(|b| self.get(*b)), pad)?;
        let rg = self.rg(&[*x, *k]) || self.rg_opt(b.copied());
        Ok(self.push(t, Op::Conv2d { x: *x, k: *k, b: b.copied(), pad }, rg))
    }

    fn group_norm(&mut self, x: &Var, gamma: &Var, beta: &Var, groups: usize) -> Result<Var> {
        let (t, cache) = kernels::group_norm(self.get(*x), self.get(*gamma), self.get(*beta), groups)?;
        let rg = self.rg(&[*x, *gamma, *beta]);
        Ok(self.push(t, Op::GroupNorm { x: *x, gamma: *gamma, beta: *beta, cache }, rg))
    }

    fn channel_affine(&mut self, x: &Var, scale: &Var, shift: &Var) -> Result<Var> {
        let t = kernels::channel_affine(self.get(*x), self.get(*scale), self.get(*shift))?;
        let rg = self.rg(&[*x, *scale, *shift]);
        Ok(self.push(t, Op::ChannelAffine { x: *x, scale: *scale, shift: *shift }, rg))
    }

    fn concat_channels(&mut self, parts: &[&Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.get(**p)).collect();
        let t = kernels::concat_channels(&tensors)?;
        let vars: Vec<Var> = parts.iter().map(|p| **p).collect();
        let rg = self.rg(&vars);
        Ok(self.push(t, Op::Concat(vars), rg))
    }

    fn upsample2(&mut self, x: &Var) -> Result<Var> {
        let t = kernels::upsample2(self.get(*x))?;
        let rg = self.rg(&[*x]);
        Ok(self.push(t, Op::Upsample2(*x), rg))
    }

    fn downsample2(&mut self, x: &Var) -> Result<Var> {
        let t = kernels::downsample2(self.get(*x))?;
        let rg = self.rg(&[*x]);
        Ok(self.push(t, Op::Downsample2(*x), rg))
    }

    fn sum(&mut self, x: &Var) -> Result<Var> {
        let t = Tensor::scalar(self.get(*x).sum());
        let rg = self.rg(&[*x]);
        Ok(self.push(t, Op::Sum(*x), rg))
    }

    fn mean(&mut self, x: &Var) -> Result<Var> {
        let src = self.get(*x);
        if src.is_empty() {
            return Err(TensorError::InvalidArgument { op: "mean", msg: "empty tensor".into() });
        }
        let t = Tensor::scalar(src.sum() / src.len() as f64);
        let rg = self.rg(&[*x]);
        Ok(self.push(t, Op::Mean(*x), rg))
    }

    fn stop_gradient(&mut self, x: &Var) -> Result<Var> {
        let t = self.get(*x).clone();
        Ok(self.push(t, Op::StopGradient, false))
    }
}
