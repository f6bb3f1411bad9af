//! Adam and a Muon variant with Newton–Schulz orthogonalization.

use crate::tensor::{kernels, Tensor};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const MUON_MOMENTUM: f64 = 0.95;
pub const NEWTON_SCHULZ_STEPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Linear,
    Cosine,
}

impl std::str::FromStr for Schedule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "linear" | "linear-decay" => Ok(Schedule::Linear),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(format!("unknown schedule {other:?} (constant | linear | cosine)")),
        }
    }
}

pub fn lr_at(schedule: Schedule, base: f64, step: usize, total: usize) -> f64 {
    let frac = if total == 0 { 0.0 } else { step.min(total) as f64 / total as f64 };
    match schedule {
        Schedule::Constant => base,
        Schedule::Linear => base * (1.0 - frac),
        Schedule::Cosine => base * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()),
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            *g = g.map(|v| v * s);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, i: usize) -> (&Tensor, &Tensor) {
        (&self.m[i], &self.v[i])
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        check(params, grads, self.m.len())?;
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            adam_update(&mut params[i], &grads[i], &mut self.m[i], &mut self.v[i], lr, c1, c2);
        }
        Ok(())
    }
}

fn adam_update(p: &mut Tensor, g: &Tensor, m: &mut Tensor, v: &mut Tensor, lr: f64, c1: f64, c2: f64) {
    let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
    for j in 0..p.len() {
        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
        v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
        let mh = m[j] / c1;
        let vh = v[j] / c2;
        p[j] -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
}

fn check(params: &[Tensor], grads: &[Tensor], n: usize) -> Result<()> {
    if params.len() != n || grads.len() != n {
        return Err(Error::Internal(format!("{} params / {} grads for optimizer over {}", params.len(), grads.len(), n)));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Internal(format!("gradient shape {:?} for parameter {:?}", g.shape(), p.shape())));
        }
    }
    Ok(())
}

/// `rows x cols` view of a parameter with at least two axes.
fn matrix_dims(shape: &[usize]) -> Option<(usize, usize)> {
    if shape.len() < 2 {
        return None;
    }
    Some((shape[0], shape[1..].iter().product()))
}

/// Approximately orthogonalizes a `rows x cols` matrix: the result has the
/// same singular vectors with all singular values pushed towards 1.
///
/// The input is scaled by a power-iteration estimate of its spectral norm,
/// then five steps of the quintic `x ↦ (15x − 10x³ + 3x⁵) / 8` are applied to
/// the singular values. That polynomial has 1 as an attracting fixed point,
/// so an already orthogonal matrix is returned unchanged.
pub fn newton_schulz(g: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    // Work on the wide orientation so X Xᵀ is the smaller Gram matrix.
    let transpose = rows > cols;
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    let mut x = if transpose { transposed(g, rows, cols) } else { g.to_vec() };
    let scale = spectral_norm(&x, r, c);
    if scale == 0.0 || !scale.is_finite() {
        return vec![0.0; g.len()];
    }
    for v in &mut x {
        *v /= scale;
    }
    let (a, b, cc) = (15.0 / 8.0, -10.0 / 8.0, 3.0 / 8.0);
    let mut gram = vec![0.0; r * r];
    let mut poly = vec![0.0; r * r];
    let mut next = vec![0.0; r * c];
    for _ in 0..NEWTON_SCHULZ_STEPS {
        kernels::gemm(r, c, r, &x, false, &x, true, &mut gram, false);
        // poly = b·A + c·A²
        kernels::gemm(r, r, r, &gram, false, &gram, false, &mut poly, false);
        for (p, a_) in poly.iter_mut().zip(&gram) {
            *p = cc * *p + b * a_;
        }
        kernels::gemm(r, r, c, &poly, false, &x, false, &mut next, false);
        for (n, xv) in next.iter_mut().zip(&x) {
            *n += a * xv;
        }
        std::mem::swap(&mut x, &mut next);
    }
    if transpose {
        transposed(&x, r, c)
    } else {
        x
    }
}

fn transposed(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Largest singular value via power iteration on `X Xᵀ`, started from the
/// all-ones vector for determinism. Slight underestimates are harmless: the
/// iteration also contracts singular values a little above 1.
fn spectral_norm(x: &[f64], r: usize, c: usize) -> f64 {
    let mut gram = vec![0.0; r * r];
    kernels::gemm(r, c, r, x, false, x, true, &mut gram, false);
    let mut v = vec![1.0 / (r as f64).sqrt(); r];
    let mut w = vec![0.0; r];
    let mut lambda = 0.0;
    for _ in 0..30 {
        for i in 0..r {
            w[i] = (0..r).map(|j| gram[i * r + j] * v[j]).sum();
        }
        let n = w.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n == 0.0 {
            return 0.0;
        }
        lambda = n;
        for i in 0..r {
            v[i] = w[i] / n;
        }
    }
    lambda.sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Muon {
    momentum: Vec<Option<Tensor>>,
    fallback: Adam,
}

impl Muon {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            momentum: params
                .iter()
                .map(|p| matrix_dims(p.shape()).map(|_| Tensor::zeros(p.shape())))
                .collect(),
            fallback: Adam::new(params),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        check(params, grads, self.momentum.len())?;
        self.fallback.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.fallback.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.fallback.step as i32);
        for i in 0..params.len() {
            match &mut self.momentum[i] {
                Some(buf) => {
                    let (rows, cols) = matrix_dims(params[i].shape()).expect("matrix parameter");
                    for (b, g) in buf.data_mut().iter_mut().zip(grads[i].data()) {
                        *b = MUON_MOMENTUM * *b + g;
                    }
                    let o = newton_schulz(buf.data(), rows, cols);
                    let s = lr * (rows as f64 / cols as f64).max(1.0).sqrt();
                    for (p, u) in params[i].data_mut().iter_mut().zip(&o) {
                        *p -= s * u;
                    }
                }
                None => {
                    let (m, v) = (&mut self.fallback.m[i], &mut self.fallback.v[i]);
                    adam_update(&mut params[i], &grads[i], m, v, lr, c1, c2);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Muon,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "muon" => Ok(OptimizerKind::Muon),
            other => Err(format!("unknown optimizer {other:?} (adam | muon)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam(Adam),
    Muon(Muon),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &[Tensor]) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(params)),
            OptimizerKind::Muon => Optimizer::Muon(Muon::new(params)),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.step(params, grads, lr),
            Optimizer::Muon(m) => m.step(params, grads, lr),
        }
    }
}
