#![allow(dead_code)]

pub mod pipeline;

use melisa::backbone::{DenoiserNet, Denoiser, NetConfig};
use melisa::objectives::{avg_velocity, interpolate, tic_loss, velocity_target, TicWeights, WindowSample};
use melisa::backbone::assemble_input;
use melisa::io::Trajectory;
use melisa::tensor::{Backend, Padding, Tensor};
use melisa::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).unwrap()
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

pub fn rel_err_t(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.zip_map(b, |x, y| x - y).unwrap().norm_sq().sqrt();
    diff / a.norm_sq().sqrt().max(b.norm_sq().sqrt()).max(1e-300)
}

/// `D(input, t, r) = M ⋆ input + C·[t, r]` with a 1×1 kernel `M`, broadcast
/// over pixels. Small enough to write its losses out by hand.
#[derive(Debug, Clone)]
pub struct LinearToy {
    pub params: Vec<Tensor>,
}

impl LinearToy {
    pub fn new(out: usize, input: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { params: vec![uniform(&[out, input, 1, 1], rng), uniform(&[out, 2], rng)] }
    }

    pub fn m(&self, o: usize, i: usize) -> f64 {
        let cin = self.params[0].shape()[1];
        self.params[0].data()[o * cin + i]
    }

    pub fn c(&self, o: usize, j: usize) -> f64 {
        self.params[1].data()[o * 2 + j]
    }
}

impl Denoiser for LinearToy {
    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn time_features(&self, t: f64, r: f64, dt: f64, dr: f64) -> Result<(Tensor, Tensor)> {
        Ok((Tensor::from_vec(vec![t, r]), Tensor::from_vec(vec![dt, dr])))
    }

    fn apply<B: Backend>(&self, b: &mut B, params: &[B::Value], input: &B::Value, time: &B::Value) -> Result<B::Value> {
        let y = b.conv2d(input, &params[0], None, Padding::Zero)?;
        let shift = b.linear(time, &params[1], None)?;
        let zero = b.constant(Tensor::zeros(&[self.params[0].shape()[0]]));
        Ok(b.channel_affine(&y, &zero, &shift)?)
    }
}

pub fn small_config(window: usize, size: usize) -> NetConfig {
    NetConfig { depth: 2, width: 8, window, channels: 1, height: size, width_s: size, embed_dim: 16 }
}

/// A backbone with all parameters (including the zero-initialized head)
/// perturbed, so every branch carries gradient.
pub fn jittered_net(cfg: NetConfig, seed: u64, scale: f64) -> DenoiserNet {
    let mut net = DenoiserNet::new(cfg, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    for p in net.params_mut() {
        let noise = randn(p.shape(), &mut r);
        p.axpy(scale, &noise).unwrap();
    }
    net
}

/// A copy of `net` with parameters replaced.
pub fn with_params(net: &DenoiserNet, params: &[Tensor]) -> DenoiserNet {
    let mut n = net.clone();
    for (p, q) in n.params_mut().iter_mut().zip(params) {
        *p = q.clone();
    }
    n
}

pub fn toy_with_params(params: &[Tensor]) -> LinearToy {
    LinearToy { params: params.to_vec() }
}

/// Total derivative of `u` along `(v, 1, 0)` computed independently by a
/// five-point central difference in the flow-path parameter.
pub fn jvp_by_differences<D: Denoiser>(net: &D, s: &WindowSample, h: f64) -> Tensor {
    let shape = s.clean.shape().to_vec();
    let (t, r) = (s.t, s.r);
    let u_at = |dt: f64| {
        let tt = t + dt;
        let z = interpolate(&s.clean, &s.noise, t).unwrap();
        let v = velocity_target(&s.clean, &s.noise).unwrap();
        let mut zs = z.clone();
        zs.axpy(dt, &v).unwrap();
        let input = assemble_input(&zs, &s.clean, &s.mask).unwrap();
        let d = net.eval(&input, tt, r).unwrap().reshape(&shape).unwrap();
        avg_velocity(&zs, &d, tt).unwrap()
    };
    let (p1, m1, p2, m2) = (u_at(h), u_at(-h), u_at(2.0 * h), u_at(-2.0 * h));
    let mut out = Tensor::zeros(&shape);
    for i in 0..out.len() {
        out.data_mut()[i] =
            (8.0 * (p1.data()[i] - m1.data()[i]) - (p2.data()[i] - m2.data()[i])) / (12.0 * h);
    }
    out
}

/// Window loss with the derivative term replaced by the fixed array `jvp`,
/// evaluated without any tape.
pub fn frozen_winc_loss<D: Denoiser>(net: &D, s: &WindowSample, jvp: &Tensor) -> f64 {
    let shape = s.clean.shape();
    let z = interpolate(&s.clean, &s.noise, s.t).unwrap();
    let v = velocity_target(&s.clean, &s.noise).unwrap();
    let input = assemble_input(&z, &s.clean, &s.mask).unwrap();
    let d = net.eval(&input, s.t, s.r).unwrap().reshape(shape).unwrap();
    let u = avg_velocity(&z, &d, s.t).unwrap();
    let mut acc = 0.0;
    for i in 0..u.len() {
        let big_v = u.data()[i] + (s.t - s.r) * jvp.data()[i];
        acc += (big_v - v.data()[i]).powi(2);
    }
    acc / u.len() as f64
}

/// Increment loss of the one-step reconstruction, evaluated without a tape.
pub fn plain_tic<D: Denoiser>(net: &D, s: &WindowSample, kappa: &TicWeights) -> f64 {
    let input = assemble_input(&s.noise, &s.clean, &s.mask).unwrap();
    let x_hat = net.eval(&input, 1.0, 0.0).unwrap().reshape(s.clean.shape()).unwrap();
    tic_loss(&s.clean, &x_hat, kappa).unwrap()
}

/// Five-point directional derivative of `f` along `dir` over a parameter list.
pub fn directional_fd(params: &[Tensor], dir: &[Tensor], h: f64, f: impl Fn(&[Tensor]) -> f64) -> f64 {
    let at = |s: f64| {
        let p: Vec<Tensor> = params
            .iter()
            .zip(dir)
            .map(|(p, d)| {
                let mut q = p.clone();
                q.axpy(s, d).unwrap();
                q
            })
            .collect();
        f(&p)
    };
    (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
}

pub fn dot_all(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

/// Frames whose pixel Gram matrix is exactly `exp(−λ|i−j|)`: rows of a
/// Cholesky factor, mirrored so the global mean vanishes.
pub fn exact_exponential(t: usize, lambda: f64) -> Trajectory {
    let g = |i: usize, j: usize| (-lambda * (i as f64 - j as f64).abs()).exp();
    let mut l = vec![0.0; t * t];
    for i in 0..t {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * t + k] * l[j * t + k]).sum();
            l[i * t + j] = if i == j { (g(i, i) - s).sqrt() } else { (g(i, j) - s) / l[j * t + j] };
        }
    }
    // t pixels from L plus t mirrored pixels, laid out as a (2t/h) x h frame.
    let mut data = Vec::with_capacity(2 * t * t);
    for i in 0..t {
        data.extend_from_slice(&l[i * t..(i + 1) * t]);
        data.extend(l[i * t..(i + 1) * t].iter().map(|v| -v));
    }
    Trajectory::new([1, t, 1, 2, t], data).unwrap()
}

/// Pairwise definition of the ensemble CRPS.
pub fn crps_brute(members: &[f64], y: f64) -> f64 {
    let m = members.len() as f64;
    let a: f64 = members.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
    let mut b = 0.0;
    for x in members {
        for z in members {
            b += (x - z).abs();
        }
    }
    a - b / (2.0 * m * m)
}

