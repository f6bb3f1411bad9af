//! Training losses: the window-conditioned mean-flow regression with its
//! mixed forward/reverse derivative term, and the multi-lag increment loss.

mod stats;

pub use stats::{increment_energy, lag_covariance_trace};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::backbone::{assemble_input, Denoiser, FrameMask};
use crate::tensor::{grad, kernels, Backend, Padding, Tape, Tensor, Var};
use crate::{Error, Result};

/// Smallest diffusion time used inside the losses. Sampled times below it are
/// clamped before any use, so `u = (z - D) / t` stays bounded.
pub const T_MIN: f64 = 1e-3;

/// Default lag weights for a six-frame window.
pub const DEFAULT_TIC_WEIGHTS: [f64; 5] = [0.4, 0.5, 0.8, 1.1, 1.2];

pub fn interpolate(x: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    Ok(x.zip_map(eps, |a, e| (1.0 - t) * a + t * e)?)
}

pub fn velocity_target(x: &Tensor, eps: &Tensor) -> Result<Tensor> {
    Ok(eps.zip_map(x, |e, a| e - a)?)
}

/// Average velocity `(z_t - D) / t` of the pixel-space parameterization.
pub fn avg_velocity(z: &Tensor, d_out: &Tensor, t: f64) -> Result<Tensor> {
    if !(t >= T_MIN) {
        return Err(Error::Numerical(format!("diffusion time {} below minimum {}", t, T_MIN)));
    }
    Ok(z.zip_map(d_out, |a, d| (a - d) / t)?)
}

/// Logit-normal sampler for `(t, r)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeSampler {
    pub mu: f64,
    pub sigma: f64,
    /// Probability that `r` is drawn separately instead of set equal to `t`.
    pub p_neq: f64,
}

impl Default for TimeSampler {
    fn default() -> Self {
        Self { mu: 0.8, sigma: 0.8, p_neq: 0.5 }
    }
}

impl TimeSampler {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let n: f64 = rng.sample(StandardNormal);
        kernels::sigmoid(self.mu + self.sigma * n)
    }

    /// Returns `(t, r)` with `r <= t`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let t = self.draw(rng);
        if rng.random::<f64>() < self.p_neq {
            let s = self.draw(rng);
            (t.max(s), t.min(s))
        } else {
            (t, t)
        }
    }
}

/// Frame 0 is always observed; each later frame is hidden with probability `rate`.
pub fn sample_mask<R: Rng + ?Sized>(window: usize, rate: f64, rng: &mut R) -> FrameMask {
    let mut m = vec![false; window];
    for v in m.iter_mut().skip(1) {
        *v = rng.random::<f64>() < rate;
    }
    FrameMask::new(m)
}

/// One training example: a clean window `[W, C, H, W_s]`, its noise draw,
/// diffusion times and frame mask.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub clean: Tensor,
    pub noise: Tensor,
    pub t: f64,
    pub r: f64,
    pub mask: FrameMask,
}

impl WindowSample {
    /// Draws noise, then times, then the mask, in that order.
    pub fn draw<R: Rng + ?Sized>(clean: Tensor, sampler: &TimeSampler, mask_rate: f64, rng: &mut R) -> Self {
        let noise = Tensor::new(
            clean.shape().to_vec(),
            (0..clean.len()).map(|_| rng.sample(StandardNormal)).collect(),
        )
        .expect("same shape");
        let (t, r) = sampler.sample(rng);
        let mask = sample_mask(clean.shape()[0], mask_rate, rng);
        Self { clean, noise, t, r, mask }
    }

    fn validate(&self) -> Result<()> {
        let s = self.clean.shape();
        if s.len() != 4 || self.noise.shape() != s {
            return Err(Error::Data(format!(
                "window {:?} and noise {:?} must share a [W, C, H, W] shape",
                s,
                self.noise.shape()
            )));
        }
        if self.mask.len() != s[0] || self.mask.is_masked(0) {
            return Err(Error::Data("mask must cover the window and keep frame 0 observed".into()));
        }
        if !(0.0..=1.0).contains(&self.t) || !(0.0..=self.t).contains(&self.r) {
            return Err(Error::Data(format!("times must satisfy 0 <= r <= t <= 1, got t={} r={}", self.t, self.r)));
        }
        Ok(())
    }

    /// Times after clamping `t` to [`T_MIN`].
    fn effective_times(&self) -> (f64, f64) {
        let t = self.t.max(T_MIN);
        (t, self.r.min(t))
    }

    fn flat_shape(&self) -> Vec<usize> {
        let s = self.clean.shape();
        vec![s[0] * s[1], s[2], s[3]]
    }
}

/// Nonnegative per-lag weights `κ_1 .. κ_{W-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TicWeights(Vec<f64>);

impl TicWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("lag weights must be finite and nonnegative: {:?}", weights)));
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    fn check(&self, window: usize) -> Result<()> {
        if self.0.len() + 1 != window {
            return Err(Error::Config(format!("{} lag weights for a window of {}", self.0.len(), window)));
        }
        Ok(())
    }
}

impl Default for TicWeights {
    fn default() -> Self {
        Self(DEFAULT_TIC_WEIGHTS.to_vec())
    }
}

/// Anchored increment loss `Σ_w κ_w · mean((x_w − x_0) − (x̂_w − x̂_0))²` for
/// windows of shape `[W, ...]`, the mean taken over one frame's entries.
pub fn tic_loss(x: &Tensor, x_hat: &Tensor, kappa: &TicWeights) -> Result<f64> {
    if x.shape() != x_hat.shape() || x.shape().is_empty() {
        return Err(Error::Data(format!("tic_loss shapes {:?} vs {:?}", x.shape(), x_hat.shape())));
    }
    let w = x.shape()[0];
    kappa.check(w)?;
    let f = x.len() / w;
    let (xd, yd) = (x.data(), x_hat.data());
    let mut total = 0.0;
    for (lag, k) in (1..w).zip(kappa.as_slice()) {
        let mut s = 0.0;
        for i in 0..f {
            let e = (xd[lag * f + i] - xd[i]) - (yd[lag * f + i] - yd[i]);
            s += e * e;
        }
        total += k * s / f as f64;
    }
    Ok(total)
}

/// One network evaluation at `(r, t) = (0, 1)` from the noise draw, with the
/// observed frames of `clean` as conditioning. Returns the full predicted
/// window reshaped like `clean`.
pub fn reconstruct<D: Denoiser>(net: &D, clean: &Tensor, mask: &FrameMask, noise: &Tensor) -> Result<Tensor> {
    let input = assemble_input(noise, clean, mask)?;
    Ok(net.eval(&input, 1.0, 0.0)?.reshape(clean.shape())?)
}

/// Loss components of one sample or a batch average.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub winc_mf: f64,
    pub tic: f64,
    pub total: f64,
}

/// Plain flow-matching regression `mean(u − v)²` with `u` from the network.
pub fn fm_loss<D: Denoiser>(net: &D, s: &WindowSample) -> Result<f64> {
    s.validate()?;
    let (t, r) = s.effective_times();
    let flat = s.flat_shape();
    let x = s.clean.clone().reshape(&flat)?;
    let eps = s.noise.clone().reshape(&flat)?;
    let z = interpolate(&x, &eps, t)?;
    let v = velocity_target(&x, &eps)?;
    let input = assemble_input(&z.clone().reshape(s.clean.shape())?, &s.clean, &s.mask)?;
    let d = net.eval(&input, t, r)?;
    let u = avg_velocity(&z, &d, t)?;
    let e = u.zip_map(&v, |a, b| (a - b) * (a - b))?;
    Ok(e.sum() / e.len() as f64)
}

/// Total derivative of `u` along `(dz, dt, dr) = (v, 1, 0)` with the clean
/// conditioning held fixed. `None` when `t == r`, where it is multiplied by
/// zero anyway.
fn jvp_term<D: Denoiser>(net: &D, t: f64, r: f64, z: &Tensor, v: &Tensor, input: &Tensor) -> Result<Option<Tensor>> {
    if t == r {
        return Ok(None);
    }
    let mut d_input = vec![0.0; input.len()];
    d_input[..v.len()].copy_from_slice(v.data());
    let d_input = Tensor::new(input.shape().to_vec(), d_input)?;
    let (d, dd) = net.eval_jvp(input, &d_input, t, r, 1.0, 0.0)?;
    let u = avg_velocity(z, &d, t)?;
    // d/ds [(z - D) / t] = (v - dD - u) / t
    let mut j = v.zip_map(&dd, |a, b| a - b)?;
    j = j.zip_map(&u, |a, b| (a - b) / t)?;
    Ok(Some(j.check_finite("jvp")?))
}

/// Records the window loss on `tape`; returns the scalar loss node.
fn winc_on_tape<D: Denoiser>(net: &D, tape: &mut Tape, params: &[Var], s: &WindowSample) -> Result<Var> {
    let (t, r) = s.effective_times();
    let flat = s.flat_shape();
    let x = s.clean.clone().reshape(&flat)?;
    let eps = s.noise.clone().reshape(&flat)?;
    let z = interpolate(&x, &eps, t)?;
    let v = velocity_target(&x, &eps)?;
    let input = assemble_input(&z.clone().reshape(s.clean.shape())?, &s.clean, &s.mask)?;
    let jvp = jvp_term(net, t, r, &z, &v, &input)?;

    let (time, _) = net.time_features(t, r, 0.0, 0.0)?;
    let input_v = tape.constant(input);
    let time_v = tape.constant(time);
    let d = net.apply(tape, params, &input_v, &time_v)?;
    let zc = tape.constant(z);
    let diff = tape.sub(&zc, &d)?;
    let tv = tape.constant(Tensor::scalar(t));
    let mut big_v = tape.div(&diff, &tv)?;
    if let Some(j) = jvp {
        // The derivative term enters as a constant: no gradient reaches the
        // parameters through it.
        let j = tape.constant(j.map(|a| (t - r) * a));
        let j = tape.stop_gradient(&j)?;
        big_v = tape.add(&big_v, &j)?;
    }
    let vc = tape.constant(v);
    let e = tape.sub(&big_v, &vc)?;
    let e2 = tape.square(&e)?;
    Ok(tape.mean(&e2)?)
}

/// Fixed 1×1 kernel mapping a window residual to weighted anchored increments.
fn increment_kernel(window: usize, channels: usize, kappa: &TicWeights) -> Tensor {
    let rows = (window - 1) * channels;
    let cols = window * channels;
    let mut k = vec![0.0; rows * cols];
    for (lag, w) in (1..window).zip(kappa.as_slice()) {
        let s = w.sqrt();
        for c in 0..channels {
            let row = (lag - 1) * channels + c;
            k[row * cols + lag * channels + c] = s;
            k[row * cols + c] = -s;
        }
    }
    Tensor::new(vec![rows, cols, 1, 1], k).expect("kernel shape")
}

fn tic_on_tape<D: Denoiser>(net: &D, tape: &mut Tape, params: &[Var], s: &WindowSample, kappa: &TicWeights) -> Result<Var> {
    let shape = s.clean.shape();
    let (w, c) = (shape[0], shape[1]);
    kappa.check(w)?;
    let input = assemble_input(&s.noise, &s.clean, &s.mask)?;
    let (time, _) = net.time_features(1.0, 0.0, 0.0, 0.0)?;
    let input_v = tape.constant(input);
    let time_v = tape.constant(time);
    let x_hat = net.apply(tape, params, &input_v, &time_v)?;
    let x = tape.constant(s.clean.clone().reshape(&s.flat_shape())?);
    let resid = tape.sub(&x_hat, &x)?;
    let k = tape.constant(increment_kernel(w, c, kappa));
    let inc = tape.conv2d(&resid, &k, None, Padding::Zero)?;
    let sq = tape.square(&inc)?;
    let total = tape.sum(&sq)?;
    let per_frame = tape.constant(Tensor::scalar((c * shape[2] * shape[3]) as f64));
    Ok(tape.div(&total, &per_frame)?)
}

/// Which terms to include in a taped loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Window mean-flow regression only.
    WincMf,
    /// Window regression plus the increment loss.
    Melisa,
}

/// Loss terms and parameter gradients for one sample.
pub fn loss_and_grad<D: Denoiser>(
    net: &D,
    s: &WindowSample,
    kappa: &TicWeights,
    objective: Objective,
) -> Result<(LossTerms, Vec<Tensor>)> {
    s.validate()?;
    let mut tape = Tape::new();
    let params: Vec<Var> = net.params().iter().map(|p| tape.leaf(p.clone())).collect();
    let winc = winc_on_tape(net, &mut tape, &params, s)?;
    let (loss, tic) = match objective {
        Objective::WincMf => (winc, None),
        Objective::Melisa => {
            let tic = tic_on_tape(net, &mut tape, &params, s, kappa)?;
            (tape.add(&winc, &tic)?, Some(tic))
        }
    };
    let terms = LossTerms {
        winc_mf: tape.get(winc).item(),
        tic: tic.map_or(0.0, |v| tape.get(v).item()),
        total: tape.get(loss).item(),
    };
    if !terms.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss {:?}", terms)));
    }
    Ok((terms, grad(&tape, loss, &params)?))
}

/// Batch mean of [`loss_and_grad`]; accumulation runs in sample order.
pub fn batch_loss_and_grad<D: Denoiser>(
    net: &D,
    batch: &[WindowSample],
    kappa: &TicWeights,
    objective: Objective,
) -> Result<(LossTerms, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut terms = LossTerms::default();
    let mut grads: Vec<Tensor> = net.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
    for s in batch {
        let (t, g) = loss_and_grad(net, s, kappa, objective)?;
        terms.winc_mf += scale * t.winc_mf;
        terms.tic += scale * t.tic;
        terms.total += scale * t.total;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.axpy(scale, gi)?;
        }
    }
    Ok((terms, grads))
}

/// Window mean-flow loss value for one sample.
pub fn winc_mf_loss<D: Denoiser>(net: &D, s: &WindowSample) -> Result<f64> {
    s.validate()?;
    let mut tape = Tape::new();
    let params: Vec<Var> = net.params().iter().map(|p| tape.constant(p.clone())).collect();
    let v = winc_on_tape(net, &mut tape, &params, s)?;
    let loss = tape.get(v).item();
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite window loss {}", loss)));
    }
    Ok(loss)
}

/// Window loss plus increment loss on the reconstruction from the same noise.
pub fn melisa_loss<D: Denoiser>(net: &D, s: &WindowSample, kappa: &TicWeights) -> Result<LossTerms> {
    let winc_mf = winc_mf_loss(net, s)?;
    let x_hat = reconstruct(net, &s.clean, &s.mask, &s.noise)?;
    let tic = tic_loss(&s.clean, &x_hat, kappa)?;
    Ok(LossTerms { winc_mf, tic, total: winc_mf + tic })
}
