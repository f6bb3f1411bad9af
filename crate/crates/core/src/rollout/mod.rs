//! Blockwise autoregressive generation: each network call turns a context of
//! `W_ctx` frames plus fresh noise into the next `S = W - W_ctx` frames.

use std::cell::Cell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backbone::{assemble_input, Denoiser, FrameMask};
use crate::tensor::{Backend, Tensor};
use crate::{Error, Result};

/// Seed spacing between ensemble members.
pub const ENSEMBLE_SEED_STRIDE: u64 = 10;

pub fn head<T>(seq: &[T], q: usize) -> &[T] {
    &seq[..q.min(seq.len())]
}

pub fn tail<T>(seq: &[T], q: usize) -> &[T] {
    &seq[seq.len() - q.min(seq.len())..]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutConfig {
    /// Frames per network window.
    pub window: usize,
    /// Frames of context fed to each call.
    pub context: usize,
}

impl RolloutConfig {
    pub fn new(window: usize, context: usize) -> Result<Self> {
        if context == 0 || context >= window {
            return Err(Error::Config(format!("context must satisfy 1 <= context < window, got {context} of {window}")));
        }
        Ok(Self { window, context })
    }

    /// Frames produced per network call.
    pub fn block(&self) -> usize {
        self.window - self.context
    }

    /// Network calls needed for `horizon` frames.
    pub fn calls_for(&self, horizon: usize) -> usize {
        horizon.div_ceil(self.block())
    }
}

/// Wraps a denoiser and counts plain evaluations.
pub struct CallCounter<'a, D> {
    inner: &'a D,
    calls: Cell<usize>,
}

impl<'a, D> CallCounter<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        Self { inner, calls: Cell::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<D: Denoiser> Denoiser for CallCounter<'_, D> {
    fn params(&self) -> &[Tensor] {
        self.inner.params()
    }

    fn time_features(&self, t: f64, r: f64, dt: f64, dr: f64) -> Result<(Tensor, Tensor)> {
        self.inner.time_features(t, r, dt, dr)
    }

    fn apply<B: Backend>(&self, b: &mut B, params: &[B::Value], input: &B::Value, time: &B::Value) -> Result<B::Value> {
        self.calls.set(self.calls.get() + 1);
        self.inner.apply(b, params, input, time)
    }
}

fn frame_shape(frames: &[Tensor]) -> Result<Vec<usize>> {
    let first = frames.first().ok_or_else(|| Error::Data("no frames given".into()))?;
    if first.shape().len() != 3 || frames.iter().any(|f| f.shape() != first.shape()) {
        return Err(Error::Data("frames must share one [C, H, W] shape".into()));
    }
    Ok(first.shape().to_vec())
}

fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).expect("shape")
}

/// Next block from a context and an explicit noise draw `[W, C, H, W_s]`:
/// one evaluation at `(r, t) = (0, 1)` with the last `S` frames masked.
pub fn generate_block_with_noise<D: Denoiser>(
    net: &D,
    cfg: &RolloutConfig,
    context: &[Tensor],
    noise: &Tensor,
) -> Result<Vec<Tensor>> {
    if context.len() != cfg.context {
        return Err(Error::Data(format!("context holds {} frames, expected {}", context.len(), cfg.context)));
    }
    let fshape = frame_shape(context)?;
    let flen: usize = fshape.iter().product();
    let mut wshape = vec![cfg.window];
    wshape.extend_from_slice(&fshape);
    if noise.shape() != wshape.as_slice() {
        return Err(Error::Data(format!("noise shape {:?}, expected {:?}", noise.shape(), wshape)));
    }
    let mut clean = Vec::with_capacity(cfg.window * flen);
    for f in context {
        clean.extend_from_slice(f.data());
    }
    clean.resize(cfg.window * flen, 0.0);
    let clean = Tensor::new(wshape, clean)?;
    let mask = FrameMask::future(cfg.window, cfg.context);
    let input = assemble_input(noise, &clean, &mask)?;
    let out = net.eval(&input, 1.0, 0.0)?;
    let frames = out
        .data()
        .chunks(flen)
        .skip(cfg.context)
        .map(|c| Tensor::new(fshape.clone(), c.to_vec()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(frames)
}

/// Next block with noise drawn from `rng`.
pub fn generate_block<D: Denoiser, R: Rng + ?Sized>(
    net: &D,
    cfg: &RolloutConfig,
    context: &[Tensor],
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    let fshape = frame_shape(context)?;
    let mut wshape = vec![cfg.window];
    wshape.extend_from_slice(&fshape);
    let noise = standard_normal(&wshape, rng);
    generate_block_with_noise(net, cfg, context, &noise)
}

/// Forecast of exactly `horizon` frames following `observed`.
pub fn rollout<D: Denoiser, R: Rng + ?Sized>(
    net: &D,
    cfg: &RolloutConfig,
    observed: &[Tensor],
    horizon: usize,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    if observed.len() < cfg.context {
        return Err(Error::Data(format!(
            "{} observed frames, rollout needs at least {}",
            observed.len(),
            cfg.context
        )));
    }
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    let mut context: Vec<Tensor> = tail(observed, cfg.context).to_vec();
    let mut out = Vec::with_capacity(horizon);
    while out.len() < horizon {
        let block = generate_block(net, cfg, &context, rng)?;
        let q = cfg.block().min(horizon - out.len());
        out.extend_from_slice(head(&block, q));
        // Most recent frames of (previous context ++ accepted block).
        context.extend_from_slice(head(&block, q));
        context = tail(&context, cfg.context).to_vec();
    }
    Ok(out)
}

pub fn member_seed(base: u64, member: usize) -> u64 {
    base + ENSEMBLE_SEED_STRIDE * member as u64
}

/// `members` independent forecasts; member `m` uses seed `base + 10·m`.
pub fn ensemble_rollout<D: Denoiser>(
    net: &D,
    cfg: &RolloutConfig,
    observed: &[Tensor],
    horizon: usize,
    members: usize,
    base_seed: u64,
) -> Result<Vec<Vec<Tensor>>> {
    if members == 0 {
        return Err(Error::Config("ensemble size must be at least 1".into()));
    }
    (0..members)
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(member_seed(base_seed, m));
            rollout(net, cfg, observed, horizon, &mut rng)
        })
        .collect()
}

/// Repeats the last observed frame.
pub fn persistence(observed: &[Tensor], horizon: usize) -> Result<Vec<Tensor>> {
    let last = observed.last().ok_or_else(|| Error::Data("no observed frames".into()))?;
    Ok(vec![last.clone(); horizon])
}

/// Per-value mean over every frame of `data`, repeated `horizon` times.
pub fn climatology(data: &[crate::io::Trajectory], horizon: usize) -> Result<Vec<Tensor>> {
    let first = data.first().ok_or_else(|| Error::Data("climatology needs data".into()))?;
    let f = first.frame_len();
    let mut mean = vec![0.0; f];
    let mut n = 0usize;
    for t in data {
        if t.frame_len() != f {
            return Err(Error::Data("trajectories differ in frame size".into()));
        }
        for chunk in t.data().chunks(f) {
            mean.iter_mut().zip(chunk).for_each(|(m, v)| *m += v);
            n += 1;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let frame = Tensor::new(vec![first.channels(), first.height(), first.width()], mean)?;
    Ok(vec![frame; horizon])
}
