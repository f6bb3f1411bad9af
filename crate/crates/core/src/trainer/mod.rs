//! Training loop: window sampling, loss/gradient evaluation, clipping and
//! optimizer updates.

mod optim;

pub use optim::{
    clip_global_norm, lr_at, newton_schulz, Adam, Muon, Optimizer, OptimizerKind, Schedule, ADAM_BETA1, ADAM_BETA2,
    ADAM_EPS, MUON_MOMENTUM, NEWTON_SCHULZ_STEPS,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Checkpoint, Denoiser, DenoiserNet, NetConfig};
use crate::io::{KvConfig, Trajectory};
use crate::objectives::{batch_loss_and_grad, Objective, TicWeights, TimeSampler, WindowSample};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Name of the checkpoint extra holding `[mean, std]` of the training data.
pub const NORM_BLOB: &str = "data.norm";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub depth: usize,
    pub width: usize,
    pub embed_dim: usize,
    pub window: usize,
    pub mask_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub checkpoint_interval: usize,
    pub clip_norm: f64,
    pub objective: Objective,
    pub tic_weights: TicWeights,
    pub sampler: TimeSampler,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 16,
            embed_dim: 64,
            window: 6,
            mask_rate: 0.8,
            batch_size: 2,
            steps: 5000,
            lr: 1e-3,
            schedule: Schedule::Cosine,
            optimizer: OptimizerKind::Adam,
            seed: 42,
            checkpoint_interval: 1000,
            clip_norm: 1.0,
            objective: Objective::Melisa,
            tic_weights: TicWeights::default(),
            sampler: TimeSampler::default(),
        }
    }
}

impl TrainConfig {
    /// Reads training keys from `kv`, falling back to defaults.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let objective = match kv.get_or::<String>("objective", "melisa".into())?.as_str() {
            "melisa" => Objective::Melisa,
            "winc_mf" => Objective::WincMf,
            other => return Err(Error::Config(format!("unknown objective {other:?} (melisa | winc_mf)"))),
        };
        let window = kv.get_or("window", d.window)?;
        let tic_weights = match kv.get_list::<f64>("tic_weights")? {
            Some(w) => TicWeights::new(w)?,
            None if window == 6 => TicWeights::default(),
            None => TicWeights::new(vec![1.0; window.saturating_sub(1)])?,
        };
        let cfg = Self {
            depth: kv.get_or("depth", d.depth)?,
            width: kv.get_or("width", d.width)?,
            embed_dim: kv.get_or("embed_dim", d.embed_dim)?,
            window,
            mask_rate: kv.get_or("mask_rate", d.mask_rate)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            steps: kv.get_or("steps", d.steps)?,
            lr: kv.get_or("lr", d.lr)?,
            schedule: kv.get_or("schedule", d.schedule)?,
            optimizer: kv.get_or("optimizer", d.optimizer)?,
            seed: kv.get_or("seed", d.seed)?,
            checkpoint_interval: kv.get_or("checkpoint_interval", d.checkpoint_interval)?,
            clip_norm: kv.get_or("clip_norm", d.clip_norm)?,
            objective,
            tic_weights,
            sampler: TimeSampler {
                mu: kv.get_or("t_mu", d.sampler.mu)?,
                sigma: kv.get_or("t_sigma", d.sampler.sigma)?,
                p_neq: kv.get_or("p_neq", d.sampler.p_neq)?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.window < 2 {
            return bad(format!("window must be at least 2, got {}", self.window));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) || !(0.0..=1.0).contains(&self.sampler.p_neq) {
            return bad("mask_rate and p_neq must lie in [0, 1]".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm must be positive, got {}", self.clip_norm));
        }
        if self.tic_weights.as_slice().len() + 1 != self.window {
            return bad(format!(
                "{} tic weights for a window of {}",
                self.tic_weights.as_slice().len(),
                self.window
            ));
        }
        Ok(())
    }

    pub fn net_config(&self, channels: usize, height: usize, width: usize) -> NetConfig {
        NetConfig {
            depth: self.depth,
            width: self.width,
            window: self.window,
            channels,
            height,
            width_s: width,
            embed_dim: self.embed_dim,
        }
    }
}

/// Affine map of the data to zero mean and unit variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

impl Normalization {
    pub fn fit(data: &[Trajectory]) -> Result<Self> {
        let n: usize = data.iter().map(|t| t.data().len()).sum();
        if n == 0 {
            return Err(Error::Data("empty dataset".into()));
        }
        let mean = data.iter().flat_map(|t| t.data()).sum::<f64>() / n as f64;
        let var = data.iter().flat_map(|t| t.data()).map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        if !(var > 0.0) {
            return Err(Error::Data("training data has zero variance".into()));
        }
        Ok(Self { mean, std: var.sqrt() })
    }

    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        match ckpt.extra(NORM_BLOB) {
            Some([m, s]) => Self { mean: *m, std: *s },
            _ => Self::identity(),
        }
    }
}

/// Draws a window uniformly over all `(trajectory, start)` pairs. Returns the
/// trajectory index, start frame and the window as `[W, C, H, W_s]`.
pub fn sample_window<R: Rng + ?Sized>(data: &[Trajectory], window: usize, rng: &mut R) -> Result<(usize, usize, Tensor)> {
    let counts: Vec<usize> = data
        .iter()
        .map(|t| if t.batch() == 1 && t.frames() >= window { t.frames() - window + 1 } else { 0 })
        .collect();
    let total: usize = counts.iter().sum();
    if total == 0 || counts.contains(&0) {
        return Err(Error::Data(format!("every trajectory must be a single member with at least {} frames", window)));
    }
    let mut k = rng.random_range(0..total);
    let mut idx = 0;
    while k >= counts[idx] {
        k -= counts[idx];
        idx += 1;
    }
    let tr = &data[idx];
    let frames = tr.frames_slice(0, k, window).to_vec();
    let t = Tensor::new(vec![window, tr.channels(), tr.height(), tr.width()], frames)?;
    Ok((idx, k, t))
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub winc_mf: f64,
    pub tic: f64,
    pub total: f64,
    pub lr: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,winc_mf,tic,total,lr";

    pub fn csv_row(&self) -> String {
        format!("{},{:e},{:e},{:e},{:e}", self.step, self.winc_mf, self.tic, self.total, self.lr)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
}

/// Runs the full step budget. `on_step` sees every log row together with the
/// current network (after the update) and may persist either.
pub fn train<F>(data: &[Trajectory], cfg: &TrainConfig, mut on_step: F) -> Result<TrainOutcome>
where
    F: FnMut(&StepRecord, &DenoiserNet) -> Result<()>,
{
    cfg.validate()?;
    let first = data.first().ok_or_else(|| Error::Data("training set is empty".into()))?;
    let norm = Normalization::fit(data)?;
    let normalized: Vec<Trajectory> = data
        .iter()
        .map(|t| Trajectory::new(t.shape(), t.data().iter().map(|&v| norm.apply(v)).collect()))
        .collect::<Result<_>>()?;
    let net_cfg = cfg.net_config(first.channels(), first.height(), first.width());
    let mut net = DenoiserNet::new(net_cfg, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, net.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let lr = lr_at(cfg.schedule, cfg.lr, step, cfg.steps);
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (_, _, w) = sample_window(&normalized, cfg.window, &mut rng)?;
            batch.push(WindowSample::draw(w, &cfg.sampler, cfg.mask_rate, &mut rng));
        }
        let (terms, mut grads) = batch_loss_and_grad(&net, &batch, &cfg.tic_weights, cfg.objective)
            .map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("step {}: {}", step + 1, m)),
                other => other,
            })?;
        if !terms.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite loss or gradient at step {}", step + 1)));
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        opt.step(net.params_mut(), &grads, lr)?;
        let rec = StepRecord { step: step + 1, winc_mf: terms.winc_mf, tic: terms.tic, total: terms.total, lr };
        on_step(&rec, &net)?;
        log.push(rec);
    }
    let checkpoint = Checkpoint { net, extras: vec![(NORM_BLOB.to_string(), vec![norm.mean, norm.std])] };
    Ok(TrainOutcome { checkpoint, log })
}
