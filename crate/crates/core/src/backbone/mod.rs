//! Convolutional UNet denoiser with FiLM time conditioning.
//!
//! A window of `W` frames with `C` channels each is stacked along the channel
//! axis and processed as one multi-channel image. The network predicts the
//! clean window directly.

mod checkpoint;
mod conditioning;
mod embedding;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use conditioning::{assemble_input, FrameMask};
pub use embedding::{time_embedding, time_embedding_with_tangent};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Backend, DualMode, DualTensor, EvalMode, Padding, Tensor};
use crate::{Error, Result};

const PAD: Padding = Padding::Circular;
const MAX_GROUPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub depth: usize,
    pub width: usize,
    pub window: usize,
    pub channels: usize,
    pub height: usize,
    pub width_s: usize,
    pub embed_dim: usize,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.depth == 0 || self.width == 0 || self.channels == 0 {
            return bad(format!("depth, width and channels must be positive: {:?}", self));
        }
        if self.window < 2 {
            return bad(format!("window must be at least 2, got {}", self.window));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return bad(format!("embed_dim must be even and positive, got {}", self.embed_dim));
        }
        let m = 1usize << self.depth;
        if self.height % m != 0 || self.width_s % m != 0 || self.height < m || self.width_s < m {
            return bad(format!(
                "spatial size {}x{} is not divisible by 2^depth = {}",
                self.height, self.width_s, m
            ));
        }
        if self.height / m < 3 || self.width_s / m < 3 {
            return bad(format!("spatial size {}x{} too small for depth {}", self.height, self.width_s, self.depth));
        }
        Ok(())
    }

    pub fn groups(&self) -> usize {
        let g = MAX_GROUPS.min(self.width);
        if self.width % g == 0 { g } else { 1 }
    }

    pub fn input_channels(&self) -> usize {
        2 * self.window * self.channels + self.window
    }

    pub fn output_channels(&self) -> usize {
        self.window * self.channels
    }

    fn level_channels(&self, level: usize) -> usize {
        self.width << level
    }

    fn cond_dim(&self) -> usize {
        4 * self.width
    }
}

/// A model mapping an assembled window input and time features to a clean
/// window prediction. Generic over the evaluation backend so the same code
/// serves plain evaluation, gradients and JVPs.
pub trait Denoiser {
    fn params(&self) -> &[Tensor];

    /// Time features for `(t, r)` and their derivative along `(dt, dr)`.
    fn time_features(&self, t: f64, r: f64, dt: f64, dr: f64) -> Result<(Tensor, Tensor)>;

    fn apply<B: Backend>(
        &self,
        b: &mut B,
        params: &[B::Value],
        input: &B::Value,
        time: &B::Value,
    ) -> Result<B::Value>;

    /// Plain evaluation at the stored parameters.
    fn eval(&self, input: &Tensor, t: f64, r: f64) -> Result<Tensor> {
        let (time, _) = self.time_features(t, r, 0.0, 0.0)?;
        let params = self.params().to_vec();
        self.apply(&mut EvalMode, &params, input, &time)
    }

    /// Output and its directional derivative along `(d_input, dt, dr)`;
    /// parameters are held fixed.
    fn eval_jvp(&self, input: &Tensor, d_input: &Tensor, t: f64, r: f64, dt: f64, dr: f64) -> Result<(Tensor, Tensor)> {
        let (time, d_time) = self.time_features(t, r, dt, dr)?;
        let params: Vec<DualTensor> = self.params().iter().cloned().map(DualTensor::constant).collect();
        let x = DualTensor::new(input.clone(), d_input.clone())?;
        let tf = DualTensor::new(time, d_time)?;
        Ok(self.apply(&mut DualMode, &params, &x, &tf)?.into_parts())
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Uniform in ±sqrt(3 / fan_in).
    Fan(usize),
    Zero,
    One,
}

struct Builder {
    names: Vec<String>,
    params: Vec<Tensor>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Fan(fan_in) => {
                let a = (3.0 / fan_in as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-a..a)).collect()
            }
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
        };
        self.names.push(name);
        self.params.push(Tensor::new(shape.to_vec(), data).expect("shape and data agree"));
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, zero: bool) {
        let init = if zero { Init::Zero } else { Init::Fan(cin * k * k) };
        self.add(format!("{name}.weight"), &[cout, cin, k, k], init);
        self.add(format!("{name}.bias"), &[cout], Init::Zero);
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) {
        self.add(format!("{name}.weight"), &[fout, fin], Init::Fan(fin));
        self.add(format!("{name}.bias"), &[fout], Init::Zero);
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.add(format!("{name}.gamma"), &[c], Init::One);
        self.add(format!("{name}.beta"), &[c], Init::Zero);
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, cond: usize) {
        self.norm(&format!("{name}.norm1"), cin);
        self.conv(&format!("{name}.conv1"), cin, cout, 3, false);
        self.linear(&format!("{name}.film"), cond, 2 * cout);
        self.norm(&format!("{name}.norm2"), cout);
        self.conv(&format!("{name}.conv2"), cout, cout, 3, false);
        if cin != cout {
            self.conv(&format!("{name}.skip"), cin, cout, 1, false);
        }
    }
}

/// Walks the flat parameter list in declaration order.
struct Cursor<'a, V> {
    params: &'a [V],
    pos: usize,
}

impl<'a, V> Cursor<'a, V> {
    fn next(&mut self) -> Result<&'a V> {
        let p = self
            .params
            .get(self.pos)
            .ok_or_else(|| Error::Internal(format!("parameter list exhausted at index {}", self.pos)))?;
        self.pos += 1;
        Ok(p)
    }

    fn pair(&mut self) -> Result<(&'a V, &'a V)> {
        Ok((self.next()?, self.next()?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    config: NetConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl DenoiserNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { names: Vec::new(), params: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) };
        let cond = config.cond_dim();
        b.linear("embed.fc1", 2 * config.embed_dim, cond);
        b.linear("embed.fc2", cond, cond);
        b.conv("in", config.input_channels(), config.level_channels(0), 3, false);
        for l in 0..config.depth {
            let cin = config.level_channels(l.saturating_sub(1));
            b.res_block(&format!("down{l}"), cin, config.level_channels(l), cond);
        }
        b.res_block("mid", config.level_channels(config.depth - 1), config.level_channels(config.depth), cond);
        for l in (0..config.depth).rev() {
            let cin = config.level_channels(l + 1) + config.level_channels(l);
            b.res_block(&format!("up{l}"), cin, config.level_channels(l), cond);
        }
        b.norm("out.norm", config.level_channels(0));
        b.conv("out.conv", config.level_channels(0), config.output_channels(), 3, true);
        Ok(Self { config, names: b.names, params: b.params })
    }

    /// Rebuild from stored parameters, checking names and shapes against a
    /// fresh construction for the same config.
    pub fn from_parts(config: NetConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let template = Self::new(config, 0)?;
        if named.len() != template.params.len() {
            return Err(Error::Data(format!(
                "expected {} parameter blobs, found {}",
                template.params.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(named.len());
        for ((name, t), (want, proto)) in named.into_iter().zip(template.names.iter().zip(&template.params)) {
            if &name != want || t.shape() != proto.shape() {
                return Err(Error::Data(format!(
                    "parameter {name} {:?} does not match expected {want} {:?}",
                    t.shape(),
                    proto.shape()
                )));
            }
            params.push(t);
        }
        Ok(Self { config, names: template.names, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    fn res_block<B: Backend>(
        &self,
        b: &mut B,
        cur: &mut Cursor<'_, B::Value>,
        x: &B::Value,
        cond: &B::Value,
        cin: usize,
        cout: usize,
    ) -> Result<B::Value> {
        let groups = self.config.groups();
        let (g1, b1) = cur.pair()?;
        let (k1, c1) = cur.pair()?;
        let (wf, bf) = cur.pair()?;
        let (g2, b2) = cur.pair()?;
        let (k2, c2) = cur.pair()?;

        let h = b.group_norm(x, g1, b1, groups)?;
        let h = b.silu(&h)?;
        let h = b.conv2d(&h, k1, Some(c1), PAD)?;
        let film = b.linear(cond, wf, Some(bf))?;
        let (scale, shift) = split_film(b, &film, cout)?;
        let h = b.group_norm(&h, g2, b2, groups)?;
        let h = b.channel_affine(&h, &scale, &shift)?;
        let h = b.silu(&h)?;
        let h = b.conv2d(&h, k2, Some(c2), PAD)?;
        if cin == cout {
            return Ok(b.add(&h, x)?);
        }
        let (ks, cs) = cur.pair()?;
        let skip = b.conv2d(x, ks, Some(cs), PAD)?;
        Ok(b.add(&h, &skip)?)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let want = [c.input_channels(), c.height, c.width_s];
        if shape != want {
            return Err(Error::Data(format!("network input shape {:?}, expected {:?}", shape, want)));
        }
        Ok(())
    }
}

/// Splits a `[2C]` FiLM vector into scale and shift halves. The op set has no
/// slicing, so the split is two fixed selection matrices.
fn split_film<B: Backend>(b: &mut B, film: &B::Value, c: usize) -> Result<(B::Value, B::Value)> {
    let select = |offset: usize| {
        let mut m = vec![0.0; c * 2 * c];
        for i in 0..c {
            m[i * 2 * c + offset + i] = 1.0;
        }
        Tensor::new(vec![c, 2 * c], m).expect("selection shape")
    };
    let s = b.constant(select(0));
    let t = b.constant(select(c));
    Ok((b.linear(film, &s, None)?, b.linear(film, &t, None)?))
}

impl Denoiser for DenoiserNet {
    fn params(&self) -> &[Tensor] {
        &self.params
    }

    fn time_features(&self, t: f64, r: f64, dt: f64, dr: f64) -> Result<(Tensor, Tensor)> {
        time_embedding_with_tangent(t, r, self.config.embed_dim, dt, dr)
    }

    fn apply<B: Backend>(&self, b: &mut B, params: &[B::Value], input: &B::Value, time: &B::Value) -> Result<B::Value> {
        self.check_input(b.value(input).shape())?;
        if params.len() != self.params.len() {
            return Err(Error::Internal(format!(
                "got {} parameter handles for a network with {}",
                params.len(),
                self.params.len()
            )));
        }
        let cfg = &self.config;
        let groups = cfg.groups();
        let mut cur = Cursor { params, pos: 0 };

        let (w1, b1) = cur.pair()?;
        let (w2, b2) = cur.pair()?;
        let e = b.linear(time, w1, Some(b1))?;
        let e = b.silu(&e)?;
        let e = b.linear(&e, w2, Some(b2))?;
        let cond = b.silu(&e)?;

        let (k, c) = cur.pair()?;
        let mut h = b.conv2d(input, k, Some(c), PAD)?;
        let mut skips = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let cin = cfg.level_channels(l.saturating_sub(1));
            h = self.res_block(b, &mut cur, &h, &cond, cin, cfg.level_channels(l))?;
            skips.push(h.clone());
            h = b.downsample2(&h)?;
        }
        h = self.res_block(b, &mut cur, &h, &cond, cfg.level_channels(cfg.depth - 1), cfg.level_channels(cfg.depth))?;
        for l in (0..cfg.depth).rev() {
            let up = b.upsample2(&h)?;
            let skip = skips.pop().expect("one skip per level");
            let cat = b.concat_channels(&[&up, &skip])?;
            let cin = cfg.level_channels(l + 1) + cfg.level_channels(l);
            h = self.res_block(b, &mut cur, &cat, &cond, cin, cfg.level_channels(l))?;
        }
        let (g, bt) = cur.pair()?;
        let h = b.group_norm(&h, g, bt, groups)?;
        let h = b.silu(&h)?;
        let (k, c) = cur.pair()?;
        let out = b.conv2d(&h, k, Some(c), PAD)?;
        if cur.pos != params.len() {
            return Err(Error::Internal(format!("{} parameters left unused", params.len() - cur.pos)));
        }
        Ok(out)
    }
}
