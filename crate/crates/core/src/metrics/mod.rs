//! Forecast evaluation: pointwise error, SSIM, spectra, fluctuation energy,
//! mixing rate and ensemble CRPS.

mod report;

pub use report::{evaluate, MetricReport, TrajectoryMetrics, COLUMNS, SHORT_HORIZON};

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::io::Trajectory;
use crate::{Error, Result};

/// Stabilizer shared by every metric.
pub const EPS: f64 = 1e-12;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Lags used when fitting the mixing rate.
pub const MIXING_LAGS: usize = 20;
pub const LAMBDA_MAX: f64 = 10.0;

fn same_shape(a: &Trajectory, b: &Trajectory) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Data(format!("shape mismatch: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean over members of `‖pred − ref‖ / (‖ref‖ + ε)` on the first `t_eval`
/// frames.
pub fn rl2(pred: &Trajectory, reference: &Trajectory, t_eval: usize) -> Result<f64> {
    same_shape(pred, reference)?;
    if t_eval == 0 || t_eval > reference.frames() {
        return Err(Error::Data(format!("t_eval {} outside 1..={}", t_eval, reference.frames())));
    }
    let mut total = 0.0;
    for b in 0..reference.batch() {
        let p = pred.frames_slice(b, 0, t_eval);
        let r = reference.frames_slice(b, 0, t_eval);
        let num = p.iter().zip(r).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let den = r.iter().map(|y| y * y).sum::<f64>().sqrt();
        total += num / (den + EPS);
    }
    Ok(total / reference.batch() as f64)
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable smoothing with zero padding and output the size of the input.
fn smooth(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let c = (k.len() / 2) as isize;
    let mut rows = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let jj = j as isize + t as isize - c;
                if jj >= 0 && (jj as usize) < w {
                    acc += kv * x[i * w + jj as usize];
                }
            }
            rows[i * w + j] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let ii = i as isize + t as isize - c;
                if ii >= 0 && (ii as usize) < h {
                    acc += kv * rows[ii as usize * w + j];
                }
            }
            out[i * w + j] = acc;
        }
    }
    out
}

/// Mean SSIM of one `h × w` field. `range` overrides the data range, which
/// otherwise comes from the reference.
pub fn ssim_with(
    reference: &[f64],
    pred: &[f64],
    h: usize,
    w: usize,
    window: usize,
    sigma: f64,
    range: Option<f64>,
) -> Result<f64> {
    if reference.len() != h * w || pred.len() != h * w {
        return Err(Error::Data(format!("ssim expects {}x{} fields", h, w)));
    }
    let l = range.unwrap_or_else(|| {
        let (lo, hi) = reference.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        hi - lo
    });
    if l == 0.0 {
        let agree = reference.iter().zip(pred).all(|(a, b)| (a - b).abs() <= EPS);
        return Ok(if agree { 1.0 } else { 0.0 });
    }
    let (c1, c2) = ((SSIM_K1 * l).powi(2), (SSIM_K2 * l).powi(2));
    let k = gaussian_kernel(window, sigma);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mx = smooth(reference, h, w, &k);
    let my = smooth(pred, h, w, &k);
    let mxx = smooth(&sq(reference, reference), h, w, &k);
    let myy = smooth(&sq(pred, pred), h, w, &k);
    let mxy = smooth(&sq(reference, pred), h, w, &k);
    let mut acc = 0.0;
    for i in 0..h * w {
        let (vx, vy, cxy) = (mxx[i] - mx[i] * mx[i], myy[i] - my[i] * my[i], mxy[i] - mx[i] * my[i]);
        let num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2);
        let den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
        acc += num / den;
    }
    Ok(acc / (h * w) as f64)
}

pub fn ssim(reference: &[f64], pred: &[f64], h: usize, w: usize) -> Result<f64> {
    ssim_with(reference, pred, h, w, SSIM_WINDOW, SSIM_SIGMA, None)
}

/// SSIM averaged over members, the first `t_eval` frames and channels.
pub fn ssim_trajectory(pred: &Trajectory, reference: &Trajectory, t_eval: usize) -> Result<f64> {
    same_shape(pred, reference)?;
    let (h, w) = (reference.height(), reference.width());
    let mut acc = 0.0;
    let mut n = 0;
    for b in 0..reference.batch() {
        for t in 0..t_eval.min(reference.frames()) {
            for (r, p) in reference.frame(b, t).chunks(h * w).zip(pred.frame(b, t).chunks(h * w)) {
                acc += ssim(r, p, h, w)?;
                n += 1;
            }
        }
    }
    Ok(acc / n as f64)
}

/// Radially averaged power of the shifted spectrum. Bin `k` averages
/// `|F|²` over cells with `⌊√((i−⌊H/2⌋)² + (j−⌊W/2⌋)²)⌋ = k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumProfile {
    pub power: Vec<f64>,
    pub counts: Vec<usize>,
}

impl SpectrumProfile {
    pub fn bins(&self) -> usize {
        self.power.len()
    }

    /// First `k_r` bins scaled to sum to one (up to ε).
    pub fn normalized(&self, k_r: usize) -> Vec<f64> {
        let crop = &self.power[..k_r.min(self.power.len())];
        let s: f64 = crop.iter().sum();
        crop.iter().map(|p| p / (s + EPS)).collect()
    }
}

fn radial_bin(i: usize, j: usize, h: usize, w: usize) -> usize {
    let di = i as f64 - (h / 2) as f64;
    let dj = j as f64 - (w / 2) as f64;
    (di * di + dj * dj).sqrt().floor() as usize
}

/// Number of radial bins of an `h × w` frame.
pub fn radial_bin_count(h: usize, w: usize) -> usize {
    radial_bin(0, 0, h, w).max(radial_bin(h - 1, w - 1, h, w)).max(radial_bin(0, w - 1, h, w)).max(radial_bin(h - 1, 0, h, w)) + 1
}

/// Power of the unnormalized 2D DFT of `channels` stacked `h × w` fields,
/// summed over channels, in natural (unshifted) order.
pub fn power_spectrum(frame: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let mut planner = FftPlanner::<f64>::new();
    let (fr, fc) = (planner.plan_fft_forward(w), planner.plan_fft_forward(h));
    let mut power = vec![0.0; h * w];
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    for c in frame.chunks(h * w).take(channels) {
        let mut d: Vec<Complex64> = c.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        for row in d.chunks_mut(w) {
            fr.process(row);
        }
        for j in 0..w {
            for i in 0..h {
                col[i] = d[i * w + j];
            }
            fc.process(&mut col);
            for i in 0..h {
                d[i * w + j] = col[i];
            }
        }
        for (p, z) in power.iter_mut().zip(&d) {
            *p += z.norm_sqr();
        }
    }
    power
}

pub fn radial_spectrum(frame: &[f64], channels: usize, h: usize, w: usize) -> Result<SpectrumProfile> {
    if frame.len() != channels * h * w || channels == 0 {
        return Err(Error::Data(format!("frame of {} values is not {}x{}x{}", frame.len(), channels, h, w)));
    }
    let power = power_spectrum(frame, channels, h, w);
    let bins = radial_bin_count(h, w);
    let mut sum = vec![0.0; bins];
    let mut counts = vec![0usize; bins];
    for i in 0..h {
        for j in 0..w {
            // Shifted position (i, j) holds frequency index (i − ⌊H/2⌋) mod H.
            let si = (i + h - h / 2) % h;
            let sj = (j + w - w / 2) % w;
            let k = radial_bin(i, j, h, w);
            sum[k] += power[si * w + sj];
            counts[k] += 1;
        }
    }
    let power = sum.iter().zip(&counts).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
    Ok(SpectrumProfile { power, counts })
}

/// Mean absolute log difference of two normalized profiles.
pub fn log_profile_distance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    a.iter().zip(b).map(|(x, y)| ((x + EPS).ln() - (y + EPS).ln()).abs()).sum::<f64>() / n as f64
}

/// Default retained bin count: 220 at 256², all bins otherwise.
pub fn default_kr(h: usize, w: usize) -> usize {
    if h == 256 && w == 256 {
        220
    } else {
        radial_bin_count(h, w)
    }
}

/// Spectral discrepancy averaged over all paired frames.
pub fn psdd(pred: &Trajectory, reference: &Trajectory, k_r: usize) -> Result<f64> {
    same_shape(pred, reference)?;
    let (c, h, w) = (reference.channels(), reference.height(), reference.width());
    let mut acc = 0.0;
    let mut n = 0;
    for b in 0..reference.batch() {
        for t in 0..reference.frames() {
            let p = radial_spectrum(pred.frame(b, t), c, h, w)?.normalized(k_r);
            let r = radial_spectrum(reference.frame(b, t), c, h, w)?.normalized(k_r);
            acc += log_profile_distance(&p, &r);
            n += 1;
        }
    }
    Ok(acc / n as f64)
}

/// Member-averaged temporal variance per grid value, `[C·H·W]`.
pub fn tke_map(x: &Trajectory) -> Vec<f64> {
    let (t, f) = (x.frames(), x.frame_len());
    let mut map = vec![0.0; f];
    for b in 0..x.batch() {
        let mut mean = vec![0.0; f];
        for s in 0..t {
            for (m, v) in mean.iter_mut().zip(x.frame(b, s)) {
                *m += v / t as f64;
            }
        }
        for s in 0..t {
            for ((acc, v), m) in map.iter_mut().zip(x.frame(b, s)).zip(&mean) {
                *acc += (v - m).powi(2) / (t * x.batch()) as f64;
            }
        }
    }
    map
}

pub fn tked(pred: &Trajectory, reference: &Trajectory) -> Result<f64> {
    same_shape(pred, reference)?;
    let (p, r) = (tke_map(pred), tke_map(reference));
    let n = r.len() as f64;
    let num = p.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n;
    let den = r.iter().sum::<f64>() / n;
    Ok(num / (den + EPS))
}

/// Normalized autocovariance `C̄(0..=k)` with lag sums over the first
/// `T − K − ℓ` frames of each member.
pub fn autocorrelation(x: &Trajectory, k: usize) -> Result<Vec<f64>> {
    let t = x.frames();
    if t <= 2 * k {
        return Err(Error::Data(format!("mixing rate needs more than {} frames, got {}", 2 * k, t)));
    }
    let mean = x.data().iter().sum::<f64>() / x.data().len() as f64;
    let f = x.frame_len();
    let mut c = Vec::with_capacity(k + 1);
    for lag in 0..=k {
        let m = t - k - lag;
        let mut acc = 0.0;
        for b in 0..x.batch() {
            for s in 0..m {
                acc += x.frame(b, s).iter().zip(x.frame(b, s + lag)).map(|(a, c)| (a - mean) * (c - mean)).sum::<f64>();
            }
        }
        c.push(acc / (x.batch() * m * f) as f64);
    }
    if c[0] == 0.0 {
        return Err(Error::Data("zero variance: mixing rate undefined".into()));
    }
    let c0 = c[0];
    Ok(c.into_iter().map(|v| v / c0).collect())
}

/// Least-squares `λ ∈ [0, LAMBDA_MAX]` for `C̄(ℓ) ≈ exp(−λℓ)`, by
/// golden-section search.
pub fn fit_decay(cbar: &[f64]) -> f64 {
    let loss = |lam: f64| cbar.iter().enumerate().map(|(l, c)| (c - (-lam * l as f64).exp()).powi(2)).sum::<f64>();
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (0.0, LAMBDA_MAX);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (loss(x1), loss(x2));
    while b - a > 1e-12 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = loss(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = loss(x2);
        }
    }
    let mid = 0.5 * (a + b);
    // The interior search never lands exactly on the bounds.
    [0.0, mid, LAMBDA_MAX].into_iter().min_by(|p, q| loss(*p).total_cmp(&loss(*q))).unwrap()
}

pub fn mixing_rate(x: &Trajectory, k: usize) -> Result<f64> {
    Ok(fit_decay(&autocorrelation(x, k)?))
}

pub fn mixing_rate_error(lambda_pred: f64, lambda_gt: f64) -> Result<f64> {
    if !(lambda_gt > 0.0) {
        return Err(Error::Data(format!("reference mixing rate must be positive, got {lambda_gt}")));
    }
    Ok((lambda_pred - lambda_gt).abs() / lambda_gt)
}

pub fn mrd(pred: &Trajectory, reference: &Trajectory, k: usize) -> Result<f64> {
    same_shape(pred, reference)?;
    mixing_rate_error(mixing_rate(pred, k)?, mixing_rate(reference, k)?)
}

/// Empirical CRPS of `members` against `y`.
pub fn crps(members: &[f64], y: f64) -> f64 {
    let m = members.len() as f64;
    let mae = members.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
    let mut s = members.to_vec();
    s.sort_by(f64::total_cmp);
    // Σ_{i,j} |x_i − x_j| = 2 Σ_i (2i − M + 1) x_(i) over sorted values.
    let spread: f64 = s.iter().enumerate().map(|(i, x)| (2.0 * i as f64 - m + 1.0) * x).sum::<f64>() * 2.0;
    mae - spread / (2.0 * m * m)
}

/// Pointwise CRPS averaged over every value of the first `t_eval` frames,
/// together with the matching member mean absolute error.
pub fn crps_field(members: &[Trajectory], reference: &Trajectory, t_eval: usize) -> Result<(f64, f64)> {
    if members.is_empty() {
        return Err(Error::Data("CRPS needs at least one member".into()));
    }
    for m in members {
        same_shape(m, reference)?;
    }
    let mut vals = vec![0.0; members.len()];
    let (mut total, mut mae, mut n) = (0.0, 0.0, 0usize);
    for b in 0..reference.batch() {
        let r = reference.frames_slice(b, 0, t_eval);
        let ms: Vec<&[f64]> = members.iter().map(|m| m.frames_slice(b, 0, t_eval)).collect();
        for (i, y) in r.iter().enumerate() {
            for (v, m) in vals.iter_mut().zip(&ms) {
                *v = m[i];
            }
            total += crps(&vals, *y);
            mae += vals.iter().map(|x| (x - y).abs()).sum::<f64>() / vals.len() as f64;
            n += 1;
        }
    }
    let (c, a) = (total / n as f64, mae / n as f64);
    if c > a + 1e-12 * a.abs().max(1.0) {
        return Err(Error::Internal(format!("CRPS {c} exceeds member MAE {a}")));
    }
    Ok((c, a))
}
