//! Pseudo-spectral vorticity solver for 2D Kolmogorov flow on `[0, 2π]²`.
//!
//! `∂_t ω + u·∇ω = ν∇²ω − n·A·cos(n y)`, with `u = ∂_y ψ`, `v = −∂_x ψ` and
//! `ψ̂ = ω̂ / |k|²`. Fields are stored row-major with rows along `y`.

mod dataset;

pub use dataset::{
    generate_dataset, generate_trajectory, write_dataset, DatasetManifest, ManifestEntry, Split, SplitFractions, MANIFEST_NAME,
};

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub n: usize,
    pub nu: f64,
    pub forcing_wavenumber: usize,
    pub forcing_amplitude: f64,
    pub dt: f64,
    pub save_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { n: 64, nu: 0.02, forcing_wavenumber: 4, forcing_amplitude: 1.0, dt: 0.01, save_every: 20 }
    }
}

impl SolverConfig {
    fn validate(&self, allow_inviscid: bool) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n < 4 || !self.n.is_power_of_two() {
            return bad(format!("grid size must be a power of two >= 4, got {}", self.n));
        }
        if !(self.nu > 0.0 || (allow_inviscid && self.nu == 0.0)) || !self.nu.is_finite() {
            return bad(format!("viscosity must be positive, got {}", self.nu));
        }
        if self.forcing_wavenumber == 0 || self.forcing_wavenumber > self.n / 3 {
            return bad(format!(
                "forcing wavenumber must lie in 1..={} for N={}, got {}",
                self.n / 3,
                self.n,
                self.forcing_wavenumber
            ));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad(format!("time step must be positive, got {}", self.dt));
        }
        if self.save_every == 0 {
            return bad("save_every must be at least 1".into());
        }
        Ok(())
    }
}

/// Integer wavenumber of FFT index `i` on an `n`-point grid; the Nyquist
/// index maps to 0 so derivatives stay real.
fn wavenumber(i: usize, n: usize) -> f64 {
    if i < n / 2 {
        i as f64
    } else if i == n / 2 {
        0.0
    } else {
        i as f64 - n as f64
    }
}

/// Spectral field storage: `n*n` complex coefficients, unnormalized forward
/// transform.
pub type Spectrum = Vec<Complex64>;

pub struct KolmogorovSolver {
    cfg: SolverConfig,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    k: Vec<f64>,
    keep: Vec<bool>,
    forcing: Spectrum,
}

impl std::fmt::Debug for KolmogorovSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KolmogorovSolver").field("cfg", &self.cfg).finish()
    }
}

impl KolmogorovSolver {
    pub fn new(cfg: SolverConfig) -> Result<Self> {
        cfg.validate(false)?;
        Ok(Self::build(cfg))
    }

    /// Allows `ν = 0` for conservation checks of the inviscid dynamics.
    pub fn new_inviscid(cfg: SolverConfig) -> Result<Self> {
        cfg.validate(true)?;
        Ok(Self::build(cfg))
    }

    fn build(cfg: SolverConfig) -> Self {
        let n = cfg.n;
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let k: Vec<f64> = (0..n).map(|i| wavenumber(i, n)).collect();
        let kmax = (n / 3) as f64;
        let mut keep = vec![false; n * n];
        for iy in 0..n {
            for ix in 0..n {
                let (kx, ky) = (k[ix], k[iy]);
                let nyq = ix == n / 2 || iy == n / 2;
                keep[iy * n + ix] = !nyq && kx.abs() <= kmax && ky.abs() <= kmax;
            }
        }
        let mut s = Self { cfg, fwd, inv, k, keep, forcing: Vec::new() };
        let (nf, amp) = (cfg.forcing_wavenumber as f64, cfg.forcing_amplitude);
        let h = 2.0 * std::f64::consts::PI / n as f64;
        let phys: Vec<f64> = (0..n * n).map(|i| -nf * amp * (nf * (i / n) as f64 * h).cos()).collect();
        let mut forcing = s.forward(&phys);
        s.project(&mut forcing);
        s.forcing = forcing;
        s
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    pub fn n(&self) -> usize {
        self.cfg.n
    }

    fn grid_spacing(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.cfg.n as f64
    }

    fn fft2(&self, data: &mut [Complex64], inverse: bool) {
        let n = self.cfg.n;
        let plan = if inverse { &self.inv } else { &self.fwd };
        for row in data.chunks_mut(n) {
            plan.process(row);
        }
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for ix in 0..n {
            for iy in 0..n {
                col[iy] = data[iy * n + ix];
            }
            plan.process(&mut col);
            for iy in 0..n {
                data[iy * n + ix] = col[iy];
            }
        }
        if inverse {
            let s = 1.0 / (n * n) as f64;
            data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn forward(&self, field: &[f64]) -> Spectrum {
        let mut d: Vec<Complex64> = field.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft2(&mut d, false);
        d
    }

    pub fn inverse(&self, spec: &[Complex64]) -> Vec<f64> {
        let mut d = spec.to_vec();
        self.fft2(&mut d, true);
        d.into_iter().map(|c| c.re).collect()
    }

    /// Zeroes dealiased modes and the mean, and restores exact Hermitian
    /// symmetry `ω̂(−k) = conj ω̂(k)`.
    fn project<'a>(&self, w: &'a mut Spectrum) -> &'a mut Spectrum {
        let n = self.cfg.n;
        for iy in 0..n {
            for ix in 0..n {
                let i = iy * n + ix;
                let j = ((n - iy) % n) * n + (n - ix) % n;
                if i > j {
                    continue;
                }
                if !self.keep[i] {
                    w[i] = Complex64::new(0.0, 0.0);
                    w[j] = Complex64::new(0.0, 0.0);
                    continue;
                }
                let avg = (w[i] + w[j].conj()) * 0.5;
                w[i] = avg;
                w[j] = avg.conj();
            }
        }
        w[0] = Complex64::new(0.0, 0.0);
        w
    }

    /// Largest deviation from Hermitian symmetry.
    pub fn hermitian_defect(&self, w: &[Complex64]) -> f64 {
        let n = self.cfg.n;
        let mut m: f64 = 0.0;
        for iy in 0..n {
            for ix in 0..n {
                let j = ((n - iy) % n) * n + (n - ix) % n;
                m = m.max((w[iy * n + ix] - w[j].conj()).norm());
            }
        }
        m
    }

    /// Spectral velocity components `(û, v̂)`.
    pub fn velocity_hat(&self, w: &[Complex64]) -> (Spectrum, Spectrum) {
        let n = self.cfg.n;
        let mut u = vec![Complex64::new(0.0, 0.0); n * n];
        let mut v = u.clone();
        for iy in 0..n {
            for ix in 0..n {
                let i = iy * n + ix;
                let (kx, ky) = (self.k[ix], self.k[iy]);
                let k2 = kx * kx + ky * ky;
                if k2 == 0.0 {
                    continue;
                }
                let psi = w[i] / k2;
                u[i] = Complex64::new(0.0, ky) * psi;
                v[i] = Complex64::new(0.0, -kx) * psi;
            }
        }
        (u, v)
    }

    /// Physical velocity `(u, v)` from the vorticity spectrum.
    pub fn velocity_from_vorticity(&self, w: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
        let (u, v) = self.velocity_hat(w);
        (self.inverse(&u), self.inverse(&v))
    }

    /// `max |∂_x u + ∂_y v|` evaluated spectrally.
    pub fn divergence_max(&self, w: &[Complex64]) -> f64 {
        let n = self.cfg.n;
        let (u, v) = self.velocity_hat(w);
        let mut d = vec![Complex64::new(0.0, 0.0); n * n];
        for iy in 0..n {
            for ix in 0..n {
                let i = iy * n + ix;
                d[i] = Complex64::new(0.0, self.k[ix]) * u[i] + Complex64::new(0.0, self.k[iy]) * v[i];
            }
        }
        self.inverse(&d).iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    fn derivative(&self, w: &[Complex64], axis_x: bool) -> Spectrum {
        let n = self.cfg.n;
        let mut d = w.to_vec();
        for iy in 0..n {
            for ix in 0..n {
                let k = if axis_x { self.k[ix] } else { self.k[iy] };
                d[iy * n + ix] *= Complex64::new(0.0, k);
            }
        }
        d
    }

    /// Advection term `−(u·∇ω)^` dealiased, plus the maximum of `|u| + |v|`.
    fn advection(&self, w: &[Complex64]) -> (Spectrum, f64) {
        let (uh, vh) = self.velocity_hat(w);
        let u = self.inverse(&uh);
        let v = self.inverse(&vh);
        let wx = self.inverse(&self.derivative(w, true));
        let wy = self.inverse(&self.derivative(w, false));
        let mut speed: f64 = 0.0;
        let mut prod = Vec::with_capacity(u.len());
        for i in 0..u.len() {
            speed = speed.max(u[i].abs() + v[i].abs());
            prod.push(Complex64::new(-(u[i] * wx[i] + v[i] * wy[i]), 0.0));
        }
        self.fft2(&mut prod, false);
        for (p, keep) in prod.iter_mut().zip(&self.keep) {
            if !keep {
                *p = Complex64::new(0.0, 0.0);
            }
        }
        (prod, speed)
    }

    /// Dealiased advection term `−(u·∇ω)^` alone.
    pub fn advection_term(&self, w: &[Complex64]) -> Spectrum {
        self.advection(w).0
    }

    /// Spectral forcing `F̂_ω`.
    pub fn forcing(&self) -> &[Complex64] {
        &self.forcing
    }

    /// Full right-hand side `dω̂/dt`; errors if the advective CFL number
    /// `max(|u|+|v|)·Δt/Δx` exceeds 1.
    pub fn rhs(&self, w: &[Complex64]) -> Result<Spectrum> {
        let (mut r, speed) = self.advection(w);
        self.check_cfl(speed)?;
        let n = self.cfg.n;
        for iy in 0..n {
            for ix in 0..n {
                let i = iy * n + ix;
                let k2 = self.k[ix] * self.k[ix] + self.k[iy] * self.k[iy];
                r[i] += -self.cfg.nu * k2 * w[i] + self.forcing[i];
            }
        }
        Ok(r)
    }

    fn check_cfl(&self, speed: f64) -> Result<()> {
        let c = speed * self.cfg.dt / self.grid_spacing();
        if !c.is_finite() || c > 1.0 {
            return Err(Error::Numerical(format!("CFL number {c:.3} exceeds 1 (dt = {})", self.cfg.dt)));
        }
        Ok(())
    }

    fn nonlinear(&self, w: &[Complex64]) -> Result<Spectrum> {
        let (mut r, speed) = self.advection(w);
        self.check_cfl(speed)?;
        for (a, f) in r.iter_mut().zip(&self.forcing) {
            *a += f;
        }
        Ok(r)
    }

    /// One RK4 step with the diffusion term integrated exactly.
    pub fn step(&self, w: &[Complex64]) -> Result<Spectrum> {
        let n = self.cfg.n;
        let dt = self.cfg.dt;
        let mut e = vec![0.0; n * n];
        let mut e2 = vec![0.0; n * n];
        for iy in 0..n {
            for ix in 0..n {
                let k2 = self.k[ix] * self.k[ix] + self.k[iy] * self.k[iy];
                e[iy * n + ix] = (-self.cfg.nu * k2 * dt).exp();
                e2[iy * n + ix] = (-self.cfg.nu * k2 * dt / 2.0).exp();
            }
        }
        let a = self.nonlinear(w)?;
        let s1: Spectrum = (0..w.len()).map(|i| e2[i] * (w[i] + a[i] * (dt / 2.0))).collect();
        let b = self.nonlinear(&s1)?;
        let s2: Spectrum = (0..w.len()).map(|i| e2[i] * w[i] + b[i] * (dt / 2.0)).collect();
        let c = self.nonlinear(&s2)?;
        let s3: Spectrum = (0..w.len()).map(|i| e[i] * w[i] + c[i] * (e2[i] * dt)).collect();
        let d = self.nonlinear(&s3)?;
        let mut out: Spectrum = (0..w.len())
            .map(|i| e[i] * w[i] + (a[i] * e[i] + (b[i] + c[i]) * (2.0 * e2[i]) + d[i]) * (dt / 6.0))
            .collect();
        self.project(&mut out);
        if out.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::Numerical("solver produced non-finite vorticity".into()));
        }
        Ok(out)
    }

    /// `½ mean(u² + v²)` over the grid.
    pub fn kinetic_energy(&self, w: &[Complex64]) -> f64 {
        let (u, v) = self.velocity_from_vorticity(w);
        0.5 * u.iter().zip(&v).map(|(a, b)| a * a + b * b).sum::<f64>() / u.len() as f64
    }

    /// `mean(ω²)` over the grid.
    pub fn enstrophy(&self, w: &[Complex64]) -> f64 {
        let f = self.inverse(w);
        f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64
    }

    /// Enstrophy per integer shell `|k|`, up to the largest retained shell.
    pub fn enstrophy_spectrum(&self, w: &[Complex64]) -> Vec<f64> {
        let n = self.cfg.n;
        let shells = (n / 3) as f64 * std::f64::consts::SQRT_2;
        let mut out = vec![0.0; shells as usize + 2];
        for iy in 0..n {
            for ix in 0..n {
                let k = (self.k[ix].powi(2) + self.k[iy].powi(2)).sqrt().round() as usize;
                if k < out.len() {
                    out[k] += w[iy * n + ix].norm_sqr();
                }
            }
        }
        out
    }

    /// Whether a mode survives dealiasing.
    pub fn is_retained(&self, ix: usize, iy: usize) -> bool {
        self.keep[iy * self.cfg.n + ix]
    }

    /// Random smooth initial vorticity: isotropic Gaussian noise with
    /// amplitude `(k/4)² exp(−(k/4)²)`, dealiased, zero mean, unit RMS.
    pub fn random_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> Spectrum {
        let n = self.cfg.n;
        let k0 = 4.0;
        let mut w: Spectrum = (0..n * n)
            .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
            .collect();
        for iy in 0..n {
            for ix in 0..n {
                let k = (self.k[ix].powi(2) + self.k[iy].powi(2)).sqrt() / k0;
                w[iy * n + ix] *= k * k * (-k * k).exp();
            }
        }
        self.project(&mut w);
        let rms = self.enstrophy(&w).sqrt();
        if rms > 0.0 {
            w.iter_mut().for_each(|c| *c /= rms);
        }
        w
    }
}
