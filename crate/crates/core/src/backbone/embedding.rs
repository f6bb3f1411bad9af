use crate::tensor::Tensor;
use crate::{Error, Result};

/// Largest angular frequency applied to a diffusion time in `[0, 1]`.
const MAX_FREQUENCY: f64 = 100.0;
/// Ratio between the largest and the smallest frequency.
const FREQUENCY_SPAN: f64 = 1000.0;

fn frequencies(half: usize) -> impl Iterator<Item = f64> {
    (0..half).map(move |i| MAX_FREQUENCY * FREQUENCY_SPAN.powf(-(i as f64) / half as f64))
}

/// Sinusoidal features of `s`: `[sin(ω_0 s) .. sin(ω_{E/2-1} s), cos(ω_0 s) ..]`
/// and their derivative with respect to `s`.
fn sinusoidal(s: f64, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let half = dim / 2;
    let mut value = vec![0.0; dim];
    let mut deriv = vec![0.0; dim];
    for (i, w) in frequencies(half).enumerate() {
        let (sn, cs) = (w * s).sin_cos();
        value[i] = sn;
        value[half + i] = cs;
        deriv[i] = w * cs;
        deriv[half + i] = -w * sn;
    }
    (value, deriv)
}

/// Concatenated sinusoidal features of the diffusion time `t` and reference
/// time `r`, length `2·dim`.
pub fn time_embedding(t: f64, r: f64, dim: usize) -> Result<Tensor> {
    Ok(time_embedding_with_tangent(t, r, dim, 0.0, 0.0)?.0)
}

/// Embedding together with its directional derivative along `(dt, dr)`.
pub fn time_embedding_with_tangent(t: f64, r: f64, dim: usize, dt: f64, dr: f64) -> Result<(Tensor, Tensor)> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("embedding dimension must be even and positive, got {}", dim)));
    }
    if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&r) || r > t {
        return Err(Error::Config(format!("times must satisfy 0 <= r <= t <= 1, got t={} r={}", t, r)));
    }
    let (tv, td) = sinusoidal(t, dim);
    let (rv, rd) = sinusoidal(r, dim);
    let value = [tv, rv].concat();
    let tangent: Vec<f64> = td.iter().map(|v| v * dt).chain(rd.iter().map(|v| v * dr)).collect();
    Ok((Tensor::from_vec(value), Tensor::from_vec(tangent)))
}
