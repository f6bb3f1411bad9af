//! Increment statistics of stationary sequences. The expected squared
//! increment at lag `w` equals `2·tr(Γ(0) − Γ(w))` for a zero-mean stationary
//! process with lag covariance `Γ`; these helpers estimate both sides.

use crate::{Error, Result};

fn check(seq: &[f64], frame_len: usize, lag: usize) -> Result<usize> {
    if frame_len == 0 || seq.len() % frame_len != 0 {
        return Err(Error::Data(format!("sequence of {} values is not a whole number of {}-frames", seq.len(), frame_len)));
    }
    let frames = seq.len() / frame_len;
    if lag >= frames {
        return Err(Error::Data(format!("lag {} needs more than {} frames", lag, frames)));
    }
    Ok(frames - lag)
}

/// Mean over start times of `‖X^{τ+lag} − X^τ‖²`.
pub fn increment_energy(seq: &[f64], frame_len: usize, lag: usize) -> Result<f64> {
    let pairs = check(seq, frame_len, lag)?;
    let mut s = 0.0;
    for tau in 0..pairs {
        let a = &seq[tau * frame_len..(tau + 1) * frame_len];
        let b = &seq[(tau + lag) * frame_len..(tau + lag + 1) * frame_len];
        s += a.iter().zip(b).map(|(x, y)| (y - x) * (y - x)).sum::<f64>();
    }
    Ok(s / pairs as f64)
}

/// Empirical `tr Γ(lag) = mean_τ ⟨X^{τ+lag}, X^τ⟩`; the process is assumed
/// zero-mean.
pub fn lag_covariance_trace(seq: &[f64], frame_len: usize, lag: usize) -> Result<f64> {
    let pairs = check(seq, frame_len, lag)?;
    let mut s = 0.0;
    for tau in 0..pairs {
        let a = &seq[tau * frame_len..(tau + 1) * frame_len];
        let b = &seq[(tau + lag) * frame_len..(tau + lag + 1) * frame_len];
        s += a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    }
    Ok(s / pairs as f64)
}
