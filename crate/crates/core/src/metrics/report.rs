use std::fmt::Write as _;

use super::{crps_field, default_kr, mrd, psdd, rl2, ssim_trajectory, tked, MIXING_LAGS, SSIM_SIGMA, SSIM_WINDOW};
use crate::io::Trajectory;
use crate::{Error, Result};

/// Frames scored by the pointwise metrics.
pub const SHORT_HORIZON: usize = 40;

const ABSENT: &str = "NA";

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryMetrics {
    pub name: String,
    pub rl2: f64,
    pub ssim: f64,
    pub psdd: f64,
    pub tked: f64,
    pub mrd: f64,
    pub crps: Option<f64>,
}

impl TrajectoryMetrics {
    fn values(&self) -> [Option<f64>; 6] {
        [Some(self.rl2), Some(self.ssim), Some(self.psdd), Some(self.tked), Some(self.mrd), self.crps]
    }
}

/// Per-trajectory scores with mean and standard error across trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub short_horizon: usize,
    pub long_horizon: usize,
    pub k_r: usize,
    pub mixing_lags: usize,
    pub rows: Vec<TrajectoryMetrics>,
}

pub const COLUMNS: [&str; 6] = ["RL2", "SSIM", "PSDD", "TKED", "MRD", "CRPS"];

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl MetricReport {
    /// `(mean, standard error)` per column; `None` when a column is absent
    /// for any trajectory.
    pub fn aggregate(&self) -> [Option<(f64, f64)>; 6] {
        std::array::from_fn(|c| {
            let col: Option<Vec<f64>> = self.rows.iter().map(|r| r.values()[c]).collect();
            col.filter(|v| !v.is_empty()).map(|v| mean_se(&v))
        })
    }

    fn header_comment(&self) -> String {
        format!(
            "# short_horizon={} long_horizon={} k_r={} mixing_lags={} ssim_window={} ssim_sigma={} spread=standard_error",
            self.short_horizon, self.long_horizon, self.k_r, self.mixing_lags, SSIM_WINDOW, SSIM_SIGMA
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.header_comment();
        s.push_str("\ntrajectory,rl2,ssim,psdd,tked,mrd,crps\n");
        let fmt = |v: Option<f64>| v.map_or(ABSENT.to_string(), |x| format!("{x:e}"));
        for r in &self.rows {
            let vals: Vec<String> = r.values().iter().map(|v| fmt(*v)).collect();
            let _ = writeln!(s, "{},{}", r.name, vals.join(","));
        }
        let agg = self.aggregate();
        let means: Vec<String> = agg.iter().map(|a| fmt(a.map(|p| p.0))).collect();
        let ses: Vec<String> = agg.iter().map(|a| fmt(a.map(|p| p.1))).collect();
        let _ = writeln!(s, "mean,{}", means.join(","));
        let _ = writeln!(s, "stderr,{}", ses.join(","));
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = self.header_comment();
        s.push('\n');
        let _ = write!(s, "{:<16}", "trajectory");
        for c in COLUMNS {
            let _ = write!(s, "{:>22}", c);
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<16}", r.name);
            for v in r.values() {
                let _ = write!(s, "{:>22}", v.map_or(ABSENT.to_string(), |x| format!("{x:.4}")));
            }
            s.push('\n');
        }
        let _ = write!(s, "{:<16}", "mean ± se");
        for a in self.aggregate() {
            let cell = a.map_or(ABSENT.to_string(), |(m, e)| format!("{m:.4} ± {e:.4}"));
            let _ = write!(s, "{:>22}", cell);
        }
        s.push('\n');
        s
    }
}

/// Scores each forecast against its reference. `ensembles[i]`, when given,
/// holds the members used for CRPS on trajectory `i`.
pub fn evaluate(
    names: &[String],
    preds: &[Trajectory],
    refs: &[Trajectory],
    ensembles: Option<&[Vec<Trajectory>]>,
) -> Result<MetricReport> {
    if preds.len() != refs.len() || names.len() != refs.len() || refs.is_empty() {
        return Err(Error::Data(format!(
            "{} names, {} forecasts and {} references must match and be nonempty",
            names.len(),
            preds.len(),
            refs.len()
        )));
    }
    if let Some(e) = ensembles {
        if e.len() != refs.len() {
            return Err(Error::Data(format!("{} ensembles for {} references", e.len(), refs.len())));
        }
    }
    let first = &refs[0];
    let long = first.frames();
    let short = SHORT_HORIZON.min(long);
    let lags = MIXING_LAGS.min(long.saturating_sub(1) / 2);
    let k_r = default_kr(first.height(), first.width());
    let mut rows = Vec::with_capacity(refs.len());
    for (i, (p, r)) in preds.iter().zip(refs).enumerate() {
        if r.frames() != long {
            return Err(Error::Data("all references must share one horizon".into()));
        }
        let crps = match ensembles {
            Some(e) => Some(crps_field(&e[i], r, long)?.0),
            None => None,
        };
        rows.push(TrajectoryMetrics {
            name: names[i].clone(),
            rl2: rl2(p, r, short)?,
            ssim: ssim_trajectory(p, r, short)?,
            psdd: psdd(p, r, k_r)?,
            tked: tked(p, r)?,
            mrd: mrd(p, r, lags)?,
            crps,
        });
    }
    Ok(MetricReport { short_horizon: short, long_horizon: long, k_r, mixing_lags: lags, rows })
}
