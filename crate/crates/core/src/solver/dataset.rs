//! Seeded trajectory generation with a trajectory-level split.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{KolmogorovSolver, SolverConfig};
use crate::io::{read_trajectory, write_atomic, write_trajectory, Trajectory};
use crate::{Error, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.625, val: 0.125, test: 0.25 }
    }
}

impl SplitFractions {
    /// Contiguous assignment: train first, then val, then test. Val and test
    /// counts are rounded; train takes the remainder.
    pub fn assign(&self, n: usize) -> Result<Vec<Split>> {
        let sum = self.train + self.val + self.test;
        if [self.train, self.val, self.test].iter().any(|f| !(*f >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions must be nonnegative and sum to 1, got {sum}")));
        }
        let test = (self.test * n as f64).round() as usize;
        let val = ((self.val * n as f64).round() as usize).min(n - test);
        let train = n - test - val;
        let mut out = vec![Split::Train; train];
        out.extend(std::iter::repeat_n(Split::Val, val));
        out.extend(std::iter::repeat_n(Split::Test, test));
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub split: Split,
    pub seed_stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub solver: SolverConfig,
    pub seed: u64,
    pub n_frames: usize,
    pub burn_in: usize,
    /// Simulation time between saved frames.
    pub frame_dt: f64,
    pub initial_condition: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: bad manifest: {}", path.display(), e)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Internal(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn files(&self, dir: &Path, split: Split) -> Vec<PathBuf> {
        self.entries.iter().filter(|e| e.split == split).map(|e| dir.join(&e.file)).collect()
    }

    /// Loads every trajectory of one split, resolving names against `dir`.
    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Vec<Trajectory>> {
        self.files(dir, split).iter().map(|p| read_trajectory(p)).collect()
    }
}

/// One trajectory of `n_frames` vorticity snapshots `[1, T, 1, N, N]`.
/// The initial condition uses stream `index` of a ChaCha8 generator seeded
/// with `seed`, so trajectories are independent of how many are generated.
pub fn generate_trajectory(cfg: &SolverConfig, n_frames: usize, burn_in: usize, seed: u64, index: u64) -> Result<Trajectory> {
    if n_frames == 0 {
        return Err(Error::Config("n_frames must be at least 1".into()));
    }
    let solver = KolmogorovSolver::new(*cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut w = solver.random_initial(&mut rng);
    for _ in 0..burn_in {
        w = solver.step(&w)?;
    }
    let n = cfg.n;
    let mut data = Vec::with_capacity(n_frames * n * n);
    for f in 0..n_frames {
        if f > 0 {
            for _ in 0..cfg.save_every {
                w = solver.step(&w)?;
            }
        }
        data.extend(solver.inverse(&w));
    }
    Trajectory::single(n_frames, n, n, data)
}

pub fn generate_dataset(
    cfg: &SolverConfig,
    n_traj: usize,
    n_frames: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    (0..n_traj as u64).map(|i| generate_trajectory(cfg, n_frames, burn_in, seed, i)).collect()
}

/// Generates and writes `traj_XXX.mltr` files plus the manifest into `dir`.
pub fn write_dataset(
    dir: &Path,
    cfg: &SolverConfig,
    n_traj: usize,
    n_frames: usize,
    burn_in: usize,
    seed: u64,
    fractions: &SplitFractions,
) -> Result<DatasetManifest> {
    let splits = fractions.assign(n_traj)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(n_traj);
    for (i, split) in splits.into_iter().enumerate() {
        let traj = generate_trajectory(cfg, n_frames, burn_in, seed, i as u64)?;
        let file = format!("traj_{i:03}.mltr");
        write_trajectory(&traj, &dir.join(&file))?;
        entries.push(ManifestEntry { file, split, seed_stream: i as u64 });
    }
    let manifest = DatasetManifest {
        solver: *cfg,
        seed,
        n_frames,
        burn_in,
        frame_dt: cfg.dt * cfg.save_every as f64,
        initial_condition: "isotropic Gaussian, amplitude (k/4)^2 exp(-(k/4)^2), unit RMS".into(),
        entries,
    };
    manifest.save(&dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_of_eight() {
        let s = SplitFractions::default().assign(8).unwrap();
        let count = |x| s.iter().filter(|&&v| v == x).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (5, 1, 2));
        assert!(SplitFractions { train: 0.5, val: 0.1, test: 0.1 }.assign(8).is_err());
    }
}
