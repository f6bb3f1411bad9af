//! Command-line verbs tying generation, training, rollout and evaluation
//! together. Each verb reads a flat `key = value` config file.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::io::{read_trajectory, write_atomic, write_trajectory, KvConfig, Trajectory};
use crate::metrics::{self, evaluate, MetricReport, MIXING_LAGS};
use crate::rollout::{climatology, member_seed, persistence, rollout, CallCounter, RolloutConfig};
use crate::solver::{write_dataset, DatasetManifest, SolverConfig, Split, SplitFractions};
use crate::tensor::Tensor;
use crate::trainer::{train, Normalization, StepRecord, TrainConfig};
use crate::{Error, Result};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "melisa", version, about = "One-step window-conditioned flow surrogate for 2D turbulence")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate Kolmogorov-flow trajectories and write a dataset manifest.
    Generate(Common),
    /// Train a model on the training split of a dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resuming from a checkpoint is not supported.
        #[arg(long)]
        restart: bool,
    },
    /// Forecast every test trajectory from its first context frames.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Frames to forecast; defaults to the rest of each trajectory.
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = 1)]
        ensemble: usize,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
    },
    /// Score forecasts against the reference trajectories.
    Evaluate(Common),
    /// Write plot-ready spectra, fluctuation-energy maps and autocorrelations.
    Spectra(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => cmd_generate(&c.config, &c.out).map(|_| ()),
        Command::Train { common, restart } => {
            if restart {
                return Err(Error::Config("--restart is not supported: training always starts from scratch".into()));
            }
            cmd_train(&common.config, &common.out)
        }
        Command::Rollout { common, checkpoint, horizon, ensemble, seed } => {
            cmd_rollout(&common.config, &checkpoint, horizon, ensemble, seed, &common.out).map(|_| ())
        }
        Command::Evaluate(c) => cmd_evaluate(&c.config, &c.out).map(|_| ()),
        Command::Spectra(c) => cmd_spectra(&c.config, &c.out),
    }
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Resolves `p` against the directory holding the config file.
fn resolve(config: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn absolute(p: &Path) -> PathBuf {
    std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.exists() {
        return Err(Error::Data(format!("dataset manifest {} does not exist", path.display())));
    }
    DatasetManifest::load(path)
}

fn dataset_dir(manifest: &Path) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).to_path_buf()
}

fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

/// Reproducibility record written next to each command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub seed: u64,
    pub start_unix: f64,
    pub end_unix: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollout: Option<RolloutRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub dataset: String,
    pub checkpoint: String,
    pub context: usize,
    pub block: usize,
    pub horizon: usize,
    pub ensemble: usize,
    pub trajectories: Vec<ForecastRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub name: String,
    pub reference: String,
    pub files: Vec<String>,
    pub seeds: Vec<u64>,
    pub nfe: Vec<usize>,
    pub seconds: Vec<f64>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: bad run manifest: {}", path.display(), e)))
    }
}

pub fn cmd_generate(config: &Path, out: &Path) -> Result<DatasetManifest> {
    let start = unix_now();
    let kv = KvConfig::load(config)?;
    let d = SolverConfig::default();
    let solver = SolverConfig {
        n: kv.get_or("n", d.n)?,
        nu: kv.get_or("nu", d.nu)?,
        forcing_wavenumber: kv.get_or("forcing_wavenumber", d.forcing_wavenumber)?,
        forcing_amplitude: kv.get_or("forcing_amplitude", d.forcing_amplitude)?,
        dt: kv.get_or("dt", d.dt)?,
        save_every: kv.get_or("save_every", d.save_every)?,
    };
    let n_traj = kv.get_or("n_traj", 8usize)?;
    let n_frames = kv.get_or("n_frames", 320usize)?;
    let burn_in = kv.get_or("burn_in", 2000usize)?;
    let seed = kv.get_or("seed", DEFAULT_SEED)?;
    let df = SplitFractions::default();
    let fractions = SplitFractions {
        train: kv.get_or("split_train", df.train)?,
        val: kv.get_or("split_val", df.val)?,
        test: kv.get_or("split_test", df.test)?,
    };
    kv.finish()?;
    let manifest = write_dataset(out, &solver, n_traj, n_frames, burn_in, seed, &fractions)?;
    let run = RunManifest {
        command: "generate".into(),
        config: kv.to_text(),
        seed,
        start_unix: start,
        end_unix: unix_now(),
        rollout: None,
    };
    save_json(&run, &out.join(RUN_MANIFEST))?;
    Ok(manifest)
}

pub fn cmd_train(config: &Path, out: &Path) -> Result<()> {
    let start = unix_now();
    let kv = KvConfig::load(config)?;
    let manifest_path = resolve(config, &kv.require::<String>("dataset")?);
    let cfg = TrainConfig::from_kv(&kv)?;
    kv.finish()?;
    let manifest = load_manifest(&manifest_path)?;
    let data = manifest.load_split(&dataset_dir(&manifest_path), Split::Train)?;
    create_dir(out)?;

    let mut log = String::from(StepRecord::CSV_HEADER);
    log.push('\n');
    let interval = cfg.checkpoint_interval;
    let norm = Normalization::fit(&data)?;
    let outcome = train(&data, &cfg, |rec, net| {
        log.push_str(&rec.csv_row());
        log.push('\n');
        if rec.step % 100 == 0 || rec.step == cfg.steps {
            eprintln!("step {}/{}: total {:.4e} (winc_mf {:.4e}, tic {:.4e})", rec.step, cfg.steps, rec.total, rec.winc_mf, rec.tic);
        }
        if interval > 0 && rec.step % interval == 0 && rec.step < cfg.steps {
            let ckpt = Checkpoint {
                net: net.clone(),
                extras: vec![(crate::trainer::NORM_BLOB.into(), vec![norm.mean, norm.std])],
            };
            write_checkpoint(&ckpt, &out.join(format!("model_step{:06}.ckpt", rec.step)))?;
        }
        Ok(())
    })?;
    write_checkpoint(&outcome.checkpoint, &out.join(CHECKPOINT_FILE))?;
    write_atomic(&out.join(TRAIN_LOG), log.as_bytes())?;
    let run = RunManifest {
        command: "train".into(),
        config: kv.to_text(),
        seed: cfg.seed,
        start_unix: start,
        end_unix: unix_now(),
        rollout: None,
    };
    save_json(&run, &out.join(RUN_MANIFEST))
}

fn normalize_frames(frames: &[Tensor], norm: &Normalization) -> Vec<Tensor> {
    frames.iter().map(|f| f.map(|v| norm.apply(v))).collect()
}

fn denormalize_frames(frames: &[Tensor], norm: &Normalization) -> Vec<Tensor> {
    frames.iter().map(|f| f.map(|v| norm.invert(v))).collect()
}

fn traj_name(file: &str) -> String {
    Path::new(file).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| file.to_string())
}

pub fn cmd_rollout(
    config: &Path,
    checkpoint: &Path,
    horizon: Option<usize>,
    ensemble: usize,
    seed: u64,
    out: &Path,
) -> Result<RunManifest> {
    let start = unix_now();
    let kv = KvConfig::load(config)?;
    let manifest_path = resolve(config, &kv.require::<String>("dataset")?);
    let context = kv.get_or("context", 2usize)?;
    kv.finish()?;
    if ensemble == 0 {
        return Err(Error::Config("--ensemble must be at least 1".into()));
    }
    let manifest = load_manifest(&manifest_path)?;
    let dir = dataset_dir(&manifest_path);
    let ckpt = read_checkpoint(checkpoint)?;
    let norm = Normalization::from_checkpoint(&ckpt);
    let net = &ckpt.net;
    let rcfg = RolloutConfig::new(net.config().window, context)?;
    let horizon = horizon.unwrap_or(manifest.n_frames.saturating_sub(context));
    if horizon == 0 {
        return Err(Error::Config("horizon must be at least 1".into()));
    }
    create_dir(out)?;

    let mut records = Vec::new();
    for entry in manifest.entries.iter().filter(|e| e.split == Split::Test) {
        let reference = read_trajectory(&dir.join(&entry.file))?;
        let observed = normalize_frames(&reference.to_frames(0, 0, context)?, &norm);
        let name = traj_name(&entry.file);
        let mut rec = ForecastRecord {
            name: name.clone(),
            reference: entry.file.clone(),
            files: Vec::new(),
            seeds: Vec::new(),
            nfe: Vec::new(),
            seconds: Vec::new(),
        };
        for m in 0..ensemble {
            let s = member_seed(seed, m);
            let counter = CallCounter::new(net);
            let t0 = Instant::now();
            let frames = rollout(&counter, &rcfg, &observed, horizon, &mut ChaCha8Rng::seed_from_u64(s))?;
            let secs = t0.elapsed().as_secs_f64();
            if counter.calls() != rcfg.calls_for(horizon) {
                return Err(Error::Internal(format!(
                    "rollout used {} network calls, expected {}",
                    counter.calls(),
                    rcfg.calls_for(horizon)
                )));
            }
            let file = format!("{name}_m{m:02}.mltr");
            let traj = Trajectory::from_frames(&denormalize_frames(&frames, &norm))?;
            if traj.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite forecast for {name}")));
            }
            write_trajectory(&traj, &out.join(&file))?;
            rec.files.push(file);
            rec.seeds.push(s);
            rec.nfe.push(counter.calls());
            rec.seconds.push(secs);
        }
        records.push(rec);
    }
    if records.is_empty() {
        return Err(Error::Data(format!("{} lists no test trajectories", manifest_path.display())));
    }
    let run = RunManifest {
        command: "rollout".into(),
        config: kv.to_text(),
        seed,
        start_unix: start,
        end_unix: unix_now(),
        rollout: Some(RolloutRecord {
            // Absolute, so `evaluate` does not depend on the caller's cwd.
            dataset: absolute(&manifest_path).display().to_string(),
            checkpoint: absolute(checkpoint).display().to_string(),
            context,
            block: rcfg.block(),
            horizon,
            ensemble,
            trajectories: records,
        }),
    };
    save_json(&run, &out.join(RUN_MANIFEST))?;
    Ok(run)
}

/// Reports written by `evaluate`: the model, then each requested baseline.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub model: MetricReport,
    pub persistence: Option<MetricReport>,
    pub climatology: Option<MetricReport>,
}

fn write_report(report: &MetricReport, out: &Path, stem: &str) -> Result<()> {
    write_atomic(&out.join(format!("{stem}.csv")), report.to_csv().as_bytes())?;
    write_atomic(&out.join(format!("{stem}.txt")), report.to_table().as_bytes())
}

pub fn cmd_evaluate(config: &Path, out: &Path) -> Result<Evaluation> {
    let kv = KvConfig::load(config)?;
    let forecasts = resolve(config, &kv.require::<String>("forecasts")?);
    let baselines = kv.get_or("baselines", false)?;
    kv.finish()?;
    let run = RunManifest::load(&forecasts.join(RUN_MANIFEST))?;
    let rec = run
        .rollout
        .ok_or_else(|| Error::Data(format!("{} is not a rollout manifest", forecasts.display())))?;
    let manifest_path = PathBuf::from(&rec.dataset);
    let manifest = load_manifest(&manifest_path)?;
    let dir = dataset_dir(&manifest_path);

    let mut names = Vec::new();
    let mut refs = Vec::new();
    let mut preds = Vec::new();
    let mut members = Vec::new();
    let mut observed = Vec::new();
    for t in &rec.trajectories {
        let full = read_trajectory(&dir.join(&t.reference))?;
        if full.frames() < rec.context + rec.horizon {
            return Err(Error::Data(format!("{} is shorter than context + horizon", t.reference)));
        }
        let frames = full.to_frames(0, rec.context, rec.horizon)?;
        refs.push(Trajectory::from_frames(&frames)?);
        observed.push(full.to_frames(0, 0, rec.context)?);
        let ens = t.files.iter().map(|f| read_trajectory(&forecasts.join(f))).collect::<Result<Vec<_>>>()?;
        preds.push(ens[0].clone());
        members.push(ens);
        names.push(t.name.clone());
    }
    let ensembles = (rec.ensemble > 1).then_some(members.as_slice());
    create_dir(out)?;
    let model = evaluate(&names, &preds, &refs, ensembles)?;
    write_report(&model, out, "metrics")?;
    let (mut pers, mut clim) = (None, None);
    if baselines {
        let p: Vec<Trajectory> = observed
            .iter()
            .map(|o| Trajectory::from_frames(&persistence(o, rec.horizon)?))
            .collect::<Result<_>>()?;
        let r = evaluate(&names, &p, &refs, None)?;
        write_report(&r, out, "persistence_metrics")?;
        pers = Some(r);
        let train = manifest.load_split(&dir, Split::Train)?;
        let c = Trajectory::from_frames(&climatology(&train, rec.horizon)?)?;
        let r = evaluate(&names, &vec![c; refs.len()], &refs, None)?;
        write_report(&r, out, "climatology_metrics")?;
        clim = Some(r);
    }
    Ok(Evaluation { model, persistence: pers, climatology: clim })
}

pub fn cmd_spectra(config: &Path, out: &Path) -> Result<()> {
    let kv = KvConfig::load(config)?;
    let files: Vec<String> = kv
        .get_list("files")?
        .ok_or_else(|| Error::Config(format!("{}: missing required key files", config.display())))?;
    let lags = kv.get_or("lags", MIXING_LAGS)?;
    kv.finish()?;
    create_dir(out)?;
    let mut spectra = String::from("file,k,power\n");
    let mut acf = String::from("file,lag,autocorrelation\n");
    for f in &files {
        let path = resolve(config, f);
        let traj = read_trajectory(&path)?;
        let name = traj_name(f);
        let (c, h, w) = (traj.channels(), traj.height(), traj.width());
        let k_r = metrics::default_kr(h, w);
        let mut mean = vec![0.0; k_r];
        let count = (traj.batch() * traj.frames()) as f64;
        for b in 0..traj.batch() {
            for t in 0..traj.frames() {
                let p = metrics::radial_spectrum(traj.frame(b, t), c, h, w)?.normalized(k_r);
                mean.iter_mut().zip(&p).for_each(|(m, v)| *m += v / count);
            }
        }
        for (k, p) in mean.iter().enumerate() {
            spectra.push_str(&format!("{name},{k},{p:e}\n"));
        }
        for (l, v) in metrics::autocorrelation(&traj, lags)?.iter().enumerate() {
            acf.push_str(&format!("{name},{l},{v:e}\n"));
        }
        let tke = metrics::tke_map(&traj);
        let mut grid = String::new();
        for row in tke.chunks(w) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            grid.push_str(&cells.join(","));
            grid.push('\n');
        }
        write_atomic(&out.join(format!("tke_{name}.csv")), grid.as_bytes())?;
    }
    write_atomic(&out.join("spectra.csv"), spectra.as_bytes())?;
    write_atomic(&out.join("autocorrelation.csv"), acf.as_bytes())
}
