//! A miniature generate → train → rollout → evaluate run in a scratch
//! directory, small enough for the test suite.

use std::path::{Path, PathBuf};

use melisa::cli::{cmd_evaluate, cmd_generate, cmd_rollout, cmd_train, Evaluation, RunManifest, CHECKPOINT_FILE};

pub const FRAMES: usize = 12;
pub const CONTEXT: usize = 2;
pub const WINDOW: usize = 3;
pub const STEPS: usize = 4;

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        let l = Self { root: root.to_path_buf() };
        std::fs::create_dir_all(l.cfg_dir()).unwrap();
        l.write("generate.cfg", &format!(
            "n = 16\nnu = 0.05\nforcing_wavenumber = 2\nforcing_amplitude = 1.0\ndt = 0.01\nsave_every = 5\n\
             n_traj = 4\nn_frames = {FRAMES}\nburn_in = 50\nseed = 7\n"
        ));
        l.write("train.cfg", &format!(
            "dataset = ../data/manifest.json\ndepth = 1\nwidth = 4\nembed_dim = 8\nwindow = {WINDOW}\n\
             batch_size = 1\nsteps = {STEPS}\ncheckpoint_interval = 2\nseed = 42\n"
        ));
        l.write("rollout.cfg", &format!("dataset = ../data/manifest.json\ncontext = {CONTEXT}\n"));
        l.write("evaluate.cfg", "forecasts = ../rollout\nbaselines = true\n");
        l
    }

    fn write(&self, name: &str, text: &str) {
        std::fs::write(self.cfg_dir().join(name), text).unwrap();
    }

    pub fn cfg_dir(&self) -> PathBuf {
        self.root.join("configs")
    }

    pub fn cfg(&self, name: &str) -> PathBuf {
        self.cfg_dir().join(name)
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn train(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn rollout(&self) -> PathBuf {
        self.root.join("rollout")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.train().join(CHECKPOINT_FILE)
    }

    pub fn generate(&self) {
        cmd_generate(&self.cfg("generate.cfg"), &self.data()).unwrap();
    }

    pub fn train_model(&self) {
        cmd_train(&self.cfg("train.cfg"), &self.train()).unwrap();
    }

    pub fn roll(&self, ensemble: usize) -> RunManifest {
        cmd_rollout(&self.cfg("rollout.cfg"), &self.checkpoint(), None, ensemble, 42, &self.rollout()).unwrap()
    }

    pub fn evaluate(&self) -> Evaluation {
        cmd_evaluate(&self.cfg("evaluate.cfg"), &self.eval()).unwrap()
    }

    pub fn run_all(&self, ensemble: usize) -> Evaluation {
        self.generate();
        self.train_model();
        self.roll(ensemble);
        self.evaluate()
    }
}

/// Every regular file under `dir` with its bytes, sorted by relative path.
pub fn snapshot(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}
