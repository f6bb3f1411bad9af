mod common;

use std::process::Command;

use common::pipeline::{snapshot, Layout, CONTEXT, FRAMES, STEPS, WINDOW};
use melisa::cli::{cmd_rollout, cmd_spectra, cmd_train, RunManifest, RUN_MANIFEST, TRAIN_LOG};
use melisa::io::{read_trajectory, write_trajectory, KvConfig, Trajectory};
use melisa::metrics::default_kr;
use melisa::solver::{DatasetManifest, Split, MANIFEST_NAME};
use melisa::Error;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_melisa"))
}

#[test]
fn generate_is_reproducible_and_honors_the_split() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (la, lb) = (Layout::new(a.path()), Layout::new(b.path()));
    la.generate();
    lb.generate();
    let ma = DatasetManifest::load(&la.data().join(MANIFEST_NAME)).unwrap();
    assert_eq!(ma.entries.len(), 4);
    let splits: Vec<Split> = ma.entries.iter().map(|e| e.split).collect();
    assert_eq!(splits, vec![Split::Train, Split::Train, Split::Val, Split::Test]);
    for e in &ma.entries {
        let pa = std::fs::read(la.data().join(&e.file)).unwrap();
        let pb = std::fs::read(lb.data().join(&e.file)).unwrap();
        let crc = |p: &[u8]| u32::from_le_bytes(p[p.len() - 4..].try_into().unwrap());
        assert_eq!(crc(&pa), crc(&pb), "{}", e.file);
        assert_eq!(pa, pb);
        let t = read_trajectory(&la.data().join(&e.file)).unwrap();
        assert_eq!(t.shape(), [1, FRAMES, 1, 16, 16]);
    }
}

#[test]
fn desk_generate_config_describes_eight_long_trajectories() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk/generate.cfg");
    let kv = KvConfig::load(&path).unwrap();
    assert_eq!(kv.require::<usize>("n_traj").unwrap(), 8);
    assert_eq!(kv.require::<usize>("n_frames").unwrap(), 320);
    assert_eq!(kv.require::<usize>("n").unwrap(), 64);
}

#[test]
fn train_without_dataset_names_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let l = Layout::new(dir.path());
    let err = cmd_train(&l.cfg("train.cfg"), &l.train()).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
    let expected = l.cfg_dir().join("../data/manifest.json");
    assert!(err.to_string().contains(&expected.display().to_string()), "{err}");

    let out = bin()
        .args(["train", "--config"])
        .arg(l.cfg("train.cfg"))
        .arg("--out")
        .arg(l.train())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.json"));
}

#[test]
fn restart_flag_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let l = Layout::new(dir.path());
    let out = bin()
        .args(["train", "--restart", "--config"])
        .arg(l.cfg("train.cfg"))
        .arg("--out")
        .arg(l.train())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--restart is not supported"));
    assert!(!l.train().exists());
}

#[test]
fn unknown_config_keys_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let l = Layout::new(dir.path());
    std::fs::write(l.cfg("odd.cfg"), "n = 16\nwarp_speed = 9\n").unwrap();
    let out = bin().args(["generate", "--config"]).arg(l.cfg("odd.cfg")).arg("--out").arg(l.data()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp_speed"));
}

#[test]
fn full_pipeline_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let l = Layout::new(dir.path());
    l.generate();
    l.train_model();

    let log = std::fs::read_to_string(l.train().join(TRAIN_LOG)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,winc_mf,tic,total,lr");
    assert_eq!(lines.len() - 1, STEPS);
    assert!(l.train().join("model_step000002.ckpt").exists());
    assert!(l.checkpoint().exists());

    // Single member: one file per test trajectory and NFE = ceil(horizon / block).
    let run = l.roll(3);
    let rec = run.rollout.as_ref().unwrap();
    let horizon = FRAMES - CONTEXT;
    let block = WINDOW - CONTEXT;
    assert_eq!((rec.horizon, rec.block, rec.ensemble), (horizon, block, 3));
    assert_eq!(rec.trajectories.len(), 1);
    let t = &rec.trajectories[0];
    assert_eq!(t.seeds, vec![42, 52, 62]);
    assert_eq!(t.nfe, vec![horizon.div_ceil(block); 3]);
    assert_eq!(t.files.len(), 3);
    for f in &t.files {
        let tr = read_trajectory(&l.rollout().join(f)).unwrap();
        assert_eq!(tr.frames(), horizon);
    }
    let on_disk = RunManifest::load(&l.rollout().join(RUN_MANIFEST)).unwrap();
    assert_eq!(on_disk, run);

    let eval = l.evaluate();
    assert!(eval.model.rows[0].crps.is_some());
    assert!(eval.persistence.is_some() && eval.climatology.is_some());
    for stem in ["metrics", "persistence_metrics", "climatology_metrics"] {
        assert!(l.eval().join(format!("{stem}.csv")).exists());
        assert!(l.eval().join(format!("{stem}.txt")).exists());
    }
    let header = std::fs::read_to_string(l.eval().join("metrics.csv")).unwrap();
    assert!(header.lines().any(|line| line == "trajectory,rl2,ssim,psdd,tked,mrd,crps"));

    // A single-member rollout has no CRPS.
    std::fs::remove_dir_all(l.rollout()).unwrap();
    l.roll(1);
    let eval = l.evaluate();
    assert!(eval.model.rows.iter().all(|r| r.crps.is_none()));
    let csv = std::fs::read_to_string(l.eval().join("metrics.csv")).unwrap();
    let row = csv.lines().find(|r| r.starts_with("traj_")).unwrap();
    assert!(row.ends_with(",NA"), "{row}");
}

#[test]
fn nfe_for_the_long_desk_horizon() {
    // 318 frames with block 4 (W = 6, two context frames) take 80 calls.
    let dir = tempfile::tempdir().unwrap();
    let l = Layout::new(dir.path());
    l.generate();
    std::fs::write(
        l.cfg("train6.cfg"),
        "dataset = ../data/manifest.json\ndepth = 1\nwidth = 4\nembed_dim = 8\nwindow = 6\nsteps = 1\nbatch_size = 1\ncheckpoint_interval = 0\n",
    )
    .unwrap();
    cmd_train(&l.cfg("train6.cfg"), &l.train()).unwrap();
    let run = cmd_rollout(&l.cfg("rollout.cfg"), &l.checkpoint(), Some(318), 1, 42, &l.rollout()).unwrap();
    let rec = run.rollout.unwrap();
    assert_eq!(rec.block, 4);
    assert_eq!(rec.trajectories[0].nfe, vec![80]);
    let f = read_trajectory(&l.rollout().join(&rec.trajectories[0].files[0])).unwrap();
    assert_eq!(f.frames(), 318);
}

#[test]
fn forecasts_align_with_frames_after_the_context() {
    let dir = tempfile::tempdir().unwrap();
    let l = Layout::new(dir.path());
    l.generate();
    l.train_model();
    let run = l.roll(1);
    let rec = run.rollout.unwrap();
    // Replace the forecast by the reference frames it should align with.
    for t in &rec.trajectories {
        let full = read_trajectory(&l.data().join(&t.reference)).unwrap();
        let truth = Trajectory::from_frames(&full.to_frames(0, CONTEXT, FRAMES - CONTEXT).unwrap()).unwrap();
        write_trajectory(&truth, &l.rollout().join(&t.files[0])).unwrap();
    }
    let eval = l.evaluate();
    for r in &eval.model.rows {
        assert!(r.rl2.abs() < 1e-10);
        assert!((r.ssim - 1.0).abs() < 1e-10);
        assert!(r.psdd.abs() < 1e-10);
        assert!(r.tked.abs() < 1e-10);
        assert!(r.mrd.abs() < 1e-10);
    }
}

#[test]
fn spectra_outputs_have_expected_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let l = Layout::new(dir.path());
    l.generate();
    let files = ["../data/traj_000.mltr", "../data/traj_003.mltr"];
    std::fs::write(l.cfg("spectra.cfg"), format!("files = {}\nlags = 5\n", files.join(", "))).unwrap();
    let out = dir.path().join("spectra");
    cmd_spectra(&l.cfg("spectra.cfg"), &out).unwrap();

    let k_r = default_kr(16, 16);
    let spectra = std::fs::read_to_string(out.join("spectra.csv")).unwrap();
    for name in ["traj_000", "traj_003"] {
        let rows = spectra.lines().filter(|r| r.starts_with(&format!("{name},"))).count();
        assert_eq!(rows, k_r);
        let tke = std::fs::read_to_string(out.join(format!("tke_{name}.csv"))).unwrap();
        let lines: Vec<&str> = tke.lines().collect();
        assert_eq!(lines.len(), 16);
        assert!(lines.iter().all(|r| r.split(',').count() == 16));
    }
    let acf = std::fs::read_to_string(out.join("autocorrelation.csv")).unwrap();
    let first: Vec<&str> = acf.lines().filter(|r| r.starts_with("traj_000,")).collect();
    assert_eq!(first.len(), 6);
    let v: f64 = first[0].split(',').nth(2).unwrap().parse().unwrap();
    assert!((v - 1.0).abs() < 1e-12);
}

#[test]
fn pipeline_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let l = Layout::new(dir.path());
    let strip = |snap: Vec<(std::path::PathBuf, Vec<u8>)>| {
        snap.into_iter().filter(|(p, _)| !p.ends_with(RUN_MANIFEST)).collect::<Vec<_>>()
    };
    l.run_all(2);
    let first = strip(snapshot(dir.path()));
    let roll_first = RunManifest::load(&l.rollout().join(RUN_MANIFEST)).unwrap();
    for d in [l.data(), l.train(), l.rollout(), l.eval()] {
        std::fs::remove_dir_all(d).unwrap();
    }
    l.run_all(2);
    let second = strip(snapshot(dir.path()));
    assert_eq!(first.len(), second.len());
    for ((pa, a), (pb, b)) in first.iter().zip(&second) {
        assert_eq!(pa, pb);
        assert!(a == b, "{} differs", pa.display());
    }
    let roll_second = RunManifest::load(&l.rollout().join(RUN_MANIFEST)).unwrap();
    let (ra, rb) = (roll_first.rollout.unwrap(), roll_second.rollout.unwrap());
    assert_eq!(roll_first.config, roll_second.config);
    for (a, b) in ra.trajectories.iter().zip(&rb.trajectories) {
        assert_eq!((&a.files, &a.seeds, &a.nfe), (&b.files, &b.seeds, &b.nfe));
    }
}
