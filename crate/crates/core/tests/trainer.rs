mod common;

use common::{jittered_net, randn, rng, small_config};
use melisa::backbone::{Checkpoint, Denoiser, DenoiserNet};
use melisa::io::{KvConfig, Trajectory};
use melisa::objectives::{batch_loss_and_grad, melisa_loss, Objective, TicWeights, TimeSampler, WindowSample};
use melisa::tensor::Tensor;
use melisa::trainer::{
    clip_global_norm, lr_at, newton_schulz, sample_window, train, Adam, Muon, Normalization, Schedule, TrainConfig,
    ADAM_BETA1, ADAM_BETA2, ADAM_EPS, NORM_BLOB,
};
use proptest::prelude::*;
use rand::Rng;

/// Travelling plane waves on a `size²` grid, one per trajectory.
fn waves(n_traj: usize, frames: usize, size: usize, seed: u64) -> Vec<Trajectory> {
    let mut r = rng(seed);
    (0..n_traj)
        .map(|_| {
            let kx = r.random_range(1..3) as f64;
            let ky = r.random_range(0..3) as f64;
            let phase: f64 = r.random_range(0.0..6.3);
            let speed = 0.3;
            let two_pi = std::f64::consts::TAU;
            let mut data = Vec::with_capacity(frames * size * size);
            for f in 0..frames {
                for y in 0..size {
                    for x in 0..size {
                        let arg = two_pi * (kx * x as f64 + ky * y as f64) / size as f64 - speed * f as f64 + phase;
                        data.push(arg.sin());
                    }
                }
            }
            Trajectory::single(frames, size, size, data).unwrap()
        })
        .collect()
}

fn ramp_trajectory(frames: usize) -> Trajectory {
    Trajectory::single(frames, 2, 2, (0..frames * 4).map(|v| v as f64).collect()).unwrap()
}

#[test]
fn window_equal_to_length_starts_at_zero() {
    let data = vec![ramp_trajectory(6)];
    let mut r = rng(1);
    for _ in 0..20 {
        let (idx, start, w) = sample_window(&data, 6, &mut r).unwrap();
        assert_eq!((idx, start), (0, 0));
        assert_eq!(w.data(), data[0].data());
    }
    assert!(sample_window(&data, 7, &mut r).is_err());
}

#[test]
fn window_is_an_exact_slice() {
    let data = vec![ramp_trajectory(10), ramp_trajectory(8)];
    let mut r = rng(2);
    for _ in 0..50 {
        let (idx, start, w) = sample_window(&data, 3, &mut r).unwrap();
        assert_eq!(w.shape(), &[3, 1, 2, 2]);
        assert_eq!(w.data(), &data[idx].data()[start * 4..(start + 3) * 4]);
    }
}

#[test]
fn window_starts_are_uniform() {
    // 8 + 6 = 14 equally likely (trajectory, start) cells.
    let data = vec![ramp_trajectory(10), ramp_trajectory(8)];
    let mut r = rng(3);
    let n = 100_000;
    let mut counts = [0usize; 14];
    for _ in 0..n {
        let (idx, start, _) = sample_window(&data, 3, &mut r).unwrap();
        counts[if idx == 0 { start } else { 8 + start }] += 1;
    }
    let expected = n as f64 / 14.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 13 degrees of freedom; the 0.999 quantile is 34.5.
    assert!(chi2 < 34.5, "chi2 {chi2}");
}

#[test]
fn adam_first_step_by_hand() {
    let mut p = vec![Tensor::from_vec(vec![0.5, -1.0, 2.0])];
    let g = vec![Tensor::from_vec(vec![0.3, -4.0, 1e-3])];
    let mut opt = Adam::new(&p);
    let lr = 0.01;
    opt.step(&mut p, &g, lr).unwrap();
    assert_eq!(opt.step_count(), 1);
    for (i, (&p0, &gi)) in [0.5, -1.0, 2.0].iter().zip(g[0].data()).enumerate() {
        let m = (1.0 - ADAM_BETA1) * gi;
        let v = (1.0 - ADAM_BETA2) * gi * gi;
        let mh = m / (1.0 - ADAM_BETA1);
        let vh = v / (1.0 - ADAM_BETA2);
        let want = p0 - lr * mh / (vh.sqrt() + ADAM_EPS);
        assert!((p[0].data()[i] - want).abs() < 1e-15);
        // First step moves by almost exactly lr against the gradient sign.
        assert!(((p0 - p[0].data()[i]) - lr * gi.signum()).abs() < 1e-6);
    }
}

#[test]
fn adam_two_steps_by_hand_and_zero_gradient() {
    let mut p = vec![Tensor::from_vec(vec![1.0])];
    let mut opt = Adam::new(&p);
    let (g1, g2, lr) = (0.2, -0.5, 0.1);
    opt.step(&mut p, &[Tensor::from_vec(vec![g1])], lr).unwrap();
    opt.step(&mut p, &[Tensor::from_vec(vec![g2])], lr).unwrap();
    let (b1, b2) = (ADAM_BETA1, ADAM_BETA2);
    let mut x = 1.0;
    let (mut m, mut v) = (0.0, 0.0);
    for (k, g) in [(1, g1), (2, g2)] {
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        x -= lr * (m / (1.0 - b1.powi(k))) / ((v / (1.0 - b2.powi(k))).sqrt() + ADAM_EPS);
    }
    assert!((p[0].data()[0] - x).abs() < 1e-15);

    let (m_before, v_before) = (opt.moments(0).0.data()[0], opt.moments(0).1.data()[0]);
    let before = p[0].data()[0];
    let mut fresh = vec![Tensor::from_vec(vec![before])];
    let mut zero_opt = Adam::new(&fresh);
    zero_opt.step(&mut fresh, &[Tensor::zeros(&[1])], lr).unwrap();
    assert_eq!(fresh[0].data()[0], before);
    opt.step(&mut p, &[Tensor::zeros(&[1])], lr).unwrap();
    assert_eq!(opt.moments(0).0.data()[0], b1 * m_before);
    assert_eq!(opt.moments(0).1.data()[0], b2 * v_before);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adam_update_is_bounded_by_lr(g in proptest::collection::vec(-1e3f64..1e3, 1..20), steps in 1usize..6, lr in 1e-4f64..1.0) {
        let mut p = vec![Tensor::zeros(&[g.len()])];
        let mut opt = Adam::new(&p);
        let grad = vec![Tensor::from_vec(g.clone())];
        for _ in 0..steps {
            let before = p[0].clone();
            opt.step(&mut p, &grad, lr).unwrap();
            let delta = p[0].zip_map(&before, |a, b| a - b).unwrap().max_abs();
            prop_assert!(delta <= lr * (1.0 + 1e-9));
        }
    }

    #[test]
    fn clipping_caps_the_global_norm(v in proptest::collection::vec(-10f64..10.0, 1..30), max in 0.1f64..5.0) {
        let mut g = vec![Tensor::from_vec(v.clone())];
        let before = clip_global_norm(&mut g, max);
        let after = g[0].norm_sq().sqrt();
        prop_assert!(after <= max * (1.0 + 1e-12));
        if before <= max {
            prop_assert_eq!(g[0].data(), v.as_slice());
        }
    }
}

#[test]
fn schedule_endpoints() {
    let eta = 3e-3;
    for s in [Schedule::Constant, Schedule::Linear, Schedule::Cosine] {
        assert_eq!(lr_at(s, eta, 0, 100), eta);
    }
    assert_eq!(lr_at(Schedule::Linear, eta, 100, 100), 0.0);
    assert!(lr_at(Schedule::Cosine, eta, 100, 100).abs() < 1e-18);
    assert!((lr_at(Schedule::Cosine, eta, 50, 100) - eta / 2.0).abs() < 1e-18);
    assert!((lr_at(Schedule::Linear, eta, 25, 100) - 0.75 * eta).abs() < 1e-18);
    assert_eq!(lr_at(Schedule::Constant, eta, 100, 100), eta);
}

fn gram_defect(o: &[f64], rows: usize, cols: usize) -> f64 {
    // ‖OᵀO − I‖_F / ‖I‖_F for a tall or square matrix, OOᵀ for a wide one.
    let k = rows.min(cols);
    let mut acc = 0.0;
    for a in 0..k {
        for b in 0..k {
            let dot: f64 = if rows >= cols {
                (0..rows).map(|i| o[i * cols + a] * o[i * cols + b]).sum()
            } else {
                (0..cols).map(|j| o[a * cols + j] * o[b * cols + j]).sum()
            };
            let id = if a == b { 1.0 } else { 0.0 };
            acc += (dot - id).powi(2);
        }
    }
    acc.sqrt() / (k as f64).sqrt()
}

#[test]
fn newton_schulz_fixed_point() {
    // A rotation composed with a reflection.
    let (c, s) = (0.6f64, 0.8f64);
    let q = vec![c, -s, 0.0, s, c, 0.0, 0.0, 0.0, -1.0];
    let out = newton_schulz(&q, 3, 3);
    for (a, b) in out.iter().zip(&q) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn newton_schulz_orthogonalizes_well_conditioned_matrices() {
    let mut r = rng(4);
    for &(rows, cols) in &[(6, 6), (8, 5), (4, 9), (16, 16)] {
        // I + small noise keeps the condition number modest.
        let mut g = randn(&[rows, cols], &mut r).map(|v| 0.2 * v).into_data();
        for i in 0..rows.min(cols) {
            g[i * cols + i] += 1.0;
        }
        let o = newton_schulz(&g, rows, cols);
        let d = gram_defect(&o, rows, cols);
        assert!(d < 0.05, "{rows}x{cols}: {d}");
    }
}

#[test]
fn muon_zero_gradient_is_a_no_op() {
    let p0 = vec![randn(&[4, 3], &mut rng(5)), Tensor::from_vec(vec![0.1, 0.2])];
    let mut p = p0.clone();
    let mut opt = Muon::new(&p);
    opt.step(&mut p, &[Tensor::zeros(&[4, 3]), Tensor::zeros(&[2])], 0.1).unwrap();
    assert_eq!(p, p0);
    let g = vec![randn(&[4, 3], &mut rng(6)), Tensor::from_vec(vec![1.0, -1.0])];
    opt.step(&mut p, &g, 0.1).unwrap();
    assert_ne!(p[0], p0[0]);
    // Non-matrix parameters take the Adam route: they move against the
    // gradient sign by at most the learning rate.
    assert!(p[1].data()[0] < 0.1 && p[1].data()[0] >= 0.0);
    assert!(p[1].data()[1] > 0.2 && p[1].data()[1] <= 0.3);
}

#[test]
fn one_small_step_lowers_the_loss_on_its_own_draw() {
    let net = jittered_net(small_config(4, 16), 7, 0.05);
    let kappa = TicWeights::new(vec![1.0; 3]).unwrap();
    let mut r = rng(8);
    let clean = randn(&[4, 1, 16, 16], &mut r);
    let sampler = TimeSampler { p_neq: 1.0, ..TimeSampler::default() };
    let sample = WindowSample::draw(clean, &sampler, 0.5, &mut r);
    let batch = vec![sample.clone()];
    let (terms, mut grads) = batch_loss_and_grad(&net, &batch, &kappa, Objective::Melisa).unwrap();
    clip_global_norm(&mut grads, 1.0);
    let mut params = net.params().to_vec();
    Adam::new(&params).step(&mut params, &grads, 1e-5).unwrap();
    let mut updated = net.clone();
    for (p, q) in updated.params_mut().iter_mut().zip(params) {
        *p = q;
    }
    let after = melisa_loss(&updated, &sample, &kappa).unwrap().total;
    let before = melisa_loss(&net, &sample, &kappa).unwrap().total;
    assert!((before - terms.total).abs() < 1e-12 * before.max(1.0));
    assert!(after < before, "{after} >= {before}");
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        depth: 1,
        width: 4,
        embed_dim: 8,
        window: 3,
        batch_size: 1,
        steps: 6,
        checkpoint_interval: 3,
        tic_weights: TicWeights::new(vec![1.0, 1.0]).unwrap(),
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_a_function_of_data_and_seed() {
    let data = waves(2, 8, 8, 9);
    let cfg = tiny_config();
    let a = train(&data, &cfg, |_, _| Ok(())).unwrap();
    let b = train(&data, &cfg, |_, _| Ok(())).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), cfg.steps);
    assert_eq!(a.log.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=6).collect::<Vec<_>>());
    for r in &a.log {
        assert!((r.total - (r.winc_mf + r.tic)).abs() < 1e-12 * r.total.max(1.0));
    }

    let other = train(&data, &TrainConfig { seed: 43, ..cfg.clone() }, |_, _| Ok(())).unwrap();
    assert_ne!(a.checkpoint.to_bytes(), other.checkpoint.to_bytes());

    let norm = Normalization::fit(&data).unwrap();
    assert_eq!(a.checkpoint.extra(NORM_BLOB).unwrap(), &[norm.mean, norm.std]);
}

#[test]
fn checkpoint_bytes_round_trip() {
    let data = waves(1, 6, 8, 10);
    let out = train(&data, &tiny_config(), |_, _| Ok(())).unwrap();
    let bytes = out.checkpoint.to_bytes();
    assert_eq!(&bytes[..4], b"MLSA");
    let back = Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.to_bytes(), bytes);
    let truncated = &bytes[..bytes.len() - 3];
    assert!(Checkpoint::from_bytes(truncated, std::path::Path::new("mem")).is_err());
}

#[test]
fn config_from_kv_and_validation() {
    let kv = KvConfig::parse("window = 4\nsteps = 12\nlr = 0.002\nschedule = linear\noptimizer = muon\n", "t").unwrap();
    let cfg = TrainConfig::from_kv(&kv).unwrap();
    kv.finish().unwrap();
    assert_eq!((cfg.window, cfg.steps, cfg.lr, cfg.schedule), (4, 12, 0.002, Schedule::Linear));
    assert_eq!(cfg.tic_weights.as_slice(), &[1.0, 1.0, 1.0]);
    assert_eq!(TrainConfig::default().tic_weights.as_slice(), &[0.4, 0.5, 0.8, 1.1, 1.2]);

    for bad in ["window = 1", "lr = 0", "lr = -1", "mask_rate = 1.5", "schedule = step", "window = 4\ntic_weights = 1, 1"] {
        let kv = KvConfig::parse(bad, "t").unwrap();
        assert!(TrainConfig::from_kv(&kv).is_err(), "{bad}");
    }
    let kv = KvConfig::parse("steps = 3\nbogus = 1\n", "t").unwrap();
    TrainConfig::from_kv(&kv).unwrap();
    assert!(kv.finish().is_err());
}

#[test]
fn non_finite_data_is_rejected() {
    let data = waves(1, 6, 8, 11);
    let mut raw = data[0].data().to_vec();
    raw[5] = f64::NAN;
    let bad = vec![Trajectory::single(6, 8, 8, raw).unwrap()];
    let err = train(&bad, &tiny_config(), |_, _| Ok(()));
    assert!(err.is_err());
}

#[test]
fn toy_run_halves_the_loss() {
    // W = 6 on 32² plane waves for 2000 steps, scored on a fixed held-out set
    // of draws after step 10 and after the last step.
    let data = waves(4, 24, 32, 12);
    let cfg = TrainConfig {
        depth: 2,
        width: 8,
        embed_dim: 16,
        batch_size: 1,
        steps: 2000,
        lr: 2e-3,
        checkpoint_interval: 0,
        ..TrainConfig::default()
    };
    let norm = Normalization::fit(&data).unwrap();
    let normalized: Vec<Trajectory> = data
        .iter()
        .map(|t| Trajectory::new(t.shape(), t.data().iter().map(|&v| norm.apply(v)).collect()).unwrap())
        .collect();
    let mut r = rng(13);
    let held: Vec<WindowSample> = (0..8)
        .map(|_| {
            let (_, _, w) = sample_window(&normalized, 6, &mut r).unwrap();
            WindowSample::draw(w, &cfg.sampler, cfg.mask_rate, &mut r)
        })
        .collect();
    let score = |net: &DenoiserNet| -> f64 {
        held.iter().map(|s| melisa_loss(net, s, &cfg.tic_weights).unwrap().total).sum::<f64>() / held.len() as f64
    };
    let mut at_10 = None;
    let out = train(&data, &cfg, |rec, net| {
        if rec.step == 10 {
            at_10 = Some(score(net));
        }
        Ok(())
    })
    .unwrap();
    let start = at_10.unwrap();
    let end = score(&out.checkpoint.net);
    eprintln!("toy run: held-out loss {start:.4e} at step 10, {end:.4e} at step 2000");
    assert!(end < 0.5 * start, "{end} vs {start}");
}
