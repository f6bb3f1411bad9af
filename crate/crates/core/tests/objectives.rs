mod common;

use common::*;
use melisa::backbone::{Denoiser, DenoiserNet, FrameMask};
use melisa::objectives::*;
use melisa::tensor::Tensor;

fn window(w: usize, size: usize, seed: u64) -> WindowSample {
    let mut r = rng(seed);
    let clean = randn(&[w, 1, size, size], &mut r);
    WindowSample::draw(clean, &TimeSampler::default(), 0.8, &mut r)
}

#[test]
fn interpolation_and_targets() {
    let x = Tensor::from_vec(vec![2.0, -1.0]);
    let e = Tensor::from_vec(vec![0.0, 3.0]);
    assert_eq!(interpolate(&x, &e, 0.0).unwrap(), x);
    assert_eq!(interpolate(&x, &e, 1.0).unwrap(), e);
    assert_eq!(interpolate(&Tensor::from_vec(vec![2.0]), &Tensor::from_vec(vec![0.0]), 0.5).unwrap().data(), &[1.0]);
    assert_eq!(velocity_target(&x, &x).unwrap().max_abs(), 0.0);
    assert_eq!(velocity_target(&Tensor::zeros(&[2]), &e).unwrap(), e);
    let v = velocity_target(&Tensor::from_vec(vec![1.0, 2.0]), &Tensor::from_vec(vec![3.0, 1.0])).unwrap();
    assert_eq!(v.data(), &[2.0, -1.0]);
}

#[test]
fn average_velocity() {
    let z = Tensor::from_vec(vec![2.0]);
    assert_eq!(avg_velocity(&z, &z, 0.5).unwrap().data(), &[0.0]);
    assert_eq!(avg_velocity(&z, &Tensor::from_vec(vec![1.0]), 0.5).unwrap().data(), &[2.0]);
    let (x, e) = (Tensor::from_vec(vec![0.3, -2.0]), Tensor::from_vec(vec![1.5, 0.25]));
    assert_eq!(avg_velocity(&e, &x, 1.0).unwrap(), velocity_target(&x, &e).unwrap());
    assert!(avg_velocity(&z, &z, 1e-4).is_err());
}

#[test]
fn sampler_equal_branch() {
    let s = TimeSampler { p_neq: 0.0, ..TimeSampler::default() };
    let mut r = rng(1);
    for _ in 0..1000 {
        let (t, rr) = s.sample(&mut r);
        assert_eq!(t, rr);
        assert!(t > 0.0 && t < 1.0);
    }
}

#[test]
fn sampler_statistics() {
    let s = TimeSampler::default();
    let mut r = rng(42);
    let n = 100_000;
    let mut equal = 0;
    let mut mean_t = 0.0;
    for _ in 0..n {
        let (t, rr) = s.sample(&mut r);
        assert!(0.0 < rr && rr <= t && t < 1.0);
        equal += usize::from(t == rr);
        mean_t += t;
    }
    assert!((equal as f64 / n as f64 - 0.5).abs() < 0.01);
    // Independent Monte Carlo of sigmoid(0.8 + 0.8 N) for the first draw: the
    // returned t is the max of two draws half of the time.
    let mut o = rng(7);
    let sig = |o: &mut rand_chacha::ChaCha8Rng| {
        let v = randn(&[1], o).item();
        1.0 / (1.0 + (-(0.8 + 0.8 * v)).exp())
    };
    let mut oracle = 0.0;
    for i in 0..n {
        let a = sig(&mut o);
        oracle += if i % 2 == 0 { a } else { a.max(sig(&mut o)) };
    }
    assert!((mean_t / n as f64 - oracle / n as f64).abs() < 0.01);
}

#[test]
fn mask_statistics() {
    let mut r = rng(3);
    assert_eq!(sample_mask(6, 1.0, &mut r), FrameMask::future(6, 1));
    assert_eq!(sample_mask(6, 0.0, &mut r), FrameMask::all_observed(6));
    let n = 100_000;
    let total: usize = (0..n).map(|_| sample_mask(6, 0.8, &mut r).observed_count()).sum();
    let mean = total as f64 / n as f64;
    let sigma = (5.0 * 0.8 * 0.2 / n as f64).sqrt();
    assert!((mean - 2.0).abs() < 3.0 * sigma, "mean observed {mean}");
}

#[test]
fn exact_denoiser_gives_zero_loss() {
    // All frames observed and D copying the clean block: u = (z - x)/t = v.
    let (w, size) = (3, 4);
    let cin = 3 * w;
    let mut m = vec![0.0; w * cin];
    for f in 0..w {
        m[f * cin + w + f] = 1.0;
    }
    let toy = LinearToy { params: vec![Tensor::new(vec![w, cin, 1, 1], m).unwrap(), Tensor::zeros(&[w, 2])] };
    let mut s = window(w, size, 5);
    s.mask = FrameMask::all_observed(w);
    s.r = s.t;
    assert!(winc_mf_loss(&toy, &s).unwrap() < 1e-28);
}

#[test]
fn equal_times_reduce_to_flow_matching() {
    let net = jittered_net(small_config(2, 16), 3, 0.05);
    for seed in 0..5 {
        let mut s = window(2, 16, seed);
        s.r = s.t;
        let a = winc_mf_loss(&net, &s).unwrap();
        let b = fm_loss(&net, &s).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn linear_toy_closed_form() {
    let mut r = rng(11);
    let toy = LinearToy::new(2, 6, &mut r);
    let (x, e) = ([0.7, -1.2], [0.4, 1.9]);
    let (t, rr) = (0.6, 0.25);
    let mask = FrameMask::new(vec![false, true]);
    let s = WindowSample {
        clean: Tensor::new(vec![2, 1, 1, 1], x.to_vec()).unwrap(),
        noise: Tensor::new(vec![2, 1, 1, 1], e.to_vec()).unwrap(),
        t,
        r: rr,
        mask,
    };
    // Hand evaluation: input = [z0, z1, x0, 0, 1, 0].
    let z = [(1.0 - t) * x[0] + t * e[0], (1.0 - t) * x[1] + t * e[1]];
    let v = [e[0] - x[0], e[1] - x[1]];
    let input = [z[0], z[1], x[0], 0.0, 1.0, 0.0];
    let mut loss = 0.0;
    for o in 0..2 {
        let d: f64 = (0..6).map(|i| toy.m(o, i) * input[i]).sum::<f64>() + toy.c(o, 0) * t + toy.c(o, 1) * rr;
        let u = (z[o] - d) / t;
        let dd = toy.m(o, 0) * v[0] + toy.m(o, 1) * v[1] + toy.c(o, 0);
        let du = (v[o] - dd) / t - (z[o] - d) / (t * t);
        let big_v = u + (t - rr) * du;
        loss += (big_v - v[o]).powi(2);
    }
    loss /= 2.0;
    assert!((winc_mf_loss(&toy, &s).unwrap() - loss).abs() < 1e-12);
}

#[test]
fn reconstruction_at_init_is_head_value() {
    let cfg = small_config(4, 16);
    let net = DenoiserNet::new(cfg, 9).unwrap();
    let s = window(4, 16, 2);
    let x_hat = reconstruct(&net, &s.clean, &s.mask, &s.noise).unwrap();
    assert_eq!(x_hat.shape(), s.clean.shape());
    // z at t = 1 is the noise; with a zero head D = 0 and z - 1·u = 0.
    let u = avg_velocity(&s.noise, &Tensor::zeros(s.noise.shape()), 1.0).unwrap();
    let head = s.noise.zip_map(&u, |z, u| z - u).unwrap();
    assert_eq!(x_hat, head);
    let again = reconstruct(&net, &s.clean, &s.mask, &s.noise).unwrap();
    assert_eq!(x_hat, again);
}

#[test]
fn increment_loss_examples() {
    let k = TicWeights::new(vec![1.0, 1.0]).unwrap();
    let x = Tensor::new(vec![3, 1, 1, 1], vec![0.0, 1.0, 3.0]).unwrap();
    let y = Tensor::new(vec![3, 1, 1, 1], vec![0.0, 2.0, 3.0]).unwrap();
    assert!((tic_loss(&x, &y, &k).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(tic_loss(&x, &x, &k).unwrap(), 0.0);
    assert!(tic_loss(&x, &y, &TicWeights::default()).is_err());
    assert!(TicWeights::new(vec![-1.0]).is_err());
}

#[test]
fn increment_loss_shift_invariance() {
    // Dyadic values keep every subtraction exact.
    let mut r = rng(4);
    let x = randn(&[6, 1, 8, 8], &mut r).map(|v| (v * 64.0).round() / 64.0);
    let y = randn(&[6, 1, 8, 8], &mut r).map(|v| (v * 64.0).round() / 64.0);
    let c = randn(&[1, 1, 8, 8], &mut r).map(|v| (v * 8.0).round() / 8.0);
    let mut shifted = y.clone();
    for (i, v) in shifted.data_mut().iter_mut().enumerate() {
        *v += c.data()[i % 64];
    }
    let k = TicWeights::default();
    assert_eq!(tic_loss(&x, &y, &k).unwrap(), tic_loss(&x, &shifted, &k).unwrap());
    let mut xs = x.clone();
    for (i, v) in xs.data_mut().iter_mut().enumerate() {
        *v += c.data()[i % 64];
    }
    assert_eq!(tic_loss(&x, &xs, &k).unwrap(), 0.0);
}

#[test]
fn combined_loss_is_sum() {
    let net = jittered_net(small_config(6, 16), 1, 0.05);
    let s = window(6, 16, 8);
    let k = TicWeights::default();
    let terms = melisa_loss(&net, &s, &k).unwrap();
    let w = winc_mf_loss(&net, &s).unwrap();
    let x_hat = reconstruct(&net, &s.clean, &s.mask, &s.noise).unwrap();
    let tic = tic_loss(&s.clean, &x_hat, &k).unwrap();
    assert!((terms.total - (w + tic)).abs() < 1e-15 * terms.total.max(1.0));
    let (taped, _) = loss_and_grad(&net, &s, &k, Objective::Melisa).unwrap();
    assert!((taped.total - terms.total).abs() < 1e-12 * terms.total);
    assert_eq!(taped.winc_mf, w);
}

#[test]
fn taped_jvp_matches_differences() {
    let net = jittered_net(small_config(2, 16), 21, 0.05);
    let mut s = window(2, 16, 6);
    s.t = 0.7;
    s.r = 0.2;
    let j = jvp_by_differences(&net, &s, 1e-4);
    // Recover the dual-number JVP from the loss: with everything else equal,
    // V is affine in the derivative term.
    let frozen = frozen_winc_loss(&net, &s, &j);
    let mixed = winc_mf_loss(&net, &s).unwrap();
    assert!(rel_err(frozen, mixed) < 1e-8, "{frozen} vs {mixed}");
}

#[test]
fn toy_gradient_matches_frozen_oracle() {
    let mut r = rng(13);
    let toy = LinearToy::new(3, 3 * 3, &mut r);
    let k = TicWeights::new(vec![0.5, 1.5]).unwrap();
    let mut s = window(3, 2, 12);
    s.t = 0.8;
    s.r = 0.3;
    let (_, g) = loss_and_grad(&toy, &s, &k, Objective::Melisa).unwrap();
    let j = jvp_by_differences(&toy, &s, 1e-3);
    for pi in 0..toy.params.len() {
        for e in 0..toy.params[pi].len() {
            let dir: Vec<Tensor> = toy
                .params
                .iter()
                .enumerate()
                .map(|(q, p)| {
                    let mut d = Tensor::zeros(p.shape());
                    if q == pi {
                        d.data_mut()[e] = 1.0;
                    }
                    d
                })
                .collect();
            let fd = directional_fd(&toy.params, &dir, 1e-3, |p| {
                let n = toy_with_params(p);
                frozen_winc_loss(&n, &s, &j) + plain_tic(&n, &s, &k)
            });
            let an = g[pi].data()[e];
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1e-3), "param {pi}[{e}]: {an} vs {fd}");
        }
    }
}

#[test]
fn stop_gradient_contract_on_backbone() {
    let net = jittered_net(small_config(2, 16), 2, 0.05);
    let k = TicWeights::new(vec![1.0]).unwrap();
    let mut s = window(2, 16, 4);
    s.t = 0.75;
    s.r = 0.3;
    let (_, g) = loss_and_grad(&net, &s, &k, Objective::WincMf).unwrap();
    let j = jvp_by_differences(&net, &s, 1e-4);
    let mut r = rng(99);
    let dir: Vec<Tensor> = net.params().iter().map(|p| randn(p.shape(), &mut r)).collect();
    let params = net.params().to_vec();
    let fd = directional_fd(&params, &dir, 1e-3, |p| frozen_winc_loss(&with_params(&net, p), &s, &j));
    let an = dot_all(&g, &dir);
    assert!(rel_err(an, fd) < 1e-6, "{an} vs {fd}");
}

#[test]
fn increment_statistics_match_covariance() {
    // Stationary AR(1) with unit marginal variance per entry.
    let (d, frames, a) = (16, 20_000, 0.7f64);
    let mut r = rng(31);
    let mut seq = Vec::with_capacity(d * frames);
    let mut x = randn(&[d], &mut r).into_data();
    for _ in 0..frames {
        seq.extend_from_slice(&x);
        let xi = randn(&[d], &mut r);
        for (v, n) in x.iter_mut().zip(xi.data()) {
            *v = a * *v + (1.0 - a * a).sqrt() * n;
        }
    }
    for lag in 1..5 {
        let inc = increment_energy(&seq, d, lag).unwrap();
        let g0 = lag_covariance_trace(&seq, d, 0).unwrap();
        let gw = lag_covariance_trace(&seq, d, lag).unwrap();
        let expect = 2.0 * d as f64 * (1.0 - a.powi(lag as i32));
        // Effective sample size is reduced by autocorrelation; 3σ with a
        // generous correlation factor.
        let sigma = expect * (2.0 * (1.0 + a) / (1.0 - a) / (frames as f64 * d as f64)).sqrt();
        assert!((inc - expect).abs() < 3.0 * sigma, "lag {lag}: {inc} vs {expect}");
        assert!((inc - 2.0 * (g0 - gw)).abs() < 3.0 * sigma, "lag {lag}: {inc} vs {}", 2.0 * (g0 - gw));
    }
}
