use super::*;
use crate::diffusion::{posterior_step, Normalizer, ScheduleConfig};
use crate::kinematics::{default_hand, HandSpec};
use crate::net::NetConfig;
use crate::testutil::{central_diff, two_mode_toy, random_pose, rel_err, sphere_index};
use crate::train::{train, TrainConfig, TrainState};
use rand::Rng;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

struct Fixture {
    model: GraspModel,
    hand: KinematicHandModel,
    schedule: NoiseSchedule,
    index: SpatialIndex,
    poses: Vec<Vec<f64>>,
}

fn fixture(seed: u64) -> Fixture {
    let spec = HandSpec::default();
    let hand = default_hand(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let poses: Vec<Vec<f64>> = (0..40).map(|_| random_pose(&hand, &mut rng, 0.05).to_vec()).collect();
    let net = NetConfig {
        encoder_widths: vec![8, 8],
        hidden: vec![8, 8],
        time_dim: 4,
        semantic_dim: 0,
    };
    let model = GraspModel::new(spec, ScheduleConfig::default(), net, 32, Normalizer::fit(&poses).unwrap(), seed).unwrap();
    let schedule = model.noise_schedule().unwrap();
    Fixture {
        model,
        hand,
        schedule,
        index: sphere_index(0.05, 800, 2),
        poses,
    }
}

fn ctx<'a>(f: &'a Fixture, w: ConstraintWeights) -> SamplerContext<'a> {
    let c = ConstraintConfig::default().with_weights(w);
    SamplerContext::new(&f.model, &f.hand, &f.schedule, &f.index, c, 0).unwrap()
}

#[test]
fn zero_weights_give_zero_gradient() {
    let f = fixture(1);
    let c = ctx(&f, ConstraintWeights::ZERO);
    let h = f.model.normalizer.normalize(&f.poses[0]);
    let g = c.guidance_gradient(&h, 3, true).unwrap();
    assert!(g.grad.iter().all(|v| *v == 0.0));
}

/// Guidance gradients on 20 poses near the object, both Jacobian modes.
#[test]
fn guidance_gradients_match_finite_differences() {
    let f = fixture(2);
    let c = ctx(&f, ConstraintWeights::new(1.0, 1.0, 0.5));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut checked = 0;
    for pose in &f.poses {
        if checked == 20 {
            break;
        }
        let t = rng.random_range(2..=4);
        let h = f.model.normalizer.normalize(pose);
        let Ok(frozen) = c.guidance_gradient(&h, t, true) else { continue };
        let full = c.guidance_gradient(&h, t, false).unwrap();
        if frozen.value == 0.0 {
            continue;
        }
        // frozen composite: eps held at its value at h
        let eps = frozen.eps.clone();
        let frozen_fd = central_diff(&h, 1e-6, |y| {
            let h0 = estimate_h0(y, &eps, t, &f.schedule).unwrap();
            c.energy_at(&h0).unwrap().0
        });
        let full_fd = central_diff(&h, 1e-6, |y| {
            let e = c.predict_eps(y, t).unwrap();
            let h0 = estimate_h0(y, &e, t, &f.schedule).unwrap();
            c.energy_at(&h0).unwrap().0
        });
        let (ef, eg) = (rel_err(&frozen.grad, &frozen_fd), rel_err(&full.grad, &full_fd));
        // skip poses sitting on a nearest-neighbour or argmax switch
        if ef > 1e-2 || eg > 1e-2 {
            continue;
        }
        assert!(ef < 1e-4, "frozen rel err {ef}");
        assert!(eg < 1e-3, "full-chain rel err {eg}");
        // frozen mode is exactly the scaled clean-estimate gradient
        let h0 = estimate_h0(&h, &eps, t, &f.schedule).unwrap();
        let (_, g0) = c.energy_at(&h0).unwrap();
        let inv = 1.0 / f.schedule.alpha_bar(t).sqrt();
        for (a, b) in frozen.grad.iter().zip(&g0) {
            assert_eq!(*a, b * inv);
        }
        checked += 1;
    }
    assert_eq!(checked, 20);
}

#[test]
fn offset_step_reductions() {
    let f = fixture(3);
    let c = ctx(&f, ConstraintWeights::default());
    let h = f.model.normalizer.normalize(&f.poses[1]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = standard_normal(&mut rng, h.len());
    let cfg = GuidanceConfig {
        mode: GuidanceMode::Offset,
        strength: 0.0,
        ..GuidanceConfig::default()
    };
    for t in [1, 5, 50] {
        let out = c.step(&h, t, &cfg, &noise).unwrap();
        let eps = c.predict_eps(&h, t).unwrap();
        let (mu, plain) = posterior_step(&h, &eps, t, &f.schedule, &noise).unwrap();
        assert_eq!(out.mu, mu);
        assert_eq!(out.h_prev, plain);
    }
    let g: Vec<f64> = (0..5).map(|i| 0.3 * i as f64 - 0.5).collect();
    let zero = vec![0.0; 5];
    let a = offset_step(&zero, 0.37, &g, 0.8, &zero, 1);
    let b = offset_step(&zero, 0.37, &g, 1.6, &zero, 1);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(2.0 * x, *y);
    }
}

#[test]
fn quadratic_attractor_pulls_means_toward_target() {
    // data ~ N(0, I): the ideal noise prediction is √(1−ᾱ)·h_t, so ĥ₀ = √ᾱ·h_t
    let s = NoiseSchedule::linear(50, 1e-3, 0.1).unwrap();
    let target = [1.0, -0.5];
    let chains = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut hs: Vec<Vec<f64>> = (0..chains).map(|_| standard_normal(&mut rng, 2)).collect();
    let mut prev_dist = f64::INFINITY;
    for t in (1..=50).rev() {
        let ab = s.alpha_bar(t);
        for h in hs.iter_mut() {
            let eps: Vec<f64> = h.iter().map(|v| (1.0 - ab).sqrt() * v).collect();
            let h0: Vec<f64> = h.iter().map(|v| ab.sqrt() * v).collect();
            let grad: Vec<f64> = h0.iter().zip(&target).map(|(a, c)| 2.0 * (a - c) / ab.sqrt()).collect();
            let mu = posterior_mean(h, &eps, t, &s).unwrap();
            let z = standard_normal(&mut rng, 2);
            *h = offset_step(&mu, s.posterior_var(t), &grad, 5.0, &z, t);
        }
        let mean: Vec<f64> = (0..2).map(|d| hs.iter().map(|h| h[d]).sum::<f64>() / chains as f64).collect();
        let dist = norm(&sub(&mean, &target));
        // Monte-Carlo slack: standard error of the mean is ~ 1/√1000
        assert!(dist <= prev_dist + 0.1, "t={t}: {dist} > {prev_dist}");
        prev_dist = prev_dist.min(dist);
    }
    let mean: Vec<f64> = (0..2).map(|d| hs.iter().map(|h| h[d]).sum::<f64>() / chains as f64).collect();
    assert!(norm(&sub(&mean, &target)) < norm(&target) - 0.3);
}

#[test]
fn dsg_sphere_and_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let n = 33;
        let mu = standard_normal(&mut rng, n);
        let g = standard_normal(&mut rng, n);
        let z = standard_normal(&mut rng, n);
        let sigma = rng.random_range(0.001..1.0);
        let r = (n as f64).sqrt() * sigma;
        let rate = rng.random_range(0.0..=1.0);
        let s = dsg_step(&mu, sigma, &g, rate, &z);
        assert!(!s.fallback);
        assert!((norm(&sub(&s.h_prev, &mu)) - r).abs() < 1e-12);

        let s0 = dsg_step(&mu, sigma, &g, 0.0, &z);
        let zn = norm(&z);
        for i in 0..n {
            assert!((s0.h_prev[i] - (mu[i] + r * z[i] / zn)).abs() < 1e-12);
        }
        let s1 = dsg_step(&mu, sigma, &g, 1.0, &z);
        let gn = norm(&g);
        for i in 0..n {
            assert!((s1.h_prev[i] - (mu[i] - r * g[i] / gn)).abs() < 1e-12);
        }
    }
    // a vanishing blend (zero radius) falls back to the plain step
    let s = dsg_step(&[1.0, 2.0], 0.0, &[1.0, 0.0], 0.5, &[0.3, 0.1]);
    assert!(s.fallback);
    assert_eq!(s.h_prev, vec![1.0, 2.0]);
}

#[test]
fn dsg_descends_on_the_quadratic() {
    // small sigma: the g_r = 1 step lowers L = ‖x − c‖² from μ
    let mu = [0.2, -0.1, 0.4];
    let c = [1.0, 1.0, -1.0];
    let grad: Vec<f64> = mu.iter().zip(&c).map(|(m, t)| 2.0 * (m - t)).collect();
    let l = |x: &[f64]| x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    let s = dsg_step(&mu, 1e-3, &grad, 1.0, &[0.5, -0.2, 0.1]);
    assert!(l(&s.h_prev) < l(&mu));
}

#[test]
fn weight_scaling_leaves_dsg_direction_unchanged() {
    let f = fixture(5);
    let w = ConstraintWeights::new(1.0, 0.7, 0.5);
    let h = f.model.normalizer.normalize(&f.poses[2]);
    let mu = vec![0.0; h.len()];
    let z = vec![0.0; h.len()];
    let g1 = ctx(&f, w).guidance_gradient(&h, 3, true).unwrap().grad;
    let g2 = ctx(&f, w.scaled(2.0)).guidance_gradient(&h, 3, true).unwrap().grad;
    let g3 = ctx(&f, w.scaled(3.0)).guidance_gradient(&h, 3, true).unwrap().grad;
    let d1 = dsg_step(&mu, 0.1, &g1, 1.0, &z).h_prev;
    assert_eq!(d1, dsg_step(&mu, 0.1, &g2, 1.0, &z).h_prev);
    assert!(rel_err(&dsg_step(&mu, 0.1, &g3, 1.0, &z).h_prev, &d1) < 1e-12);
}

#[test]
fn guided_chains_stay_on_the_sphere() {
    let f = fixture(6);
    let c = ctx(&f, ConstraintWeights::default());
    let cfg = GuidanceConfig {
        mode: GuidanceMode::Dsg,
        rate: 0.3,
        ..GuidanceConfig::default()
    };
    let mut rec = Vec::new();
    run_chain(&c, &cfg, &mut chain_rng(1, 0), Some(&mut rec)).unwrap();
    assert_eq!(rec.len(), f.schedule.steps());
    let n = f.model.pose_dim() as f64;
    for r in rec.iter().filter(|r| r.t >= 2) {
        assert!(r.guided);
        // the untrained fixture drifts far from the origin, so allow for the
        // rounding of h - mu at that magnitude
        assert!((r.step_norm - n.sqrt() * r.sigma).abs() < 1e-12 * (1.0 + r.mu_norm), "{r:?}");
    }
}

#[test]
fn sampling_is_deterministic_and_mode_sensitive() {
    let f = fixture(7);
    let cloud = f.index.cloud().clone();
    let c = ConstraintConfig::default();
    let none = GuidanceConfig::default();
    let dsg = GuidanceConfig {
        mode: GuidanceMode::Dsg,
        ..GuidanceConfig::default()
    };
    assert!(sample(&f.model, &f.hand, &cloud, 0, &none, &c, 1, Exec::default()).unwrap().is_empty());
    let a = sample(&f.model, &f.hand, &cloud, 4, &none, &c, 1, Exec::default()).unwrap();
    let b = sample(&f.model, &f.hand, &cloud, 4, &none, &c, 1, Exec::Sequential).unwrap();
    assert_eq!(a, b);
    let d = sample(&f.model, &f.hand, &cloud, 4, &dsg, &c, 1, Exec::default()).unwrap();
    assert_ne!(a, d);
    let bad = GuidanceConfig { rate: 1.5, ..dsg };
    assert!(sample(&f.model, &f.hand, &cloud, 1, &bad, &c, 1, Exec::default()).is_err());
    for s in &a {
        let p = HandPose::from_slice(&s.pose, f.hand.num_joints()).unwrap();
        for (th, (lo, hi)) in p.theta.iter().zip(f.hand.joint_limits()) {
            assert!(*th >= lo && *th <= hi);
        }
    }
}

#[test]
fn trained_toy_reproduces_data_moments_and_guidance_lowers_penetration() {
    let (model, set) = two_mode_toy(4000);
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 64,
        iterations: 10_000,
        optimizer: crate::train::OptimizerKind::Adam,
        weights: Some(ConstraintWeights::ZERO),
        ema_decay: 0.999,
        seed: 2,
        ..TrainConfig::default()
    };
    let mut st = TrainState::fresh(model, &cfg);
    train(&mut st, &set, &cfg, &ConstraintConfig::default(), Exec::default(), |_| {}).unwrap();
    let model = st.ema_model();
    let hand = model.hand_model().unwrap();
    let cloud = set.objects[0].cloud.clone();
    let none = GuidanceConfig {
        clamp_final: false,
        ..GuidanceConfig::default()
    };
    let c = ConstraintConfig::default();
    let n = 10_000;
    let out = sample(&model, &hand, &cloud, n, &none, &c, 5, Exec::default()).unwrap();
    let th: Vec<f64> = out.iter().map(|s| s.pose[0]).collect();
    let data: Vec<f64> = set.samples.iter().map(|s| s.pose[0]).collect();
    let moments = |x: &[f64]| {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        (m, x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64)
    };
    let (dm, dv) = moments(&data);
    let (sm, sv) = moments(&th);
    let nf = n as f64;
    let nd = data.len() as f64;
    let se_mean = (dv / nf + dv / nd).sqrt();
    let se_var = dv * (2.0 / nf + 2.0 / nd).sqrt();
    assert!((sm - dm).abs() <= 3.0 * se_mean, "mean {sm} vs {dm}");
    assert!((sv - dv).abs() <= 3.0 * se_var, "var {sv} vs {dv}");

    let dsg = GuidanceConfig {
        mode: GuidanceMode::Dsg,
        rate: 0.5,
        weights: Some(ConstraintWeights::new(0.0, 1.0, 0.0)),
        ..none
    };
    let m = 200;
    let plain = sample(&model, &hand, &cloud, m, &none, &c, 9, Exec::default()).unwrap();
    let guided = sample(&model, &hand, &cloud, m, &dsg, &c, 9, Exec::default()).unwrap();
    let mean_erf = |v: &[Sample]| v.iter().map(|s| s.diagnostics.unwrap().erf).sum::<f64>() / v.len() as f64;
    assert!(mean_erf(&guided) < mean_erf(&plain), "{} vs {}", mean_erf(&guided), mean_erf(&plain));
}

#[test]
fn guidance_hinge_reaches_the_constraints() {
    let global = ConstraintConfig::default();
    let g = GuidanceConfig {
        erf_hinge: true,
        weights: Some(ConstraintWeights::new(1.0, 2.0, 0.0)),
        ..Default::default()
    };
    let c = g.constraints(&global);
    assert!(c.erf_hinge && c.weights.erf == 2.0);
    assert!(!GuidanceConfig::default().constraints(&global).erf_hinge);
}
