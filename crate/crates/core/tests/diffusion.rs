use diad_core::diffusion::*;
use diad_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn oracle_alpha_bars(t: usize, b0: f64, b1: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut p = 1.0f64;
    for i in 0..t {
        let beta = if t == 1 {
            b0
        } else {
            b0 + (b1 - b0) * (i as f64) / ((t - 1) as f64)
        };
        p *= 1.0 - beta;
        out.push(p);
    }
    out
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

#[test]
fn alpha_bars_match_cumulative_product() {
    for t in [10, 1000] {
        let s = NoiseSchedule::linear(t, 1e-4, 0.02).unwrap();
        let o = oracle_alpha_bars(t, 1e-4, 0.02);
        for (a, b) in s.alpha_bars().iter().zip(&o) {
            assert!((a - b).abs() <= 1e-12 * b.abs(), "{a} vs {b}");
        }
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
        for (sig, beta) in s.sigmas().iter().zip(s.betas()) {
            assert_eq!(*sig, beta.sqrt());
        }
    }
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    assert!(s.alpha_bars()[999] < 1e-2);
}

#[test]
fn forward_diffuse_matches_formula() {
    let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
    let ab = oracle_alpha_bars(10, 1e-4, 0.02)[3];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let z0 = random(&[4, 3, 3], &mut rng);
    let e = random(&[4, 3, 3], &mut rng);
    let out = forward_diffuse(&z0, 3, &e, &s).unwrap();
    for i in 0..z0.numel() {
        let want = ab.sqrt() * z0.data()[i] + (1.0 - ab).sqrt() * e.data()[i];
        assert!((out.data()[i] - want).abs() < 1e-12);
    }
    let zero = Tensor::zeros(&[4, 3, 3]);
    let out = forward_diffuse(&zero, 3, &e, &s).unwrap();
    for i in 0..e.numel() {
        assert_eq!(out.data()[i], (1.0 - ab).sqrt() * e.data()[i]);
    }
    assert!(forward_diffuse(&z0, 3, &Tensor::zeros(&[4, 3]), &s).is_err());
}

#[test]
fn ddpm_step_matches_formula() {
    let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = random(&[2, 4, 4], &mut rng);
    let e = random(&[2, 4, 4], &mut rng);
    let n = random(&[2, 4, 4], &mut rng);
    let betas: Vec<f64> = (0..10)
        .map(|i| 1e-4 + (0.02 - 1e-4) * i as f64 / 9.0)
        .collect();
    let ab = oracle_alpha_bars(10, 1e-4, 0.02);
    let a5 = 1.0 - betas[5];
    let out = ddpm_reverse_step(&z, 5, &e, &s, &n).unwrap();
    for i in 0..z.numel() {
        let want = (z.data()[i] - (1.0 - a5) / (1.0 - ab[5]).sqrt() * e.data()[i]) / a5.sqrt()
            + betas[5].sqrt() * n.data()[i];
        assert!((out.data()[i] - want).abs() < 1e-12);
    }
    let zero = Tensor::zeros(&[2, 4, 4]);
    let out = ddpm_reverse_step(&z, 5, &zero, &s, &zero).unwrap();
    for i in 0..z.numel() {
        assert!((out.data()[i] - z.data()[i] / a5.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn single_step_schedule_inverts() {
    let s = NoiseSchedule::linear(1, 0.3, 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z0 = random(&[3, 4, 4], &mut rng);
    let e = random(&[3, 4, 4], &mut rng);
    let z1 = forward_diffuse(&z0, 0, &e, &s).unwrap();
    let back = ddpm_reverse_step(&z1, 0, &e, &s, &Tensor::zeros(&[3, 4, 4])).unwrap();
    assert!(back.max_abs_diff(&z0).unwrap() < 1e-6);
}

#[test]
fn ddim_zero_eps_closed_form() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let ab = oracle_alpha_bars(1000, 1e-4, 0.02);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let zt = random(&[4, 8, 8], &mut rng);
    let mut visited = Vec::new();
    let out = ddim_sample(
        &zt,
        |z, t| {
            visited.push(t);
            Ok(Tensor::zeros(z.shape()))
        },
        &s,
        10,
    )
    .unwrap();
    // with eps = 0 every update is z <- sqrt(ab_next / ab_t) z, and the
    // final target has ab = 1, so the product telescopes to z_T / sqrt(ab_{T-1})
    assert_eq!(visited.len(), 10);
    assert_eq!(visited[0], 999);
    assert_eq!(*visited.last().unwrap(), 0);
    for i in 0..zt.numel() {
        let want = zt.data()[i] / ab[999].sqrt();
        assert!((out.data()[i] - want).abs() <= 1e-9 * want.abs().max(1.0));
    }
}

#[test]
fn ddim_exact_eps_recovers_z0() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let z0 = random(&[4, 8, 8], &mut rng);
    let e = random(&[4, 8, 8], &mut rng);
    let zt = forward_diffuse(&z0, 999, &e, &s).unwrap();
    let out = ddim_sample(&zt, |_, _| Ok(e.clone()), &s, 1000).unwrap();
    assert!(out.max_abs_diff(&z0).unwrap() < 1e-5);
    let out = ddim_sample(&zt, |_, _| Ok(e.clone()), &s, 10).unwrap();
    assert!(out.max_abs_diff(&z0).unwrap() < 1e-5);
}

#[test]
fn ddim_is_bitwise_deterministic() {
    let s = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let zt = random(&[2, 4, 4], &mut rng);
        ddim_sample(
            &zt,
            |z, t| Ok(z.map(|v| (v * 0.3 + t as f64 * 1e-3).sin())),
            &s,
            10,
        )
        .unwrap()
    };
    let (a, b) = (run(), run());
    let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn ddim_errors() {
    let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
    let z = Tensor::zeros(&[1, 2, 2]);
    assert!(ddim_sample(&z, |z, _| Ok(z.clone()), &s, 11).is_err());
    assert!(ddim_sample(&z, |_, _| Ok(Tensor::zeros(&[1, 2])), &s, 2).is_err());
    assert!(ddim_sample_from(&z, |z, _| Ok(z.clone()), &s, 10, 2).is_err());
}

#[test]
fn loss_matches_mse_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let a = random(&[3, 5, 5], &mut rng);
    let b = random(&[3, 5, 5], &mut rng);
    let mut acc = 0.0;
    for i in 0..a.numel() {
        let d = a.data()[i] - b.data()[i];
        acc += d * d;
    }
    let want = acc / a.numel() as f64;
    assert!((training_loss(&a, &b).unwrap() - want).abs() < 1e-12);
}

proptest! {
    #[test]
    fn one_shot_x0_inverts(seed in 0u64..1000, t in 0usize..1000) {
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z0 = random(&[2, 3, 3], &mut rng);
        let e = random(&[2, 3, 3], &mut rng);
        let zt = forward_diffuse(&z0, t, &e, &s).unwrap();
        let x0 = predict_x0(&zt, t, &e, &s).unwrap();
        prop_assert!(x0.max_abs_diff(&z0).unwrap() < 1e-6);
    }

    #[test]
    fn loss_symmetric_and_zero_iff_equal(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[2, 2, 2], &mut rng);
        let b = random(&[2, 2, 2], &mut rng);
        prop_assert_eq!(training_loss(&a, &b).unwrap(), training_loss(&b, &a).unwrap());
        prop_assert!(training_loss(&a, &b).unwrap() > 0.0);
        prop_assert_eq!(training_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn schedules_are_valid(t in 1usize..300, b0 in 1e-5f64..0.05, span in 0.0f64..0.3) {
        let s = NoiseSchedule::linear(t, b0, b0 + span).unwrap();
        prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
    }
}
