use diad_core::denoiser::*;
use diad_core::diffusion::NoiseSchedule;
use diad_core::graph::{Graph, Mode};
use diad_core::params::{ParamGroup, ParamId, ParamStore};
use diad_core::sff::SffNorm;
use diad_core::Tensor;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro(connection: ConnectionVariant) -> DenoiserConfig {
    DenoiserConfig {
        latent_size: 4,
        base_channels: 8,
        channel_multipliers: vec![1, 2, 2, 2],
        res_blocks_per_level: 1,
        attention_levels: vec![3],
        num_heads: 2,
        time_embed_dim: 16,
        hint_channels: vec![4, 8],
        hint_downsample: 2,
        connection,
        ..Default::default()
    }
}

fn latent(cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(
        &[cfg.latent_channels, cfg.latent_size, cfg.latent_size],
        |_| rng.random_range(-2.0..2.0),
    )
}

fn image(cfg: &DenoiserConfig, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let s = cfg.latent_size * cfg.hint_downsample;
    Tensor::from_fn(&[3, s, s], |_| rng.random_range(0.0..=1.0))
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
}

fn randomize<F: diad_core::Scalar>(
    store: &mut ParamStore<F>,
    groups: &[ParamGroup],
    scale: f64,
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in groups {
        for id in store.ids_in(*g) {
            let shape = store.value(id).shape().to_vec();
            *store.value_mut(id) =
                Tensor::from_fn(&shape, |_| F::of(rng.random_range(-scale..scale)));
        }
    }
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn sg_copies_sd_exactly() {
    for sg_encoder in [SgEncoderWeights::Clone, SgEncoderWeights::SharedSd] {
        let cfg = DenoiserConfig {
            sg_encoder,
            ..DenoiserConfig::default()
        };
        let asm = build_assembly::<f32>(cfg, 3).unwrap();
        let pairs = asm.sg_sd_pairs();
        assert!(!pairs.is_empty());
        let mut max = 0.0f32;
        for (sg, sd) in &pairs {
            let (a, b) = (asm.store.value(*sg), asm.store.value(*sd));
            assert_eq!(a.shape(), b.shape());
            max = max.max(a.max_abs_diff(b).unwrap());
            assert_eq!(asm.store.get(*sg).group, ParamGroup::Sg);
            assert!(!asm.store.is_frozen(*sg));
            assert!(asm.store.is_frozen(*sd));
        }
        assert_eq!(max, 0.0);
        let sg_count = asm.store.ids_in(ParamGroup::Sg).len();
        assert_eq!(sg_count, pairs.len());
    }
}

#[test]
fn frozen_flags_by_group() {
    let asm = build_assembly::<f32>(DenoiserConfig::default(), 0).unwrap();
    for (id, p) in asm.store.iter() {
        let want = matches!(p.group, ParamGroup::Sd | ParamGroup::Buffer);
        assert_eq!(asm.store.is_frozen(id), want, "{}", p.name);
    }
    for g in [
        ParamGroup::Sg,
        ParamGroup::Hint,
        ParamGroup::Sff,
        ParamGroup::Connection,
    ] {
        assert!(!asm.store.ids_in(g).is_empty(), "{g:?}");
    }
}

#[test]
fn desk_and_reference_widths() {
    let desk = DenoiserConfig::default();
    assert_eq!(desk.block_widths(), vec![32, 64, 128, 128]);
    let reference = DenoiserConfig {
        base_channels: 320,
        num_heads: 8,
        latent_size: 32,
        attention_levels: vec![0, 1, 2],
        ..Default::default()
    };
    assert!(reference.validate().is_ok());
    assert_eq!(reference.block_widths(), vec![320, 640, 1280, 1280]);
}

#[test]
fn invalid_configs_rejected() {
    let bad = [
        DenoiserConfig {
            channel_multipliers: vec![1, 2, 4],
            ..Default::default()
        },
        DenoiserConfig {
            base_channels: 0,
            ..Default::default()
        },
        DenoiserConfig {
            num_heads: 3,
            ..Default::default()
        },
        DenoiserConfig {
            attention_levels: vec![4],
            ..Default::default()
        },
        DenoiserConfig {
            hint_downsample: 6,
            ..Default::default()
        },
        DenoiserConfig {
            hint_channels: vec![16, 32],
            ..Default::default()
        },
    ];
    for cfg in bad {
        assert!(build_assembly::<f32>(cfg, 0).is_err());
    }
}

#[test]
fn hint_embed_contract() {
    let cfg = DenoiserConfig::default();
    let asm = build_assembly::<f32>(cfg.clone(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = image(&cfg, &mut rng);
    let h = asm.hint_embed(&x).unwrap();
    assert_eq!(h.shape(), &[32, 8, 8]);
    assert!(h.data().iter().all(|&v| v == 0.0));
    assert!(asm.hint_embed(&Tensor::zeros(&[3, 32, 32])).is_err());

    let mut trained = asm.clone();
    randomize(&mut trained.store, &[ParamGroup::Hint], 0.2, 4);
    let a = trained.hint_embed(&x).unwrap();
    let b = trained.hint_embed(&x).unwrap();
    assert_eq!(bits(&a), bits(&b));
    assert!(a.data().iter().any(|&v| v != 0.0));
}

#[test]
fn zero_init_identity_for_every_variant() {
    let s = schedule();
    for variant in ConnectionVariant::ALL {
        for norm in [SffNorm::InstanceSilu, SffNorm::BatchRelu] {
            let cfg = DenoiserConfig {
                connection: variant,
                sff_norm: norm,
                ..Default::default()
            };
            let asm = build_assembly::<f32>(cfg.clone(), 11).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for _ in 0..10 {
                let z = latent(&cfg, &mut rng);
                let x = image(&cfg, &mut rng);
                let t = rng.random_range(0..1000);
                let full = asm.predict_noise(&z, t, &x, &s).unwrap();
                let sd = asm.predict_noise_sd(&z, t, &s).unwrap();
                assert_eq!(full.shape(), z.shape());
                assert_eq!(bits(&full), bits(&sd), "{variant:?} {norm:?}");
            }
        }
    }
}

#[test]
fn zeroed_connections_reduce_to_sd() {
    let s = schedule();
    let cfg = micro(ConnectionVariant::MsgSff);
    let mut asm = build_assembly::<f64>(cfg.clone(), 2).unwrap();
    randomize(
        &mut asm.store,
        &[
            ParamGroup::Sg,
            ParamGroup::Hint,
            ParamGroup::Sff,
            ParamGroup::Connection,
        ],
        0.3,
        9,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = latent(&cfg, &mut rng);
    let x = image(&cfg, &mut rng);
    let live = asm.predict_noise(&z, 500, &x, &s).unwrap();
    let sd = asm.predict_noise_sd(&z, 500, &s).unwrap();
    assert!(live.max_abs_diff(&sd).unwrap() > 1e-6);
    for id in asm.store.ids_in(ParamGroup::Connection) {
        let shape = asm.store.value(id).shape().to_vec();
        *asm.store.value_mut(id) = Tensor::zeros(&shape);
    }
    let cut = asm.predict_noise(&z, 500, &x, &s).unwrap();
    assert_eq!(bits(&cut), bits(&sd));
}

#[test]
fn output_shape_matrix() {
    let s = schedule();
    for latent_size in [2, 4, 6, 8] {
        for res in [1, 2] {
            for sg_input in [SgInput::Noisy, SgInput::Clean] {
                let cfg = DenoiserConfig {
                    latent_size,
                    res_blocks_per_level: res,
                    sg_input,
                    ..micro(ConnectionVariant::MsgSff)
                };
                let mut asm = build_assembly::<f32>(cfg.clone(), 0).unwrap();
                randomize(
                    &mut asm.store,
                    &[ParamGroup::Connection, ParamGroup::Hint],
                    0.1,
                    1,
                );
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let z: Vec<_> = (0..2).map(|_| latent(&cfg, &mut rng)).collect();
                let x: Vec<_> = (0..2).map(|_| image(&cfg, &mut rng)).collect();
                let out = asm
                    .predict_noise_batch(&z, &[3, 700], Some(&x), Some(&z), &s)
                    .unwrap();
                for o in &out {
                    assert_eq!(o.shape(), z[0].shape());
                    assert!(o.all_finite());
                }
            }
        }
    }
}

#[test]
fn batch_matches_single_predictions() {
    let s = schedule();
    let cfg = micro(ConnectionVariant::MsgSff);
    let mut asm = build_assembly::<f64>(cfg.clone(), 4).unwrap();
    randomize(
        &mut asm.store,
        &[ParamGroup::Connection, ParamGroup::Hint, ParamGroup::Sff],
        0.2,
        3,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z: Vec<_> = (0..3).map(|_| latent(&cfg, &mut rng)).collect();
    let x: Vec<_> = (0..3).map(|_| image(&cfg, &mut rng)).collect();
    let t = [0, 400, 999];
    let batch = asm.predict_noise_batch(&z, &t, Some(&x), None, &s).unwrap();
    for i in 0..3 {
        let one = asm.predict_noise(&z[i], t[i], &x[i], &s).unwrap();
        assert!(batch[i].max_abs_diff(&one).unwrap() < 1e-10);
    }
}

#[test]
fn invalid_inputs_rejected() {
    let s = schedule();
    let cfg = micro(ConnectionVariant::MsgSff);
    let asm = build_assembly::<f32>(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let z = latent(&cfg, &mut rng);
    let x = image(&cfg, &mut rng);
    assert!(asm.predict_noise(&z, 1000, &x, &s).is_err());
    assert!(asm
        .predict_noise(&Tensor::zeros(&[4, 8, 8]), 10, &x, &s)
        .is_err());
    assert!(asm
        .predict_noise(&z, 10, &Tensor::zeros(&[3, 4, 4]), &s)
        .is_err());
    assert!(asm
        .predict_noise(&z, 10, &Tensor::full(&[3, 8, 8], 2.0), &s)
        .is_err());
    let sd_only = build_assembly::<f32>(micro(ConnectionVariant::Sd), 0).unwrap();
    assert!(sd_only.hint_embed(&x).is_err());
    assert_eq!(
        bits(&sd_only.predict_noise(&z, 10, &x, &s).unwrap()),
        bits(&sd_only.predict_noise_sd(&z, 10, &s).unwrap())
    );
}

#[test]
fn class_conditioned_baseline() {
    let s = schedule();
    let cfg = DenoiserConfig {
        num_classes: 3,
        ..micro(ConnectionVariant::Sd)
    };
    let mut asm = build_assembly::<f64>(cfg.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = latent(&cfg, &mut rng);
    let a = asm.predict_noise_ldm_baseline(&z, 100, 0, &s).unwrap();
    let b = asm.predict_noise_ldm_baseline(&z, 100, 1, &s).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() > 1e-9);
    assert_eq!(
        bits(&a),
        bits(&asm.predict_noise_ldm_baseline(&z, 100, 0, &s).unwrap())
    );
    assert!(asm.predict_noise_ldm_baseline(&z, 100, 3, &s).is_err());

    for id in asm.store.ids_in(ParamGroup::ClassEmbed) {
        let shape = asm.store.value(id).shape().to_vec();
        *asm.store.value_mut(id) = Tensor::zeros(&shape);
    }
    let zeroed = asm.predict_noise_ldm_baseline(&z, 100, 2, &s).unwrap();
    assert_eq!(
        bits(&zeroed),
        bits(&asm.predict_noise_sd(&z, 100, &s).unwrap())
    );

    let plain = build_assembly::<f64>(micro(ConnectionVariant::Sd), 7).unwrap();
    assert!(plain.predict_noise_ldm_baseline(&z, 100, 0, &s).is_err());
}

/// Training loss `mean((eps - eps_pred)^2)` for one fixed micro batch.
fn micro_loss(
    asm: &DenoiserAssembly<f64>,
    z: &Tensor<f64>,
    x: &Tensor<f64>,
    eps: &Tensor<f64>,
    t: &[usize],
    train: bool,
) -> (f64, Option<diad_core::params::Grads<f64>>) {
    let mut g = Graph::new(&asm.store, if train { Mode::Train } else { Mode::Eval });
    let zv = g.input(z.clone());
    let xv = g.input(x.clone());
    let ev = g.input(eps.clone());
    let pred = asm
        .net
        .forward(
            &mut g,
            zv,
            t,
            Conditioning::Image {
                x0: xv,
                clean: None,
            },
        )
        .unwrap();
    let loss = g.mse(pred, ev).unwrap();
    let value = g.value(loss).data()[0];
    let grads = train.then(|| g.backward(loss).unwrap());
    (value, grads)
}

#[test]
fn gradients_match_central_differences() {
    let cfg = micro(ConnectionVariant::MsgSff);
    let mut asm = build_assembly::<f32>(cfg.clone(), 21)
        .unwrap()
        .cast::<f64>();
    // move the zero-initialized grafting layers off zero so every SG-side
    // parameter influences the loss
    randomize(
        &mut asm.store,
        &[ParamGroup::Connection, ParamGroup::Sff],
        0.3,
        5,
    );
    let hint_out: Vec<ParamId> = asm
        .store
        .iter()
        .filter(|(_, p)| p.name.starts_with("hint.out"))
        .map(|(id, _)| id)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for id in hint_out {
        let shape = asm.store.value(id).shape().to_vec();
        *asm.store.value_mut(id) = Tensor::from_fn(&shape, |_| rng.random_range(-0.3..0.3));
    }

    let n = 2;
    let z = Tensor::from_fn(&[n, 4, 4, 4], |_| rng.random_range(-1.5..1.5));
    let x = Tensor::from_fn(&[n, 3, 8, 8], |_| rng.random_range(0.0..1.0));
    let eps = Tensor::from_fn(&[n, 4, 4, 4], |_| rng.random_range(-1.5..1.5));
    let t = [120, 730];

    let (_, grads) = micro_loss(&asm, &z, &x, &eps, &t, true);
    let grads = grads.unwrap();
    assert!(asm
        .store
        .ids_in(ParamGroup::Sd)
        .iter()
        .all(|id| grads.get(*id).is_none()));

    let mut elems: Vec<(ParamId, usize)> = Vec::new();
    for g in [
        ParamGroup::Sg,
        ParamGroup::Sff,
        ParamGroup::Hint,
        ParamGroup::Connection,
    ] {
        for id in asm.store.ids_in(g) {
            elems.extend((0..asm.store.value(id).numel()).map(|i| (id, i)));
        }
    }
    let k = (elems.len() / 100).max(1);
    let picked = sample(&mut rng, elems.len(), k);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for p in picked.iter() {
        let (id, i) = elems[p];
        let orig = asm.store.value(id).data()[i];
        asm.store.value_mut(id).data_mut()[i] = orig + h;
        let lp = micro_loss(&asm, &z, &x, &eps, &t, false).0;
        asm.store.value_mut(id).data_mut()[i] = orig - h;
        let lm = micro_loss(&asm, &z, &x, &eps, &t, false).0;
        asm.store.value_mut(id).data_mut()[i] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let an = grads.get(id).map_or(0.0, |g| g.data()[i]);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
        worst = worst.max(rel);
        assert!(
            rel < 1e-3,
            "{}[{i}]: analytic {an} vs numeric {fd}",
            asm.store.get(id).name
        );
    }
    assert!(k >= 10, "sampled {k} elements");
    assert!(worst < 1e-3);
}
