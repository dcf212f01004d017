use diad_core::denoiser::DenoiserConfig;
use diad_core::graph::{Graph, Mode};
use diad_core::nn::{ParamBuilder, NORM_EPS};
use diad_core::params::{ParamGroup, ParamStore};
use diad_core::sff::{sff_fuse, LayerSpec, SffBlock, SffNorm};
use diad_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn build(high: &[LayerSpec], low: &[LayerSpec], norm: SffNorm) -> (ParamStore<f64>, SffBlock) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let sff = {
        let mut b = ParamBuilder::new(&mut store, &mut rng, ParamGroup::Sff);
        SffBlock::new(&mut b, "sff", high, low, norm).unwrap()
    };
    (store, sff)
}

fn fuse(
    store: &ParamStore<f64>,
    sff: &SffBlock,
    h: &[Tensor<f64>],
    p: &[Tensor<f64>],
    mode: Mode,
) -> Vec<Tensor<f64>> {
    let mut g = Graph::new(store, mode);
    let hv: Vec<_> = h.iter().map(|t| g.input(t.clone())).collect();
    let pv: Vec<_> = p.iter().map(|t| g.input(t.clone())).collect();
    let q = sff_fuse(&mut g, &hv, &pv, sff).unwrap();
    q.iter().map(|&v| g.value(v).clone()).collect()
}

/// Direct-loop 3×3 convolution, padding 1, no bias.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let (n, cin, h, wd) = x.dims4();
    let cout = w.shape()[0];
    let (ho, wo) = ((h + 2 - 3) / stride + 1, (wd + 2 - 3) / stride + 1);
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    for b in 0..n {
        for o in 0..cout {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (y * stride + ky) as isize - 1;
                                let ix = (xx * stride + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()
                                    [((b * cin + c) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * cin + c) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    out.data_mut()[((b * cout + o) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    out
}

/// Per-(sample, channel) normalization when `per_sample`, per-channel over
/// the whole batch otherwise; then affine and activation.
fn naive_norm_act(
    x: &Tensor<f64>,
    gamma: &[f64],
    beta: &[f64],
    per_sample: bool,
    silu: bool,
) -> Tensor<f64> {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let mut out = x.clone();
    let groups: Vec<Vec<usize>> = if per_sample {
        (0..n * c)
            .map(|k| ((k * hw)..(k + 1) * hw).collect())
            .collect()
    } else {
        (0..c)
            .map(|ch| {
                (0..n)
                    .flat_map(|b| ((b * c + ch) * hw)..((b * c + ch) + 1) * hw)
                    .collect()
            })
            .collect()
    };
    for (k, idx) in groups.iter().enumerate() {
        let ch = if per_sample { k % c } else { k };
        let m = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / idx.len() as f64;
        let v = idx.iter().map(|&i| (x.data()[i] - m).powi(2)).sum::<f64>() / idx.len() as f64;
        for &i in idx {
            let y = (x.data()[i] - m) / (v + NORM_EPS).sqrt() * gamma[ch] + beta[ch];
            out.data_mut()[i] = if silu {
                y / (1.0 + (-y).exp())
            } else {
                y.max(0.0)
            };
        }
    }
    out
}

fn specs() -> (Vec<LayerSpec>, Vec<LayerSpec>) {
    let high = vec![
        LayerSpec {
            channels: 4,
            size: 4,
        },
        LayerSpec {
            channels: 6,
            size: 4,
        },
        LayerSpec {
            channels: 6,
            size: 4,
        },
    ];
    let low = vec![
        LayerSpec {
            channels: 6,
            size: 2,
        },
        LayerSpec {
            channels: 8,
            size: 2,
        },
        LayerSpec {
            channels: 8,
            size: 2,
        },
    ];
    (high, low)
}

fn inputs(
    high: &[LayerSpec],
    low: &[LayerSpec],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
    let h = high
        .iter()
        .map(|s| random(&[n, s.channels, s.size, s.size], rng))
        .collect();
    let p = low
        .iter()
        .map(|s| random(&[n, s.channels, s.size, s.size], rng))
        .collect();
    (h, p)
}

#[test]
fn zero_init_is_identity() {
    let (high, low) = specs();
    for norm in [SffNorm::InstanceSilu, SffNorm::BatchRelu] {
        let (store, sff) = build(&high, &low, norm);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let (h, p) = inputs(&high, &low, 3, &mut rng);
            for mode in [Mode::Train, Mode::Eval] {
                let q = fuse(&store, &sff, &h, &p, mode);
                for (qi, pi) in q.iter().zip(&p) {
                    assert_eq!(qi.data(), pi.data());
                }
            }
        }
        // zero high-scale input with zero weights also leaves P untouched
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut h, p) = inputs(&high, &low, 2, &mut rng);
        h.iter_mut().for_each(|t| *t = Tensor::zeros(t.shape()));
        let q = fuse(&store, &sff, &h, &p, Mode::Eval);
        assert_eq!(q, p);
    }
}

#[test]
fn matches_compositional_oracle() {
    let (high, low) = specs();
    for (norm, per_sample, silu) in [
        (SffNorm::InstanceSilu, true, true),
        (SffNorm::BatchRelu, false, false),
    ] {
        let (mut store, sff) = build(&high, &low, norm);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for row in &sff.units {
            for unit in row {
                let w = store.value(unit.conv.weight).shape().to_vec();
                *store.value_mut(unit.conv.weight) = random(&w, &mut rng);
                for p in [unit.norm.gamma.unwrap(), unit.norm.beta.unwrap()] {
                    let s = store.value(p).shape().to_vec();
                    *store.value_mut(p) = random(&s, &mut rng);
                }
            }
        }
        let (h, p) = inputs(&high, &low, 3, &mut rng);
        let q = fuse(&store, &sff, &h, &p, Mode::Train);
        for (i, row) in sff.units.iter().enumerate() {
            let mut want = p[i].clone();
            for (j, unit) in row.iter().enumerate() {
                let stride = high[j].size / low[i].size;
                let c = naive_conv(&h[j], store.value(unit.conv.weight), stride);
                let gamma = store.value(unit.norm.gamma.unwrap()).data().to_vec();
                let beta = store.value(unit.norm.beta.unwrap()).data().to_vec();
                let f = naive_norm_act(&c, &gamma, &beta, per_sample, silu);
                want = want.zip_with(&f, |a, b| a + b).unwrap();
            }
            assert_eq!(q[i].shape(), p[i].shape());
            assert!(
                q[i].max_abs_diff(&want).unwrap() < 1e-5,
                "{norm:?} layer {i}"
            );
        }
    }
}

#[test]
fn shapes_preserved_across_configs() {
    for base in [2, 4, 8] {
        for latent in [2, 4, 6, 8, 16] {
            for res in [1, 2, 3] {
                let cfg = DenoiserConfig {
                    base_channels: base,
                    latent_size: latent,
                    res_blocks_per_level: res,
                    ..Default::default()
                };
                let layout = cfg.encoder_layout();
                let (store, sff) = build(&layout[2], &layout[3], SffNorm::InstanceSilu);
                assert_eq!(sff.num_high(), res + 1);
                assert_eq!(sff.num_low(), res + 1);
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                let (h, p) = inputs(&layout[2], &layout[3], 2, &mut rng);
                let q = fuse(&store, &sff, &h, &p, Mode::Train);
                for (qi, pi) in q.iter().zip(&p) {
                    assert_eq!(qi.shape(), pi.shape());
                }
            }
        }
    }
}

#[test]
fn rejects_wrong_layer_counts_and_sizes() {
    let (high, low) = specs();
    let (store, sff) = build(&high, &low, SffNorm::InstanceSilu);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (h, p) = inputs(&high, &low, 1, &mut rng);
    let mut g = Graph::new(&store, Mode::Eval);
    let hv: Vec<_> = h.iter().map(|t| g.input(t.clone())).collect();
    let pv: Vec<_> = p.iter().map(|t| g.input(t.clone())).collect();
    assert!(sff_fuse(&mut g, &hv[..2], &pv, &sff).is_err());
    assert!(sff_fuse(&mut g, &hv, &pv[..2], &sff).is_err());

    let mut s2 = ParamStore::<f64>::new();
    let mut r2 = ChaCha8Rng::seed_from_u64(0);
    let mut b = ParamBuilder::new(&mut s2, &mut r2, ParamGroup::Sff);
    let odd = [LayerSpec {
        channels: 2,
        size: 8,
    }];
    let small = [LayerSpec {
        channels: 2,
        size: 2,
    }];
    assert!(SffBlock::new(&mut b, "x", &odd, &small, SffNorm::InstanceSilu).is_err());
}
