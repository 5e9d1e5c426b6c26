use super::*;
use crate::tensor::gradcheck::{grad_check, Sampling};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_stack(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::new(vec![1, c, h, w], data).unwrap()
}

fn small(variant: Variant, use_sab: bool) -> ModelConfig {
    ModelConfig {
        base_channels: 8,
        middle_blocks: 1,
        aspp_channels: 16,
        low_level_channels_reduced: 8,
        decoder_channels: 8,
        variant,
        use_sab,
        ..Default::default()
    }
}

fn branch_slices(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let per = t.len() / t.shape()[0];
    t.data().chunks(per).map(|c| c.to_vec()).collect()
}

#[test]
fn build_is_deterministic() {
    let a = Model::<f32>::build(ModelConfig::default(), 11).unwrap();
    let b = Model::<f32>::build(ModelConfig::default(), 11).unwrap();
    let c = Model::<f32>::build(ModelConfig::default(), 12).unwrap();
    let bits = |m: &Model<f32>| -> Vec<u32> {
        m.params().ids().flat_map(|id| m.params().value(id).data().iter().map(|v| v.to_bits())).collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(bits(&a), bits(&c));
}

#[test]
fn branch_and_head_counts() {
    let m = Model::<f32>::build(ModelConfig::multi_branch(5, true), 0).unwrap();
    assert_eq!(m.branches(), 3);
    let heads = |m: &Model<f32>| m.params().ids().filter(|&id| m.params().name(id).contains(".head") && m.params().name(id).starts_with("dec.sab") && m.params().name(id).ends_with(".w")).count();
    assert_eq!(heads(&m), 6);
    let m = Model::<f32>::build(ModelConfig::multi_branch(7, true), 0).unwrap();
    assert_eq!(m.branches(), 5);
    assert_eq!(heads(&m), 10);
    assert!(m.params().id("dec.branch4.head.w").is_some());
    assert!(m.params().id("dec.branch5.head.w").is_none());
}

#[test]
fn build_rejects_bad_configs() {
    assert!(matches!(Model::<f32>::build(ModelConfig::multi_branch(6, false), 0), Err(Error::Config(_))));
    let c = ModelConfig {
        c_out: 4,
        ..Default::default()
    };
    assert!(Model::<f32>::build(c, 0).is_err());
}

#[test]
fn encoder_tap_extents() {
    let m = Model::<f64>::build(ModelConfig::default(), 1).unwrap();
    let taps = m.encode(&random_stack(5, 64, 64, 0)).unwrap();
    assert_eq!(taps.low.shape(), &[1, 32, 16, 16]);
    assert_eq!(taps.high.shape(), &[1, 64, 4, 4]);
    assert!(m.encode(&random_stack(5, 40, 64, 0)).is_err());
    assert!(m.encode(&random_stack(3, 64, 64, 0)).is_err());
}

#[test]
fn aspp_degenerate_and_width() {
    let cfg = ModelConfig {
        aspp_rates: vec![1],
        aspp_image_pooling: false,
        ..small(Variant::MultiBranch, false)
    };
    let m = Model::<f64>::build(cfg.clone(), 2).unwrap();
    let aspp: Vec<&str> = m
        .params()
        .ids()
        .map(|id| m.params().name(id))
        .filter(|n| n.starts_with("enc.aspp"))
        .collect();
    assert_eq!(
        aspp,
        [
            "enc.aspp.rate0.w",
            "enc.aspp.rate0.aff.scale",
            "enc.aspp.rate0.aff.shift",
            "enc.aspp.fuse.w",
            "enc.aspp.fuse.aff.scale",
            "enc.aspp.fuse.aff.shift"
        ]
    );
    let k = m.params().value(m.params().id("enc.aspp.rate0.w").unwrap()).shape().to_vec();
    assert_eq!(k, [16, 64, 1, 1]);
    for rates in [vec![1], vec![1, 2], vec![1, 2, 4, 8]] {
        for pool in [false, true] {
            let cfg = ModelConfig {
                aspp_rates: rates.clone(),
                aspp_image_pooling: pool,
                ..small(Variant::MultiBranch, false)
            };
            let m = Model::<f64>::build(cfg, 2).unwrap();
            let taps = m.encode(&random_stack(5, 32, 32, 1)).unwrap();
            assert_eq!(taps.high.shape(), &[1, 16, 2, 2]);
        }
    }
}

#[test]
fn zeroed_attention_halves_features() {
    let mut m = Model::<f64>::build(small(Variant::MultiBranch, true), 3).unwrap();
    let ids: Vec<_> = m.params().ids().filter(|&id| m.params().name(id).starts_with("dec.sab_low")).collect();
    for id in ids {
        m.params_mut().value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = random_stack(8, 8, 8, 4);
    let out = m.sab(SabSite::Low, &x).unwrap();
    assert_eq!(out.gated.len(), 3);
    for (g, map) in out.gated.iter().zip(&out.maps) {
        assert!(map.data().iter().all(|&v| v == 0.5));
        assert_eq!(map.shape(), &[1, 1, 8, 8]);
        assert_eq!(g.shape(), x.shape());
        for (a, b) in g.data().iter().zip(x.data()) {
            assert_eq!(*a, 0.5 * b);
        }
    }
}

#[test]
fn attention_maps_in_open_unit_interval() {
    let m = Model::<f64>::build(small(Variant::MultiBranch, true), 5).unwrap();
    let x = random_stack(16, 4, 4, 6);
    let out = m.sab(SabSite::High, &x).unwrap();
    assert_eq!(out.maps.len(), 3);
    for map in &out.maps {
        assert!(map.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
    let odd = random_stack(12, 4, 4, 6);
    assert!(matches!(m.sab(SabSite::High, &odd), Err(Error::Shape(_))));
    let plain = Model::<f64>::build(small(Variant::MultiBranch, false), 5).unwrap();
    assert!(plain.sab(SabSite::High, &x).is_err());
}

#[test]
fn output_shapes_match_between_variants() {
    let x = random_stack(5, 64, 64, 7);
    for cfg in [ModelConfig::multi_branch(5, true), ModelConfig::single_branch(5, 1)] {
        let m = Model::<f32>::build(cfg, 8).unwrap();
        let taps = m.encode(&x.cast()).unwrap();
        assert_eq!(m.decode(&taps).unwrap().shape(), &[3, 3, 64, 64]);
    }
}

#[test]
fn tied_branches_agree_and_untied_differ() {
    let x = random_stack(5, 32, 32, 9);
    for sab in [false, true] {
        let mut m = Model::<f64>::build(small(Variant::MultiBranch, sab), 10).unwrap();
        let untied = branch_slices(&m.logits(&x).unwrap());
        for i in 0..3 {
            for j in i + 1..3 {
                assert_ne!(untied[i], untied[j]);
            }
        }
        m.tie_branches();
        let tied = branch_slices(&m.logits(&x).unwrap());
        assert_eq!(tied[0], tied[1]);
        assert_eq!(tied[1], tied[2]);
    }
}

#[test]
fn single_branch_widths() {
    let m1 = Model::<f32>::build(ModelConfig::single_branch(5, 1), 0).unwrap();
    let m3 = Model::<f32>::build(ModelConfig::single_branch(5, 3), 0).unwrap();
    let shape = |m: &Model<f32>, n: &str| m.params().value(m.params().id(n).unwrap()).shape().to_vec();
    assert_eq!(shape(&m1, "dec.single.fuse.w"), [32, 56, 3, 3]);
    assert_eq!(shape(&m3, "dec.single.fuse.w"), [96, 168, 3, 3]);
    assert_eq!(shape(&m3, "dec.single.low.w"), [72, 24, 1, 1]);
    assert_eq!(shape(&m3, "dec.single.high.w"), [96, 64, 1, 1]);
    assert_eq!(shape(&m3, "dec.single.head.w"), [9, 96, 3, 3]);

    let m = Model::<f64>::build(ModelConfig::single_branch(3, 1), 0).unwrap();
    let p = m.forward(&random_stack(3, 16, 16, 1)).unwrap();
    assert_eq!(p.shape(), &[1, 3, 16, 16]);
    assert_eq!(shape(&m.cast(), "dec.single.head.w"), [3, 32, 3, 3]);
}

#[test]
fn forward_probabilities() {
    for cfg in [small(Variant::MultiBranch, true), small(Variant::SingleBranch, false)] {
        let m = Model::<f64>::build(cfg, 12).unwrap();
        let x = random_stack(5, 32, 32, 13);
        let p = m.forward(&x).unwrap();
        assert_eq!(p, m.forward(&x).unwrap());
        let [s, k, h, w] = p.dims4().unwrap();
        for m_ in 0..s {
            for y in 0..h {
                for x_ in 0..w {
                    let mut sum = 0.0;
                    for c in 0..k {
                        let v = p.at4(m_, c, y, x_);
                        assert!((0.0..=1.0).contains(&v));
                        sum += v;
                    }
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn last_slice_influences_every_branch() {
    let m = Model::<f64>::build(small(Variant::MultiBranch, true), 14).unwrap();
    let x = random_stack(5, 32, 32, 15);
    let mut y = x.clone();
    let plane = 32 * 32;
    for v in &mut y.data_mut()[4 * plane..] {
        *v = 1.0 - *v;
    }
    let a = branch_slices(&m.forward(&x).unwrap());
    let b = branch_slices(&m.forward(&y).unwrap());
    for k in 0..3 {
        assert_ne!(a[k], b[k]);
    }
}

#[test]
fn single_conv_parameter_count() {
    let mut l = Layout::default();
    l.conv("c", 3, 8, 3, 1, true);
    let n: usize = l.0.iter().map(|s| s.shape.iter().product::<usize>()).sum();
    assert_eq!(n, 224);
}

#[test]
fn multi_branch_overhead_is_small() {
    let md = Model::<f32>::build(ModelConfig::multi_branch(5, true), 0).unwrap();
    let sb = Model::<f32>::build(ModelConfig::single_branch(5, 1), 0).unwrap();
    let ratio = md.count_params() as f64 / sb.count_params() as f64;
    assert!(ratio > 1.0 && ratio < 1.10, "ratio {ratio}");
}

#[test]
fn attention_adds_exactly_its_parameters() {
    let with = Model::<f32>::build(ModelConfig::multi_branch(5, true), 0).unwrap();
    let without = Model::<f32>::build(ModelConfig::multi_branch(5, false), 0).unwrap();
    assert_eq!(with.count_params() - without.count_params(), with.count_sab_params());
    let table = |m: &Model<f32>| -> Vec<(String, Vec<usize>)> {
        m.params()
            .ids()
            .filter(|&id| !m.params().name(id).starts_with("dec.sab"))
            .map(|id| (m.params().name(id).to_string(), m.params().value(id).shape().to_vec()))
            .collect()
    };
    assert_eq!(table(&with), table(&without));
    // 3x3 conv 24->3 and 64->8, plus three 1x1 heads each
    assert_eq!(with.count_sab_params(), (24 * 3 * 9 + 3 + 3 * 4) + (64 * 8 * 9 + 8 + 3 * 9));
}

#[test]
fn flops_scale_with_area() {
    let cfg = ModelConfig {
        aspp_image_pooling: false,
        ..Default::default()
    };
    let m = Model::<f32>::build(cfg, 0).unwrap();
    assert_eq!(m.count_flops(64, 64).unwrap(), 4 * m.count_flops(32, 32).unwrap());
    let m = Model::<f32>::build(ModelConfig::default(), 0).unwrap();
    let r = m.count_flops(64, 64).unwrap() as f64 / m.count_flops(32, 32).unwrap() as f64;
    assert!(r > 3.99 && r <= 4.0, "ratio {r}");
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let m = Model::<f32>::build(small(Variant::MultiBranch, true), 21).unwrap();
    let bytes = m.to_checkpoint_bytes().unwrap();
    let back = Model::<f32>::from_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(back.config(), m.config());
    for id in m.params().ids() {
        assert_eq!(back.params().name(id), m.params().name(id));
        assert_eq!(back.params().value(id), m.params().value(id));
    }
    assert_eq!(back.to_checkpoint_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert_eq!(Model::<f32>::load(&path).unwrap().to_checkpoint_bytes().unwrap(), bytes);
}

#[test]
fn checkpoint_rejects_damage() {
    let m = Model::<f32>::build(small(Variant::SingleBranch, false), 21).unwrap();
    let bytes = m.to_checkpoint_bytes().unwrap();
    assert!(Model::<f32>::from_checkpoint_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Model::<f32>::from_checkpoint_bytes(&bad).is_err());
    assert!(Model::<f32>::from_checkpoint_bytes(b"").is_err());
    assert!(matches!(Model::<f32>::load("/nonexistent/m.ckpt"), Err(Error::Io { .. })));
}

#[test]
fn small_model_gradients_match_finite_differences() {
    let m = Model::<f64>::build(small(Variant::MultiBranch, true), 30).unwrap();
    let x = random_stack(5, 16, 16, 31);
    let labels: Vec<u8> = (0..3 * 256).map(|i| ((i * 7) % 3) as u8).collect();
    let labels = crate::losses::one_hot::<f64>(&labels, 3, 3, 16, 16).unwrap();
    let cfg = m.config().clone();
    let mut params = m.into_params();
    let report = grad_check(
        &mut params,
        |store, g| {
            let xv = g.constant(x.clone());
            let out = Model::forward_with(&cfg, store, g, xv)?;
            Ok(crate::losses::total_loss_var(g, out.probs, &labels, true)?.0)
        },
        1e-6,
        Sampling::PerTensor(2, 7),
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-5, "{report:?}");
}
