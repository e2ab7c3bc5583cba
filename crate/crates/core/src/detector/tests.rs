use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use super::*;

fn tiny_spec(reg_mode: RegMode, shared: bool) -> DetectorSpec {
    DetectorSpec {
        in_channels: 1,
        backbone_channels: vec![4, 4, 6, 6],
        strides: vec![8, 16],
        head: HeadSpec {
            n_layers: 4,
            hidden_channels: 5,
            num_classes: 3,
            reg_mode,
            shared_across_levels: shared,
        },
    }
}

fn image(seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new(0.0, 1.0).unwrap();
    Array3::from_shape_fn((1, 32, 32), |_| u.sample(&mut rng))
}

#[test]
fn zero_model_gives_zero_logits() {
    let model = DetectorModel::<f64>::zeros(tiny_spec(RegMode::BoxOffsets, true)).unwrap();
    let out = model.forward(&Array3::zeros((1, 32, 32))).unwrap();
    for p in &out.predictions {
        assert!(p.cls_logits.iter().all(|&v| v == 0.0));
        assert!(p.reg_output.iter().all(|&v| v == 0.0));
    }
}

#[test]
fn forward_is_deterministic() {
    let spec = tiny_spec(RegMode::Distribution { bins: 8 }, false);
    let a = DetectorModel::<f64>::new(spec.clone(), 3).unwrap();
    let b = DetectorModel::<f64>::new(spec, 3).unwrap();
    let x = image(1);
    assert_eq!(a.forward(&x).unwrap().predictions, b.forward(&x).unwrap().predictions);
}

#[test]
fn bad_image_size_is_config_error() {
    let model = DetectorModel::<f64>::new(tiny_spec(RegMode::BoxOffsets, true), 0).unwrap();
    assert!(matches!(model.forward(&Array3::zeros((1, 24, 32))), Err(Error::Config(_))));
    assert!(matches!(model.forward(&Array3::zeros((3, 32, 32))), Err(Error::Config(_))));
}

#[test]
fn intermediates_replay_to_final_prediction() {
    for shared in [true, false] {
        let model = DetectorModel::<f64>::new(tiny_spec(RegMode::Distribution { bins: 4 }, shared), 9).unwrap();
        let out = model.forward(&image(2)).unwrap();
        let n = model.n_layers();
        for level in 0..model.num_levels() {
            assert_eq!(out.intermediates(Branch::Cls, level).len(), n);
            for j in 1..=n {
                let replay = model
                    .forward_head_from(
                        level,
                        out.feature(Branch::Cls, level, j - 1),
                        out.feature(Branch::Reg, level, j - 1),
                        j,
                    )
                    .unwrap();
                let orig = &out.predictions[level];
                for (a, b) in replay.cls_logits.iter().zip(orig.cls_logits.iter()) {
                    assert!((a - b).abs() < 1e-6);
                }
                for (a, b) in replay.reg_output.iter().zip(orig.reg_output.iter()) {
                    assert!((a - b).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn identical_models_cross_replay_matches() {
    let spec = tiny_spec(RegMode::BoxOffsets, true);
    let teacher = DetectorModel::<f64>::new(spec.clone(), 5).unwrap();
    let student = teacher.clone();
    let x = image(4);
    let s_out = student.forward(&x).unwrap();
    let t_out = teacher.forward(&x).unwrap();
    for i in 0..teacher.n_layers() {
        let p = teacher
            .forward_head_from(0, s_out.feature(Branch::Cls, 0, i), s_out.feature(Branch::Reg, 0, i), i + 1)
            .unwrap();
        for (a, b) in p.cls_logits.iter().zip(t_out.predictions[0].cls_logits.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn start_layer_bounds_and_widths_are_checked() {
    let model = DetectorModel::<f64>::new(tiny_spec(RegMode::BoxOffsets, true), 1).unwrap();
    let out = model.forward(&image(0)).unwrap();
    let f = out.feature(Branch::Cls, 0, 0);
    assert!(matches!(model.forward_head_from(0, f, f, 0), Err(Error::Contract(_))));
    assert!(matches!(model.forward_head_from(0, f, f, 5), Err(Error::Contract(_))));
    let wide = FeatureMap::new(Array3::zeros((7, 4, 4)), 8, 0).unwrap();
    match model.forward_head_from(0, &wide, &wide, 2) {
        Err(Error::Wiring { expected: 5, got: 7, .. }) => {}
        other => panic!("expected wiring error, got {other:?}"),
    }
}

#[test]
fn shared_head_is_one_tensor_set() {
    let mut model = DetectorModel::<f64>::new(tiny_spec(RegMode::BoxOffsets, true), 2).unwrap();
    assert_eq!(model.heads.len(), 1);
    let x = image(5);
    let before = model.forward(&x).unwrap();
    model.head_mut(0).cls.layers[3].bias[0] += 1.0;
    let after = model.forward(&x).unwrap();
    for level in 0..2 {
        let d = &after.predictions[level].cls_logits - &before.predictions[level].cls_logits;
        assert!(d.index_axis(ndarray::Axis(0), 0).iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }
}

#[test]
fn uniform_bins_decode_to_half_range() {
    let bins = 8;
    let pred = PredictionMap {
        cls_logits: Array3::<f64>::zeros((3, 2, 2)),
        reg_output: Array3::from_elem((4 * (bins + 1), 2, 2), 0.7),
        stride: 8,
        level_id: 0,
    };
    let boxes = decode_boxes(&pred, RegMode::Distribution { bins }).unwrap();
    // location (0, 0) has center (4, 4); each edge lies stride * m / 2 = 32 away
    let b = boxes[0];
    for (got, want) in b.to_array().iter().zip([-28.0, -28.0, 36.0, 36.0]) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn two_bin_softmax_expectation() {
    let mut reg = Array3::<f64>::zeros((8, 1, 1));
    for e in 0..4 {
        reg[[2 * e + 1, 0, 0]] = 2.0f64.ln();
    }
    let d = decode_distances(&reg, RegMode::Distribution { bins: 1 }, 8, 0, 0);
    for v in d {
        assert!((v - 8.0 * 2.0 / 3.0).abs() < 1e-12);
    }
}

#[test]
fn extreme_logit_approaches_its_bin() {
    let bins = 8;
    let mut reg = Array3::<f64>::zeros((4 * (bins + 1), 1, 1));
    for e in 0..4 {
        reg[[e * (bins + 1) + 5, 0, 0]] = 60.0;
    }
    let d = decode_distances(&reg, RegMode::Distribution { bins }, 16, 0, 0);
    for v in d {
        assert!((v - 80.0).abs() < 1e-9);
    }
}

#[test]
fn distribution_decode_matches_brute_force_expectation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let u = Uniform::new(-3.0, 3.0).unwrap();
    let bins = 6;
    let reg = Array3::<f64>::from_shape_fn((4 * (bins + 1), 2, 3), |_| u.sample(&mut rng));
    for r in 0..2 {
        for c in 0..3 {
            let d = decode_distances(&reg, RegMode::Distribution { bins }, 8, r, c);
            for e in 0..4 {
                let z: f64 = (0..=bins).map(|k| reg[[e * (bins + 1) + k, r, c]].exp()).sum();
                let brute: f64 =
                    (0..=bins).map(|k| k as f64 * reg[[e * (bins + 1) + k, r, c]].exp() / z).sum::<f64>() * 8.0;
                assert!((d[e] - brute).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn box_offsets_use_softplus() {
    let pred = PredictionMap {
        cls_logits: Array3::<f64>::zeros((1, 1, 1)),
        reg_output: Array3::zeros((4, 1, 1)),
        stride: 4,
        level_id: 0,
    };
    let b = decode_boxes(&pred, RegMode::BoxOffsets).unwrap()[0];
    let d = 4.0 * 2.0f64.ln();
    assert!((b.x1 - (2.0 - d)).abs() < 1e-12 && (b.y2 - (2.0 + d)).abs() < 1e-12);
    assert!(decode_boxes(&pred, RegMode::Distribution { bins: 2 }).is_err());
}

#[test]
fn point_grid_centers() {
    let grid = DetectorSpec::default().grid(64, 64);
    assert_eq!(grid.len(), 64 + 16);
    assert_eq!(grid.center::<f64>(0), (4.0, 4.0));
    assert_eq!(grid.center::<f64>(grid.index(0, 2, 3)), (28.0, 20.0));
    assert_eq!(grid.center::<f64>(grid.index(1, 0, 1)), (24.0, 8.0));
    assert_eq!(grid.position(grid.index(1, 3, 2)), (1, 3, 2));
}

#[test]
fn head_backward_matches_finite_differences() {
    let model = DetectorModel::<f64>::new(tiny_spec(RegMode::BoxOffsets, false), 8).unwrap();
    let x = image(7);
    let out = model.forward(&x).unwrap();
    let weights: Vec<Array3<f64>> = out
        .predictions
        .iter()
        .map(|p| p.cls_logits.mapv(|v| (3.0 * v).cos()))
        .collect();
    let loss = |m: &DetectorModel<f64>| -> f64 {
        let o = m.forward(&x).unwrap();
        o.predictions.iter().zip(&weights).map(|(p, w)| (&p.cls_logits * w).sum()).sum()
    };
    let mut seeds = BackwardSeeds::new(2, 4);
    for (l, w) in weights.iter().enumerate() {
        seeds.add_pred(l, Branch::Cls, w.clone());
    }
    let back = model.backward(&out, &seeds);
    let h = 1e-6;
    let probe = |m: &mut DetectorModel<f64>, which: usize, delta: f64| {
        let mut layers = m.layers_mut();
        layers[which].1.weight[[0, 1]] += delta;
    };
    let analytic: Vec<f64> = back.grads.iter().map(|g| g.weight[[0, 1]]).collect();
    for which in 0..analytic.len() {
        let mut mp = model.clone();
        probe(&mut mp, which, h);
        let mut mm = model.clone();
        probe(&mut mm, which, -h);
        let fd = (loss(&mp) - loss(&mm)) / (2.0 * h);
        assert!(
            (fd - analytic[which]).abs() <= 1e-5 * (1.0 + fd.abs()),
            "layer {which}: fd {fd} analytic {}",
            analytic[which]
        );
    }
    // regression branch never seeded
    for g in back.grads.tower(0, Branch::Reg) {
        assert_eq!(g.sq_norm(), 0.0);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for reg_mode in [RegMode::BoxOffsets, RegMode::Distribution { bins: 8 }] {
        let m32 = DetectorModel::<f32>::new(tiny_spec(reg_mode, false), 13).unwrap();
        let bytes = checkpoint::encode(&m32, Some("abc"), Some(4));
        let (back, header) = checkpoint::decode::<f32>(&bytes).unwrap();
        assert_eq!(back, m32);
        assert_eq!(header.n_layers, 4);
        assert_eq!(header.strides, vec![8, 16]);
        assert_eq!(header.config_hash.as_deref(), Some("abc"));
        let m64 = DetectorModel::<f64>::new(tiny_spec(reg_mode, true), 13).unwrap();
        let (back, _) = checkpoint::decode::<f64>(&checkpoint::encode(&m64, None, None)).unwrap();
        assert_eq!(back, m64);
    }
}

#[test]
fn checkpoint_keys_follow_branch_layer_param() {
    let model = DetectorModel::<f64>::new(tiny_spec(RegMode::BoxOffsets, true), 0).unwrap();
    let keys: Vec<String> = model.layers().into_iter().map(|(k, _, _)| k).collect();
    assert!(keys.contains(&"cls/1".to_string()));
    assert!(keys.contains(&"reg/4".to_string()));
    assert!(keys.contains(&"backbone/0".to_string()));
    let corrupt = &checkpoint::encode(&model, None, None)[..40];
    assert!(matches!(checkpoint::decode::<f64>(corrupt), Err(Error::Checkpoint(_))));
}
