use ndarray::Array3;

use super::diagnostics::{read_heatmap_csv, write_heatmap_csv};
use super::eval::{ap_from_flags, class_ap, detect, greedy_matches, nms, Detection};
use super::*;
use crate::assign::{AssignerConfig, AssignmentResult, GroundTruth, Instance};
use crate::detector::{Branch, DetectorModel, DetectorSpec, HeadSpec, PredictionMap, RegMode};
use crate::engine::{distill_signals, freeze_teacher, DistillConfig, Strategy, TeacherView};
use crate::geometry::BBox;
use crate::objective::DetLossConfig;
use crate::testutil::close;

fn tiny_data_spec() -> SyntheticDatasetSpec {
    SyntheticDatasetSpec {
        image_size: 16,
        size_min: 5.0,
        size_max: 10.0,
        objects_max: 2,
        train_size: 8,
        val_size: 4,
        seed: 3,
        ..SyntheticDatasetSpec::default()
    }
}

fn tiny_model_spec(hidden: usize) -> DetectorSpec {
    DetectorSpec {
        in_channels: 1,
        backbone_channels: vec![4, 4, 4],
        strides: vec![4, 8],
        head: HeadSpec {
            n_layers: 3,
            hidden_channels: hidden,
            num_classes: 3,
            reg_mode: RegMode::Distribution { bins: 4 },
            shared_across_levels: true,
        },
    }
}

fn tiny_data() -> Datasets<f64> {
    let spec = tiny_data_spec();
    Datasets {
        train: generate_split(&spec, Split::Train).unwrap(),
        val: generate_split(&spec, Split::Val).unwrap(),
    }
}

fn tiny_run(epochs: usize, distill: Option<DistillConfig>) -> TrainRun {
    TrainRun {
        pipeline: LossPipeline {
            assigner: AssignerConfig::Center { radius_factor: 2.5 },
            det: DetLossConfig::default(),
            distill,
        },
        sgd: SgdConfig { lr: 0.02, warmup_steps: 2, ..SgdConfig::default() },
        train: TrainConfig { epochs, batch_size: 4, seed: 9, track_images: 4, ..TrainConfig::default() },
        config_hash: "test".into(),
    }
}

fn frozen_teacher() -> DetectorModel<f64> {
    let mut t = DetectorModel::new(tiny_model_spec(6), 11).unwrap();
    freeze_teacher(&mut t);
    t
}

#[test]
fn samples_regenerate_identically() {
    let spec = tiny_data_spec();
    let a: Sample<f64> = generate_sample(&spec, Split::Train, 5).unwrap();
    let b: Sample<f64> = generate_sample(&spec, Split::Train, 5).unwrap();
    assert_eq!(a, b);
    let other: Sample<f64> = generate_sample(&spec, Split::Val, 5 % spec.val_size).unwrap();
    assert_ne!(a.image, other.image);
    assert!(generate_sample::<f64>(&spec, Split::Val, spec.val_size).is_err());
    for s in generate_split::<f64>(&spec, Split::Train).unwrap() {
        s.gts.validate(16.0, 16.0, 3).unwrap();
    }
}

#[test]
fn zero_objects_give_empty_ground_truth() {
    let spec = SyntheticDatasetSpec { objects_min: 0, objects_max: 0, ..tiny_data_spec() };
    let s: Sample<f64> = generate_sample(&spec, Split::Train, 0).unwrap();
    assert!(s.gts.is_empty());
}

#[test]
fn rendered_square_matches_its_box() {
    let mut img = Array3::<f64>::zeros((1, 32, 32));
    render_square_fixture(&mut img);
    let lit: Vec<(usize, usize)> = img.indexed_iter().filter(|(_, v)| **v > 0.0).map(|((_, y, x), _)| (x, y)).collect();
    let x1 = lit.iter().map(|p| p.0).min().unwrap();
    let x2 = lit.iter().map(|p| p.0).max().unwrap() + 1;
    let y1 = lit.iter().map(|p| p.1).min().unwrap();
    let y2 = lit.iter().map(|p| p.1).max().unwrap() + 1;
    assert_eq!((x1, y1, x2, y2), (10, 12, 20, 22));
    assert!(lit.iter().all(|&(x, y)| img[[0, y, x]] == 0.8));
    assert_eq!(lit.len(), 100);
}

fn render_square_fixture(img: &mut Array3<f64>) {
    dataset::render_shape(img, Shape::Square, &BBox::new(10.0, 12.0, 20.0, 22.0), 0.8);
}

#[test]
fn dataset_spec_validation() {
    assert!(SyntheticDatasetSpec { num_classes: 4, ..tiny_data_spec() }.validate().is_err());
    assert!(SyntheticDatasetSpec { size_max: 40.0, ..tiny_data_spec() }.validate().is_err());
    assert!(SyntheticDatasetSpec { objects_min: 3, ..tiny_data_spec() }.validate().is_err());
}

#[test]
fn learning_rate_schedule() {
    let c = SgdConfig { lr: 1.0, lr_steps: vec![2, 4], decay: 0.1, warmup_steps: 4, ..SgdConfig::default() };
    assert_eq!(c.rate(0, 0), 0.25);
    assert_eq!(c.rate(0, 3), 1.0);
    assert!((c.rate(2, 10) - 0.1).abs() < 1e-15);
    assert!((c.rate(5, 10) - 0.01).abs() < 1e-15);
    assert!(SgdConfig { momentum: 1.0, ..SgdConfig::default() }.validate().is_err());
}

#[test]
fn frozen_groups_survive_optimizer_steps() {
    let mut m = DetectorModel::<f64>::new(tiny_model_spec(4), 1).unwrap();
    let mut g = m.zero_grads();
    for cg in g.iter_mut() {
        cg.weight.fill(0.5);
        cg.bias.fill(-0.25);
    }
    m.freeze_all();
    let before = m.clone();
    let mut sgd = Sgd::new(SgdConfig::default(), &m).unwrap();
    for _ in 0..10 {
        sgd.step(&mut m, &g, 0);
    }
    assert_eq!(m, before);
    m.unfreeze_all();
    sgd.step(&mut m, &g, 0);
    assert_ne!(m.layers()[0].2.weight, before.layers()[0].2.weight);
}

#[test]
fn ap_hand_precision_recall() {
    // ranks: TP, FP, TP against 2 gts; precisions 1, 1/2, 2/3
    assert!((ap_from_flags(&[true, false, true], 2) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    let gts = vec![vec![BBox::new(0.0, 0.0, 10.0, 10.0), BBox::new(20.0, 20.0, 30.0, 30.0)]];
    let dets = vec![
        (0, 0.9, BBox::new(0.0, 0.0, 10.0, 10.0)),
        (0, 0.8, BBox::new(40.0, 40.0, 50.0, 50.0)),
        (0, 0.7, BBox::new(21.0, 20.0, 30.0, 30.0)),
    ];
    assert_eq!(greedy_matches(&dets, &gts, 0.5), vec![true, false, true]);
    assert!((class_ap(&dets, &gts, 0.5).unwrap() - 5.0 / 6.0).abs() < 1e-12);
    assert_eq!(class_ap(&[], &gts, 0.5), Some(0.0));
    assert_eq!(class_ap(&dets, &[vec![]], 0.5), None);
}

#[test]
fn each_ground_truth_matches_once() {
    let gts = vec![vec![BBox::new(0.0, 0.0, 10.0, 10.0)]];
    let dets = vec![(0, 0.5, BBox::new(0.0, 0.0, 10.0, 10.0)), (0, 0.9, BBox::new(0.0, 0.0, 10.0, 9.0))];
    assert_eq!(greedy_matches(&dets, &gts, 0.5), vec![true, false]);
    assert!((class_ap(&dets, &gts, 0.5).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn nms_is_class_wise() {
    let b = BBox::new(0.0, 0.0, 10.0, 10.0);
    let dets = vec![
        Detection { bbox: b, class_id: 0, score: 0.5 },
        Detection { bbox: b, class_id: 0, score: 0.9 },
        Detection { bbox: b, class_id: 1, score: 0.4 },
    ];
    let kept = nms(dets, 0.6);
    assert_eq!(kept.len(), 2);
    assert_eq!((kept[0].class_id, kept[0].score), (0, 0.9));
    assert_eq!(kept[1].class_id, 1);
}

fn point_preds(logits: [f64; 2], reg: [f64; 2]) -> Vec<PredictionMap<f64>> {
    vec![PredictionMap {
        cls_logits: Array3::from_shape_vec((1, 1, 2), logits.to_vec()).unwrap(),
        reg_output: Array3::from_shape_fn((4, 1, 2), |(_, _, x)| reg[x]),
        stride: 8,
        level_id: 0,
    }]
}

#[test]
fn perfect_and_empty_predictions() {
    let unit = (std::f64::consts::E - 1.0).ln();
    // location 1 sits at (12, 4) and decodes to [4, -4, 20, 12]
    let preds = point_preds([-40.0, 40.0], [unit, unit]);
    let dets = detect(&preds, RegMode::BoxOffsets, &EvalConfig::default()).unwrap();
    assert_eq!(dets.len(), 1);
    let gt = GroundTruth::new(vec![Instance { bbox: dets[0].bbox.cast::<f64>(), class_id: 0 }]);
    assert_eq!(eval::mean_ap(&[(dets, &gt)], 1, 0.5), 1.0);
    assert_eq!(eval::mean_ap(&[(Vec::new(), &gt)], 1, 0.5), 0.0);
}

#[test]
fn distances_on_two_locations() {
    let unit = (std::f64::consts::E - 1.0).ln();
    let student = point_preds([0.0, 3f64.ln()], [0.0, unit]);
    let teacher = point_preds([0.0, 0.0], [0.0, 0.0]);
    let mut asg = AssignmentResult::<f64>::all_negative(2, 1);
    asg.pos_mask[1] = true;
    asg.assigned_instance[1] = Some(0);
    asg.assigned_class[1] = Some(0);
    asg.cls_target[[1, 0]] = 1.0;
    asg.quality[1] = 1.0;
    let gts = GroundTruth::new(vec![Instance { bbox: BBox::new(5.0, 0.0, 20.0, 10.0), class_id: 0 }]);
    let d = track_distances(&student, Some(&teacher), &asg, &gts, RegMode::BoxOffsets).unwrap();
    assert!((d.l1_pred_teacher - 0.125).abs() < 1e-12);
    assert!((d.l1_cls_gt - 0.25).abs() < 1e-12);
    assert!((d.l1_box_gt - 1.75).abs() < 1e-12);

    let same = track_distances(&student, Some(&student), &asg, &gts, RegMode::BoxOffsets).unwrap();
    assert_eq!(same.l1_pred_teacher, 0.0);
    let exact = point_preds([-40.0, 40.0], [0.0, unit]);
    let d = track_distances(&exact, None, &asg, &gts, RegMode::BoxOffsets).unwrap();
    assert!(d.l1_cls_gt < 1e-12);
    assert!(d.l1_pred_teacher.is_nan());
    let none = AssignmentResult::<f64>::all_negative(2, 1);
    assert!(track_distances(&exact, None, &none, &gts, RegMode::BoxOffsets).unwrap().l1_cls_gt.is_nan());
}

#[test]
fn heatmap_is_zero_without_gradient_signal() {
    let data = tiny_data();
    let teacher = frozen_teacher();
    let student = DetectorModel::new(tiny_model_spec(6), 5).unwrap();
    let zero_w = DistillConfig { split_index: 1, w_cls_kd: 0.0, w_reg_kd: 0.0, ..DistillConfig::default() };
    let maps = grad_heatmap(&teacher, &student, &data.train[0].image, &zero_w).unwrap();
    assert_eq!(maps.len(), 2);
    assert!(maps.iter().all(|m| m.iter().all(|&v| v == 0.0)));

    let mut twin = teacher.clone();
    twin.unfreeze_all();
    let cls_only = DistillConfig { split_index: 1, branches: vec![Branch::Cls], ..DistillConfig::default() };
    let maps = grad_heatmap(&teacher, &twin, &data.train[0].image, &cls_only).unwrap();
    assert!(maps.iter().all(|m| m.iter().all(|&v| v == 0.0)));
}

#[test]
fn heatmap_matches_finite_differences() {
    let data = tiny_data();
    let teacher = frozen_teacher();
    let student = DetectorModel::new(tiny_model_spec(6), 5).unwrap();
    let image = &data.train[1].image;
    let cfg = DistillConfig { split_index: 1, reg_loss: crate::objective::RegKdLoss::Giou, ..DistillConfig::default() };
    let maps = grad_heatmap(&teacher, &student, image, &cfg).unwrap();
    let t_cache = teacher.forward(image).unwrap();
    let base = student.forward(image).unwrap();
    let loss = |cache: &crate::detector::ForwardOutput<f64>| {
        let view = TeacherView { model: &teacher, cache: &t_cache };
        distill_signals(&student, cache, Some(view), None, &cfg, &DetLossConfig::default())
            .unwrap()
            .output
            .total_loss
    };
    let h = 1e-5;
    for (level, row, col) in [(0, 1, 2), (0, 3, 0), (1, 1, 1)] {
        let mut sq = 0.0;
        for branch in Branch::ALL {
            for ch in 0..6 {
                let mut cache = base.clone();
                let idx = [ch, row, col];
                cache.intermediates[branch.index()][level][1].values[idx] += h;
                let up = loss(&cache);
                cache.intermediates[branch.index()][level][1].values[idx] -= 2.0 * h;
                let down = loss(&cache);
                sq += ((up - down) / (2.0 * h)).powi(2);
            }
        }
        let numeric = sq.sqrt();
        assert!(numeric > 1e-8);
        assert!(close(maps[level][[row, col]], numeric, 1e-3), "{} vs {numeric}", maps[level][[row, col]]);
    }
    let mut buf = Vec::new();
    write_heatmap_csv(&mut buf, &maps).unwrap();
    assert_eq!(read_heatmap_csv(buf.as_slice()).unwrap(), maps);
}

#[test]
fn zero_epochs_leave_the_model_alone() {
    let data = tiny_data();
    let mut m = DetectorModel::new(tiny_model_spec(4), 2).unwrap();
    let before = m.clone();
    let log = train(&mut m, None, &data, &tiny_run(0, None), None).unwrap();
    assert!(log.records.is_empty());
    assert_eq!(m, before);
}

#[test]
fn zero_learning_rate_keeps_parameters_and_losses() {
    let data = tiny_data();
    let mut m = DetectorModel::new(tiny_model_spec(4), 2).unwrap();
    let before = m.clone();
    let mut run = tiny_run(3, None);
    run.sgd.lr = 0.0;
    let log = train(&mut m, None, &data, &run, None).unwrap();
    assert_eq!(m, before);
    assert_eq!(log.records.len(), 3);
    for r in &log.records[1..] {
        assert_eq!(r.det_cls, log.records[0].det_cls);
        assert_eq!(r.det_reg, log.records[0].det_reg);
        assert_eq!(r.ap, log.records[0].ap);
    }
}

#[test]
fn training_is_deterministic_and_round_trips() {
    let data = tiny_data();
    let teacher = frozen_teacher();
    let run = tiny_run(2, Some(DistillConfig { split_index: 1, ..DistillConfig::default() }));
    let go = || {
        let mut m = DetectorModel::new(tiny_model_spec(6), 4).unwrap();
        let log = train(&mut m, Some(&teacher), &data, &run, None).unwrap();
        (m, log)
    };
    let (m1, l1) = go();
    let (m2, l2) = go();
    assert_eq!(m1, m2);
    let text = l1.to_csv_string();
    assert_eq!(text, l2.to_csv_string());
    assert!(text.starts_with("# config_hash=test\n# seed=9\nepoch,ap,det_cls,"));
    assert_eq!(TrainLog::read_csv(text.as_bytes()).unwrap(), l1);
    assert!(l1.records.iter().all(|r| r.kd_cls > 0.0 && r.l1_pred_teacher.is_finite()));
}

#[test]
fn zero_weight_distillation_equals_plain_training() {
    let data = tiny_data();
    let teacher = frozen_teacher();
    let zero = DistillConfig { w_cls_kd: 0.0, w_reg_kd: 0.0, ..DistillConfig::default() };
    let run_with = |distill| {
        let mut m = DetectorModel::new(tiny_model_spec(6), 4).unwrap();
        train(&mut m, Some(&teacher), &data, &tiny_run(2, distill), None).unwrap().to_csv_string()
    };
    assert_eq!(run_with(Some(zero)), run_with(None));
}

#[test]
fn mimicking_matches_crosskd_at_the_last_layer() {
    let data = tiny_data();
    let teacher = frozen_teacher();
    let run_with = |strategy, split| {
        let cfg = DistillConfig { strategy, split_index: split, ..DistillConfig::default() };
        let mut m = DetectorModel::new(tiny_model_spec(6), 4).unwrap();
        train(&mut m, Some(&teacher), &data, &tiny_run(2, Some(cfg)), None).unwrap().to_csv_string()
    };
    assert_eq!(run_with(Strategy::PredMimic, 1), run_with(Strategy::CrossKdA, 3));
}

#[test]
fn distillation_requires_a_teacher() {
    let data = tiny_data();
    let mut m = DetectorModel::new(tiny_model_spec(4), 2).unwrap();
    let err = train(&mut m, None, &data, &tiny_run(1, Some(DistillConfig::default())), None).unwrap_err();
    assert!(matches!(err, crate::Error::Config(_)));
}

#[test]
fn single_sample_overfits() {
    let spec = SyntheticDatasetSpec { train_size: 1, val_size: 1, objects_min: 1, ..tiny_data_spec() };
    let data = Datasets {
        train: generate_split::<f64>(&spec, Split::Train).unwrap(),
        val: generate_split::<f64>(&spec, Split::Train).unwrap(),
    };
    let mut m = DetectorModel::new(tiny_model_spec(8), 6).unwrap();
    let mut run = tiny_run(150, None);
    run.sgd = SgdConfig { lr: 0.05, lr_steps: vec![], warmup_steps: 5, ..SgdConfig::default() };
    let log = train(&mut m, None, &data, &run, None).unwrap();
    let first = log.records[0].det_cls + log.records[0].det_reg;
    let last = log.last().unwrap();
    assert!(last.det_cls + last.det_reg < 0.25 * first, "{first} -> {:?}", last);
}

#[test]
fn checkpoints_written_at_requested_epochs() {
    let data = tiny_data();
    let dir = tempfile::tempdir().unwrap();
    let mut m = DetectorModel::new(tiny_model_spec(4), 2).unwrap();
    let mut run = tiny_run(2, None);
    run.train.checkpoint_epochs = vec![1];
    train(&mut m, None, &data, &run, Some(dir.path())).unwrap();
    assert!(dir.path().join("epoch_1.ckpt").exists());
    assert!(!dir.path().join("epoch_2.ckpt").exists());
}
