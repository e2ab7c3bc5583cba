use ndarray::{array, Array2};
use rand::Rng;

use super::*;
use crate::detector::{DetectorSpec, LevelGrid, RegMode};
use crate::testutil::{random_preds, rng};

fn positive(asg: &mut AssignmentResult<f64>, r: usize, class: usize, q: f64) {
    asg.pos_mask[r] = true;
    asg.assigned_instance[r] = Some(0);
    asg.assigned_class[r] = Some(class);
    asg.cls_target[[r, class]] = q;
}

#[test]
fn discrepancy_hand_values() {
    let mut asg = AssignmentResult::<f64>::all_negative(2, 3);
    positive(&mut asg, 1, 2, 0.8);
    let probs = array![[0.9, 0.2, 0.0], [0.1, 0.1, 0.3]];
    let d = discrepancy_from_probs(&probs, &asg).unwrap();
    assert!((d[0] - 0.9).abs() < 1e-12);
    assert!((d[1] - 0.5).abs() < 1e-12);
    assert_eq!(discrepancy_from_probs(&asg.cls_target.clone(), &asg).unwrap(), vec![0.0, 0.0]);
    assert!(discrepancy_from_probs(&Array2::zeros((3, 3)), &asg).is_err());
}

#[test]
fn two_location_curve() {
    let mut asg = AssignmentResult::<f64>::all_negative(2, 3);
    positive(&mut asg, 0, 0, 1.0);
    let probs = array![[1.0, 0.0, 0.0], [0.9, 0.0, 0.0]];
    let d = discrepancy_from_probs(&probs, &asg).unwrap();
    let curve = conflict_curve(&d, &asg, &[0.5, 0.95, 1.0]).unwrap();
    assert_eq!(curve.ratios, vec![Some(1.0), Some(0.0), Some(0.0)]);
    assert_eq!(curve.counts, vec![(1, 1), (0, 1), (0, 1)]);
}

#[test]
fn perfect_teacher_and_no_positives() {
    let mut asg = AssignmentResult::<f64>::all_negative(4, 2);
    positive(&mut asg, 2, 1, 1.0);
    let d = discrepancy_from_probs(&asg.cls_target.clone(), &asg).unwrap();
    let curve = conflict_curve(&d, &asg, &default_thresholds()).unwrap();
    assert!(curve.ratios.iter().all(|r| *r == Some(0.0)));

    let empty = AssignmentResult::<f64>::all_negative(4, 2);
    let curve = conflict_curve(&[0.7; 4], &empty, &[0.5]).unwrap();
    assert_eq!(curve.ratios, vec![None]);
    assert_eq!(curve.counts, vec![(4, 0)]);
}

#[test]
fn thresholds_must_ascend_within_unit_interval() {
    let asg = AssignmentResult::<f64>::all_negative(1, 1);
    assert!(conflict_curve(&[0.1], &asg, &[0.5, 0.2]).is_err());
    assert!(conflict_curve(&[0.1], &asg, &[1.5]).is_err());
    assert!(conflict_curve(&[0.1, 0.2], &asg, &[0.5]).is_err());
}

#[test]
fn random_curves_are_monotone_and_bounded() {
    let mut r = rng(40);
    for _ in 0..100 {
        let n = r.random_range(1..60);
        let c = r.random_range(1..5);
        let mut asg = AssignmentResult::<f64>::all_negative(n, c);
        for loc in 0..n {
            if r.random_bool(0.3) {
                positive(&mut asg, loc, r.random_range(0..c), r.random_range(0.0..=1.0));
            }
        }
        let probs = Array2::from_shape_simple_fn((n, c), || r.random_range(0.0..=1.0));
        let d = discrepancy_from_probs(&probs, &asg).unwrap();
        assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
        let curve = conflict_curve(&d, &asg, &default_thresholds()).unwrap();
        for w in curve.counts.windows(2) {
            assert!(w[1].0 <= w[0].0);
        }
        if let Some(last) = curve.ratios.last().copied().flatten() {
            assert_eq!(last, 0.0);
        }
        assert_eq!(curve, conflict_curve(&d, &asg, &default_thresholds()).unwrap());
    }
}

#[test]
fn discrepancy_map_uses_teacher_sigmoid() {
    let mut r = rng(41);
    let preds = random_preds(&mut r, 3, RegMode::BoxOffsets);
    let asg = AssignmentResult::<f64>::all_negative(5, 3);
    let d = discrepancy_map(&preds, &asg).unwrap();
    let expected = (0..3).map(|c| sigmoid(preds[0].cls_logits[[c, 0, 1]])).fold(0.0, f64::max);
    assert!((d[1] - expected).abs() < 1e-12);
}

#[test]
fn prediction_dump_round_trip() {
    let mut r = rng(42);
    let preds = random_preds(&mut r, 3, RegMode::BoxOffsets);
    let mut buf = b"# config_hash=abc\n".to_vec();
    write_prediction_dump(&mut buf, &preds).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.contains("level,row,col,class_0,class_1,class_2"));
    let grid = PointGrid::new(vec![
        LevelGrid { height: 2, width: 2, stride: 8 },
        LevelGrid { height: 1, width: 1, stride: 16 },
    ]);
    let probs: Array2<f64> = read_prediction_dump(buf.as_slice(), &grid).unwrap();
    assert_eq!(probs, cls_matrix(&preds).mapv(sigmoid));
    let truncated: String = text.lines().take(4).collect::<Vec<_>>().join("\n");
    assert!(read_prediction_dump::<f64, _>(truncated.as_bytes(), &grid).is_err());
}

#[test]
fn curve_csv_round_trip() {
    let curve = ConflictCurve {
        thresholds: vec![0.0, 0.5, 1.0],
        ratios: vec![Some(2.5), Some(0.25), None],
        counts: vec![(10, 4), (1, 4), (0, 0)],
    };
    let mut buf = Vec::new();
    write_curve_csv(&mut buf, &curve).unwrap();
    assert!(String::from_utf8(buf.clone()).unwrap().starts_with("threshold,ratio,conflict_count,positive_count\n"));
    assert_eq!(read_curve_csv(buf.as_slice()).unwrap(), curve);
}

#[test]
fn report_edge_cases() {
    let spec = DetectorSpec::default();
    let a = DetectorModel::<f64>::new(spec.clone(), 1).unwrap();
    let b = a.clone();
    let teachers = vec![("a".to_string(), &a), ("b".to_string(), &b)];
    let assigner = AssignerConfig::Center { radius_factor: 1.5 };
    assert!(cross_assigner_report(&teachers, &assigner, &[], &[0.5]).unwrap().is_empty());

    let image = ndarray::Array3::from_elem((1, 64, 64), 0.3);
    let gts = GroundTruth::new(vec![crate::assign::Instance {
        bbox: crate::geometry::BBox::new(10.0, 12.0, 40.0, 38.0),
        class_id: 1,
    }]);
    let report = cross_assigner_report(&teachers, &assigner, &[(image, gts)], &default_thresholds()).unwrap();
    assert_eq!(report.len(), 2);
    assert_eq!(report[0].1, report[1].1);
    assert!(report[0].1.dominates(&report[1].1));
}
