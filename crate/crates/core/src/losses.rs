//! Prediction distances and region-weighted reduction.
//!
//! Every distance comes with its analytic derivative with respect to the
//! student-side argument; the target side is always treated as a constant.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::{log_softmax, sigmoid, softmax, Scalar};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Per-location weights `S(r)` and their normalizer `|S|`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionWeights<T> {
    weights: Vec<T>,
    normalizer: T,
}

impl<T: Scalar> RegionWeights<T> {
    pub fn new(weights: Vec<T>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= T::zero())) {
            return Err(Error::contract("region weights must be finite and non-negative"));
        }
        let normalizer = weights.iter().copied().sum();
        Ok(Self { weights, normalizer })
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn normalizer(&self) -> T {
        self.normalizer
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Multiplier applied to `d term(r)` when differentiating the reduction.
    pub fn grad_scale(&self, r: usize) -> T {
        if self.normalizer > T::zero() {
            self.weights[r] / self.normalizer
        } else {
            T::zero()
        }
    }
}

/// `S ≡ 1` over `len` locations.
pub fn region_constant<T: Scalar>(len: usize) -> RegionWeights<T> {
    RegionWeights {
        weights: vec![T::one(); len],
        normalizer: T::from_usize_lossy(len),
    }
}

/// `Σ S(r) term(r) / |S|`, or zero when `|S| = 0`.
pub fn weighted_reduce<T: Scalar>(per_location: &[T], region: &RegionWeights<T>) -> Result<T> {
    if per_location.len() != region.len() {
        return Err(Error::contract(format!(
            "{} terms but {} region weights",
            per_location.len(),
            region.len()
        )));
    }
    if region.normalizer <= T::zero() {
        return Ok(T::zero());
    }
    let total: T = per_location
        .iter()
        .zip(&region.weights)
        .map(|(&t, &w)| w * t)
        .sum();
    Ok(total / region.normalizer)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossValue<T> {
    pub scalar: T,
    pub per_location: Option<Vec<T>>,
}

impl<T: Scalar> LossValue<T> {
    pub fn reduced(per_location: Vec<T>, region: &RegionWeights<T>) -> Result<Self> {
        let scalar = weighted_reduce(&per_location, region)?;
        Ok(Self { scalar, per_location: Some(per_location) })
    }

    pub fn zero() -> Self {
        Self { scalar: T::zero(), per_location: None }
    }
}

/// How per-class terms combine into one per-location term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassReduction {
    #[default]
    Sum,
    Mean,
}

impl ClassReduction {
    pub fn factor<T: Scalar>(self, classes: usize) -> T {
        match self {
            ClassReduction::Sum => T::one(),
            ClassReduction::Mean => T::one() / T::from_usize_lossy(classes.max(1)),
        }
    }
}

fn clamp_prob<T: Scalar>(s: T) -> (T, bool) {
    let lo = T::lit(PROB_EPS);
    let hi = T::one() - lo;
    if s < lo {
        (lo, true)
    } else if s > hi {
        (hi, true)
    } else {
        (s, false)
    }
}

/// Soft-target binary cross entropy of one logit and its derivative.
pub fn bce_elem<T: Scalar>(logit: T, target: T) -> (T, T) {
    let (s, clamped) = clamp_prob(sigmoid(logit));
    let value = -(target * s.ln() + (T::one() - target) * (T::one() - s).ln());
    let grad = if clamped { T::zero() } else { s - target };
    (value, grad)
}

/// `|σ(p) − t|^γ · BCE(σ(p), t)` and its derivative with respect to `p`.
pub fn qfl_elem<T: Scalar>(logit: T, target: T, gamma: T) -> (T, T) {
    let raw = sigmoid(logit);
    let (s, clamped) = clamp_prob(raw);
    let bce = -(target * s.ln() + (T::one() - target) * (T::one() - s).ln());
    if gamma == T::zero() {
        let grad = if clamped { T::zero() } else { s - target };
        return (bce, grad);
    }
    let diff = raw - target;
    let gap = diff.abs();
    let factor = gap.powf(gamma);
    let value = factor * bce;
    let dfactor = if gap > T::zero() {
        gamma * gap.powf(gamma - T::one()) * diff.signum() * raw * (T::one() - raw)
    } else {
        T::zero()
    };
    if clamped {
        // BCE is constant in the clamped region; only the factor varies.
        return (value, dfactor * bce);
    }
    (value, dfactor * bce + factor * (s - target))
}

fn check_same_shape<T>(a: &ArrayView2<T>, b: &ArrayView2<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_probs<T: Scalar>(t: &ArrayView2<T>) -> Result<()> {
    if t.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::contract("targets must lie in [0, 1]"));
    }
    Ok(())
}

/// Elementwise loss over `(locations, classes)` and its logit gradient,
/// with classes combined per `reduction`.
fn elementwise<T: Scalar>(
    pred: ArrayView2<T>,
    target: ArrayView2<T>,
    reduction: ClassReduction,
    f: impl Fn(T, T) -> (T, T),
) -> Result<(Vec<T>, Array2<T>)> {
    check_same_shape(&pred, &target)?;
    check_probs(&target)?;
    let factor: T = reduction.factor(pred.ncols());
    let mut per_location = vec![T::zero(); pred.nrows()];
    let mut grad = Array2::zeros(pred.raw_dim());
    for ((r, c), &p) in pred.indexed_iter() {
        let (v, g) = f(p, target[[r, c]]);
        per_location[r] += v * factor;
        grad[[r, c]] = g * factor;
    }
    Ok((per_location, grad))
}

/// Quality focal loss with soft targets, summed over classes per location
/// and averaged over locations. Returns the loss and `d per_location / d logit`.
pub fn qfl<T: Scalar>(pred_logits: ArrayView2<T>, target_probs: ArrayView2<T>, gamma: T) -> Result<LossValue<T>> {
    Ok(qfl_with_grad(pred_logits, target_probs, gamma, ClassReduction::Sum)?.0)
}

pub fn qfl_with_grad<T: Scalar>(
    pred_logits: ArrayView2<T>,
    target_probs: ArrayView2<T>,
    gamma: T,
    reduction: ClassReduction,
) -> Result<(LossValue<T>, Array2<T>)> {
    if !(gamma >= T::zero()) {
        return Err(Error::contract("gamma must be >= 0"));
    }
    let (per, grad) = elementwise(pred_logits, target_probs, reduction, |p, t| qfl_elem(p, t, gamma))?;
    let region = region_constant(per.len());
    Ok((LossValue::reduced(per, &region)?, grad))
}

/// Soft-target BCE, summed over classes per location and averaged over locations.
pub fn bce_soft<T: Scalar>(pred_logits: ArrayView2<T>, target_probs: ArrayView2<T>) -> Result<LossValue<T>> {
    Ok(bce_soft_with_grad(pred_logits, target_probs, ClassReduction::Sum)?.0)
}

pub fn bce_soft_with_grad<T: Scalar>(
    pred_logits: ArrayView2<T>,
    target_probs: ArrayView2<T>,
    reduction: ClassReduction,
) -> Result<(LossValue<T>, Array2<T>)> {
    let (per, grad) = elementwise(pred_logits, target_probs, reduction, bce_elem)?;
    let region = region_constant(per.len());
    Ok((LossValue::reduced(per, &region)?, grad))
}

fn check_box<T: Scalar>(b: &BBox<T>, which: &str) -> Result<()> {
    if !b.is_valid() {
        return Err(Error::contract(format!("degenerate {which} box {:?}", b.to_array())));
    }
    Ok(())
}

/// Generalized IoU of two valid boxes.
pub fn giou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> Result<T> {
    Ok(giou_with_grad(a, b)?.0)
}

/// Generalized IoU and its gradient with respect to the coordinates of `a`.
pub fn giou_with_grad<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> Result<(T, [T; 4])> {
    check_box(a, "first")?;
    check_box(b, "second")?;
    let zero = T::zero();

    let ix1 = a.x1.max(b.x1);
    let iy1 = a.y1.max(b.y1);
    let ix2 = a.x2.min(b.x2);
    let iy2 = a.y2.min(b.y2);
    let iw_raw = ix2 - ix1;
    let ih_raw = iy2 - iy1;
    let (iw, ih) = (iw_raw.max(zero), ih_raw.max(zero));
    let inter = iw * ih;
    let (aw, ah) = (a.width(), a.height());
    let area_a = aw * ah;
    let union = area_a + b.area() - inter;

    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enclose = cw * ch;

    let value = inter / union - (enclose - union) / enclose;

    // d inter / d a
    let overlap = iw_raw > zero && ih_raw > zero;
    let mut d_inter = [zero; 4];
    if overlap {
        if a.x1 >= b.x1 {
            d_inter[0] = -ih;
        }
        if a.y1 >= b.y1 {
            d_inter[1] = -iw;
        }
        if a.x2 <= b.x2 {
            d_inter[2] = ih;
        }
        if a.y2 <= b.y2 {
            d_inter[3] = iw;
        }
    }
    let d_area = [-ah, -aw, ah, aw];
    let mut d_enc = [zero; 4];
    if a.x1 <= b.x1 {
        d_enc[0] = -ch;
    }
    if a.y1 <= b.y1 {
        d_enc[1] = -cw;
    }
    if a.x2 >= b.x2 {
        d_enc[2] = ch;
    }
    if a.y2 >= b.y2 {
        d_enc[3] = cw;
    }
    // giou = I/U − 1 + U/C
    let mut grad = [zero; 4];
    for k in 0..4 {
        let d_union = d_area[k] - d_inter[k];
        let d_iou = (d_inter[k] * union - inter * d_union) / (union * union);
        let d_ratio = (d_union * enclose - union * d_enc[k]) / (enclose * enclose);
        grad[k] = d_iou + d_ratio;
    }
    Ok((value, grad))
}

/// Per-location `1 − GIoU(pred, target)`, averaged over locations.
pub fn giou_loss<T: Scalar>(pred: &[BBox<T>], target: &[BBox<T>]) -> Result<LossValue<T>> {
    if pred.len() != target.len() {
        return Err(Error::contract("box list lengths differ"));
    }
    let per = pred
        .iter()
        .zip(target)
        .map(|(p, t)| giou(p, t).map(|g| T::one() - g))
        .collect::<Result<Vec<T>>>()?;
    let region = region_constant(per.len());
    LossValue::reduced(per, &region)
}

/// `KL(softmax(teacher/τ) ‖ softmax(student/τ))` for one edge distribution,
/// and its gradient with respect to the student logits.
pub fn ld_kl_with_grad<T: Scalar>(student: &[T], teacher: &[T], tau: T) -> Result<(T, Vec<T>)> {
    if !(tau > T::zero()) {
        return Err(Error::contract("temperature must be > 0"));
    }
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::contract("edge logit vectors must be non-empty and equal length"));
    }
    let s: Vec<T> = student.iter().map(|&v| v / tau).collect();
    let t: Vec<T> = teacher.iter().map(|&v| v / tau).collect();
    let log_q = log_softmax(&s);
    let log_p = log_softmax(&t);
    let p = softmax(&t);
    let q = softmax(&s);
    let value: T = p
        .iter()
        .zip(log_p.iter().zip(&log_q))
        .map(|(&pk, (&lp, &lq))| if pk > T::zero() { pk * (lp - lq) } else { T::zero() })
        .sum();
    // exact zero for identical inputs, clamp rounding below zero
    let value = value.max(T::zero());
    let grad = q.iter().zip(&p).map(|(&qk, &pk)| (qk - pk) / tau).collect();
    Ok((value, grad))
}

/// Single-edge localization distillation distance.
pub fn ld_kl<T: Scalar>(student: &[T], teacher: &[T], tau: T) -> Result<LossValue<T>> {
    let (v, _) = ld_kl_with_grad(student, teacher, tau)?;
    Ok(LossValue { scalar: v, per_location: Some(vec![v]) })
}

/// Mean over the four edges of one location's `4·(m+1)` regression logits.
pub fn ld_kl_location<T: Scalar>(student: &[T], teacher: &[T], tau: T) -> Result<(T, Vec<T>)> {
    if student.len() != teacher.len() || student.len() % 4 != 0 {
        return Err(Error::contract("location logits must hold four equal edge blocks"));
    }
    let m1 = student.len() / 4;
    let quarter = T::lit(0.25);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(student.len());
    for e in 0..4 {
        let (v, g) = ld_kl_with_grad(&student[e * m1..(e + 1) * m1], &teacher[e * m1..(e + 1) * m1], tau)?;
        total += v * quarter;
        grad.extend(g.into_iter().map(|x| x * quarter));
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn qfl_hand_value() {
        let l = qfl(array![[0.0f64]].view(), array![[1.0]].view(), 1.0).unwrap();
        assert!(close(l.scalar, 0.5 * 2.0f64.ln(), 1e-12));
        assert!(close(l.scalar, 0.346574, 1e-6));
    }

    #[test]
    fn qfl_zero_when_prediction_matches_target() {
        let p = 1.3f64;
        let t = sigmoid(p);
        assert_eq!(qfl_elem(p, t, 1.0).0, 0.0);
        assert_eq!(qfl_elem(p, t, 2.0).0, 0.0);
    }

    #[test]
    fn qfl_gamma_zero_is_bce() {
        let pred = array![[0.3f64, -2.0, 4.0], [1.0, 0.0, -0.5]];
        let tgt = array![[0.1f64, 0.9, 0.0], [1.0, 0.5, 0.25]];
        let (a, ga) = qfl_with_grad(pred.view(), tgt.view(), 0.0, ClassReduction::Sum).unwrap();
        let (b, gb) = bce_soft_with_grad(pred.view(), tgt.view(), ClassReduction::Sum).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
    }

    #[test]
    fn bce_hand_values() {
        let l = bce_soft(array![[0.0f64]].view(), array![[0.5]].view()).unwrap();
        assert!(close(l.scalar, 0.693147, 1e-6));
        // at t = σ(p) the loss equals the binary entropy of t
        let p = -0.8f64;
        let t = sigmoid(p);
        let entropy = -(t * t.ln() + (1.0 - t) * (1.0 - t).ln());
        assert!(close(bce_elem(p, t).0, entropy, 1e-12));
        assert!(bce_elem(-40.0f64, 0.0).0 < 1e-6);
    }

    #[test]
    fn targets_outside_unit_interval_rejected() {
        assert!(qfl(array![[0.0f64]].view(), array![[1.5]].view(), 1.0).is_err());
        assert!(bce_soft(array![[0.0f64, 1.0]].view(), array![[0.5]].view()).is_err());
    }

    #[test]
    fn giou_hand_values() {
        let a = BBox::new(0.0f64, 0.0, 1.0, 1.0);
        assert_eq!(giou(&a, &a).unwrap(), 1.0);
        let far = BBox::new(2.0, 2.0, 3.0, 3.0);
        assert!(close(giou(&a, &far).unwrap(), -7.0 / 9.0, 1e-12));
        let big = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert!(close(giou(&big, &a).unwrap(), 0.25, 1e-12));
        let l = giou_loss(&[a, a, big], &[a, far, a]).unwrap();
        let per = l.per_location.unwrap();
        assert_eq!(per[0], 0.0);
        assert!(close(per[1], 1.0 + 7.0 / 9.0, 1e-12));
        assert!(close(per[2], 0.75, 1e-12));
    }

    #[test]
    fn giou_rejects_degenerate_boxes() {
        let a = BBox::new(0.0f64, 0.0, 0.0, 1.0);
        let b = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert!(matches!(giou(&a, &b), Err(Error::Contract(_))));
    }

    #[test]
    fn ld_kl_hand_value() {
        let v = ld_kl(&[0.0f64, 1.0], &[1.0, 0.0], 1.0).unwrap().scalar;
        let p = sigmoid(1.0f64);
        assert!(close(v, (2.0 * p - 1.0) * 1.0, 1e-12));
        assert!(close(v, 0.462117, 1e-6));
        assert_eq!(ld_kl(&[0.3f64, -1.0, 2.0], &[0.3, -1.0, 2.0], 1.0).unwrap().scalar, 0.0);
        let hot = ld_kl(&[0.0f64, 5.0], &[5.0, 0.0], 1e6).unwrap().scalar;
        assert!(hot < 1e-9);
    }

    #[test]
    fn weighted_reduce_hand_values() {
        let w = RegionWeights::new(vec![1.0f64, 3.0]).unwrap();
        assert_eq!(weighted_reduce(&[2.0, 4.0], &w).unwrap(), 3.5);
        let single = RegionWeights::new(vec![0.0f64, 2.0, 0.0]).unwrap();
        assert_eq!(weighted_reduce(&[9.0, 5.0, 7.0], &single).unwrap(), 5.0);
        assert_eq!(region_constant::<f64>(4).normalizer(), 4.0);
        let empty = region_constant::<f64>(0);
        assert_eq!(weighted_reduce(&[], &empty).unwrap(), 0.0);
        assert!(weighted_reduce(&[1.0], &empty).is_err());
        assert!(RegionWeights::new(vec![-1.0f64]).is_err());
    }

    fn fd<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
    }

    proptest! {
        #[test]
        fn qfl_gradient_matches_fd(p in -6.0f64..6.0, t in 0.0f64..1.0, gamma in 0.0f64..3.0) {
            prop_assume!((sigmoid(p) - t).abs() > 1e-3);
            let g = qfl_elem(p, t, gamma).1;
            let num = fd(|x| qfl_elem(x, t, gamma).0, p);
            prop_assert!(rel_err(g, num) < 1e-4, "{g} vs {num}");
        }

        #[test]
        fn giou_symmetric_and_below_iou(
            a in prop::array::uniform4(0.0f64..10.0),
            b in prop::array::uniform4(0.0f64..10.0),
        ) {
            let ba = BBox::new(a[0].min(a[2]), a[1].min(a[3]), a[0].max(a[2]) + 0.1, a[1].max(a[3]) + 0.1);
            let bb = BBox::new(b[0].min(b[2]), b[1].min(b[3]), b[0].max(b[2]) + 0.1, b[1].max(b[3]) + 0.1);
            let g = giou(&ba, &bb).unwrap();
            prop_assert!((g - giou(&bb, &ba).unwrap()).abs() < 1e-12);
            prop_assert!(g <= ba.iou(&bb) + 1e-12);
            prop_assert!(g > -1.0 && g <= 1.0);
            prop_assert!((giou(&ba, &ba).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ld_kl_nonnegative_and_shift_invariant(
            s in prop::collection::vec(-4.0f64..4.0, 5),
            t in prop::collection::vec(-4.0f64..4.0, 5),
            shift in -3.0f64..3.0,
        ) {
            let v = ld_kl_with_grad(&s, &t, 1.5).unwrap().0;
            prop_assert!(v >= 0.0);
            let shifted: Vec<f64> = t.iter().map(|x| x + shift).collect();
            let v0 = ld_kl_with_grad(&t, &shifted, 1.5).unwrap().0;
            prop_assert!(v0 < 1e-12);
        }

        #[test]
        fn weighted_reduce_linear_and_scale_invariant(
            terms in prop::collection::vec(-5.0f64..5.0, 1..8),
            k in 0.1f64..10.0,
        ) {
            let weights: Vec<f64> = (0..terms.len()).map(|i| (i % 3) as f64 + 0.5).collect();
            let w = RegionWeights::new(weights.clone()).unwrap();
            let ws = RegionWeights::new(weights.iter().map(|x| x * k).collect()).unwrap();
            let base = weighted_reduce(&terms, &w).unwrap();
            prop_assert!((base - weighted_reduce(&terms, &ws).unwrap()).abs() < 1e-9);
            let doubled: Vec<f64> = terms.iter().map(|t| 2.0 * t).collect();
            prop_assert!((2.0 * base - weighted_reduce(&doubled, &w).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn ld_kl_zero_only_for_shifted_copies() {
        let v = ld_kl_with_grad(&[0.0f64, 1.0, 2.0], &[0.0, 1.0, 2.5], 1.0).unwrap().0;
        assert!(v > 0.0);
    }
}
