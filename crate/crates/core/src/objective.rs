//! Loss terms evaluated on whole prediction maps, with gradients routed back
//! onto the maps: detection losses against assigned targets, prediction
//! distillation terms and feature imitation.

use ndarray::{concatenate, s, Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::assign::{quality_target, AssignmentResult, GroundTruth};
use crate::detector::{decode_all, FeatureMap, LevelGrid, PointGrid, PredictionMap, RegMode};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::losses::{bce_elem, giou_with_grad, ld_kl_location, qfl_elem, ClassReduction, LossValue};
use crate::scalar::{sigmoid, softmax, Scalar};

/// Gradient on each level's `[cls_logits, reg_output]`.
pub type MapGrads<T> = Vec<[Array3<T>; 2]>;

pub fn zero_map_grads<T: Scalar>(preds: &[PredictionMap<T>]) -> MapGrads<T> {
    preds
        .iter()
        .map(|p| [Array3::zeros(p.cls_logits.raw_dim()), Array3::zeros(p.reg_output.raw_dim())])
        .collect()
}

pub fn grid_of<T: Scalar>(preds: &[PredictionMap<T>]) -> PointGrid {
    PointGrid::new(
        preds
            .iter()
            .map(|p| LevelGrid { height: p.height(), width: p.width(), stride: p.stride })
            .collect(),
    )
}

/// Classification logits of all levels as `(locations, classes)`, rows in
/// [`PointGrid`] order.
pub fn cls_matrix<T: Scalar>(preds: &[PredictionMap<T>]) -> Array2<T> {
    let parts: Vec<Array2<T>> = preds
        .iter()
        .map(|p| {
            let (c, h, w) = p.cls_logits.dim();
            let flat = p.cls_logits.to_shape((c, h * w)).expect("contiguous map");
            flat.t().to_owned()
        })
        .collect();
    let views: Vec<ArrayView2<T>> = parts.iter().map(|a| a.view()).collect();
    concatenate(Axis(0), &views).expect("equal class count")
}

/// Inverse of [`cls_matrix`] for a gradient matrix.
pub fn cls_matrix_to_maps<T: Scalar>(grad: &Array2<T>, preds: &[PredictionMap<T>]) -> Vec<Array3<T>> {
    let mut offset = 0;
    preds
        .iter()
        .map(|p| {
            let (c, h, w) = p.cls_logits.dim();
            let block = grad.slice(s![offset..offset + h * w, ..]);
            offset += h * w;
            Array3::from_shape_fn((c, h, w), |(k, y, x)| block[[y * w + x, k]])
        })
        .collect()
}

/// Adds `d loss / d box` at one location onto the regression-logit gradient.
pub fn add_box_grad<T: Scalar>(
    grad: &mut Array3<T>,
    reg_output: &Array3<T>,
    reg_mode: RegMode,
    stride: usize,
    (row, col): (usize, usize),
    d_box: [T; 4],
) {
    let s = T::from_usize_lossy(stride);
    let d_dist = [-d_box[0], -d_box[1], d_box[2], d_box[3]];
    match reg_mode {
        RegMode::BoxOffsets => {
            for (e, &dd) in d_dist.iter().enumerate() {
                grad[[e, row, col]] += dd * s * sigmoid(reg_output[[e, row, col]]);
            }
        }
        RegMode::Distribution { bins } => {
            let m1 = bins + 1;
            for (e, &dd) in d_dist.iter().enumerate() {
                let logits = reg_output.slice(s![e * m1..(e + 1) * m1, row, col]).to_vec();
                let p = softmax(&logits);
                let mean: T = p.iter().enumerate().map(|(k, &pk)| T::from_usize_lossy(k) * pk).sum();
                for (k, &pk) in p.iter().enumerate() {
                    grad[[e * m1 + k, row, col]] += dd * s * pk * (T::from_usize_lossy(k) - mean);
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetLossConfig {
    /// Focusing exponent of the classification loss.
    pub cls_gamma: f64,
    /// Scale positive class targets by the IoU of the predicted box.
    pub quality_targets: bool,
}

impl Default for DetLossConfig {
    fn default() -> Self {
        Self { cls_gamma: 2.0, quality_targets: true }
    }
}

#[derive(Clone, Debug)]
pub struct DetectionLoss<T> {
    pub cls: T,
    pub reg: T,
    /// Gradient of `cls + reg` on the predictions.
    pub grads: MapGrads<T>,
}

/// Detection loss against assigned targets: quality focal loss over
/// non-ignored locations and `1 − GIoU` over positives, both divided by
/// `max(num_positive, 1)`.
pub fn detection_loss<T: Scalar>(
    preds: &[PredictionMap<T>],
    assignment: &AssignmentResult<T>,
    gts: &GroundTruth<T>,
    reg_mode: RegMode,
    cfg: &DetLossConfig,
) -> Result<DetectionLoss<T>> {
    let grid = grid_of(preds);
    if assignment.len() != grid.len() {
        return Err(Error::contract(format!(
            "assignment covers {} locations, predictions {}",
            assignment.len(),
            grid.len()
        )));
    }
    let boxes = decode_all(preds, reg_mode)?;
    let targets = if cfg.quality_targets {
        let q = quality_target(assignment, &boxes, gts)?;
        assignment.with_quality(&q)?
    } else {
        assignment.clone()
    };
    let norm = T::from_usize_lossy(assignment.num_positive().max(1));
    let gamma = T::lit(cfg.cls_gamma);

    let logits = cls_matrix(preds);
    if logits.ncols() != targets.num_classes() {
        return Err(Error::contract("class count differs between predictions and targets"));
    }
    let mut cls_grad = Array2::zeros(logits.raw_dim());
    let mut cls = T::zero();
    for r in 0..grid.len() {
        if assignment.ignored[r] {
            continue;
        }
        for c in 0..logits.ncols() {
            let (v, g) = qfl_elem(logits[[r, c]], targets.cls_target[[r, c]], gamma);
            cls += v;
            cls_grad[[r, c]] = g / norm;
        }
    }
    let mut grads = zero_map_grads(preds);
    for (level, g) in cls_matrix_to_maps(&cls_grad, preds).into_iter().enumerate() {
        grads[level][0] = g;
    }

    let mut reg = T::zero();
    for r in 0..grid.len() {
        let Some(inst) = assignment.assigned_instance[r].filter(|_| assignment.pos_mask[r]) else {
            continue;
        };
        let target = gts.instances[inst].bbox;
        let pred = boxes[r];
        // degenerate predicted boxes contribute nothing
        let Ok((g, dg)) = giou_with_grad(&pred, &target) else { continue };
        reg += T::one() - g;
        let (level, row, col) = grid.position(r);
        let p = &preds[level];
        let d_box = dg.map(|v| -v / norm);
        add_box_grad(&mut grads[level][1], &p.reg_output, reg_mode, p.stride, (row, col), d_box);
    }
    Ok(DetectionLoss { cls: cls / norm, reg: reg / norm, grads })
}

/// Distance used between classification maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsKdLoss {
    #[default]
    Qfl,
    Bce,
}

/// Distance used between regression maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegKdLoss {
    Giou,
    #[default]
    LdKl,
}

/// Classification distillation over every location (`S ≡ 1`): the per-class
/// distance between `source` logits and `σ(target)` combined per
/// `reduction`, averaged over locations. Returns the value and the gradient
/// on each level's source logits.
pub fn kd_cls_loss<T: Scalar>(
    source: &[PredictionMap<T>],
    target: &[PredictionMap<T>],
    loss: ClsKdLoss,
    gamma: T,
    reduction: ClassReduction,
) -> Result<(T, Vec<Array3<T>>)> {
    let s = cls_matrix(source);
    let t = cls_matrix(target).mapv(sigmoid);
    if s.dim() != t.dim() {
        return Err(Error::contract(format!("cls maps differ: {:?} vs {:?}", s.dim(), t.dim())));
    }
    let n = s.nrows();
    if n == 0 {
        return Ok((T::zero(), cls_matrix_to_maps(&s, source)));
    }
    let factor: T = reduction.factor(s.ncols());
    let scale = factor / T::from_usize_lossy(n);
    let mut total = T::zero();
    let mut grad = Array2::zeros(s.raw_dim());
    for ((r, c), &p) in s.indexed_iter() {
        let (v, g) = match loss {
            ClsKdLoss::Qfl => qfl_elem(p, t[[r, c]], gamma),
            ClsKdLoss::Bce => bce_elem(p, t[[r, c]]),
        };
        total += v;
        grad[[r, c]] = g * scale;
    }
    Ok((total * scale, cls_matrix_to_maps(&grad, source)))
}

/// Per-location maximum class probability of a prediction set.
pub fn max_class_prob<T: Scalar>(preds: &[PredictionMap<T>]) -> Vec<T> {
    cls_matrix(preds)
        .rows()
        .into_iter()
        .map(|row| row.iter().fold(T::zero(), |m, &v| m.max(sigmoid(v))))
        .collect()
}

/// Regression distillation weighted per location by `weights`, normalized by
/// their sum. Returns the value and the gradient on each level's source
/// regression output.
pub fn kd_reg_loss<T: Scalar>(
    source: &[PredictionMap<T>],
    target: &[PredictionMap<T>],
    weights: &[T],
    loss: RegKdLoss,
    reg_mode: RegMode,
    tau: T,
) -> Result<(T, Vec<Array3<T>>)> {
    let grid = grid_of(source);
    if grid_of(target) != grid || weights.len() != grid.len() {
        return Err(Error::contract("regression distillation inputs cover different locations"));
    }
    let mut grads: Vec<Array3<T>> = source.iter().map(|p| Array3::zeros(p.reg_output.raw_dim())).collect();
    let norm: T = weights.iter().copied().sum();
    if norm <= T::zero() {
        return Ok((T::zero(), grads));
    }
    let mut total = T::zero();
    match loss {
        RegKdLoss::Giou => {
            let sb = decode_all(source, reg_mode)?;
            let tb = decode_all(target, reg_mode)?;
            for r in 0..grid.len() {
                let w = weights[r];
                if w == T::zero() {
                    continue;
                }
                let Ok((g, dg)) = giou_with_grad(&sb[r], &tb[r]) else { continue };
                total += w * (T::one() - g);
                let (level, row, col) = grid.position(r);
                let p = &source[level];
                let d_box = dg.map(|v| -v * w / norm);
                add_box_grad(&mut grads[level], &p.reg_output, reg_mode, p.stride, (row, col), d_box);
            }
        }
        RegKdLoss::LdKl => {
            if !reg_mode.is_distribution() {
                return Err(Error::config("ld_kl distillation needs distribution regression"));
            }
            for r in 0..grid.len() {
                let w = weights[r];
                if w == T::zero() {
                    continue;
                }
                let (level, row, col) = grid.position(r);
                let sv = source[level].reg_output.slice(s![.., row, col]).to_vec();
                let tv = target[level].reg_output.slice(s![.., row, col]).to_vec();
                let (v, g) = ld_kl_location(&sv, &tv, tau)?;
                total += w * v;
                for (k, gk) in g.into_iter().enumerate() {
                    grads[level][[k, row, col]] += gk * w / norm;
                }
            }
        }
    }
    Ok((total / norm, grads))
}

const FEAT_EPS: f64 = 1e-6;

/// Channel-standardized mean squared difference and its gradient with
/// respect to `student`.
pub fn feat_imitation_with_grad<T: Scalar>(student: &Array3<T>, teacher: &Array3<T>) -> Result<(T, Array3<T>)> {
    if student.shape() != teacher.shape() {
        return Err(Error::contract(format!(
            "feature shapes differ: {:?} vs {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let (c, h, w) = student.dim();
    let n = h * w;
    let total = c * n;
    let mut grad = Array3::zeros(student.raw_dim());
    if total == 0 {
        return Ok((T::zero(), grad));
    }
    let eps = T::lit(FEAT_EPS);
    let nf = T::from_usize_lossy(n);
    let d = T::from_usize_lossy(total);
    let stats = |x: &[T]| {
        let mean = x.iter().copied().sum::<T>() / nf;
        let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        (mean, var.sqrt())
    };
    let mut value = T::zero();
    for ch in 0..c {
        let xs = student.slice(s![ch, .., ..]).iter().copied().collect::<Vec<T>>();
        let xt = teacher.slice(s![ch, .., ..]).iter().copied().collect::<Vec<T>>();
        let (ms, ss) = stats(&xs);
        let (mt, st) = stats(&xt);
        let zs: Vec<T> = xs.iter().map(|&v| (v - ms) / (ss + eps)).collect();
        let zt: Vec<T> = xt.iter().map(|&v| (v - mt) / (st + eps)).collect();
        let gz: Vec<T> = zs.iter().zip(&zt).map(|(&a, &b)| T::lit(2.0) * (a - b) / d).collect();
        value += zs.iter().zip(&zt).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>();

        let g_mean = gz.iter().copied().sum::<T>() / nf;
        let g_dot: T = gz.iter().zip(&xs).map(|(&g, &x)| g * (x - ms)).sum();
        let denom = ss + eps;
        let mut out = grad.slice_mut(s![ch, .., ..]);
        for (k, o) in out.iter_mut().enumerate() {
            let centered = xs[k] - ms;
            let mut v = (gz[k] - g_mean) / denom;
            if ss > T::zero() {
                v -= g_dot / (denom * denom) * centered / (nf * ss);
            }
            *o = v;
        }
    }
    Ok((value / d, grad))
}

/// Channel-standardized mean squared difference between two feature maps.
pub fn feat_imitation_loss<T: Scalar>(student: &FeatureMap<T>, teacher: &FeatureMap<T>) -> Result<LossValue<T>> {
    let (v, _) = feat_imitation_with_grad(&student.values, &teacher.values)?;
    Ok(LossValue { scalar: v, per_location: None })
}

/// Student boxes and target boxes at positives, for distance tracking.
pub fn positive_boxes<T: Scalar>(
    preds: &[PredictionMap<T>],
    assignment: &AssignmentResult<T>,
    gts: &GroundTruth<T>,
    reg_mode: RegMode,
) -> Result<Vec<(BBox<T>, BBox<T>)>> {
    let boxes = decode_all(preds, reg_mode)?;
    Ok((0..assignment.len())
        .filter(|&r| assignment.pos_mask[r])
        .filter_map(|r| assignment.assigned_instance[r].map(|i| (boxes[r], gts.instances[i].bbox)))
        .collect())
}
