//! Single-threshold average precision with greedy score-ordered matching.

use serde::{Deserialize, Serialize};

use super::dataset::Sample;
use crate::detector::{decode_all, DetectorModel, PredictionMap, RegMode};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::objective::cls_matrix;
use crate::scalar::{sigmoid, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_thr: f64,
    pub score_thr: f64,
    pub max_dets: usize,
    /// Class-wise suppression threshold applied before matching.
    pub nms_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_thr: 0.5, score_thr: 0.05, max_dets: 100, nms_iou: 0.6 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("iou_thr", self.iou_thr), ("score_thr", self.score_thr), ("nms_iou", self.nms_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox<f64>,
    pub class_id: usize,
    pub score: f64,
}

/// Greedy class-wise non-maximum suppression; output sorted by descending score.
pub fn nms(mut dets: Vec<Detection>, iou_thr: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut keep: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if keep.iter().all(|k| k.class_id != d.class_id || k.bbox.iou(&d.bbox) <= iou_thr) {
            keep.push(d);
        }
    }
    keep
}

/// Scored boxes of one image: every (location, class) above the score
/// threshold, suppressed and truncated to `max_dets`.
pub fn detect<T: Scalar>(preds: &[PredictionMap<T>], reg_mode: RegMode, cfg: &EvalConfig) -> Result<Vec<Detection>> {
    let boxes = decode_all(preds, reg_mode)?;
    let probs = cls_matrix(preds).mapv(|v| sigmoid(v).to_f64_lossy());
    let mut dets = Vec::new();
    for (r, row) in probs.rows().into_iter().enumerate() {
        let bbox = boxes[r].cast::<f64>();
        if !bbox.is_valid() {
            continue;
        }
        for (c, &p) in row.iter().enumerate() {
            if p >= cfg.score_thr {
                dets.push(Detection { bbox, class_id: c, score: p });
            }
        }
    }
    let mut kept = nms(dets, cfg.nms_iou);
    kept.truncate(cfg.max_dets);
    Ok(kept)
}

/// Score-ordered true-positive flags: each detection, in descending score
/// order (ties keep input order), takes the unmatched ground truth of its
/// image with the highest IoU (lowest index on ties) if that IoU reaches
/// `iou_thr`.
pub fn greedy_matches(dets: &[(usize, f64, BBox<f64>)], gts: &[Vec<BBox<f64>>], iou_thr: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].1.total_cmp(&dets[a].1));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    order
        .into_iter()
        .map(|k| {
            let (img, _, bbox) = dets[k];
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts[img].iter().enumerate() {
                if used[img][j] {
                    continue;
                }
                let iou = bbox.iou(g);
                if iou >= iou_thr && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            match best {
                Some((j, _)) => {
                    used[img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Area under the all-points interpolated precision-recall curve.
pub fn ap_from_flags(tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
        }
        precision.push(hits as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let step = 1.0 / n_gt as f64;
    tp.iter().zip(&precision).filter(|(&t, _)| t).fold(0.0, |acc, (_, &p)| acc + p * step)
}

/// AP of one class; `dets` are `(image, score, box)` and `gts[image]` the
/// class's boxes. `None` when the class has no ground truth.
pub fn class_ap(dets: &[(usize, f64, BBox<f64>)], gts: &[Vec<BBox<f64>>], iou_thr: f64) -> Option<f64> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    Some(ap_from_flags(&greedy_matches(dets, gts, iou_thr), n_gt))
}

/// Mean AP over classes present in the ground truth of `per_image`.
pub fn mean_ap<T: Scalar>(per_image: &[(Vec<Detection>, &crate::assign::GroundTruth<T>)], num_classes: usize, iou_thr: f64) -> f64 {
    let mut aps = Vec::new();
    for c in 0..num_classes {
        let mut dets = Vec::new();
        let mut gts = Vec::with_capacity(per_image.len());
        for (img, (d, g)) in per_image.iter().enumerate() {
            dets.extend(d.iter().filter(|x| x.class_id == c).map(|x| (img, x.score, x.bbox)));
            gts.push(
                g.instances
                    .iter()
                    .filter(|i| i.class_id == c)
                    .map(|i| i.bbox.cast::<f64>())
                    .collect::<Vec<_>>(),
            );
        }
        if let Some(ap) = class_ap(&dets, &gts, iou_thr) {
            aps.push(ap);
        }
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().fold(0.0, |a, b| a + b) / aps.len() as f64
    }
}

/// Mean AP of `model` over `samples`.
pub fn evaluate_ap<T: Scalar>(model: &DetectorModel<T>, samples: &[Sample<T>], cfg: &EvalConfig) -> Result<f64> {
    cfg.validate()?;
    let mut per_image = Vec::with_capacity(samples.len());
    for s in samples {
        let out = model.forward(&s.image)?;
        per_image.push((detect(&out.predictions, model.spec.head.reg_mode, cfg)?, &s.gts));
    }
    Ok(mean_ap(&per_image, model.spec.head.num_classes, cfg.iou_thr))
}
