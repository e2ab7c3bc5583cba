//! Per-location target assignment: fixed IoU thresholds, ATSS-style adaptive
//! selection, and center sampling.

use std::io::{Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::detector::PointGrid;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance<T> {
    pub bbox: BBox<T>,
    pub class_id: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth<T> {
    pub instances: Vec<Instance<T>>,
}

impl<T: Scalar> GroundTruth<T> {
    pub fn new(instances: Vec<Instance<T>>) -> Self {
        Self { instances }
    }

    pub fn empty() -> Self {
        Self { instances: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn validate(&self, width: T, height: T, num_classes: usize) -> Result<()> {
        for (i, inst) in self.instances.iter().enumerate() {
            let b = inst.bbox;
            if !b.is_valid() {
                return Err(Error::contract(format!("instance {i} has an invalid box")));
            }
            if b.x1 < T::zero() || b.y1 < T::zero() || b.x2 > width || b.y2 > height {
                return Err(Error::contract(format!("instance {i} lies outside the image")));
            }
            if inst.class_id >= num_classes {
                return Err(Error::contract(format!("instance {i} has class {}", inst.class_id)));
            }
        }
        Ok(())
    }
}

/// Per-location targets over a flattened [`PointGrid`].
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult<T> {
    /// `(locations, classes)` soft targets in `[0, 1]`.
    pub cls_target: Array2<T>,
    /// Edge distances `(l, t, r, b)` in pixels; meaningful only where positive.
    pub reg_target: Vec<[T; 4]>,
    pub pos_mask: Vec<bool>,
    /// Neither positive nor negative; excluded from detection losses.
    pub ignored: Vec<bool>,
    pub assigned_instance: Vec<Option<usize>>,
    pub assigned_class: Vec<Option<usize>>,
    /// Scale applied to the one-hot target of each positive.
    pub quality: Vec<T>,
}

impl<T: Scalar> AssignmentResult<T> {
    pub fn all_negative(locations: usize, num_classes: usize) -> Self {
        Self {
            cls_target: Array2::zeros((locations, num_classes)),
            reg_target: vec![[T::zero(); 4]; locations],
            pos_mask: vec![false; locations],
            ignored: vec![false; locations],
            assigned_instance: vec![None; locations],
            assigned_class: vec![None; locations],
            quality: vec![T::zero(); locations],
        }
    }

    pub fn len(&self) -> usize {
        self.pos_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos_mask.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.cls_target.ncols()
    }

    pub fn num_positive(&self) -> usize {
        self.pos_mask.iter().filter(|&&p| p).count()
    }

    /// Class of the positive at `r`.
    pub fn class_at(&self, r: usize) -> Option<usize> {
        if !self.pos_mask[r] {
            return None;
        }
        self.assigned_class[r]
    }

    fn set_positive(&mut self, r: usize, instance: usize, gt: &Instance<T>, center: (T, T)) {
        self.pos_mask[r] = true;
        self.ignored[r] = false;
        self.assigned_instance[r] = Some(instance);
        self.reg_target[r] = gt.bbox.edge_distances(center.0, center.1);
        self.cls_target.row_mut(r).fill(T::zero());
        self.cls_target[[r, gt.class_id]] = T::one();
        self.quality[r] = T::one();
        self.assigned_class[r] = Some(gt.class_id);
    }

    /// Rescales each positive's one-hot target to `quality[r]`.
    pub fn with_quality(&self, quality: &[T]) -> Result<Self> {
        if quality.len() != self.len() {
            return Err(Error::contract("quality length differs from location count"));
        }
        let mut out = self.clone();
        for r in 0..self.len() {
            if let Some(c) = self.assigned_class[r] {
                let q = quality[r].max(T::zero()).min(T::one());
                out.cls_target.row_mut(r).fill(T::zero());
                out.cls_target[[r, c]] = q;
                out.quality[r] = q;
            }
        }
        Ok(out)
    }

    fn check_invariants(&self) -> bool {
        self.pos_mask.iter().zip(&self.assigned_instance).all(|(&p, a)| !p || a.is_some())
            && self
                .cls_target
                .rows()
                .into_iter()
                .all(|row| row.iter().copied().sum::<T>() <= T::one() + T::lit(1e-9))
    }
}

/// Assignment rule and its hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum AssignerConfig {
    Iou { pos_thr: f64, neg_thr: f64 },
    Atss { top_k: usize },
    Center { radius_factor: f64 },
}

impl AssignerConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AssignerConfig::Iou { pos_thr, neg_thr } => {
                if !(0.0 <= neg_thr && neg_thr <= pos_thr && pos_thr <= 1.0) {
                    return Err(Error::config("iou assigner needs 0 <= neg_thr <= pos_thr <= 1"));
                }
            }
            AssignerConfig::Atss { top_k } => {
                if top_k == 0 {
                    return Err(Error::config("atss top_k must be >= 1"));
                }
            }
            AssignerConfig::Center { radius_factor } => {
                if !(radius_factor > 0.0) {
                    return Err(Error::config("center radius_factor must be > 0"));
                }
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            AssignerConfig::Iou { .. } => "iou",
            AssignerConfig::Atss { .. } => "atss",
            AssignerConfig::Center { .. } => "center",
        }
    }

    pub fn assign<T: Scalar>(
        &self,
        grid: &PointGrid,
        gts: &GroundTruth<T>,
        num_classes: usize,
    ) -> Result<AssignmentResult<T>> {
        self.validate()?;
        match *self {
            AssignerConfig::Iou { pos_thr, neg_thr } => {
                assign_iou(grid, gts, T::lit(pos_thr), T::lit(neg_thr), num_classes)
            }
            AssignerConfig::Atss { top_k } => assign_atss(grid, gts, top_k, num_classes),
            AssignerConfig::Center { radius_factor } => {
                assign_center(grid, gts, T::lit(radius_factor), num_classes)
            }
        }
    }
}

/// Square anchor of side `4 · stride` centered on a location.
pub fn anchor_box<T: Scalar>(grid: &PointGrid, r: usize) -> BBox<T> {
    let (cx, cy) = grid.center::<T>(r);
    BBox::centered(cx, cy, T::from_usize_lossy(4 * grid.stride_of(r)))
}

fn check_classes<T: Scalar>(gts: &GroundTruth<T>, num_classes: usize) -> Result<()> {
    if let Some(inst) = gts.instances.iter().find(|i| i.class_id >= num_classes) {
        return Err(Error::contract(format!("class {} out of range", inst.class_id)));
    }
    Ok(())
}

/// Fixed-threshold IoU assignment with one square anchor per location.
pub fn assign_iou<T: Scalar>(
    grid: &PointGrid,
    gts: &GroundTruth<T>,
    pos_thr: T,
    neg_thr: T,
    num_classes: usize,
) -> Result<AssignmentResult<T>> {
    if !(T::zero() <= neg_thr && neg_thr <= pos_thr && pos_thr <= T::one()) {
        return Err(Error::contract("need 0 <= neg_thr <= pos_thr <= 1"));
    }
    check_classes(gts, num_classes)?;
    let mut out = AssignmentResult::all_negative(grid.len(), num_classes);
    if gts.is_empty() {
        return Ok(out);
    }
    for r in 0..grid.len() {
        let anchor = anchor_box::<T>(grid, r);
        let mut best = (T::neg_infinity(), 0usize);
        for (g, inst) in gts.instances.iter().enumerate() {
            let iou = anchor.iou(&inst.bbox);
            if iou > best.0 {
                best = (iou, g);
            }
        }
        if best.0 >= pos_thr {
            out.set_positive(r, best.1, &gts.instances[best.1], grid.center(r));
        } else if best.0 >= neg_thr {
            out.ignored[r] = true;
        }
    }
    debug_assert!(out.check_invariants());
    Ok(out)
}

/// Indices of the `k` locations of `level` closest to `(x, y)`, ties broken
/// by lower index.
fn nearest_in_level<T: Scalar>(grid: &PointGrid, level: usize, x: T, y: T, k: usize) -> Vec<usize> {
    let lg = grid.levels[level];
    let start = grid.level_offset(level);
    let mut idx: Vec<(T, usize)> = (start..start + lg.height * lg.width)
        .map(|r| {
            let (cx, cy) = grid.center::<T>(r);
            let d = ((cx - x) * (cx - x) + (cy - y) * (cy - y)).sqrt();
            (d, r)
        })
        .collect();
    let cmp = |a: &(T, usize), b: &(T, usize)| a.0.partial_cmp(&b.0).expect("finite").then(a.1.cmp(&b.1));
    let k = k.min(idx.len());
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx.truncate(k);
    idx.into_iter().map(|(_, r)| r).collect()
}

/// Adaptive training sample selection.
///
/// Per instance, the `top_k` nearest locations of each level are candidates;
/// the IoU threshold is the mean plus sample standard deviation of the
/// candidates' anchor IoUs. Candidates at or above it whose centers lie
/// strictly inside the box become positives. A location claimed by several
/// instances goes to the highest IoU, ties to the lower instance index.
pub fn assign_atss<T: Scalar>(
    grid: &PointGrid,
    gts: &GroundTruth<T>,
    top_k: usize,
    num_classes: usize,
) -> Result<AssignmentResult<T>> {
    if top_k == 0 {
        return Err(Error::contract("top_k must be >= 1"));
    }
    check_classes(gts, num_classes)?;
    let mut out = AssignmentResult::all_negative(grid.len(), num_classes);
    let mut claim: Vec<Option<(T, usize)>> = vec![None; grid.len()];
    for (g, inst) in gts.instances.iter().enumerate() {
        let (gx, gy) = inst.bbox.center();
        let candidates: Vec<usize> = (0..grid.levels.len())
            .flat_map(|l| nearest_in_level(grid, l, gx, gy, top_k))
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let ious: Vec<T> = candidates.iter().map(|&r| anchor_box::<T>(grid, r).iou(&inst.bbox)).collect();
        let thr = mean_plus_std(&ious);
        for (&r, &iou) in candidates.iter().zip(&ious) {
            let (cx, cy) = grid.center::<T>(r);
            if iou >= thr && inst.bbox.contains_point(cx, cy) {
                let better = match claim[r] {
                    None => true,
                    Some((best, _)) => iou > best,
                };
                if better {
                    claim[r] = Some((iou, g));
                }
            }
        }
    }
    for (r, c) in claim.into_iter().enumerate() {
        if let Some((_, g)) = c {
            out.set_positive(r, g, &gts.instances[g], grid.center(r));
        }
    }
    debug_assert!(out.check_invariants());
    Ok(out)
}

fn mean_plus_std<T: Scalar>(values: &[T]) -> T {
    let n = T::from_usize_lossy(values.len());
    let mean = values.iter().copied().sum::<T>() / n;
    if values.len() < 2 {
        return mean;
    }
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / (n - T::one());
    mean + var.sqrt()
}

/// Center sampling: positive when the location lies inside the box and
/// within `radius_factor · stride` of the box center along both axes.
/// Overlaps go to the smallest-area instance, ties to the lower index.
pub fn assign_center<T: Scalar>(
    grid: &PointGrid,
    gts: &GroundTruth<T>,
    radius_factor: T,
    num_classes: usize,
) -> Result<AssignmentResult<T>> {
    if !(radius_factor > T::zero()) {
        return Err(Error::contract("radius_factor must be > 0"));
    }
    check_classes(gts, num_classes)?;
    let mut out = AssignmentResult::all_negative(grid.len(), num_classes);
    for r in 0..grid.len() {
        let (cx, cy) = grid.center::<T>(r);
        let radius = radius_factor * T::from_usize_lossy(grid.stride_of(r));
        let mut best: Option<(T, usize)> = None;
        for (g, inst) in gts.instances.iter().enumerate() {
            let (gx, gy) = inst.bbox.center();
            let near = (cx - gx).abs() <= radius && (cy - gy).abs() <= radius;
            if near && inst.bbox.contains_point(cx, cy) {
                let area = inst.bbox.area();
                if best.is_none_or(|(a, _)| area < a) {
                    best = Some((area, g));
                }
            }
        }
        if let Some((_, g)) = best {
            out.set_positive(r, g, &gts.instances[g], (cx, cy));
        }
    }
    debug_assert!(out.check_invariants());
    Ok(out)
}

/// IoU of each positive's decoded box with its assigned instance; zero elsewhere.
pub fn quality_target<T: Scalar>(
    assignment: &AssignmentResult<T>,
    decoded_boxes: &[BBox<T>],
    gts: &GroundTruth<T>,
) -> Result<Vec<T>> {
    if decoded_boxes.len() != assignment.len() {
        return Err(Error::contract("decoded boxes do not cover every location"));
    }
    Ok((0..assignment.len())
        .map(|r| match (assignment.pos_mask[r], assignment.assigned_instance[r]) {
            (true, Some(g)) => decoded_boxes[r].iou(&gts.instances[g].bbox),
            _ => T::zero(),
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct AssignmentRow {
    level: usize,
    row: usize,
    col: usize,
    /// 1 positive, 0 negative, -1 ignored
    pos: i8,
    /// -1 when not positive
    class: i64,
    l: f64,
    t: f64,
    r: f64,
    b: f64,
    quality: f64,
}

/// Writes `level,row,col,pos,class,l,t,r,b,quality`. `pos` is 1 for positives,
/// 0 for negatives and -1 for ignored locations; `class` is -1 off positives.
pub fn write_assignment_csv<T: Scalar, W: Write>(
    writer: W,
    grid: &PointGrid,
    assignment: &AssignmentResult<T>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in 0..assignment.len() {
        let (level, row, col) = grid.position(r);
        let pos = if assignment.pos_mask[r] {
            1
        } else if assignment.ignored[r] {
            -1
        } else {
            0
        };
        let d = assignment.reg_target[r];
        w.serialize(AssignmentRow {
            level,
            row,
            col,
            pos,
            class: assignment.assigned_class[r].filter(|_| assignment.pos_mask[r]).map_or(-1, |c| c as i64),
            l: d[0].to_f64_lossy(),
            t: d[1].to_f64_lossy(),
            r: d[2].to_f64_lossy(),
            b: d[3].to_f64_lossy(),
            quality: assignment.quality[r].to_f64_lossy(),
        })?;
    }
    w.flush().map_err(|e| Error::io("<assignment csv>", e))?;
    Ok(())
}

/// Inverse of [`write_assignment_csv`]. Instance indices are not stored, so
/// positives get their row order as a stand-in index.
pub fn read_assignment_csv<T: Scalar, R: Read>(
    reader: R,
    grid: &PointGrid,
    num_classes: usize,
) -> Result<AssignmentResult<T>> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let mut out = AssignmentResult::all_negative(grid.len(), num_classes);
    let mut seen = vec![false; grid.len()];
    for rec in rd.deserialize() {
        let row: AssignmentRow = rec?;
        if row.level >= grid.levels.len()
            || row.row >= grid.levels[row.level].height
            || row.col >= grid.levels[row.level].width
        {
            return Err(Error::contract(format!("row ({}, {}, {}) outside grid", row.level, row.row, row.col)));
        }
        let r = grid.index(row.level, row.row, row.col);
        seen[r] = true;
        match row.pos {
            1 => {
                if row.class < 0 || row.class as usize >= num_classes {
                    return Err(Error::contract(format!("positive with class {}", row.class)));
                }
                let c = row.class as usize;
                out.pos_mask[r] = true;
                out.assigned_instance[r] = Some(r);
                out.assigned_class[r] = Some(c);
                out.reg_target[r] = [T::lit(row.l), T::lit(row.t), T::lit(row.r), T::lit(row.b)];
                out.quality[r] = T::lit(row.quality);
                out.cls_target[[r, c]] = T::lit(row.quality);
            }
            -1 => out.ignored[r] = true,
            0 => {}
            other => return Err(Error::contract(format!("bad pos flag {other}"))),
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::contract("assignment csv does not cover every location"));
    }
    Ok(out)
}
