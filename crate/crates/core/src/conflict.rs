//! Target-conflict statistics: how far teacher classification outputs sit
//! from the targets an assigner hands the student.

use std::io::{Read, Write};

use ndarray::{Array2, Array3};

use crate::assign::{AssignerConfig, AssignmentResult, GroundTruth};
use crate::detector::{DetectorModel, PointGrid, PredictionMap};
use crate::error::{Error, Result};
use crate::objective::cls_matrix;
use crate::scalar::{sigmoid, Scalar};

/// Per-location `max_c |p(c) − target(c)|` for probabilities `(locations, classes)`.
pub fn discrepancy_from_probs<T: Scalar>(probs: &Array2<T>, assignment: &AssignmentResult<T>) -> Result<Vec<T>> {
    if probs.dim() != assignment.cls_target.dim() {
        return Err(Error::contract(format!(
            "probabilities {:?} vs targets {:?}",
            probs.dim(),
            assignment.cls_target.dim()
        )));
    }
    Ok(probs
        .rows()
        .into_iter()
        .zip(assignment.cls_target.rows())
        .map(|(p, t)| p.iter().zip(t.iter()).fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs())))
        .collect())
}

/// Teacher class probabilities against assigned targets, per location.
pub fn discrepancy_map<T: Scalar>(teacher_pred: &[PredictionMap<T>], assignment: &AssignmentResult<T>) -> Result<Vec<T>> {
    let probs = cls_matrix(teacher_pred).mapv(sigmoid);
    discrepancy_from_probs(&probs, assignment)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConflictCurve {
    pub thresholds: Vec<f64>,
    /// `None` when there were no positives to normalize by.
    pub ratios: Vec<Option<f64>>,
    /// `(conflict_count, positive_count)` per threshold.
    pub counts: Vec<(usize, usize)>,
}

impl ConflictCurve {
    /// True when `self` is at least `other` wherever both ratios are defined.
    pub fn dominates(&self, other: &ConflictCurve) -> bool {
        self.thresholds == other.thresholds
            && self
                .ratios
                .iter()
                .zip(&other.ratios)
                .all(|(a, b)| match (a, b) {
                    (Some(a), Some(b)) => a >= b,
                    _ => true,
                })
    }

    pub fn ratio_at(&self, threshold: f64) -> Option<f64> {
        let k = self.thresholds.iter().position(|&t| t == threshold)?;
        self.ratios[k]
    }
}

pub fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    if thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::contract("thresholds must lie in [0, 1]"));
    }
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::contract("thresholds must be strictly ascending"));
    }
    Ok(())
}

/// Accumulates conflict counts over several images.
#[derive(Clone, Debug)]
pub struct ConflictCounter {
    thresholds: Vec<f64>,
    conflicts: Vec<usize>,
    positives: usize,
}

impl ConflictCounter {
    pub fn new(thresholds: &[f64]) -> Result<Self> {
        check_thresholds(thresholds)?;
        Ok(Self { thresholds: thresholds.to_vec(), conflicts: vec![0; thresholds.len()], positives: 0 })
    }

    pub fn add<T: Scalar>(&mut self, discrepancy: &[T], assignment: &AssignmentResult<T>) -> Result<()> {
        if discrepancy.len() != assignment.len() {
            return Err(Error::contract("discrepancy map and assignment differ in length"));
        }
        self.positives += assignment.num_positive();
        for (k, &t) in self.thresholds.iter().enumerate() {
            self.conflicts[k] += discrepancy.iter().filter(|d| d.to_f64_lossy() > t).count();
        }
        Ok(())
    }

    pub fn finish(&self) -> ConflictCurve {
        let ratios = self
            .conflicts
            .iter()
            .map(|&c| (self.positives > 0).then(|| c as f64 / self.positives as f64))
            .collect();
        ConflictCurve {
            thresholds: self.thresholds.clone(),
            ratios,
            counts: self.conflicts.iter().map(|&c| (c, self.positives)).collect(),
        }
    }
}

/// Counts locations whose discrepancy exceeds each threshold, relative to
/// the number of positive locations.
pub fn conflict_curve<T: Scalar>(
    discrepancy: &[T],
    assignment: &AssignmentResult<T>,
    thresholds: &[f64],
) -> Result<ConflictCurve> {
    let mut counter = ConflictCounter::new(thresholds)?;
    counter.add(discrepancy, assignment)?;
    Ok(counter.finish())
}

/// `0.0, 0.05, …, 1.0`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=20).map(|k| k as f64 / 20.0).collect()
}

/// One curve per teacher, each measured against the targets that
/// `student_assigner` produces on the same samples.
pub fn cross_assigner_report<T: Scalar>(
    teachers: &[(String, &DetectorModel<T>)],
    student_assigner: &AssignerConfig,
    samples: &[(Array3<T>, GroundTruth<T>)],
    thresholds: &[f64],
) -> Result<Vec<(String, ConflictCurve)>> {
    check_thresholds(thresholds)?;
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    student_assigner.validate()?;
    let mut report = Vec::with_capacity(teachers.len());
    for (name, model) in teachers {
        let mut counter = ConflictCounter::new(thresholds)?;
        for (image, gts) in samples {
            let (_, h, w) = image.dim();
            let grid = model.grid_for(h, w);
            let assignment = student_assigner.assign(&grid, gts, model.spec.head.num_classes)?;
            let out = model.forward(image)?;
            counter.add(&discrepancy_map(&out.predictions, &assignment)?, &assignment)?;
        }
        report.push((name.clone(), counter.finish()));
    }
    Ok(report)
}

/// Writes `level,row,col,class_0,…` with teacher class probabilities.
pub fn write_prediction_dump<T: Scalar, W: Write>(writer: W, preds: &[PredictionMap<T>]) -> Result<()> {
    let probs = cls_matrix(preds).mapv(sigmoid);
    let grid = crate::objective::grid_of(preds);
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["level".to_string(), "row".into(), "col".into()];
    header.extend((0..probs.ncols()).map(|c| format!("class_{c}")));
    w.write_record(&header)?;
    for (r, row) in probs.rows().into_iter().enumerate() {
        let (level, y, x) = grid.position(r);
        let mut rec = vec![level.to_string(), y.to_string(), x.to_string()];
        rec.extend(row.iter().map(|v| v.to_f64_lossy().to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<prediction dump>", e))
}

/// Reads a prediction dump back into `(locations, classes)` probabilities.
pub fn read_prediction_dump<T: Scalar, R: Read>(reader: R, grid: &PointGrid) -> Result<Array2<T>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let classes = rdr.headers()?.iter().filter(|h| h.starts_with("class_")).count();
    let mut probs = Array2::from_elem((grid.len(), classes), T::nan());
    let mut seen = vec![false; grid.len()];
    for rec in rdr.records() {
        let rec = rec?;
        let field = |k: usize| -> Result<&str> {
            rec.get(k).ok_or_else(|| Error::contract(format!("prediction dump row has {} fields", rec.len())))
        };
        let parse_usize = |k: usize| -> Result<usize> {
            field(k)?.parse().map_err(|_| Error::contract(format!("bad integer {:?}", field(k))))
        };
        let (level, y, x) = (parse_usize(0)?, parse_usize(1)?, parse_usize(2)?);
        if level >= grid.levels.len() || y >= grid.levels[level].height || x >= grid.levels[level].width {
            return Err(Error::contract(format!("location ({level}, {y}, {x}) outside the grid")));
        }
        let r = grid.index(level, y, x);
        for c in 0..classes {
            let v: f64 = field(3 + c)?.parse().map_err(|_| Error::contract("bad probability"))?;
            probs[[r, c]] = T::lit(v);
        }
        seen[r] = true;
    }
    if let Some(r) = seen.iter().position(|s| !s) {
        return Err(Error::contract(format!("prediction dump misses location {:?}", grid.position(r))));
    }
    Ok(probs)
}

/// Writes `threshold,ratio,conflict_count,positive_count`; an undefined
/// ratio is written as `undefined`.
pub fn write_curve_csv<W: Write>(writer: W, curve: &ConflictCurve) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["threshold", "ratio", "conflict_count", "positive_count"])?;
    for ((t, r), (c, p)) in curve.thresholds.iter().zip(&curve.ratios).zip(&curve.counts) {
        let ratio = r.map_or_else(|| "undefined".to_string(), |v| v.to_string());
        w.write_record([t.to_string(), ratio, c.to_string(), p.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<curve csv>", e))
}

pub fn read_curve_csv<R: Read>(reader: R) -> Result<ConflictCurve> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let mut curve = ConflictCurve { thresholds: Vec::new(), ratios: Vec::new(), counts: Vec::new() };
    for rec in rdr.records() {
        let rec = rec?;
        let bad = || Error::contract(format!("malformed curve row {rec:?}"));
        if rec.len() != 4 {
            return Err(bad());
        }
        curve.thresholds.push(rec[0].parse().map_err(|_| bad())?);
        curve.ratios.push(match &rec[1] {
            "undefined" => None,
            s => Some(s.parse().map_err(|_| bad())?),
        });
        curve.counts.push((rec[2].parse().map_err(|_| bad())?, rec[3].parse().map_err(|_| bad())?));
    }
    Ok(curve)
}

#[cfg(test)]
mod tests;
