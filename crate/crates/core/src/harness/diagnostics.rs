//! Distance tracking between student, teacher and targets, and gradient
//! heatmaps on delivered features.

use std::io::Write;

use ndarray::Array2;

use crate::assign::{AssignmentResult, GroundTruth};
use crate::detector::{decode_all, Branch, DetectorModel, PredictionMap, RegMode};
use crate::engine::{distill_signals, DistillConfig, TeacherView};
use crate::error::{Error, Result};
use crate::objective::{cls_matrix, DetLossConfig};
use crate::scalar::{sigmoid, Scalar};

/// Averaged L1 distances; `NaN` where the averaging population is empty.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Distances {
    /// Mean over all locations and classes of `|σ(p^s) − σ(p^t)|`.
    pub l1_pred_teacher: f64,
    /// Mean over positives of `|σ(p^s_c) − target_c|` at the assigned class `c`.
    pub l1_cls_gt: f64,
    /// Mean absolute decoded edge gap in pixels over positives.
    pub l1_box_gt: f64,
}

/// Running sums behind [`Distances`], pooled over images.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DistanceSums {
    pred_teacher: (f64, usize),
    cls_gt: (f64, usize),
    box_gt: (f64, usize),
}

impl DistanceSums {
    /// Adds one image. Classification distances are taken against
    /// `assignment.cls_target` as given, so that students trained under
    /// different losses are measured against the same targets.
    pub fn add<T: Scalar>(
        &mut self,
        student: &[PredictionMap<T>],
        teacher: Option<&[PredictionMap<T>]>,
        assignment: &AssignmentResult<T>,
        gts: &GroundTruth<T>,
        reg_mode: RegMode,
    ) -> Result<()> {
        let s = cls_matrix(student).mapv(|v| sigmoid(v).to_f64_lossy());
        if s.nrows() != assignment.len() || s.ncols() != assignment.num_classes() {
            return Err(Error::contract("assignment does not match student predictions"));
        }
        if let Some(t) = teacher {
            let t = cls_matrix(t).mapv(|v| sigmoid(v).to_f64_lossy());
            if t.dim() != s.dim() {
                return Err(Error::contract("teacher and student prediction shapes differ"));
            }
            self.pred_teacher.0 += s.iter().zip(&t).map(|(a, b)| (a - b).abs()).sum::<f64>();
            self.pred_teacher.1 += s.len();
        }
        if assignment.num_positive() == 0 {
            return Ok(());
        }
        let boxes = decode_all(student, reg_mode)?;
        for r in (0..assignment.len()).filter(|&r| assignment.pos_mask[r]) {
            let c = assignment.assigned_class[r].expect("positive has a class");
            self.cls_gt.0 += (s[[r, c]] - assignment.cls_target[[r, c]].to_f64_lossy()).abs();
            self.cls_gt.1 += 1;
            let g = gts.instances[assignment.assigned_instance[r].expect("positive has an instance")].bbox;
            let gap = boxes[r].to_array().iter().zip(g.to_array()).map(|(a, b)| (*a - b).abs().to_f64_lossy()).sum::<f64>();
            self.box_gt.0 += gap;
            self.box_gt.1 += 4;
        }
        Ok(())
    }

    pub fn finish(&self) -> Distances {
        let mean = |(s, n): (f64, usize)| if n == 0 { f64::NAN } else { s / n as f64 };
        Distances {
            l1_pred_teacher: mean(self.pred_teacher),
            l1_cls_gt: mean(self.cls_gt),
            l1_box_gt: mean(self.box_gt),
        }
    }
}

/// Distances of a single image.
pub fn track_distances<T: Scalar>(
    student: &[PredictionMap<T>],
    teacher: Option<&[PredictionMap<T>]>,
    assignment: &AssignmentResult<T>,
    gts: &GroundTruth<T>,
    reg_mode: RegMode,
) -> Result<Distances> {
    let mut sums = DistanceSums::default();
    sums.add(student, teacher, assignment, gts, reg_mode)?;
    Ok(sums.finish())
}

/// Per level, the channel-wise L2 norm at each location of the distillation
/// gradient on the student's delivered feature `f_i` (both branches
/// together; the predictions when `i = n`).
pub fn grad_heatmap<T: Scalar>(
    teacher: &DetectorModel<T>,
    student: &DetectorModel<T>,
    image: &ndarray::Array3<T>,
    config: &DistillConfig,
) -> Result<Vec<Array2<T>>> {
    let n = student.n_layers();
    config.validate(n)?;
    let i = config.effective_split(n);
    let s_cache = student.forward(image)?;
    let t_cache = teacher.forward(image)?;
    let view = TeacherView { model: teacher, cache: &t_cache };
    let sig = distill_signals(student, &s_cache, Some(view), None, config, &DetLossConfig::default())?;
    let mut maps = Vec::with_capacity(student.num_levels());
    for (level, pred) in s_cache.predictions.iter().enumerate() {
        let mut acc = Array2::<T>::zeros((pred.height(), pred.width()));
        for branch in Branch::ALL {
            let g = if i == n {
                sig.seeds.pred[level][branch.index()].as_ref()
            } else {
                sig.seeds.features[level][branch.index()][i].as_ref()
            };
            if let Some(g) = g {
                for ch in g.outer_iter() {
                    acc.zip_mut_with(&ch, |a, &v| *a += v * v);
                }
            }
        }
        acc.mapv_inplace(|v| v.sqrt());
        maps.push(acc);
    }
    Ok(maps)
}

/// Writes `level,row,col,value`.
pub fn write_heatmap_csv<T: Scalar, W: Write>(writer: W, maps: &[Array2<T>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["level", "row", "col", "value"])?;
    for (level, m) in maps.iter().enumerate() {
        for ((row, col), v) in m.indexed_iter() {
            w.write_record([level.to_string(), row.to_string(), col.to_string(), v.to_f64_lossy().to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<heatmap csv>", e))
}

/// Reads a heatmap CSV back into per-level grids.
pub fn read_heatmap_csv<R: std::io::Read>(reader: R) -> Result<Vec<Array2<f64>>> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(reader);
    let mut cells: Vec<(usize, usize, usize, f64)> = Vec::new();
    for rec in rd.deserialize::<(usize, usize, usize, f64)>() {
        cells.push(rec?);
    }
    let levels = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    let mut out = Vec::with_capacity(levels);
    for level in 0..levels {
        let own: Vec<_> = cells.iter().filter(|c| c.0 == level).collect();
        let h = own.iter().map(|c| c.1 + 1).max().unwrap_or(0);
        let w = own.iter().map(|c| c.2 + 1).max().unwrap_or(0);
        if own.len() != h * w {
            return Err(Error::contract(format!("heatmap level {level} is not a full grid")));
        }
        let mut m = Array2::zeros((h, w));
        for c in own {
            m[[c.1, c.2]] = c.3;
        }
        out.push(m);
    }
    Ok(out)
}
