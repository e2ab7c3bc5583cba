//! Cross-head distillation: student intermediate features are delivered into
//! the frozen teacher head, and the resulting predictions are distilled
//! towards the teacher's own outputs.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::assign::{AssignmentResult, GroundTruth};
use crate::detector::{BackwardSeeds, Branch, DetectorModel, ForwardOutput, Gradients, PredictionMap};
use crate::error::{Error, Result};
use crate::losses::ClassReduction;
use crate::objective::{
    detection_loss, feat_imitation_with_grad, kd_cls_loss, kd_reg_loss, max_class_prob, ClsKdLoss, DetLossConfig,
    RegKdLoss,
};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Student `f_i` through teacher layers, distilled towards `p^t`.
    #[default]
    #[serde(rename = "CROSSKD_A")]
    CrossKdA,
    /// Teacher `f_i` through student layers, distilled towards `p^s`.
    #[serde(rename = "REVERSE_B")]
    ReverseB,
    /// Student `f_i` through teacher layers, distilled towards `p^s`.
    #[serde(rename = "SELF_STUDENT_C")]
    SelfStudentC,
    /// Teacher `f_i` through student layers, distilled towards `p^t`.
    #[serde(rename = "SELF_TEACHER_D")]
    SelfTeacherD,
    /// `p^s` distilled towards `p^t`.
    #[serde(rename = "PRED_MIMIC")]
    PredMimic,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::CrossKdA,
        Strategy::ReverseB,
        Strategy::SelfStudentC,
        Strategy::SelfTeacherD,
        Strategy::PredMimic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::CrossKdA => "CROSSKD_A",
            Strategy::ReverseB => "REVERSE_B",
            Strategy::SelfStudentC => "SELF_STUDENT_C",
            Strategy::SelfTeacherD => "SELF_TEACHER_D",
            Strategy::PredMimic => "PRED_MIMIC",
        }
    }
}

/// Feature pair compared by the imitation term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatPosition {
    /// Neck output `f_0`.
    Neck,
    /// Hidden head activation `f_k`, `1 ≤ k < n`, in both branches.
    HeadLayer(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub split_index: usize,
    pub strategy: Strategy,
    pub branches: Vec<Branch>,
    pub cls_loss: ClsKdLoss,
    pub reg_loss: RegKdLoss,
    pub tau: f64,
    pub gamma: f64,
    pub w_cls_kd: f64,
    pub w_reg_kd: f64,
    pub w_feat: f64,
    pub feat_positions: Vec<FeatPosition>,
    pub class_reduction: ClassReduction,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            split_index: 3,
            strategy: Strategy::CrossKdA,
            branches: vec![Branch::Cls, Branch::Reg],
            cls_loss: ClsKdLoss::Qfl,
            reg_loss: RegKdLoss::LdKl,
            tau: 1.0,
            gamma: 1.0,
            w_cls_kd: 1.0,
            w_reg_kd: 1.0,
            w_feat: 0.0,
            feat_positions: vec![FeatPosition::Neck],
            class_reduction: ClassReduction::Sum,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.split_index > n_layers {
            return Err(Error::config(format!(
                "split_index {} exceeds head depth {n_layers}",
                self.split_index
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau must be positive"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma must be non-negative"));
        }
        for (name, w) in [("w_cls_kd", self.w_cls_kd), ("w_reg_kd", self.w_reg_kd), ("w_feat", self.w_feat)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0")));
            }
        }
        for p in &self.feat_positions {
            if let FeatPosition::HeadLayer(k) = *p {
                if k == 0 || k >= n_layers {
                    return Err(Error::config(format!("feature position head_layer {k} outside 1..{n_layers}")));
                }
            }
        }
        Ok(())
    }

    /// Split index actually used; prediction mimicking always acts on outputs.
    pub fn effective_split(&self, n_layers: usize) -> usize {
        match self.strategy {
            Strategy::PredMimic => n_layers,
            _ => self.split_index,
        }
    }

    pub fn distills(&self, branch: Branch) -> bool {
        self.branches.contains(&branch)
    }
}

/// Loss terms of one step, unweighted.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents<T> {
    pub det_cls: T,
    pub det_reg: T,
    pub kd_cls: T,
    pub kd_reg: T,
    pub feat: T,
}

impl<T: Scalar> LossComponents<T> {
    pub const NAMES: [&'static str; 5] = ["det_cls", "det_reg", "kd_cls", "kd_reg", "feat"];

    pub fn values(&self) -> [T; 5] {
        [self.det_cls, self.det_reg, self.kd_cls, self.kd_reg, self.feat]
    }

    pub fn named(&self) -> [(&'static str, T); 5] {
        let v = self.values();
        std::array::from_fn(|k| (Self::NAMES[k], v[k]))
    }
}

#[derive(Clone, Debug)]
pub struct DistillBatchOutput<T> {
    pub total_loss: T,
    pub components: LossComponents<T>,
    /// Distillation source predictions (cross-head predictions for the
    /// default strategy); empty when no teacher took part.
    pub cross_head_preds: Vec<PredictionMap<T>>,
}

/// `L = L_cls + L_reg + w_cls·L_kd_cls + w_reg·L_kd_reg + w_feat·L_feat`.
pub fn total_loss<T: Scalar>(components: LossComponents<T>, config: &DistillConfig) -> Result<DistillBatchOutput<T>> {
    for (name, v) in components.named() {
        if !v.is_finite() {
            return Err(Error::Divergence { component: name.to_string(), value: v.to_f64_lossy() });
        }
    }
    let c = components;
    let total = c.det_cls
        + c.det_reg
        + T::lit(config.w_cls_kd) * c.kd_cls
        + T::lit(config.w_reg_kd) * c.kd_reg
        + T::lit(config.w_feat) * c.feat;
    Ok(DistillBatchOutput { total_loss: total, components, cross_head_preds: Vec::new() })
}

/// Marks every teacher parameter group frozen.
pub fn freeze_teacher<T: Scalar>(model: &mut DetectorModel<T>) {
    model.freeze_all();
}

fn check_pair<T: Scalar>(teacher: &DetectorModel<T>, student: &DetectorModel<T>) -> Result<()> {
    if !teacher.is_fully_frozen() {
        return Err(Error::contract("teacher must be frozen before distillation"));
    }
    if teacher.spec.strides != student.spec.strides || teacher.n_layers() != student.n_layers() {
        return Err(Error::Wiring {
            junction: "pyramid levels / head depth".into(),
            expected: teacher.n_layers(),
            got: student.n_layers(),
        });
    }
    if teacher.spec.head.num_classes != student.spec.head.num_classes
        || teacher.spec.head.reg_mode != student.spec.head.reg_mode
    {
        return Err(Error::Wiring {
            junction: "prediction layer".into(),
            expected: teacher.spec.head.reg_mode.channels() + teacher.spec.head.num_classes,
            got: student.spec.head.reg_mode.channels() + student.spec.head.num_classes,
        });
    }
    Ok(())
}

/// Runs teacher layers `C_{i+1} … C_n` on the student's `f_i` for every
/// level and branch; `i = n` returns the student's own predictions.
pub fn cross_head_predict<T: Scalar>(
    teacher: &DetectorModel<T>,
    student_cache: &ForwardOutput<T>,
    i: usize,
) -> Result<Vec<PredictionMap<T>>> {
    if !teacher.is_fully_frozen() {
        return Err(Error::contract("teacher must be frozen before distillation"));
    }
    let n = teacher.n_layers();
    if i > n {
        return Err(Error::contract(format!("split index {i} outside 0..={n}")));
    }
    if student_cache.predictions.len() != teacher.num_levels() {
        return Err(Error::contract("student and teacher have different pyramid levels"));
    }
    if i == n {
        return Ok(student_cache.predictions.clone());
    }
    (0..teacher.num_levels())
        .map(|level| {
            teacher.forward_head_from(
                level,
                student_cache.feature(Branch::Cls, level, i),
                student_cache.feature(Branch::Reg, level, i),
                i + 1,
            )
        })
        .collect()
}

/// How a distillation source map was produced, which fixes where its
/// gradient goes.
#[derive(Clone, Debug)]
enum Source<T> {
    /// The student's own prediction.
    Student,
    /// Fixed map; no trainable parameter behind it.
    Constant,
    /// Teacher layers `C_{i+1} … C_n` on student `f_i`; inputs kept for backprop.
    TeacherTail(Vec<Array3<T>>),
    /// Student layers `C_{i+1} … C_n` on teacher `f_i`.
    StudentTail(Vec<Array3<T>>),
}

/// Source and target predictions of a strategy, plus the routing record.
#[derive(Clone, Debug)]
pub struct StrategyOutput<T> {
    pub source: Vec<PredictionMap<T>>,
    pub target: Vec<PredictionMap<T>>,
    pub split: usize,
    routes: Vec<[Source<T>; 2]>,
}

/// Builds the `(source, target)` prediction pair for the configured strategy.
pub fn strategy_predictions<T: Scalar>(
    teacher: &DetectorModel<T>,
    student: &DetectorModel<T>,
    teacher_cache: &ForwardOutput<T>,
    student_cache: &ForwardOutput<T>,
    config: &DistillConfig,
) -> Result<StrategyOutput<T>> {
    check_pair(teacher, student)?;
    let n = student.n_layers();
    config.validate(n)?;
    let i = config.effective_split(n);
    let levels = student.num_levels();
    let mut source = Vec::with_capacity(levels);
    let mut routes = Vec::with_capacity(levels);
    for level in 0..levels {
        let s_pred = &student_cache.predictions[level];
        let t_pred = &teacher_cache.predictions[level];
        let mut maps: [Option<Array3<T>>; 2] = [None, None];
        let mut route: [Source<T>; 2] = [Source::Constant, Source::Constant];
        for branch in Branch::ALL {
            let b = branch.index();
            let (map, src) = match config.strategy {
                Strategy::PredMimic => (s_pred.branch(branch).clone(), Source::Student),
                Strategy::CrossKdA | Strategy::SelfStudentC => {
                    if i == n {
                        (s_pred.branch(branch).clone(), Source::Student)
                    } else {
                        let f = student_cache.feature(branch, level, i);
                        teacher.check_junction(level, branch, f.channels(), i + 1)?;
                        let (inputs, pred) = teacher.tower(level, branch).run_from(i + 1, &f.values)?;
                        (pred, Source::TeacherTail(inputs))
                    }
                }
                Strategy::ReverseB | Strategy::SelfTeacherD => {
                    if i == n {
                        (t_pred.branch(branch).clone(), Source::Constant)
                    } else {
                        let f = teacher_cache.feature(branch, level, i);
                        student.check_junction(level, branch, f.channels(), i + 1)?;
                        let (inputs, pred) = student.tower(level, branch).run_from(i + 1, &f.values)?;
                        (pred, Source::StudentTail(inputs))
                    }
                }
            };
            maps[b] = Some(map);
            route[b] = src;
        }
        let [cls, reg] = maps;
        source.push(PredictionMap {
            cls_logits: cls.expect("cls built"),
            reg_output: reg.expect("reg built"),
            stride: s_pred.stride,
            level_id: level,
        });
        routes.push(route);
    }
    let target = match config.strategy {
        Strategy::CrossKdA | Strategy::SelfTeacherD | Strategy::PredMimic => teacher_cache.predictions.clone(),
        Strategy::ReverseB | Strategy::SelfStudentC => student_cache.predictions.clone(),
    };
    Ok(StrategyOutput { source, target, split: i, routes })
}

/// Teacher model with its cached forward pass on the current image.
#[derive(Clone, Copy, Debug)]
pub struct TeacherView<'a, T> {
    pub model: &'a DetectorModel<T>,
    pub cache: &'a ForwardOutput<T>,
}

/// Detection targets of the current image.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a, T> {
    pub assignment: &'a AssignmentResult<T>,
    pub gts: &'a GroundTruth<T>,
}

/// Losses of one image plus every gradient signal they send into the student.
#[derive(Clone, Debug)]
pub struct StepSignals<T> {
    pub output: DistillBatchOutput<T>,
    pub seeds: BackwardSeeds<T>,
    /// Parameter gradients that bypass the student's own forward graph
    /// (student layers applied to teacher features).
    pub direct: Gradients<T>,
}

/// Evaluates every loss term for one image and collects the gradient seeds.
/// Without a teacher only detection losses are computed; without targets
/// only distillation terms are.
pub fn distill_signals<T: Scalar>(
    student: &DetectorModel<T>,
    student_cache: &ForwardOutput<T>,
    teacher: Option<TeacherView<'_, T>>,
    targets: Option<Targets<'_, T>>,
    config: &DistillConfig,
    det_config: &DetLossConfig,
) -> Result<StepSignals<T>> {
    let n = student.n_layers();
    let levels = student.num_levels();
    let reg_mode = student.spec.head.reg_mode;
    let mut seeds = BackwardSeeds::new(levels, n);
    let mut direct = student.zero_grads();
    let mut comp = LossComponents::default();

    if let Some(t) = targets {
        let det = detection_loss(&student_cache.predictions, t.assignment, t.gts, reg_mode, det_config)?;
        comp.det_cls = det.cls;
        comp.det_reg = det.reg;
        for (level, [gc, gr]) in det.grads.into_iter().enumerate() {
            seeds.add_pred(level, Branch::Cls, gc);
            seeds.add_pred(level, Branch::Reg, gr);
        }
    }

    let mut cross_head_preds = Vec::new();
    if let Some(tv) = teacher {
        let want_cls = config.distills(Branch::Cls) && config.w_cls_kd > 0.0;
        let want_reg = config.distills(Branch::Reg) && config.w_reg_kd > 0.0;
        if want_cls || want_reg {
            cross_head_preds = kd_terms(tv, student, student_cache, config, want_cls, want_reg, &mut comp, &mut seeds, &mut direct)?;
        }
        if config.w_feat > 0.0 && !config.feat_positions.is_empty() {
            comp.feat = feat_term(student_cache, tv.cache, config, levels, &mut seeds)?;
        }
    }

    let mut output = total_loss(comp, config)?;
    output.cross_head_preds = cross_head_preds;
    Ok(StepSignals { output, seeds, direct })
}

/// Prediction distillation terms; returns the source predictions.
#[allow(clippy::too_many_arguments)]
fn kd_terms<T: Scalar>(
    tv: TeacherView<'_, T>,
    student: &DetectorModel<T>,
    student_cache: &ForwardOutput<T>,
    config: &DistillConfig,
    want_cls: bool,
    want_reg: bool,
    comp: &mut LossComponents<T>,
    seeds: &mut BackwardSeeds<T>,
    direct: &mut Gradients<T>,
) -> Result<Vec<PredictionMap<T>>> {
    let levels = student.num_levels();
    let reg_mode = student.spec.head.reg_mode;
    let so = strategy_predictions(tv.model, student, tv.cache, student_cache, config)?;
    let mut grads: Vec<[Option<Array3<T>>; 2]> = vec![[None, None]; levels];
    if want_cls {
        let (v, g) = kd_cls_loss(&so.source, &so.target, config.cls_loss, T::lit(config.gamma), config.class_reduction)?;
        comp.kd_cls = v;
        let w = T::lit(config.w_cls_kd);
        for (level, gl) in g.into_iter().enumerate() {
            grads[level][0] = Some(gl.mapv(|x| x * w));
        }
    }
    if want_reg {
        let weights = max_class_prob(&tv.cache.predictions);
        let (v, g) = kd_reg_loss(&so.source, &so.target, &weights, config.reg_loss, reg_mode, T::lit(config.tau))?;
        comp.kd_reg = v;
        let w = T::lit(config.w_reg_kd);
        for (level, gl) in g.into_iter().enumerate() {
            grads[level][1] = Some(gl.mapv(|x| x * w));
        }
    }
    for (level, pair) in grads.into_iter().enumerate() {
        for branch in Branch::ALL {
            if let Some(g) = &pair[branch.index()] {
                route(tv.model, student, &so, level, branch, g, seeds, direct);
            }
        }
    }
    Ok(so.source)
}

#[allow(clippy::too_many_arguments)]
fn route<T: Scalar>(
    teacher: &DetectorModel<T>,
    student: &DetectorModel<T>,
    so: &StrategyOutput<T>,
    level: usize,
    branch: Branch,
    grad: &Array3<T>,
    seeds: &mut BackwardSeeds<T>,
    direct: &mut Gradients<T>,
) {
    let i = so.split;
    match &so.routes[level][branch.index()] {
        Source::Student => seeds.add_pred(level, branch, grad.clone()),
        Source::Constant => {}
        Source::TeacherTail(inputs) => {
            let g = teacher.tower(level, branch).backward_from(i + 1, inputs, Some(grad), &[], None);
            if let Some(g0) = g.into_iter().next().flatten() {
                seeds.add_feature(level, branch, i, g0);
            }
        }
        Source::StudentTail(inputs) => {
            let head = student.head_index(level);
            let pg = direct.heads[head][branch.index()].as_mut_slice();
            student.tower(level, branch).backward_from(i + 1, inputs, Some(grad), &[], Some(pg));
        }
    }
}

/// Mean feature-imitation loss over levels and configured positions;
/// seeds its weighted gradient.
fn feat_term<T: Scalar>(
    student_cache: &ForwardOutput<T>,
    teacher_cache: &ForwardOutput<T>,
    config: &DistillConfig,
    levels: usize,
    seeds: &mut BackwardSeeds<T>,
) -> Result<T> {
    let mut pairs: Vec<(usize, Branch, usize)> = Vec::new();
    for level in 0..levels {
        for p in &config.feat_positions {
            match *p {
                FeatPosition::Neck => pairs.push((level, Branch::Cls, 0)),
                FeatPosition::HeadLayer(k) => {
                    pairs.extend(Branch::ALL.iter().map(|&b| (level, b, k)));
                }
            }
        }
    }
    let count = T::from_usize_lossy(pairs.len());
    let scale = T::lit(config.w_feat) / count;
    let mut total = T::zero();
    for (level, branch, k) in pairs {
        let (v, g) = feat_imitation_with_grad(
            &student_cache.feature(branch, level, k).values,
            &teacher_cache.feature(branch, level, k).values,
        )?;
        total += v;
        seeds.add_feature(level, branch, k, g.mapv(|x| x * scale));
    }
    Ok(total / count)
}

/// Full parameter gradient of one image's objective.
pub fn distill_step<T: Scalar>(
    student: &DetectorModel<T>,
    student_cache: &ForwardOutput<T>,
    teacher: Option<TeacherView<'_, T>>,
    targets: Option<Targets<'_, T>>,
    config: &DistillConfig,
    det_config: &DetLossConfig,
) -> Result<(DistillBatchOutput<T>, Gradients<T>)> {
    let sig = distill_signals(student, student_cache, teacher, targets, config, det_config)?;
    let mut grads = student.backward(student_cache, &sig.seeds).grads;
    grads.add_assign(&sig.direct);
    Ok((sig.output, grads))
}
