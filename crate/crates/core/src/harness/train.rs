//! Epoch loop realizing the weighted detection plus distillation objective.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Sample;
use super::diagnostics::DistanceSums;
use super::eval::{detect, mean_ap, EvalConfig};
use super::optim::{Sgd, SgdConfig};
use crate::assign::{AssignerConfig, AssignmentResult};
use crate::detector::{write_checkpoint, DetectorModel, ForwardOutput};
use crate::engine::{distill_step, DistillConfig, LossComponents, Targets, TeacherView};
use crate::error::{Error, Result};
use crate::objective::DetLossConfig;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Shuffling seed.
    pub seed: u64,
    pub eval: EvalConfig,
    /// Leading validation images used for distance tracking.
    pub track_images: usize,
    /// 1-based epochs after which a checkpoint is written.
    pub checkpoint_epochs: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            batch_size: 8,
            seed: 0,
            eval: EvalConfig::default(),
            track_images: 64,
            checkpoint_epochs: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        self.eval.validate()
    }
}

/// Losses and targets of a run. Without `distill` only the detection loss
/// is optimized.
#[derive(Clone, Debug, PartialEq)]
pub struct LossPipeline {
    pub assigner: AssignerConfig,
    pub det: DetLossConfig,
    pub distill: Option<DistillConfig>,
}

#[derive(Clone, Debug)]
pub struct Datasets<T> {
    pub train: Vec<Sample<T>>,
    pub val: Vec<Sample<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ap: f64,
    pub det_cls: f64,
    pub det_reg: f64,
    pub kd_cls: f64,
    pub kd_reg: f64,
    pub feat: f64,
    pub l1_pred_teacher: f64,
    pub l1_cls_gt: f64,
    pub l1_box_gt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub config_hash: String,
    pub seed: u64,
    pub records: Vec<EpochRecord>,
}

const LOG_COLUMNS: [&str; 10] = [
    "epoch",
    "ap",
    "det_cls",
    "det_reg",
    "kd_cls",
    "kd_reg",
    "feat",
    "l1_pred_teacher",
    "l1_cls_gt",
    "l1_box_gt",
];

impl TrainLog {
    pub fn new(config_hash: impl Into<String>, seed: u64) -> Self {
        Self { config_hash: config_hash.into(), seed, records: Vec::new() }
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn write_csv<W: Write>(&self, mut writer: W) -> Result<()> {
        let io = |e| Error::io("<train log>", e);
        writeln!(writer, "# config_hash={}", self.config_hash).map_err(io)?;
        writeln!(writer, "# seed={}", self.seed).map_err(io)?;
        writeln!(writer, "{}", LOG_COLUMNS.join(",")).map_err(io)?;
        for r in &self.records {
            let vals = [
                r.ap,
                r.det_cls,
                r.det_reg,
                r.kd_cls,
                r.kd_reg,
                r.feat,
                r.l1_pred_teacher,
                r.l1_cls_gt,
                r.l1_box_gt,
            ];
            let mut line = r.epoch.to_string();
            for v in vals {
                line.push(',');
                line.push_str(&v.to_string());
            }
            writeln!(writer, "{line}").map_err(io)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii csv")
    }

    pub fn read_csv<R: Read>(mut reader: R) -> Result<Self> {
        let mut text = String::new();
        reader.read_to_string(&mut text).map_err(|e| Error::io("<train log>", e))?;
        let mut log = TrainLog::new("", 0);
        for line in text.lines().filter(|l| l.starts_with('#')) {
            let body = line.trim_start_matches('#').trim();
            if let Some(h) = body.strip_prefix("config_hash=") {
                log.config_hash = h.to_string();
            } else if let Some(s) = body.strip_prefix("seed=") {
                log.seed = s.parse().map_err(|_| Error::contract(format!("bad seed line `{line}`")))?;
            }
        }
        let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
        if header != LOG_COLUMNS {
            return Err(Error::contract(format!("unexpected train log columns {header:?}")));
        }
        for rec in rd.deserialize::<EpochRecord>() {
            log.records.push(rec?);
        }
        for (k, r) in log.records.iter().enumerate() {
            if r.epoch != k + 1 {
                return Err(Error::contract("train log epochs are not numbered 1, 2, ..."));
            }
        }
        Ok(log)
    }
}

/// Everything besides the models and data that determines a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub pipeline: LossPipeline,
    pub sgd: SgdConfig,
    pub train: TrainConfig,
    pub config_hash: String,
}

fn assign_all<T: Scalar>(
    model: &DetectorModel<T>,
    samples: &[Sample<T>],
    assigner: &AssignerConfig,
) -> Result<Vec<AssignmentResult<T>>> {
    samples
        .iter()
        .map(|s| {
            let (_, h, w) = s.image.dim();
            assigner.assign(&model.grid_for(h, w), &s.gts, model.spec.head.num_classes)
        })
        .collect()
}

fn mean_components(items: &[LossComponents<f64>]) -> [f64; 5] {
    let d = items.len().max(1) as f64;
    std::array::from_fn(|k| items.iter().map(|c| c.values()[k]).sum::<f64>() / d)
}

/// Trains `student` in place. `teacher` (frozen) supplies distillation
/// targets when the pipeline distills and is always used for the
/// student-teacher distance. Checkpoints go to `checkpoint_dir`.
pub fn train<T: Scalar>(
    student: &mut DetectorModel<T>,
    teacher: Option<&DetectorModel<T>>,
    data: &Datasets<T>,
    run: &TrainRun,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainLog> {
    let cfg = &run.train;
    cfg.validate()?;
    run.pipeline.assigner.validate()?;
    let mut log = TrainLog::new(run.config_hash.clone(), cfg.seed);
    if cfg.epochs == 0 {
        return Ok(log);
    }
    let distill = run.pipeline.distill.as_ref();
    if let Some(d) = distill {
        d.validate(student.n_layers())?;
        if teacher.is_none() {
            return Err(Error::config("distillation requested without a teacher"));
        }
    }
    let mut sgd = Sgd::new(run.sgd.clone(), student)?;
    let train_asg = assign_all(student, &data.train, &run.pipeline.assigner)?;
    let track = &data.val[..cfg.track_images.min(data.val.len())];
    let track_asg = assign_all(student, track, &run.pipeline.assigner)?;

    let teacher_train: Vec<ForwardOutput<T>> = match (distill, teacher) {
        (Some(_), Some(t)) => data.train.iter().map(|s| t.forward(&s.image)).collect::<Result<_>>()?,
        _ => Vec::new(),
    };
    let teacher_track: Vec<ForwardOutput<T>> = match teacher {
        Some(t) => track.iter().map(|s| t.forward(&s.image)).collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let fallback = DistillConfig::default();
    let dcfg = distill.unwrap_or(&fallback);
    let reg_mode = student.spec.head.reg_mode;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);

        // per-image slots keep the epoch means independent of visiting order
        let mut per_sample = vec![LossComponents::<f64>::default(); data.train.len()];
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = student.zero_grads();
            for &k in batch {
                let sample = &data.train[k];
                let cache = student.forward(&sample.image)?;
                let view = match (distill, teacher) {
                    (Some(_), Some(t)) => Some(TeacherView { model: t, cache: &teacher_train[k] }),
                    _ => None,
                };
                let targets = Targets { assignment: &train_asg[k], gts: &sample.gts };
                let (out, g) = distill_step(student, &cache, view, Some(targets), dcfg, &run.pipeline.det)?;
                let c = out.components;
                per_sample[k] = LossComponents {
                    det_cls: c.det_cls.to_f64_lossy(),
                    det_reg: c.det_reg.to_f64_lossy(),
                    kd_cls: c.kd_cls.to_f64_lossy(),
                    kd_reg: c.kd_reg.to_f64_lossy(),
                    feat: c.feat.to_f64_lossy(),
                };
                grads.add_assign(&g);
            }
            grads.scale(T::one() / T::from_usize_lossy(batch.len()));
            sgd.step(student, &grads, epoch);
        }
        let [det_cls, det_reg, kd_cls, kd_reg, feat] = mean_components(&per_sample);

        let mut per_image = Vec::with_capacity(data.val.len());
        let mut dist = DistanceSums::default();
        for (k, s) in data.val.iter().enumerate() {
            let out = student.forward(&s.image)?;
            per_image.push((detect(&out.predictions, reg_mode, &cfg.eval)?, &s.gts));
            if k < track.len() {
                let tp = teacher_track.get(k).map(|t| t.predictions.as_slice());
                dist.add(&out.predictions, tp, &track_asg[k], &s.gts, reg_mode)?;
            }
        }
        let ap = mean_ap(&per_image, student.spec.head.num_classes, cfg.eval.iou_thr);
        let d = dist.finish();
        log.records.push(EpochRecord {
            epoch: epoch + 1,
            ap,
            det_cls,
            det_reg,
            kd_cls,
            kd_reg,
            feat,
            l1_pred_teacher: d.l1_pred_teacher,
            l1_cls_gt: d.l1_cls_gt,
            l1_box_gt: d.l1_box_gt,
        });
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_epochs.contains(&(epoch + 1)) {
                let path = dir.join(format!("epoch_{}.ckpt", epoch + 1));
                write_checkpoint(&path, student, Some(&run.config_hash), Some(cfg.seed))?;
            }
        }
    }
    Ok(log)
}
