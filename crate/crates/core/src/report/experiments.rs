//! Teacher, student and comparison runs driven by a [`RunConfig`].

use std::io::Write;
use std::path::Path;

use ndarray::Array3;

use super::config::RunConfig;
use crate::assign::AssignerConfig;
use crate::conflict::{cross_assigner_report, ConflictCurve};
use crate::detector::{Branch, DetectorModel};
use crate::engine::{freeze_teacher, DistillConfig, Strategy};
use crate::error::{Error, Result};
use crate::harness::{evaluate_ap, generate_split, train, Datasets, EpochRecord, LossPipeline, Split, TrainLog, TrainRun};

pub type Model = DetectorModel<f32>;

/// A validated configuration with its generated data.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: RunConfig,
    pub hash: String,
    pub data: Datasets<f32>,
}

/// One training recipe applied to every seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub distill: Option<DistillConfig>,
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub name: String,
    /// One log per configured seed, in order.
    pub logs: Vec<TrainLog>,
}

impl VariantResult {
    pub fn final_values(&self, metric: impl Fn(&EpochRecord) -> f64) -> Vec<f64> {
        self.logs.iter().map(|l| l.last().map_or(f64::NAN, &metric)).collect()
    }

    pub fn mean_final(&self, metric: impl Fn(&EpochRecord) -> f64) -> f64 {
        mean(&self.final_values(metric))
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().fold(0.0, |a, b| a + b) / values.len() as f64
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let hash = config.config_hash();
        let data = Datasets {
            train: generate_split(&config.dataset, Split::Train)?,
            val: generate_split(&config.dataset, Split::Val)?,
        };
        Ok(Self { config, hash, data })
    }

    pub fn teacher_run(&self, assigner: AssignerConfig) -> TrainRun {
        let t = &self.config.teacher;
        let mut train = self.config.train.clone();
        train.epochs = t.epochs;
        train.seed = t.seed;
        TrainRun {
            pipeline: LossPipeline { assigner, det: self.config.det_loss, distill: None },
            sgd: t.optimizer.clone(),
            train,
            config_hash: self.hash.clone(),
        }
    }

    /// Trains the configured teacher and returns it frozen.
    pub fn train_teacher(&self) -> Result<(Model, TrainLog)> {
        self.train_teacher_with(self.config.teacher.assigner)
    }

    pub fn train_teacher_with(&self, assigner: AssignerConfig) -> Result<(Model, TrainLog)> {
        let mut model = Model::new(self.config.teacher.spec.clone(), self.config.teacher.seed)?;
        let log = train(&mut model, None, &self.data, &self.teacher_run(assigner), None)?;
        freeze_teacher(&mut model);
        Ok((model, log))
    }

    pub fn student_run(&self, seed: u64, distill: Option<&DistillConfig>) -> TrainRun {
        let mut train = self.config.train.clone();
        train.seed = seed;
        TrainRun {
            pipeline: LossPipeline {
                assigner: self.config.student.assigner,
                det: self.config.det_loss,
                distill: distill.cloned(),
            },
            sgd: self.config.optimizer.clone(),
            train,
            config_hash: self.hash.clone(),
        }
    }

    /// A student initialized and shuffled with `seed`.
    pub fn train_student(
        &self,
        teacher: Option<&Model>,
        distill: Option<&DistillConfig>,
        seed: u64,
        checkpoint_dir: Option<&Path>,
    ) -> Result<(Model, TrainLog)> {
        let mut model = Model::new(self.config.student.spec.clone(), seed)?;
        let log = train(&mut model, teacher, &self.data, &self.student_run(seed, distill), checkpoint_dir)?;
        Ok((model, log))
    }

    /// Rejects teachers whose head cannot take the student's features at
    /// the configured split.
    pub fn check_teacher(&self, teacher: &Model) -> Result<()> {
        let student = Model::zeros(self.config.student.spec.clone())?;
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
        let n = student.n_layers();
        let i = self.config.distill.effective_split(n);
        if i == n {
            return Ok(());
        }
        let size = self.config.dataset.image_size;
        let out = student.forward(&Array3::zeros((student.spec.in_channels, size, size)))?;
        for level in 0..student.num_levels() {
            for branch in Branch::ALL {
                teacher.check_junction(level, branch, out.feature(branch, level, i).channels(), i + 1)?;
            }
        }
        Ok(())
    }

    pub fn run_variants(&self, teacher: Option<&Model>, variants: &[Variant]) -> Result<Vec<VariantResult>> {
        variants
            .iter()
            .map(|v| {
                let logs = self
                    .config
                    .seeds
                    .iter()
                    .map(|&s| self.train_student(teacher, v.distill.as_ref(), s, None).map(|(_, log)| log))
                    .collect::<Result<_>>()?;
                Ok(VariantResult { name: v.name.clone(), logs })
            })
            .collect()
    }

    pub fn baseline_variant(&self) -> Variant {
        Variant { name: "baseline".into(), distill: None }
    }

    /// The configured distillation at every split index `0..=n`.
    pub fn split_variants(&self) -> Vec<Variant> {
        (0..=self.config.student.spec.head.n_layers)
            .map(|i| {
                let mut d = self.config.distill.clone();
                d.strategy = Strategy::CrossKdA;
                d.split_index = i;
                Variant { name: format!("split_{i}"), distill: Some(d) }
            })
            .collect()
    }

    /// The baseline followed by the configured distillation under each
    /// compared strategy.
    pub fn strategy_variants(&self) -> Vec<Variant> {
        let mut out = vec![self.baseline_variant()];
        for &s in &self.config.compare.strategies {
            let mut d = self.config.distill.clone();
            d.strategy = s;
            out.push(Variant { name: s.name().to_string(), distill: Some(d) });
        }
        out
    }

    pub fn ablate_split(&self, teacher: &Model) -> Result<SplitTable> {
        let baseline = self.run_variants(Some(teacher), &[self.baseline_variant()])?.remove(0);
        let splits = self.run_variants(Some(teacher), &self.split_variants())?;
        Ok(SplitTable::from_results(self, &baseline, &splits))
    }

    /// Conflict curves of each teacher against the student assigner's
    /// targets on the leading validation images.
    pub fn conflict_report(&self, teachers: &[(String, &Model)]) -> Result<Vec<(String, ConflictCurve)>> {
        let samples: Vec<_> = self
            .data
            .val
            .iter()
            .take(self.config.conflict.images)
            .map(|s| (s.image.clone(), s.gts.clone()))
            .collect();
        cross_assigner_report(teachers, &self.config.student.assigner, &samples, &self.config.conflict.thresholds)
    }

    pub fn evaluate(&self, model: &Model) -> Result<f64> {
        evaluate_ap(model, &self.data.val, &self.config.train.eval)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitRow {
    pub split_index: usize,
    pub per_seed: Vec<f64>,
    pub mean_ap: f64,
}

/// Final AP per split index next to the no-KD baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitTable {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub baseline: Vec<f64>,
    pub baseline_mean_ap: f64,
    pub rows: Vec<SplitRow>,
}

impl SplitTable {
    pub fn from_results(exp: &Experiment, baseline: &VariantResult, splits: &[VariantResult]) -> Self {
        let ap = |r: &EpochRecord| r.ap;
        let rows = splits
            .iter()
            .enumerate()
            .map(|(i, v)| SplitRow { split_index: i, per_seed: v.final_values(ap), mean_ap: v.mean_final(ap) })
            .collect();
        Self {
            config_hash: exp.hash.clone(),
            seeds: exp.config.seeds.clone(),
            baseline: baseline.final_values(ap),
            baseline_mean_ap: baseline.mean_final(ap),
            rows,
        }
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e| Error::io("<split table>", e);
        write_meta(&mut w, &self.config_hash, &self.seeds).map_err(io)?;
        let mut header = vec!["split_index".to_string(), "mean_ap".into(), "baseline_mean_ap".into()];
        header.extend(self.seeds.iter().map(|s| format!("ap_seed_{s}")));
        writeln!(w, "{}", header.join(",")).map_err(io)?;
        for row in &self.rows {
            let mut line = format!("{},{},{}", row.split_index, row.mean_ap, self.baseline_mean_ap);
            for v in &row.per_seed {
                line.push_str(&format!(",{v}"));
            }
            writeln!(w, "{line}").map_err(io)?;
        }
        Ok(())
    }
}

/// Mean final metrics of each variant, one row per variant.
pub fn write_variant_summary<W: Write>(
    mut w: W,
    config_hash: &str,
    seeds: &[u64],
    results: &[VariantResult],
) -> Result<()> {
    let io = |e| Error::io("<variant summary>", e);
    write_meta(&mut w, config_hash, seeds).map_err(io)?;
    let mut header: Vec<String> =
        ["variant", "mean_ap", "mean_l1_pred_teacher", "mean_l1_cls_gt", "mean_l1_box_gt"].map(String::from).to_vec();
    header.extend(seeds.iter().map(|s| format!("ap_seed_{s}")));
    writeln!(w, "{}", header.join(",")).map_err(io)?;
    for r in results {
        let mut line = format!(
            "{},{},{},{},{}",
            r.name,
            r.mean_final(|e| e.ap),
            r.mean_final(|e| e.l1_pred_teacher),
            r.mean_final(|e| e.l1_cls_gt),
            r.mean_final(|e| e.l1_box_gt)
        );
        for v in r.final_values(|e| e.ap) {
            line.push_str(&format!(",{v}"));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    Ok(())
}

/// Leading `# config_hash=…` and `# seed=…` comment lines.
pub fn write_meta<W: Write>(w: &mut W, config_hash: &str, seeds: &[u64]) -> std::io::Result<()> {
    let seeds: Vec<String> = seeds.iter().map(u64::to_string).collect();
    writeln!(w, "# config_hash={config_hash}")?;
    writeln!(w, "# seed={}", seeds.join(";"))
}
