//! The command surface: each command validates its configuration, runs,
//! and writes its artifacts under the output directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::experiments::{write_meta, write_variant_summary, Experiment, Model};
use super::plot::{conflict_svg, heatmap_svg, train_log_figures};
use super::recipes::{conflict_checks, split_checks, strategy_checks, Check};
use crate::conflict::{read_curve_csv, write_curve_csv};
use crate::detector::{read_checkpoint, write_checkpoint};
use crate::engine::freeze_teacher;
use crate::error::{Error, Result};
use crate::harness::{grad_heatmap, read_heatmap_csv, write_heatmap_csv, TrainLog};

/// What a command produced.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Human-readable summary lines.
    pub lines: Vec<String>,
    pub checks: Vec<Check>,
}

impl Outcome {
    fn write(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.push(path);
        Ok(())
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn load_teacher(path: &Path) -> Result<Model> {
    let (mut model, _) = read_checkpoint::<f32>(path)?;
    freeze_teacher(&mut model);
    Ok(model)
}

/// The teacher from `checkpoint`, or a freshly trained one saved as
/// `teacher.ckpt`.
fn obtain_teacher(exp: &Experiment, checkpoint: Option<&Path>, out: &Path, outcome: &mut Outcome) -> Result<Model> {
    let teacher = match checkpoint {
        Some(p) => load_teacher(p)?,
        None => {
            let (teacher, log) = exp.train_teacher()?;
            save_teacher(exp, &teacher, &log, out, outcome)?;
            teacher
        }
    };
    exp.check_teacher(&teacher)?;
    Ok(teacher)
}

fn save_teacher(exp: &Experiment, teacher: &Model, log: &TrainLog, out: &Path, outcome: &mut Outcome) -> Result<()> {
    let ckpt = out.join("teacher.ckpt");
    write_checkpoint(&ckpt, teacher, Some(&exp.hash), Some(exp.config.teacher.seed))?;
    outcome.lines.push(format!("teacher checkpoint {} sha256 {}", ckpt.display(), file_digest(&ckpt)?));
    outcome.files.push(ckpt);
    outcome.write(out.join("teacher_log.csv"), log.to_csv_string().as_bytes())?;
    if let Some(r) = log.last() {
        outcome.lines.push(format!("teacher final AP {:.4}", r.ap));
    }
    Ok(())
}

pub fn train_teacher(config: &RunConfig, out: &Path) -> Result<Outcome> {
    let exp = Experiment::new(config.clone())?;
    ensure_dir(out)?;
    let mut outcome = Outcome::default();
    let (teacher, log) = exp.train_teacher()?;
    save_teacher(&exp, &teacher, &log, out, &mut outcome)?;
    Ok(outcome)
}

/// Trains one distilled student per seed, or with `compare.strategies`
/// set, a baseline and one student per strategy and seed.
pub fn distill(config: &RunConfig, teacher: Option<&Path>, out: &Path) -> Result<Outcome> {
    let exp = Experiment::new(config.clone())?;
    ensure_dir(out)?;
    let mut outcome = Outcome::default();
    let teacher = obtain_teacher(&exp, teacher, out, &mut outcome)?;
    if !config.compare.strategies.is_empty() {
        let results = exp.run_variants(Some(&teacher), &exp.strategy_variants())?;
        for r in &results {
            for log in &r.logs {
                outcome.write(out.join(format!("{}_seed{}.csv", r.name, log.seed)), log.to_csv_string().as_bytes())?;
            }
            outcome.lines.push(format!("{} mean final AP {:.4}", r.name, r.mean_final(|e| e.ap)));
        }
        let mut buf = Vec::new();
        write_variant_summary(&mut buf, &exp.hash, &config.seeds, &results)?;
        outcome.write(out.join("summary.csv"), &buf)?;
        outcome.checks = strategy_checks(&results, &config.expect);
        return Ok(outcome);
    }
    for &seed in &config.seeds {
        let ckpt_dir = out.join(format!("seed{seed}"));
        if !config.train.checkpoint_epochs.is_empty() {
            ensure_dir(&ckpt_dir)?;
        }
        let (student, log) = exp.train_student(Some(&teacher), Some(&config.distill), seed, Some(&ckpt_dir))?;
        let ckpt = out.join(format!("student_seed{seed}.ckpt"));
        write_checkpoint(&ckpt, &student, Some(&exp.hash), Some(seed))?;
        outcome.files.push(ckpt);
        outcome.write(out.join(format!("distill_seed{seed}.csv")), log.to_csv_string().as_bytes())?;
        if let Some(sample) = exp.data.val.first() {
            let maps = grad_heatmap(&teacher, &student, &sample.image, &config.distill)?;
            let mut buf = Vec::new();
            write_meta(&mut buf, &exp.hash, &[seed]).map_err(|e| Error::io("<heatmap>", e))?;
            write_heatmap_csv(&mut buf, &maps)?;
            outcome.write(out.join(format!("heatmap_seed{seed}.csv")), &buf)?;
        }
        if let Some(r) = log.last() {
            outcome.lines.push(format!("seed {seed} final AP {:.4}", r.ap));
        }
    }
    Ok(outcome)
}

pub fn ablate_split(config: &RunConfig, teacher: Option<&Path>, out: &Path) -> Result<Outcome> {
    let exp = Experiment::new(config.clone())?;
    ensure_dir(out)?;
    let mut outcome = Outcome::default();
    let teacher = obtain_teacher(&exp, teacher, out, &mut outcome)?;
    let table = exp.ablate_split(&teacher)?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    outcome.write(out.join("split_table.csv"), &buf)?;
    outcome.lines.push(format!("baseline mean AP {:.4}", table.baseline_mean_ap));
    for row in &table.rows {
        outcome.lines.push(format!("split {} mean AP {:.4}", row.split_index, row.mean_ap));
    }
    outcome.checks = split_checks(&table, &config.expect);
    Ok(outcome)
}

/// Conflict curves for the given teacher checkpoints, or for one teacher
/// trained per `conflict.teacher_assigners` entry.
pub fn analyze_conflict(config: &RunConfig, teachers: &[PathBuf], out: &Path) -> Result<Outcome> {
    let exp = Experiment::new(config.clone())?;
    ensure_dir(out)?;
    let mut outcome = Outcome::default();
    let mut models: Vec<(String, Model)> = Vec::new();
    if teachers.is_empty() {
        if config.conflict.teacher_assigners.is_empty() {
            return Err(Error::config("analyze-conflict needs --teacher or conflict.teacher_assigners"));
        }
        for (k, assigner) in config.conflict.teacher_assigners.iter().enumerate() {
            let (model, log) = exp.train_teacher_with(*assigner)?;
            let name = format!("teacher{k}_{}", assigner.name());
            outcome.write(out.join(format!("{name}_log.csv")), log.to_csv_string().as_bytes())?;
            models.push((name, model));
        }
    } else {
        for p in teachers {
            let name = p.file_stem().map_or_else(|| "teacher".to_string(), |s| s.to_string_lossy().into_owned());
            models.push((name, load_teacher(p)?));
        }
    }
    let refs: Vec<(String, &Model)> = models.iter().map(|(n, m)| (n.clone(), m)).collect();
    let report = exp.conflict_report(&refs)?;
    let seed = config.teacher.seed;
    for (name, curve) in &report {
        let mut buf = Vec::new();
        write_meta(&mut buf, &exp.hash, &[seed]).map_err(|e| Error::io("<curve>", e))?;
        write_curve_csv(&mut buf, curve)?;
        outcome.write(out.join(format!("conflict_{name}.csv")), &buf)?;
        outcome.lines.push(format!("{name} conflict ratio at 0.5: {:?}", curve.ratio_at(0.5)));
    }
    let meta = vec![format!("config_hash={} seed={seed}", exp.hash)];
    outcome.write(out.join("conflict.svg"), conflict_svg(&report, &meta)?.as_bytes())?;
    outcome.checks = conflict_checks(&report, &config.expect);
    Ok(outcome)
}

pub fn eval(config: &RunConfig, checkpoint: &Path) -> Result<Outcome> {
    let exp = Experiment::new(config.clone())?;
    let (model, header) = read_checkpoint::<f32>(checkpoint)?;
    if model.spec.head.num_classes != config.dataset.num_classes {
        return Err(Error::Wiring {
            junction: "prediction layer".into(),
            expected: config.dataset.num_classes,
            got: model.spec.head.num_classes,
        });
    }
    let ap = exp.evaluate(&model)?;
    let mut outcome = Outcome::default();
    outcome.lines.push(format!(
        "AP {ap:.6} (checkpoint config_hash {}, seed {})",
        header.config_hash.as_deref().unwrap_or("-"),
        header.seed.map_or_else(|| "-".to_string(), |s| s.to_string())
    ));
    Ok(outcome)
}

enum CsvKind {
    TrainLog,
    Heatmap,
    Curve,
}

fn csv_kind(text: &str) -> Result<CsvKind> {
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap_or("");
    match header.split(',').next().unwrap_or("") {
        "epoch" => Ok(CsvKind::TrainLog),
        "level" => Ok(CsvKind::Heatmap),
        "threshold" => Ok(CsvKind::Curve),
        _ => Err(Error::config(format!("unrecognized csv header `{header}`"))),
    }
}

fn meta_lines(text: &str) -> Vec<String> {
    text.lines().filter_map(|l| l.strip_prefix('#')).map(|l| l.trim().to_string()).collect()
}

/// Renders training logs as overlaid metric curves, and heatmap and
/// conflict-curve CSVs as one figure each.
pub fn plot(inputs: &[PathBuf], out: &Path) -> Result<Outcome> {
    if inputs.is_empty() {
        return Err(Error::config("empty figure: no input files"));
    }
    ensure_dir(out)?;
    let mut outcome = Outcome::default();
    let mut logs = Vec::new();
    let mut curves = Vec::new();
    let mut curve_meta = Vec::new();
    for path in inputs {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stem = path.file_stem().map_or_else(|| "input".to_string(), |s| s.to_string_lossy().into_owned());
        match csv_kind(&text)? {
            CsvKind::TrainLog => logs.push(TrainLog::read_csv(text.as_bytes())?),
            CsvKind::Heatmap => {
                let maps = read_heatmap_csv(text.as_bytes())?;
                let svg = heatmap_svg(&format!("Gradient heatmap {stem}"), &maps, &meta_lines(&text))?;
                outcome.write(out.join(format!("{stem}.svg")), svg.as_bytes())?;
            }
            CsvKind::Curve => {
                curves.push((stem, read_curve_csv(text.as_bytes())?));
                curve_meta.extend(meta_lines(&text));
            }
        }
    }
    if !logs.is_empty() {
        for (stem, svg) in train_log_figures(&logs)? {
            outcome.write(out.join(format!("{stem}.svg")), svg.as_bytes())?;
        }
    }
    if !curves.is_empty() {
        outcome.write(out.join("conflict.svg"), conflict_svg(&curves, &curve_meta)?.as_bytes())?;
    }
    Ok(outcome)
}

/// Summary lines, check verdicts and written files, one per line.
pub fn print_outcome<W: Write>(mut w: W, outcome: &Outcome) -> std::io::Result<()> {
    for line in &outcome.lines {
        writeln!(w, "{line}")?;
    }
    for check in &outcome.checks {
        writeln!(w, "{check}")?;
    }
    for f in &outcome.files {
        writeln!(w, "wrote {}", f.display())?;
    }
    Ok(())
}
