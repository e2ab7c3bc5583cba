//! Pinned reference configurations and the orderings they should show.

use std::fmt;

use super::config::{Expectations, RunConfig};
use super::experiments::{SplitTable, VariantResult};
use crate::conflict::ConflictCurve;
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipe {
    Table1SplitSweep,
    Fig3Conflict,
    Fig6Distance,
    Table6CrossAssigner,
}

impl Recipe {
    pub const ALL: [Recipe; 4] =
        [Recipe::Table1SplitSweep, Recipe::Fig3Conflict, Recipe::Fig6Distance, Recipe::Table6CrossAssigner];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::Table1SplitSweep => "table1_split_sweep",
            Recipe::Fig3Conflict => "fig3_conflict",
            Recipe::Fig6Distance => "fig6_distance",
            Recipe::Table6CrossAssigner => "table6_cross_assigner",
        }
    }

    pub fn from_name(name: &str) -> Option<Recipe> {
        Recipe::ALL.into_iter().find(|r| r.name() == name)
    }

    pub fn source(self) -> &'static str {
        match self {
            Recipe::Table1SplitSweep => include_str!("../../../../recipes/table1_split_sweep.toml"),
            Recipe::Fig3Conflict => include_str!("../../../../recipes/fig3_conflict.toml"),
            Recipe::Fig6Distance => include_str!("../../../../recipes/fig6_distance.toml"),
            Recipe::Table6CrossAssigner => include_str!("../../../../recipes/table6_cross_assigner.toml"),
        }
    }

    pub fn config(self) -> Result<RunConfig> {
        RunConfig::from_toml_str(self.source())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {}", self.name, self.detail)
    }
}

pub fn split_checks(table: &SplitTable, expect: &Expectations) -> Vec<Check> {
    if !expect.splits_reach_baseline {
        return Vec::new();
    }
    let worst = table.rows.iter().map(|r| r.mean_ap).fold(f64::INFINITY, f64::min);
    let rows: Vec<String> = table.rows.iter().map(|r| format!("i={} {:.4}", r.split_index, r.mean_ap)).collect();
    vec![Check {
        name: "splits_reach_baseline",
        passed: table.rows.iter().all(|r| r.mean_ap >= table.baseline_mean_ap),
        detail: format!("baseline {:.4}; worst {worst:.4}; {}", table.baseline_mean_ap, rows.join(", ")),
    }]
}

fn variant<'a>(results: &'a [VariantResult], name: &str) -> Option<&'a VariantResult> {
    results.iter().find(|r| r.name == name)
}

pub fn strategy_checks(results: &[VariantResult], expect: &Expectations) -> Vec<Check> {
    let mut out = Vec::new();
    let base = variant(results, "baseline");
    let a = variant(results, "CROSSKD_A");
    let pm = variant(results, "PRED_MIMIC");
    let missing = |name: &'static str| Check { name, passed: false, detail: "required variants were not run".into() };
    if expect.crosskd_reaches_baseline {
        out.push(match (a, base) {
            (Some(a), Some(b)) => {
                let (x, y) = (a.mean_final(|r| r.ap), b.mean_final(|r| r.ap));
                Check { name: "crosskd_reaches_baseline", passed: x >= y, detail: format!("CROSSKD_A {x:.4} vs baseline {y:.4}") }
            }
            _ => missing("crosskd_reaches_baseline"),
        });
    }
    if expect.mimic_not_above_crosskd {
        out.push(match (a, pm) {
            (Some(a), Some(pm)) => {
                let (x, y) = (pm.mean_final(|r| r.ap), a.mean_final(|r| r.ap));
                Check { name: "mimic_not_above_crosskd", passed: x <= y, detail: format!("PRED_MIMIC {x:.4} vs CROSSKD_A {y:.4}") }
            }
            _ => missing("mimic_not_above_crosskd"),
        });
    }
    if expect.distance_ordering {
        out.push(match (a, pm) {
            (Some(a), Some(pm)) => {
                let (a_gt, pm_gt) = (a.mean_final(|r| r.l1_cls_gt), pm.mean_final(|r| r.l1_cls_gt));
                let (a_t, pm_t) = (a.mean_final(|r| r.l1_pred_teacher), pm.mean_final(|r| r.l1_pred_teacher));
                Check {
                    name: "distance_ordering",
                    passed: a_gt <= pm_gt && pm_t <= a_t,
                    detail: format!(
                        "l1_cls_gt CROSSKD_A {a_gt:.4} vs PRED_MIMIC {pm_gt:.4}; l1_pred_teacher PRED_MIMIC {pm_t:.4} vs CROSSKD_A {a_t:.4}"
                    ),
                }
            }
            _ => missing("distance_ordering"),
        });
    }
    out
}

/// Compares the last teacher against the first at threshold 0.5.
pub fn conflict_checks(report: &[(String, ConflictCurve)], expect: &Expectations) -> Vec<Check> {
    if !expect.conflict_dominance {
        return Vec::new();
    }
    let (Some((same_name, same)), Some((diff_name, diff))) = (report.first(), report.last()) else {
        return vec![Check { name: "conflict_dominance", passed: false, detail: "no teachers analyzed".into() }];
    };
    let (s, d) = (same.ratio_at(0.5), diff.ratio_at(0.5));
    vec![Check {
        name: "conflict_dominance",
        passed: report.len() >= 2 && matches!((s, d), (Some(s), Some(d)) if d >= s),
        detail: format!(
            "ratio at 0.5: {diff_name} {d:?} vs {same_name} {s:?}; whole curve dominates: {}",
            diff.dominates(same)
        ),
    }]
}
