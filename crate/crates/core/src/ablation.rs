//! The four-arm comparison: weight-level versus structured, per-layer versus
//! global, and one-shot versus iterative, all pruned to the same cumulative
//! fraction from one shared baseline.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::param_stats;
use crate::model::checkpoint::{self, TrainingState};
use crate::model::ModelGraph;
use crate::prune::Variant;
use crate::schedule::{
    iterative_prune, oneshot_prune, save_history, Mode, ProgressFn, PruneRun, ScheduleConfig,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arm {
    pub label: &'static str,
    pub variant: Variant,
    pub mode: Mode,
}

pub const ARMS: [Arm; 4] = [
    Arm {
        label: "non-structured",
        variant: Variant::GlobalWeight,
        mode: Mode::Iterative,
    },
    Arm {
        label: "non-global",
        variant: Variant::LayerwiseStructured,
        mode: Mode::Iterative,
    },
    Arm {
        label: "oneshot",
        variant: Variant::GlobalStructured,
        mode: Mode::Oneshot,
    },
    Arm {
        label: "ours",
        variant: Variant::GlobalStructured,
        mode: Mode::Iterative,
    },
];

/// Tolerance that never triggers a rollback, so every arm reaches `p_max`.
const NO_ROLLBACK_EPSILON: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub variant: Variant,
    pub mode: Mode,
    pub seed: u64,
    pub cumulative_p: f64,
    pub error_pct: f64,
    pub param_pruned_pct: f64,
    pub effective_pruned_pct: f64,
    pub unmasked_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub label: String,
    pub median_error_pct: f64,
    pub median_param_pruned_pct: f64,
    pub median_effective_pruned_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub baseline_error_pct: f64,
    pub p: f64,
    pub retrain_epochs_iterative: usize,
    pub retrain_epochs_oneshot: usize,
    pub rows: Vec<AblationRow>,
    pub summary: Vec<AblationSummary>,
}

impl AblationTable {
    pub fn summary_for(&self, label: &str) -> Option<&AblationSummary> {
        self.summary.iter().find(|s| s.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut csv = String::from("label,variant,mode,seed,cumulative_p,error_pct,param_pruned_pct,effective_pruned_pct\n");
        for r in &self.rows {
            let mode = match r.mode {
                Mode::Iterative => "iterative",
                Mode::Oneshot => "oneshot",
            };
            let _ = writeln!(
                csv,
                "{},{},{mode},{},{},{},{},{}",
                r.label,
                r.variant,
                r.seed,
                r.cumulative_p,
                r.error_pct,
                r.param_pruned_pct,
                r.effective_pruned_pct
            );
        }
        csv
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub struct AblationRun {
    pub arm: Arm,
    pub seed: u64,
    pub run: PruneRun,
}

/// Runs every arm for every seed from `baseline`. Iterative arms follow
/// `base`'s schedule up to `p_max`; the one-shot arm prunes straight to
/// `p_max` and retrains for as many epochs as an iterative arm spends in
/// total. Per-run histories and final checkpoints go under `out_dir`.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    baseline: &ModelGraph,
    baseline_accuracy: f64,
    train: &Dataset,
    test: &Dataset,
    base: &ScheduleConfig,
    seeds: &[u64],
    out_dir: Option<&Path>,
    progress: ProgressFn<'_>,
) -> Result<(AblationTable, Vec<AblationRun>)> {
    if seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed"));
    }
    base.validate()?;
    let steps = base.schedule_points().len();
    let oneshot_epochs = base.retrain_epochs * steps;
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &seed in seeds {
        for arm in ARMS {
            let cfg = ScheduleConfig {
                variant: arm.variant,
                master_seed: seed,
                epsilon: NO_ROLLBACK_EPSILON,
                retrain_epochs: match arm.mode {
                    Mode::Iterative => base.retrain_epochs,
                    Mode::Oneshot => oneshot_epochs,
                },
                ..base.clone()
            };
            let run = match arm.mode {
                Mode::Iterative => iterative_prune(
                    baseline.clone(),
                    train,
                    test,
                    baseline_accuracy,
                    &cfg,
                    None,
                    progress,
                )?,
                Mode::Oneshot => oneshot_prune(
                    baseline.clone(),
                    train,
                    test,
                    baseline_accuracy,
                    cfg.p_max,
                    &cfg,
                    None,
                    progress,
                )?,
            };
            let stats = param_stats(&run.model, arm.variant);
            rows.push(AblationRow {
                label: arm.label.to_string(),
                variant: arm.variant,
                mode: arm.mode,
                seed,
                cumulative_p: run.history.final_record().map_or(0.0, |r| r.cumulative_p),
                error_pct: 100.0 * (1.0 - run.history.final_accuracy),
                param_pruned_pct: stats.param_pruned_pct,
                effective_pruned_pct: stats.effective_pruned_pct,
                unmasked_params: stats.unmasked_params,
            });
            if let Some(dir) = out_dir {
                let sub = dir.join(format!("{}-seed{seed}", arm.label));
                save_history(&run.history, &sub)?;
                let state = TrainingState {
                    seed,
                    cumulative_p: cfg.p_max,
                    accuracy: Some(run.history.final_accuracy),
                    ..Default::default()
                };
                checkpoint::save(sub.join("final.ckpt"), &run.model, &state)?;
            }
            runs.push(AblationRun { arm, seed, run });
        }
    }
    let summary = ARMS
        .iter()
        .map(|arm| {
            let pick = |f: fn(&AblationRow) -> f64| {
                median(
                    &rows
                        .iter()
                        .filter(|r| r.label == arm.label)
                        .map(f)
                        .collect::<Vec<_>>(),
                )
            };
            AblationSummary {
                label: arm.label.to_string(),
                median_error_pct: pick(|r| r.error_pct),
                median_param_pruned_pct: pick(|r| r.param_pruned_pct),
                median_effective_pruned_pct: pick(|r| r.effective_pruned_pct),
            }
        })
        .collect();
    let table = AblationTable {
        baseline_error_pct: 100.0 * (1.0 - baseline_accuracy),
        p: base.p_max,
        retrain_epochs_iterative: base.retrain_epochs,
        retrain_epochs_oneshot: oneshot_epochs,
        rows,
        summary,
    };
    Ok((table, runs))
}
