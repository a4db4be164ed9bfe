//! Baseline training, one-shot pruning, and the iterative prune/retrain
//! loop with rollback.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, derive_seed, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{mean_abs_weights, pruning_pattern};
use crate::model::checkpoint::{self, TrainingState};
use crate::model::{Counting, ModelGraph};
use crate::prune::{self, Variant};
use crate::tensor::{Sgd, Tape};

const BASELINE_STREAM: u64 = 0xBA5E;
const RETRAIN_STREAM: u64 = 0x2E72;

pub const EVAL_BATCH: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub variant: Variant,
    pub p_start: f64,
    pub p_step: f64,
    pub p_max: f64,
    /// Baseline epochs.
    pub epochs: usize,
    /// Epoch (0-based) from which the baseline rate is multiplied by `lr_decay`.
    pub lr_decay_epoch: Option<usize>,
    pub lr_decay: f64,
    pub retrain_epochs: usize,
    pub base_lr: f64,
    pub retrain_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Allowed drop below baseline accuracy, in accuracy points (percent).
    pub epsilon: f64,
    pub master_seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            variant: Variant::GlobalStructured,
            p_start: 0.5,
            p_step: 0.05,
            p_max: 0.98,
            epochs: 20,
            lr_decay_epoch: Some(15),
            lr_decay: 0.1,
            retrain_epochs: 4,
            base_lr: 0.05,
            retrain_lr: 0.005,
            momentum: 0.9,
            batch_size: 64,
            epsilon: 0.1,
            master_seed: 0,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(0.0 <= self.p_start && self.p_start <= self.p_max && self.p_max <= 1.0) {
            return bad(format!(
                "need 0 <= p_start <= p_max <= 1, got p_start {} p_max {}",
                self.p_start, self.p_max
            ));
        }
        if !(self.p_step > 0.0) {
            return bad(format!("p_step must be positive, got {}", self.p_step));
        }
        if !(self.epsilon >= 0.0) {
            return bad(format!(
                "epsilon must be non-negative, got {}",
                self.epsilon
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [
            ("lr", self.base_lr),
            ("retrain_lr", self.retrain_lr),
            ("momentum", self.momentum),
            ("lr_decay", self.lr_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// Baseline learning rate for a 0-based epoch.
    pub fn baseline_lr(&self, epoch: usize) -> f64 {
        match self.lr_decay_epoch {
            Some(d) if epoch >= d => self.base_lr * self.lr_decay,
            _ => self.base_lr,
        }
    }

    /// Cumulative fractions visited by the iterative loop.
    pub fn schedule_points(&self) -> Vec<f64> {
        let mut points = Vec::new();
        for k in 0.. {
            let p = (self.p_start + k as f64 * self.p_step).min(self.p_max);
            points.push(p);
            if p >= self.p_max {
                break;
            }
        }
        points
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSnapshot {
    pub layer_id: usize,
    pub layer_name: String,
    pub unit_fraction: f64,
    pub weight_fraction: f64,
    pub mean_abs_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub unmasked_params: usize,
    pub layers: Vec<LayerSnapshot>,
}

impl Snapshot {
    pub fn of(model: &ModelGraph) -> Self {
        let means = mean_abs_weights(model);
        Self {
            unmasked_params: model.param_count(Counting::Unmasked),
            layers: pruning_pattern(model)
                .into_iter()
                .zip(means)
                .map(|(p, (_, m))| LayerSnapshot {
                    layer_id: p.layer_id,
                    layer_name: p.layer_name,
                    unit_fraction: p.unit_fraction,
                    weight_fraction: p.weight_fraction,
                    mean_abs_weight: m,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cumulative_p: f64,
    pub pre_retrain_accuracy: f64,
    pub post_retrain_accuracy: f64,
    pub accepted: bool,
    pub checkpoint: Option<String>,
    pub snapshot: Snapshot,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Iterative,
    Oneshot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub mode: Mode,
    pub config: ScheduleConfig,
    pub baseline_accuracy: f64,
    pub baseline: Snapshot,
    pub iterations: Vec<IterationRecord>,
    /// 1-based iteration of the returned model; `None` when the run fell
    /// back to the baseline.
    pub final_iteration: Option<usize>,
    pub final_accuracy: f64,
    /// Set when not even the first pruning step met the tolerance.
    pub flagged: bool,
}

impl RunHistory {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn final_record(&self) -> Option<&IterationRecord> {
        self.final_iteration.map(|i| &self.iterations[i - 1])
    }
}

/// Progress notifications for callers that stream or log a run.
#[derive(Clone, Debug, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Progress {
    Epoch {
        phase: &'static str,
        iteration: usize,
        #[serde(flatten)]
        record: EpochRecord,
    },
    Iteration {
        iteration: usize,
        cumulative_p: f64,
        pre_retrain_accuracy: f64,
        post_retrain_accuracy: f64,
        unmasked_params: usize,
        accepted: bool,
    },
}

pub type ProgressFn<'a> = &'a mut dyn FnMut(&Progress);

/// Discards progress.
pub fn quiet(_: &Progress) {}

pub fn evaluate(model: &ModelGraph, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::invalid("evaluation on an empty dataset"));
    }
    let preds = model.predict(dataset.images(), EVAL_BATCH)?;
    let hits = preds
        .iter()
        .zip(dataset.labels())
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / dataset.len() as f64)
}

/// One pass over `train` in the order fixed by `epoch_seed`. Returns the
/// mean batch loss.
pub fn train_epoch(
    model: &mut ModelGraph,
    sgd: &mut Sgd,
    train: &Dataset,
    batch_size: usize,
    lr: f64,
    epoch_seed: u64,
) -> Result<f64> {
    let batches = batch_iter(train, batch_size, epoch_seed)?;
    let n = batches.num_batches();
    let mut total = 0.0;
    for (step, (images, labels)) in batches.enumerate() {
        let mut tape = Tape::new();
        let fwd = model.forward_taped(&mut tape, images, true)?;
        let loss = tape.softmax_cross_entropy(fwd.logits, &labels)?;
        let value = tape.value(loss)?.item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {value} at step {step} (lr {lr})"
            )));
        }
        total += value;
        tape.backward(loss)?;
        let (params, masks) = model.params_and_masks_mut();
        let mut tensors = Vec::new();
        let mut keep = Vec::new();
        for (id, (p, vars)) in params.iter_mut().zip(&fwd.params).enumerate() {
            let Some((w, b)) = *vars else { continue };
            let m = masks.layer(id);
            let gw = tape
                .take_grad(w)?
                .unwrap_or_else(|| vec![0.0; p.weight.numel()]);
            let gb = tape
                .take_grad(b)?
                .unwrap_or_else(|| vec![0.0; p.bias.numel()]);
            p.weight.set_grad(gw)?;
            p.bias.set_grad(gb)?;
            tensors.push(&mut p.weight);
            tensors.push(&mut p.bias);
            keep.push(Some(m.weights.as_slice()));
            keep.push(Some(m.bias.as_slice()));
        }
        sgd.step(&mut tensors, &keep, lr)?;
    }
    Ok(total / n as f64)
}

struct Phase<'a> {
    name: &'static str,
    iteration: usize,
    epochs: usize,
    lr: &'a dyn Fn(usize) -> f64,
    seed: u64,
}

/// Trains for `phase.epochs`, evaluating after each, and leaves the model at
/// its best-accuracy epoch. With zero epochs the model is only evaluated.
fn run_phase(
    model: &mut ModelGraph,
    train: &Dataset,
    test: &Dataset,
    cfg: &ScheduleConfig,
    phase: Phase<'_>,
    progress: ProgressFn<'_>,
) -> Result<(f64, Vec<EpochRecord>)> {
    if phase.epochs == 0 {
        return Ok((evaluate(model, test)?, Vec::new()));
    }
    let mut sgd = Sgd::new(cfg.momentum);
    let mut records = Vec::with_capacity(phase.epochs);
    let mut best: Option<(f64, Vec<crate::model::LayerParams>)> = None;
    for epoch in 0..phase.epochs {
        let lr = (phase.lr)(epoch);
        let mean_loss = train_epoch(
            model,
            &mut sgd,
            train,
            cfg.batch_size,
            lr,
            derive_seed(phase.seed, 0, epoch as u64),
        )?;
        let accuracy = evaluate(model, test)?;
        let record = EpochRecord {
            epoch,
            lr,
            mean_loss,
            accuracy,
        };
        progress(&Progress::Epoch {
            phase: phase.name,
            iteration: phase.iteration,
            record: record.clone(),
        });
        records.push(record);
        if best.as_ref().is_none_or(|(a, _)| accuracy > *a) {
            best = Some((accuracy, model.params().to_vec()));
        }
    }
    let (acc, params) = best.expect("at least one epoch");
    model.set_params(params)?;
    Ok((acc, records))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineOutcome {
    pub accuracy: f64,
    pub epochs: Vec<EpochRecord>,
}

/// Trains `model` for `cfg.epochs` and keeps the best-accuracy epoch.
pub fn train_baseline(
    model: &mut ModelGraph,
    train: &Dataset,
    test: &Dataset,
    cfg: &ScheduleConfig,
    progress: ProgressFn<'_>,
) -> Result<BaselineOutcome> {
    cfg.validate()?;
    let lr = |e: usize| cfg.baseline_lr(e);
    let phase = Phase {
        name: "baseline",
        iteration: 0,
        epochs: cfg.epochs,
        lr: &lr,
        seed: derive_seed(cfg.master_seed, BASELINE_STREAM, 0),
    };
    let (accuracy, epochs) = run_phase(model, train, test, cfg, phase, progress)?;
    Ok(BaselineOutcome { accuracy, epochs })
}

pub struct PruneRun {
    pub model: ModelGraph,
    pub history: RunHistory,
}

pub fn checkpoint_name(p: f64) -> String {
    format!("p{p:.4}.ckpt")
}

#[allow(clippy::too_many_arguments)]
fn run_schedule(
    mut model: ModelGraph,
    train: &Dataset,
    test: &Dataset,
    baseline_accuracy: f64,
    cfg: &ScheduleConfig,
    mode: Mode,
    points: &[f64],
    checkpoint_dir: Option<&Path>,
    progress: ProgressFn<'_>,
) -> Result<PruneRun> {
    cfg.validate()?;
    let floor = baseline_accuracy - cfg.epsilon / 100.0;
    let baseline = Snapshot::of(&model);
    let mut last_good = model.clone();
    let mut final_iteration = None;
    let mut final_accuracy = baseline_accuracy;
    let mut iterations = Vec::new();
    let lr = |_: usize| cfg.retrain_lr;
    for (k, &p) in points.iter().enumerate() {
        let iteration = k + 1;
        let plan = prune::plan(&model, cfg.variant, p)?;
        prune::apply_plan(&mut model, &plan)?;
        let pre = evaluate(&model, test)?;
        let phase = Phase {
            name: "retrain",
            iteration,
            epochs: cfg.retrain_epochs,
            lr: &lr,
            seed: derive_seed(cfg.master_seed, RETRAIN_STREAM, iteration as u64),
        };
        let (post, epochs) = run_phase(&mut model, train, test, cfg, phase, progress)?;
        let accepted = post >= floor;
        let mut ckpt = None;
        if accepted {
            if let Some(dir) = checkpoint_dir {
                let name = checkpoint_name(p);
                let state = TrainingState {
                    epoch: (cfg.retrain_epochs * iteration) as u64,
                    iteration: iteration as u64,
                    seed: cfg.master_seed,
                    cumulative_p: p,
                    accuracy: Some(post),
                };
                checkpoint::save(dir.join(&name), &model, &state)?;
                ckpt = Some(name);
            }
        }
        let snapshot = Snapshot::of(&model);
        progress(&Progress::Iteration {
            iteration,
            cumulative_p: p,
            pre_retrain_accuracy: pre,
            post_retrain_accuracy: post,
            unmasked_params: snapshot.unmasked_params,
            accepted,
        });
        iterations.push(IterationRecord {
            iteration,
            cumulative_p: p,
            pre_retrain_accuracy: pre,
            post_retrain_accuracy: post,
            accepted,
            checkpoint: ckpt,
            snapshot,
            epochs,
        });
        if !accepted {
            model = last_good;
            break;
        }
        last_good = model.clone();
        final_iteration = Some(iteration);
        final_accuracy = post;
    }
    let history = RunHistory {
        mode,
        config: cfg.clone(),
        baseline_accuracy,
        baseline,
        iterations,
        final_iteration,
        final_accuracy,
        flagged: final_iteration.is_none(),
    };
    Ok(PruneRun { model, history })
}

/// Raises the cumulative fraction from `p_start` by `p_step` up to `p_max`,
/// retraining after each step. Stops at the first step whose retrained
/// accuracy falls more than `epsilon` points below the baseline and returns
/// the last compliant model; the failed probe stays in the history.
pub fn iterative_prune(
    model: ModelGraph,
    train: &Dataset,
    test: &Dataset,
    baseline_accuracy: f64,
    cfg: &ScheduleConfig,
    checkpoint_dir: Option<&Path>,
    progress: ProgressFn<'_>,
) -> Result<PruneRun> {
    cfg.validate()?;
    let points = cfg.schedule_points();
    run_schedule(
        model,
        train,
        test,
        baseline_accuracy,
        cfg,
        Mode::Iterative,
        &points,
        checkpoint_dir,
        progress,
    )
}

/// A single plan at `p` followed by one retraining phase of
/// `cfg.retrain_epochs`. Falls back to the baseline when the result misses
/// the tolerance.
#[allow(clippy::too_many_arguments)]
pub fn oneshot_prune(
    model: ModelGraph,
    train: &Dataset,
    test: &Dataset,
    baseline_accuracy: f64,
    p: f64,
    cfg: &ScheduleConfig,
    checkpoint_dir: Option<&Path>,
    progress: ProgressFn<'_>,
) -> Result<PruneRun> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "pruning fraction {p} outside [0, 1]"
        )));
    }
    run_schedule(
        model,
        train,
        test,
        baseline_accuracy,
        cfg,
        Mode::Oneshot,
        &[p],
        checkpoint_dir,
        progress,
    )
}

/// Writes `history.json` into `dir`.
pub fn save_history(history: &RunHistory, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("history.json");
    std::fs::write(&path, history.to_json()?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn default_points() {
        let pts = ScheduleConfig::default().schedule_points();
        assert_eq!(pts.first(), Some(&0.5));
        assert_eq!(pts.last(), Some(&0.98));
        assert!(pts.windows(2).all(|w| w[0] < w[1]));
        let single = ScheduleConfig {
            p_start: 0.3,
            p_max: 0.3,
            ..Default::default()
        };
        assert_eq!(single.schedule_points(), [0.3]);
    }

    #[test]
    fn config_invariants() {
        let ok = ScheduleConfig::default();
        ok.validate().unwrap();
        for bad in [
            ScheduleConfig {
                p_start: 0.9,
                p_max: 0.5,
                ..ok.clone()
            },
            ScheduleConfig {
                p_step: 0.0,
                ..ok.clone()
            },
            ScheduleConfig {
                epsilon: -1.0,
                ..ok.clone()
            },
            ScheduleConfig {
                batch_size: 0,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn lr_decay() {
        let c = ScheduleConfig::default();
        assert_eq!(c.baseline_lr(14), 0.05);
        assert!((c.baseline_lr(15) - 0.005).abs() < 1e-18);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut m = crate::model::build_synthetic_residual(1, 2).unwrap();
        m.init_params(0);
        let cls = m.classifier_id();
        m.params_mut()[cls].bias.data_mut()[0] = f64::NAN;
        let ds = Dataset::new(Tensor::zeros([4, 1, 8, 8]), vec![0, 1, 2, 3]).unwrap();
        let err = train_epoch(&mut m, &mut Sgd::new(0.9), &ds, 2, 0.1, 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }
}
