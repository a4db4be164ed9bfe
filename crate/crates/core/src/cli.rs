//! Command-line front end. Progress and results go to stdout as JSON lines,
//! a human-readable log goes to stderr, and a failure ends with one JSON
//! error record on stderr and a nonzero exit code.
//!
//! Settings resolve in the order: flag, `--config` file, environment
//! (`PRUNEKIT_DATA_DIR` only), built-in default. The resolved settings are
//! written to `config.json` in the output directory before any work starts.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ablation::run_ablation;
use crate::data::{load_mnist, Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{
    default_bins, emit_report, neuron_histogram, param_stats, pruning_pattern, weight_evolution,
    Report,
};
use crate::model::checkpoint::{self, TrainingState};
use crate::model::{build_lenet5, Counting, ModelGraph};
use crate::prune::{compact, forward_deviation, Variant};
use crate::schedule::{
    evaluate, iterative_prune, oneshot_prune, save_history, train_baseline, Progress, PruneRun,
    ScheduleConfig,
};

pub const DATA_DIR_ENV: &str = "PRUNEKIT_DATA_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "prunekit",
    version,
    about = "Structured global L1 pruning of LeNet-5 on MNIST"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a baseline LeNet-5 (or continue from --checkpoint).
    Train(Flags),
    /// Prune a trained checkpoint.
    Prune {
        #[command(subcommand)]
        mode: PruneMode,
    },
    /// Accuracy and compression statistics of a checkpoint.
    Eval(Flags),
    /// Run the four-arm ablation from one baseline checkpoint.
    Ablate(Flags),
    /// Physically remove masked units and verify the forward function.
    Compact(Flags),
}

#[derive(Subcommand, Debug)]
pub enum PruneMode {
    /// Prune/retrain cycles with rollback.
    Iterative(Flags),
    /// One plan at --p (default --p-max), then one retraining phase.
    Oneshot(Flags),
}

#[derive(Args, Debug, Default, Clone)]
pub struct Flags {
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON file with any of the fields of config.json.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub p_start: Option<f64>,
    #[arg(long)]
    pub p_step: Option<f64>,
    #[arg(long)]
    pub p_max: Option<f64>,
    /// Allowed accuracy drop in percentage points.
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub retrain_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub retrain_lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// One-shot target fraction.
    #[arg(long)]
    pub p: Option<f64>,
    /// Ablation seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Compaction tolerance on max |logit difference|.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Test images used to verify compaction.
    #[arg(long)]
    pub verify_images: Option<usize>,
    /// Use only the first N training images.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Use only the first N test images.
    #[arg(long)]
    pub test_limit: Option<usize>,
}

/// Fully resolved settings of one invocation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub command: String,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub p: Option<f64>,
    pub seeds: Vec<u64>,
    pub tolerance: f64,
    pub verify_images: usize,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    #[serde(flatten)]
    pub schedule: ScheduleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: String::new(),
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::new(),
            checkpoint: None,
            p: None,
            seeds: vec![0, 1, 2],
            tolerance: 1e-9,
            verify_images: 1000,
            train_limit: None,
            test_limit: None,
            schedule: ScheduleConfig::default(),
        }
    }
}

fn read_config_file(path: &Path) -> Result<(RunConfig, BTreeSet<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text)?;
    let Value::Object(map) = &value else {
        return Err(Error::Usage(format!(
            "{}: config must be a JSON object",
            path.display()
        )));
    };
    let known = match serde_json::to_value(RunConfig::default())? {
        Value::Object(m) => m.keys().cloned().collect::<BTreeSet<_>>(),
        _ => unreachable!("RunConfig serializes to an object"),
    };
    if let Some(k) = map.keys().find(|k| !known.contains(*k)) {
        return Err(Error::Usage(format!(
            "{}: unknown config field {k:?}",
            path.display()
        )));
    }
    let keys = map.keys().cloned().collect();
    Ok((serde_json::from_value(value)?, keys))
}

/// Merges flags over the config file over the environment over defaults.
pub fn resolve(command: &str, flags: &Flags) -> Result<RunConfig> {
    let (mut cfg, file_keys) = match &flags.config {
        Some(path) => read_config_file(path)?,
        None => (RunConfig::default(), BTreeSet::new()),
    };
    cfg.command = command.to_string();
    if !file_keys.contains("data_dir") {
        if let Some(env) = std::env::var_os(DATA_DIR_ENV).filter(|v| !v.is_empty()) {
            cfg.data_dir = PathBuf::from(env);
        }
    }
    if !file_keys.contains("out_dir") {
        cfg.out_dir = Path::new("runs").join(command.replace(' ', "-"));
    }
    macro_rules! over {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = flags.$flag.clone() { cfg.$($field).+ = v; })*
        };
    }
    over!(
        data_dir => data_dir,
        out_dir => out_dir,
        seed => schedule.master_seed,
        variant => schedule.variant,
        p_start => schedule.p_start,
        p_step => schedule.p_step,
        p_max => schedule.p_max,
        epsilon => schedule.epsilon,
        epochs => schedule.epochs,
        retrain_epochs => schedule.retrain_epochs,
        batch_size => schedule.batch_size,
        lr => schedule.base_lr,
        retrain_lr => schedule.retrain_lr,
        momentum => schedule.momentum,
        seeds => seeds,
        tolerance => tolerance,
        verify_images => verify_images,
    );
    if flags.checkpoint.is_some() {
        cfg.checkpoint = flags.checkpoint.clone();
    }
    if flags.p.is_some() {
        cfg.p = flags.p;
    }
    if flags.train_limit.is_some() {
        cfg.train_limit = flags.train_limit;
    }
    if flags.test_limit.is_some() {
        cfg.test_limit = flags.test_limit;
    }
    cfg.schedule.validate()?;
    if let Some(p) = cfg.p {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Usage(format!("--p {p} outside [0, 1]")));
        }
    }
    if !(cfg.tolerance >= 0.0) {
        return Err(Error::Usage(format!(
            "--tolerance must be non-negative, got {}",
            cfg.tolerance
        )));
    }
    Ok(cfg)
}

struct Ctx<'a> {
    out: &'a mut dyn Write,
    cfg: RunConfig,
}

fn log(msg: impl AsRef<str>) {
    eprintln!("[prunekit] {}", msg.as_ref());
}

impl Ctx<'_> {
    fn emit(&mut self, value: &impl Serialize) {
        if let Ok(line) = serde_json::to_string(value) {
            let _ = writeln!(self.out, "{line}");
            let _ = self.out.flush();
        }
    }

    fn checkpoint(&self) -> Result<PathBuf> {
        self.cfg
            .checkpoint
            .clone()
            .ok_or_else(|| Error::Usage(format!("{} needs --checkpoint", self.cfg.command)))
    }

    fn load(&self, split: Split) -> Result<Dataset> {
        let ds = load_mnist(&self.cfg.data_dir, split)?;
        let limit = match split {
            Split::Train => self.cfg.train_limit,
            Split::Test => self.cfg.test_limit,
        };
        Ok(match limit {
            Some(n) if n < ds.len() => ds.head(n),
            _ => ds,
        })
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }
}

fn describe(p: &Progress) -> String {
    match p {
        Progress::Epoch {
            phase,
            iteration,
            record,
        } => format!(
            "{phase} {}epoch {}: lr {} loss {:.5} accuracy {:.2}%",
            if *iteration > 0 { format!("iteration {iteration} ") } else { String::new() },
            record.epoch + 1,
            record.lr,
            record.mean_loss,
            100.0 * record.accuracy
        ),
        Progress::Iteration {
            iteration,
            cumulative_p,
            pre_retrain_accuracy,
            post_retrain_accuracy,
            unmasked_params,
            accepted,
        } => format!(
            "iteration {iteration}: p {cumulative_p:.4} accuracy {:.2}% -> {:.2}% unmasked params {unmasked_params} {}",
            100.0 * pre_retrain_accuracy,
            100.0 * post_retrain_accuracy,
            if *accepted { "accepted" } else { "rejected, rolling back" }
        ),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// writing JSON lines to `out`. Returns the final result record.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<Value>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::Usage(one_line(&e.to_string())))?;
    execute(cli.command, out)
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<Value> {
    let (name, flags) = match &command {
        Command::Train(f) => ("train", f),
        Command::Prune {
            mode: PruneMode::Iterative(f),
        } => ("prune iterative", f),
        Command::Prune {
            mode: PruneMode::Oneshot(f),
        } => ("prune oneshot", f),
        Command::Eval(f) => ("eval", f),
        Command::Ablate(f) => ("ablate", f),
        Command::Compact(f) => ("compact", f),
    };
    let cfg = resolve(name, flags)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
    let cfg_path = cfg.out_dir.join("config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)? + "\n")
        .map_err(|e| Error::io(&cfg_path, e))?;
    log(format!(
        "{name}: resolved config written to {}",
        cfg_path.display()
    ));
    let mut ctx = Ctx { out, cfg };
    let started = std::time::Instant::now();
    let mut result = match name {
        "train" => cmd_train(&mut ctx)?,
        "prune iterative" | "prune oneshot" => cmd_prune(&mut ctx, name == "prune oneshot")?,
        "eval" => cmd_eval(&mut ctx)?,
        "ablate" => cmd_ablate(&mut ctx)?,
        "compact" => cmd_compact(&mut ctx)?,
        _ => unreachable!(),
    };
    result["elapsed_s"] = json!(started.elapsed().as_secs_f64());
    ctx.emit(&result);
    Ok(result)
}

fn one_line(s: &str) -> String {
    s.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

fn cmd_train(ctx: &mut Ctx<'_>) -> Result<Value> {
    let train = ctx.load(Split::Train)?;
    let test = ctx.load(Split::Test)?;
    let sched = ctx.cfg.schedule.clone();
    let mut model = match &ctx.cfg.checkpoint {
        Some(path) => checkpoint::load(path)?.model,
        None => {
            let mut m = build_lenet5();
            m.init_params(sched.master_seed);
            m
        }
    };
    log(format!(
        "training on {} images, evaluating on {}",
        train.len(),
        test.len()
    ));
    let outcome = {
        let mut progress = |p: &Progress| {
            log(describe(p));
            ctx.emit(p);
        };
        train_baseline(&mut model, &train, &test, &sched, &mut progress)?
    };
    let ckpt = ctx.out_path("model.ckpt");
    let state = TrainingState {
        epoch: sched.epochs as u64,
        iteration: 0,
        seed: sched.master_seed,
        cumulative_p: 0.0,
        accuracy: Some(outcome.accuracy),
    };
    checkpoint::save(&ckpt, &model, &state)?;
    let summary = ctx.out_path("train.json");
    std::fs::write(&summary, serde_json::to_string_pretty(&outcome)? + "\n")
        .map_err(|e| Error::io(&summary, e))?;
    log(format!(
        "best accuracy {:.2}%, checkpoint {}",
        100.0 * outcome.accuracy,
        ckpt.display()
    ));
    Ok(json!({
        "event": "result",
        "command": "train",
        "accuracy": outcome.accuracy,
        "error_pct": 100.0 * (1.0 - outcome.accuracy),
        "checkpoint": ckpt,
    }))
}

fn report_for(run: &PruneRun, test: &Dataset, variant: Variant) -> Result<Report> {
    let mut report = Report::new();
    report.stats.push(param_stats(&run.model, variant));
    report.pattern = pruning_pattern(&run.model);
    if !run.history.iterations.is_empty() {
        report.evolution = weight_evolution(&run.history)?;
    }
    report.histograms.push(neuron_histogram(
        &run.model,
        test,
        &default_bins(),
        variant.as_str(),
    )?);
    Ok(report)
}

fn cmd_prune(ctx: &mut Ctx<'_>, oneshot: bool) -> Result<Value> {
    let ckpt = ctx.checkpoint()?;
    let model = checkpoint::load(&ckpt)?.model;
    let train = ctx.load(Split::Train)?;
    let test = ctx.load(Split::Test)?;
    let sched = ctx.cfg.schedule.clone();
    let baseline_accuracy = evaluate(&model, &test)?;
    log(format!(
        "baseline accuracy {:.2}% from {}",
        100.0 * baseline_accuracy,
        ckpt.display()
    ));
    let ckpt_dir = ctx.out_path("checkpoints");
    let target = ctx.cfg.p.unwrap_or(sched.p_max);
    let run = {
        let mut progress = |p: &Progress| {
            log(describe(p));
            ctx.emit(p);
        };
        if oneshot {
            oneshot_prune(
                model,
                &train,
                &test,
                baseline_accuracy,
                target,
                &sched,
                Some(&ckpt_dir),
                &mut progress,
            )?
        } else {
            iterative_prune(
                model,
                &train,
                &test,
                baseline_accuracy,
                &sched,
                Some(&ckpt_dir),
                &mut progress,
            )?
        }
    };
    let final_p = run.history.final_record().map_or(0.0, |r| r.cumulative_p);
    let state = TrainingState {
        epoch: 0,
        iteration: run.history.final_iteration.unwrap_or(0) as u64,
        seed: sched.master_seed,
        cumulative_p: final_p,
        accuracy: Some(run.history.final_accuracy),
    };
    checkpoint::save(ctx.out_path("final.ckpt"), &run.model, &state)?;
    save_history(&run.history, &ctx.cfg.out_dir)?;
    let report = report_for(&run, &test, sched.variant)?;
    emit_report(&report, ctx.out_path("report"))?;
    let stats = &report.stats[0];
    if run.history.flagged {
        log("no pruning step met the tolerance; returning the baseline");
    }
    log(format!(
        "final accuracy {:.2}% at p {final_p:.4}, {:.2}% of parameters pruned",
        100.0 * run.history.final_accuracy,
        stats.param_pruned_pct
    ));
    Ok(json!({
        "event": "result",
        "command": if oneshot { "prune oneshot" } else { "prune iterative" },
        "baseline_accuracy": baseline_accuracy,
        "final_accuracy": run.history.final_accuracy,
        "error_pct": 100.0 * (1.0 - run.history.final_accuracy),
        "cumulative_p": final_p,
        "flagged": run.history.flagged,
        "stats": stats,
        "checkpoint": ctx.out_path("final.ckpt"),
    }))
}

fn cmd_eval(ctx: &mut Ctx<'_>) -> Result<Value> {
    let ckpt = ctx.checkpoint()?;
    let model = checkpoint::load(&ckpt)?.model;
    let test = ctx.load(Split::Test)?;
    let accuracy = evaluate(&model, &test)?;
    let stats = param_stats(&model, ctx.cfg.schedule.variant);
    log(format!(
        "{}: accuracy {:.2}% on {} images, {:.2}% of parameters pruned",
        ckpt.display(),
        100.0 * accuracy,
        test.len(),
        stats.param_pruned_pct
    ));
    Ok(json!({
        "event": "result",
        "command": "eval",
        "accuracy": accuracy,
        "error_pct": 100.0 * (1.0 - accuracy),
        "stats": stats,
        "pattern": pruning_pattern(&model),
    }))
}

fn cmd_ablate(ctx: &mut Ctx<'_>) -> Result<Value> {
    let ckpt = ctx.checkpoint()?;
    let baseline = checkpoint::load(&ckpt)?.model;
    let train = ctx.load(Split::Train)?;
    let test = ctx.load(Split::Test)?;
    let baseline_accuracy = evaluate(&baseline, &test)?;
    let sched = ctx.cfg.schedule.clone();
    let seeds = ctx.cfg.seeds.clone();
    let out_dir = ctx.cfg.out_dir.clone();
    let (table, runs) = {
        let mut progress = |p: &Progress| {
            log(describe(p));
            ctx.emit(p);
        };
        run_ablation(
            &baseline,
            baseline_accuracy,
            &train,
            &test,
            &sched,
            &seeds,
            Some(&out_dir),
            &mut progress,
        )?
    };
    let path = ctx.out_path("ablation.json");
    std::fs::write(&path, serde_json::to_string_pretty(&table)? + "\n")
        .map_err(|e| Error::io(&path, e))?;
    let csv = ctx.out_path("ablation.csv");
    std::fs::write(&csv, table.to_csv()).map_err(|e| Error::io(&csv, e))?;

    let mut report = Report::new();
    for r in runs.iter().filter(|r| r.seed == seeds[0]) {
        report.stats.push(param_stats(&r.run.model, r.arm.variant));
        if matches!(r.arm.label, "ours" | "non-structured") {
            report.histograms.push(neuron_histogram(
                &r.run.model,
                &test,
                &default_bins(),
                r.arm.label,
            )?);
        }
    }
    emit_report(&report, ctx.out_path("report"))?;
    for s in &table.summary {
        log(format!(
            "{:<15} median error {:.2}%  params pruned {:.2}%  effective {:.2}%",
            s.label, s.median_error_pct, s.median_param_pruned_pct, s.median_effective_pruned_pct
        ));
    }
    Ok(json!({
        "event": "result",
        "command": "ablate",
        "baseline_error_pct": table.baseline_error_pct,
        "p": table.p,
        "summary": table.summary,
        "table": path,
    }))
}

fn cmd_compact(ctx: &mut Ctx<'_>) -> Result<Value> {
    let ckpt = ctx.checkpoint()?;
    let loaded = checkpoint::load(&ckpt)?;
    let model: ModelGraph = loaded.model;
    let test = ctx.load(Split::Test)?;
    let small = compact(&model)?;
    let n = ctx.cfg.verify_images.min(test.len());
    let deviation = forward_deviation(&model, &small, &test.images().slice_outer(0, n)?, 100)?;
    let tolerance = ctx.cfg.tolerance;
    log(format!(
        "max |logit difference| over {n} images: {deviation:e} (tolerance {tolerance:e})"
    ));
    if !(deviation <= tolerance) {
        return Err(Error::Tolerance {
            deviation,
            tolerance,
        });
    }
    let path = ctx.out_path("compact.ckpt");
    checkpoint::save(&path, &small, &loaded.state)?;
    Ok(json!({
        "event": "result",
        "command": "compact",
        "deviation": deviation,
        "tolerance": tolerance,
        "verified_images": n,
        "params_before": model.param_count(Counting::Unmasked),
        "params_after": small.param_count(Counting::Total),
        "units": small.layers().iter().filter(|l| l.is_weighted()).map(|l| l.unit_count).collect::<Vec<_>>(),
        "checkpoint": path,
    }))
}

/// Entry point of the `prunekit` binary; returns the process exit code.
pub fn main_exit<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return 0;
        }
        Err(e) => return report_error(&Error::Usage(one_line(&e.to_string()))),
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match execute(cli.command, &mut lock) {
        Ok(_) => 0,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &Error) -> i32 {
    let record = json!({"event": "error", "kind": e.kind(), "message": one_line(&e.to_string())});
    eprintln!("{record}");
    if matches!(e, Error::Usage(_)) {
        2
    } else {
        1
    }
}
