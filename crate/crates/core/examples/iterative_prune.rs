//! Train briefly, then run the prune/retrain loop with rollback on a slice
//! of MNIST.

use prunekit::data::{load_mnist, Split};
use prunekit::metrics::param_stats;
use prunekit::model::build_lenet5;
use prunekit::schedule::{iterative_prune, quiet, train_baseline, Progress, ScheduleConfig};
use prunekit::Result;

fn main() -> Result<()> {
    let dir = std::env::var("PRUNEKIT_DATA_DIR").unwrap_or_else(|_| "data/mnist".into());
    let train = load_mnist(&dir, Split::Train)?.head(3000);
    let test = load_mnist(&dir, Split::Test)?.head(1000);

    let mut model = build_lenet5();
    model.init_params(0);
    let cfg = ScheduleConfig {
        epochs: 2,
        batch_size: 32,
        base_lr: 0.02,
        retrain_lr: 0.005,
        retrain_epochs: 1,
        p_start: 0.5,
        p_step: 0.1,
        p_max: 0.95,
        epsilon: 1.0,
        ..Default::default()
    };
    let base = train_baseline(&mut model, &train, &test, &cfg, &mut quiet)?;
    println!("baseline {:.2}%", 100.0 * base.accuracy);

    let run = iterative_prune(
        model,
        &train,
        &test,
        base.accuracy,
        &cfg,
        None,
        &mut |p: &Progress| {
            if let Progress::Iteration {
                iteration,
                cumulative_p,
                pre_retrain_accuracy,
                post_retrain_accuracy,
                accepted,
                ..
            } = p
            {
                println!(
                    "iteration {iteration}: p {cumulative_p:.2} {:.2}% -> {:.2}% {}",
                    100.0 * pre_retrain_accuracy,
                    100.0 * post_retrain_accuracy,
                    if *accepted { "kept" } else { "rolled back" }
                );
            }
        },
    )?;
    let stats = param_stats(&run.model, cfg.variant);
    println!(
        "final {:.2}% with {:.2}% of parameters pruned",
        100.0 * run.history.final_accuracy,
        stats.param_pruned_pct
    );
    Ok(())
}
