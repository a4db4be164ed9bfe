//! The four-arm comparison on a small slice, one seed.

use prunekit::ablation::run_ablation;
use prunekit::data::{load_mnist, Split};
use prunekit::model::build_lenet5;
use prunekit::schedule::{quiet, train_baseline, ScheduleConfig};
use prunekit::Result;

fn main() -> Result<()> {
    let dir = std::env::var("PRUNEKIT_DATA_DIR").unwrap_or_else(|_| "data/mnist".into());
    let train = load_mnist(&dir, Split::Train)?.head(2000);
    let test = load_mnist(&dir, Split::Test)?.head(1000);
    let mut baseline = build_lenet5();
    baseline.init_params(0);
    let cfg = ScheduleConfig {
        epochs: 2,
        batch_size: 32,
        base_lr: 0.02,
        retrain_lr: 0.005,
        retrain_epochs: 1,
        p_start: 0.5,
        p_step: 0.2,
        p_max: 0.9,
        ..Default::default()
    };
    let acc = train_baseline(&mut baseline, &train, &test, &cfg, &mut quiet)?.accuracy;
    let (table, _) = run_ablation(&baseline, acc, &train, &test, &cfg, &[0], None, &mut quiet)?;
    println!("baseline error {:.2}%", table.baseline_error_pct);
    print!("{}", table.to_csv());
    Ok(())
}
