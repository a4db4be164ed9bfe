//! Baseline training on a slice of MNIST.
//!
//! cargo run --release --example train -- [train-images] [epochs]

use prunekit::data::{load_mnist, Split};
use prunekit::model::build_lenet5;
use prunekit::schedule::{train_baseline, Progress, ScheduleConfig};
use prunekit::Result;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(4000);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2);
    let dir = std::env::var("PRUNEKIT_DATA_DIR").unwrap_or_else(|_| "data/mnist".into());
    let train = load_mnist(&dir, Split::Train)?.head(n);
    let test = load_mnist(&dir, Split::Test)?.head(2000);

    let mut model = build_lenet5();
    model.init_params(0);
    let cfg = ScheduleConfig {
        epochs,
        batch_size: 32,
        base_lr: 0.02,
        ..Default::default()
    };
    let out = train_baseline(&mut model, &train, &test, &cfg, &mut |p: &Progress| {
        if let Progress::Epoch { record, .. } = p {
            println!(
                "epoch {} loss {:.4} accuracy {:.2}%",
                record.epoch + 1,
                record.mean_loss,
                100.0 * record.accuracy
            );
        }
    })?;
    println!("kept best epoch: {:.2}%", 100.0 * out.accuracy);
    Ok(())
}
