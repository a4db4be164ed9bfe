//! Loads MNIST (plain or .gz IDX files) and walks one shuffled epoch.
//!
//! cargo run --release --example mnist -- [data-dir]

use prunekit::data::{batch_iter, derive_seed, load_mnist, Split};
use prunekit::Result;

fn main() -> Result<()> {
    let dir = std::env::args()
        .nth(1)
        .or_else(|| std::env::var("PRUNEKIT_DATA_DIR").ok())
        .unwrap_or_else(|| "data/mnist".into());
    let train = load_mnist(&dir, Split::Train)?;
    let test = load_mnist(&dir, Split::Test)?;
    println!(
        "train {} images {:?}, test {}",
        train.len(),
        train.image_shape(),
        test.len()
    );

    let px = train.images().data();
    let mean = px.iter().sum::<f64>() / px.len() as f64;
    let var = px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / px.len() as f64;
    println!("standardized pixels: mean {mean:.5}, std {:.5}", var.sqrt());

    let mut counts = [0usize; 10];
    train.labels().iter().for_each(|&l| counts[l] += 1);
    println!("labels per digit {counts:?}");

    let batches = batch_iter(&train, 64, derive_seed(0, 0, 0))?;
    println!(
        "epoch of {} batches, first indices {:?}",
        batches.num_batches(),
        &batches.order()[..8]
    );
    let last = batches.last().expect("non-empty");
    println!("last batch holds {} images", last.1.len());
    Ok(())
}
