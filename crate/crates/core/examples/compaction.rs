//! Structured pruning followed by physical removal of the masked units.

use prunekit::model::{build_lenet5, Counting};
use prunekit::prune::{apply_plan, compact, forward_deviation, plan, Variant};
use prunekit::{Result, Tensor};

fn main() -> Result<()> {
    let mut model = build_lenet5();
    model.init_params(3);
    let pl = plan(&model, Variant::GlobalStructured, 0.8)?;
    apply_plan(&mut model, &pl)?;

    let small = compact(&model)?;
    let units = |m: &prunekit::model::ModelGraph| {
        m.layers().iter().map(|l| l.unit_count).collect::<Vec<_>>()
    };
    println!("units {:?} -> {:?}", units(&model), units(&small));
    println!(
        "parameters {} (unmasked {}) -> {}",
        model.param_count(Counting::Total),
        model.param_count(Counting::Unmasked),
        small.param_count(Counting::Total)
    );
    let images = Tensor::from_fn([64, 1, 28, 28], |i| ((i * 31) % 97) as f64 / 40.0 - 0.4);
    println!(
        "max |logit difference| {:e}",
        forward_deviation(&model, &small, &images, 32)?
    );
    Ok(())
}
