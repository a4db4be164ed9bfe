//! Normalized L1 norms, importance scores, and the four plan variants at
//! one pruning fraction.

use prunekit::model::{build_lenet5, Counting};
use prunekit::prune::{
    apply_plan, importance_scores, normalized_norms, plan, Granularity, Variant,
};
use prunekit::Result;

fn main() -> Result<()> {
    let p = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0.5);
    let mut model = build_lenet5();
    model.init_params(1);

    let table = normalized_norms(&model, Granularity::Unit);
    let scores = importance_scores(&table)?;
    let least = scores
        .iter()
        .min_by(|a, b| a.score.total_cmp(&b.score))
        .expect("units");
    println!(
        "{} prunable units; least important: layer {} unit {}",
        table.entries.len(),
        least.layer,
        least.index
    );

    for v in Variant::ALL {
        let pl = plan(&model, v, p)?;
        let mut per_layer = [0usize; 3];
        if v.is_structured() {
            pl.selected.iter().for_each(|r| per_layer[r.layer] += 1);
        }
        let mut pruned = model.clone();
        apply_plan(&mut pruned, &pl)?;
        println!(
            "{v:<22} selected {:>6} threshold {:.5} per layer {per_layer:?} unmasked params {}",
            pl.selected.len(),
            pl.threshold_value,
            pruned.param_count(Counting::Unmasked)
        );
    }
    Ok(())
}
