//! Compression statistics, pruning pattern, and an activation histogram for
//! a pruned model, written as report files.

use prunekit::data::Dataset;
use prunekit::metrics::{
    default_bins, emit_report, neuron_histogram, param_stats, pruning_pattern, Report,
};
use prunekit::model::build_lenet5;
use prunekit::prune::{apply_plan, plan, Variant};
use prunekit::{Result, Tensor};

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "runs/report-example".into());
    let images = Tensor::from_fn([50, 1, 28, 28], |i| ((i * 13) % 29) as f64 / 10.0 - 0.4);
    let data = Dataset::new(images, (0..50).map(|i| i % 10).collect())?;

    let mut report = Report::new();
    for v in [Variant::GlobalStructured, Variant::GlobalWeight] {
        let mut model = build_lenet5();
        model.init_params(4);
        let pl = plan(&model, v, 0.7)?;
        apply_plan(&mut model, &pl)?;
        let s = param_stats(&model, v);
        println!(
            "{v}: {:.2}% pruned, effective {:.2}%",
            s.param_pruned_pct, s.effective_pruned_pct
        );
        report.stats.push(s);
        report.histograms.push(neuron_histogram(
            &model,
            &data,
            &default_bins(),
            v.as_str(),
        )?);
        if v.is_structured() {
            report.pattern = pruning_pattern(&model);
        }
    }
    for p in &report.pattern {
        println!(
            "{:<6} units {:.3} weights {:.3}",
            p.layer_name, p.unit_fraction, p.weight_fraction
        );
    }
    emit_report(&report, &out)?;
    println!("wrote {out}/report.json and CSVs");
    Ok(())
}
