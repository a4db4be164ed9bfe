//! Compression accounting, per-layer pruning patterns, weight-magnitude
//! series, activation-magnitude histograms, and report files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{Counting, ModelGraph};
use crate::prune::Variant;
use crate::schedule::RunHistory;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionStats {
    pub total_params: usize,
    pub unmasked_params: usize,
    pub param_pruned_pct: f64,
    pub effective_pruned_pct: f64,
    pub variant: Variant,
}

/// Pruned percentage after charging weight-level pruning one stored index
/// per surviving weight: `100 − 2·(100 − pct)`, floored at 0. Structured
/// variants leave a dense network and pay nothing. The result is rounded to
/// 1e-10 so that two-decimal inputs give two-decimal outputs.
pub fn effective_pruned_pct(variant: Variant, param_pruned_pct: f64) -> f64 {
    if variant.is_structured() {
        return param_pruned_pct;
    }
    let raw = 100.0 - 2.0 * (100.0 - param_pruned_pct);
    ((raw * 1e10).round() / 1e10).max(0.0)
}

pub fn param_stats(model: &ModelGraph, variant: Variant) -> CompressionStats {
    let total = model.param_count(Counting::Total);
    let unmasked = model.param_count(Counting::Unmasked);
    let pct = 100.0 * (1.0 - unmasked as f64 / total as f64);
    CompressionStats {
        total_params: total,
        unmasked_params: unmasked,
        param_pruned_pct: pct,
        effective_pruned_pct: effective_pruned_pct(variant, pct),
        variant,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPattern {
    pub layer_id: usize,
    pub layer_name: String,
    pub unit_fraction: f64,
    pub weight_fraction: f64,
}

/// Unit and weight prune fractions of every weighted layer, read from the
/// mask store. Weight fractions include sparsity induced by propagation.
pub fn pruning_pattern(model: &ModelGraph) -> Vec<LayerPattern> {
    model
        .layers()
        .iter()
        .filter(|l| l.is_weighted())
        .map(|l| {
            let m = model.masks().layer(l.id);
            LayerPattern {
                layer_id: l.id,
                layer_name: l.name.clone(),
                unit_fraction: m.pruned_units() as f64 / m.units.len() as f64,
                weight_fraction: m.pruned_weights() as f64 / m.weights.len() as f64,
            }
        })
        .collect()
}

/// Mean |w| over the unmasked weights of every weighted layer (0 when the
/// whole layer is masked).
pub fn mean_abs_weights(model: &ModelGraph) -> Vec<(usize, f64)> {
    model
        .layers()
        .iter()
        .filter(|l| l.is_weighted())
        .map(|l| {
            let m = model.masks().layer(l.id);
            let (sum, n) = model.params()[l.id]
                .weight
                .data()
                .iter()
                .zip(&m.weights)
                .filter(|(_, &k)| k)
                .fold((0.0, 0usize), |(s, n), (w, _)| (s + w.abs(), n + 1));
            (l.id, if n == 0 { 0.0 } else { sum / n as f64 })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionSeries {
    pub layer_id: usize,
    pub layer_name: String,
    /// Index 0 is the baseline, then one value per pruning iteration.
    pub mean_abs_weight: Vec<f64>,
}

pub fn weight_evolution(history: &RunHistory) -> Result<Vec<EvolutionSeries>> {
    if history.iterations.is_empty() {
        return Err(Error::invalid(
            "weight_evolution needs at least one iteration",
        ));
    }
    Ok(history
        .baseline
        .layers
        .iter()
        .enumerate()
        .map(|(i, b)| EvolutionSeries {
            layer_id: b.layer_id,
            layer_name: b.layer_name.clone(),
            mean_abs_weight: std::iter::once(b.mean_abs_weight)
                .chain(
                    history
                        .iterations
                        .iter()
                        .map(|it| it.snapshot.layers[i].mean_abs_weight),
                )
                .collect(),
        })
        .collect())
}

/// Geometric bin edges, `per_decade` bins per factor of ten, from `lo` to `hi`.
pub fn geometric_bins(lo: f64, hi: f64, per_decade: usize) -> Vec<f64> {
    let decades = (hi / lo).log10();
    let n = (decades * per_decade as f64).round() as usize;
    (0..=n)
        .map(|i| lo * 10f64.powf(i as f64 / per_decade as f64))
        .collect()
}

pub fn default_bins() -> Vec<f64> {
    geometric_bins(1e-6, 10.0, 2)
}

/// Per hidden unit, the summed |activation| over samples and positions,
/// with the number of terms summed. Summing shards and dividing gives the
/// same means as one pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSums {
    pub layers: Vec<(usize, Vec<f64>)>,
    pub terms: Vec<usize>,
}

impl ActivationSums {
    pub fn merge(&mut self, other: &ActivationSums) {
        for ((a, ta), (b, tb)) in self
            .layers
            .iter_mut()
            .zip(self.terms.iter_mut())
            .zip(other.layers.iter().zip(&other.terms))
        {
            a.1.iter_mut().zip(&b.1).for_each(|(x, y)| *x += y);
            *ta += tb;
        }
    }

    pub fn means(&self) -> Vec<(usize, Vec<f64>)> {
        self.layers
            .iter()
            .zip(&self.terms)
            .map(|((id, s), &t)| (*id, s.iter().map(|x| x / t as f64).collect()))
            .collect()
    }
}

pub fn activation_sums(
    model: &ModelGraph,
    dataset: &Dataset,
    batch: usize,
) -> Result<ActivationSums> {
    if dataset.is_empty() {
        return Err(Error::invalid("neuron_histogram on an empty dataset"));
    }
    let hidden: Vec<usize> = model
        .layers()
        .iter()
        .filter(|l| l.is_prunable())
        .map(|l| l.id)
        .collect();
    let mut sums: Vec<(usize, Vec<f64>)> = hidden
        .iter()
        .map(|&id| (id, vec![0.0; model.layer(id).unit_count]))
        .collect();
    let mut terms = vec![0usize; hidden.len()];
    let mut start = 0;
    while start < dataset.len() {
        let end = (start + batch.max(1)).min(dataset.len());
        let outs = model.forward_outputs(&dataset.images().slice_outer(start, end)?)?;
        for ((id, acc), t) in sums.iter_mut().zip(terms.iter_mut()) {
            let out = outs[*id].as_ref().expect("weighted layers have outputs");
            let (n, units) = (out.shape()[0], out.shape()[1]);
            let per = out.numel() / (n * units);
            for (j, chunk) in out.data().chunks_exact(per).enumerate() {
                acc[j % units] += chunk.iter().map(|x| x.abs()).sum::<f64>();
            }
            *t += n * per;
        }
        start = end;
    }
    Ok(ActivationSums {
        layers: sums,
        terms,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub run_label: String,
    pub edges: Vec<f64>,
    /// `counts[i]` covers `[edges[i], edges[i+1])`; values below the first
    /// edge land in bin 0 and values at or above the last in the final bin.
    pub counts: Vec<usize>,
    pub layer_counts: Vec<(usize, Vec<usize>)>,
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2
        || edges.windows(2).any(|w| w[0] >= w[1])
        || edges.iter().any(|e| !e.is_finite())
    {
        return Err(Error::invalid(
            "histogram edges must be finite, strictly increasing, at least two",
        ));
    }
    Ok(())
}

pub fn bin_of(edges: &[f64], v: f64) -> usize {
    let bins = edges.len() - 1;
    edges[1..bins].partition_point(|&e| e <= v)
}

pub fn histogram_from_means(
    means: &[(usize, Vec<f64>)],
    edges: &[f64],
    run_label: &str,
) -> Result<Histogram> {
    check_edges(edges)?;
    let bins = edges.len() - 1;
    let mut counts = vec![0; bins];
    let mut layer_counts = Vec::new();
    for (id, m) in means {
        let mut c = vec![0; bins];
        for &v in m {
            c[bin_of(edges, v)] += 1;
        }
        counts.iter_mut().zip(&c).for_each(|(a, b)| *a += b);
        layer_counts.push((*id, c));
    }
    Ok(Histogram {
        run_label: run_label.to_string(),
        edges: edges.to_vec(),
        counts,
        layer_counts,
    })
}

/// Bins each hidden unit by its mean absolute post-activation over `dataset`.
pub fn neuron_histogram(
    model: &ModelGraph,
    dataset: &Dataset,
    edges: &[f64],
    run_label: &str,
) -> Result<Histogram> {
    check_edges(edges)?;
    let sums = activation_sums(model, dataset, 500)?;
    histogram_from_means(&sums.means(), edges, run_label)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub stats: Vec<CompressionStats>,
    pub pattern: Vec<LayerPattern>,
    pub evolution: Vec<EvolutionSeries>,
    pub histograms: Vec<Histogram>,
}

impl Report {
    pub fn new() -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            ..Self::default()
        }
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `pattern.csv`, `evolution.csv` and `histogram.csv`.
pub fn emit_report(report: &Report, out_dir: impl AsRef<Path>) -> Result<()> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(
        &dir.join("report.json"),
        &(serde_json::to_string_pretty(report)? + "\n"),
    )?;

    let mut csv = String::from("layer_id,layer_name,unit_fraction,weight_fraction\n");
    for p in &report.pattern {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            p.layer_id, p.layer_name, p.unit_fraction, p.weight_fraction
        );
    }
    write_file(&dir.join("pattern.csv"), &csv)?;

    let mut csv = String::from("iteration,layer_id,mean_abs_weight\n");
    for s in &report.evolution {
        for (i, v) in s.mean_abs_weight.iter().enumerate() {
            let _ = writeln!(csv, "{i},{},{v}", s.layer_id);
        }
    }
    write_file(&dir.join("evolution.csv"), &csv)?;

    let mut csv = String::from("bin_lo,bin_hi,count,run_label\n");
    for h in &report.histograms {
        for (i, c) in h.counts.iter().enumerate() {
            let _ = writeln!(csv, "{},{},{c},{}", h.edges[i], h.edges[i + 1], h.run_label);
        }
    }
    write_file(&dir.join("histogram.csv"), &csv)
}
