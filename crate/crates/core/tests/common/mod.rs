//! Oracles shared by the integration tests. None of these call into the
//! selection or propagation code they are used to check.

#![allow(dead_code)]

pub mod gradcheck;

use std::collections::BTreeSet;
use std::path::PathBuf;

use prunekit::model::{build_lenet5, LayerKind, LayerMask, ModelGraph};
use prunekit::prune::{Granularity, NormEntry, NormTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A table of `size` entries spread over up to four layers. Two tables in
/// three draw norms from a small pool (duplicates and exact zeros are
/// common); the rest draw every norm fresh.
pub fn random_table(g: &mut ChaCha8Rng, size: usize) -> NormTable {
    let layers = g.random_range(1..=4usize);
    let fresh = g.random_range(0..3) == 0;
    let pool: Vec<f64> = if fresh {
        (0..size).map(|_| g.random_range(0.0..1.0)).collect()
    } else {
        (0..g.random_range(1..=size.max(1)))
            .map(|i| {
                if i == 0 {
                    0.0
                } else {
                    g.random_range(0.0..1.0)
                }
            })
            .collect()
    };
    let mut counts = vec![0usize; layers];
    let entries = (0..size)
        .map(|k| {
            let layer = g.random_range(0..layers);
            let index = counts[layer];
            counts[layer] += 1;
            NormEntry {
                layer,
                index,
                norm: if fresh {
                    pool[k]
                } else {
                    pool[g.random_range(0..pool.len())]
                },
            }
        })
        .collect();
    NormTable {
        granularity: Granularity::Unit,
        entries,
    }
}

/// `floor(num·k/den)` in integers.
pub fn exact_count(num: u64, den: u64, k: usize) -> usize {
    (num as u128 * k as u128 / den as u128) as usize
}

/// Selection by rank: an entry is chosen when fewer than `count` entries of
/// its pool precede it in `(norm, layer, index)` order.
fn select_by_rank(pool: &[NormEntry], count: usize) -> BTreeSet<(usize, usize)> {
    let before = |a: &NormEntry, b: &NormEntry| {
        a.norm < b.norm || (a.norm == b.norm && (a.layer, a.index) < (b.layer, b.index))
    };
    pool.iter()
        .filter(|e| pool.iter().filter(|o| before(o, e)).count() < count)
        .map(|e| (e.layer, e.index))
        .collect()
}

pub fn oracle_global(table: &NormTable, num: u64, den: u64) -> BTreeSet<(usize, usize)> {
    select_by_rank(&table.entries, exact_count(num, den, table.entries.len()))
}

pub fn oracle_layerwise(table: &NormTable, num: u64, den: u64) -> BTreeSet<(usize, usize)> {
    let layers: BTreeSet<usize> = table.entries.iter().map(|e| e.layer).collect();
    layers
        .into_iter()
        .flat_map(|l| {
            let pool: Vec<NormEntry> = table
                .entries
                .iter()
                .copied()
                .filter(|e| e.layer == l)
                .collect();
            let count = exact_count(num, den, pool.len());
            select_by_rank(&pool, count)
        })
        .collect()
}

/// The weight/bias masks implied by the unit masks alone, built from tensor
/// shapes: weight `(v, c, ...)` of a layer survives iff its unit `v`
/// survives and the producer of input channel `c` survives. Dense layers
/// reading a conv map flattened column `j` to channel `j / (H·W)`.
pub fn expected_masks(model: &ModelGraph) -> Vec<LayerMask> {
    let layers = model.layers();
    let units = |id: usize| model.masks().layer(id).units.clone();
    layers
        .iter()
        .map(|l| {
            let own = units(l.id);
            if l.kind == LayerKind::BatchnormMarker {
                let host = units(l.input.unwrap());
                return LayerMask {
                    units: host.clone(),
                    weights: host.clone(),
                    bias: host,
                };
            }
            let shape = model.params()[l.id].weight.shape().to_vec();
            let (out, inputs) = (shape[0], shape[1]);
            let per_input: usize = shape[2..].iter().product();
            let producer = l.input.map(|src| {
                let p = &layers[src];
                (units(src), inputs / p.unit_count)
            });
            let mut weights = Vec::with_capacity(out * inputs * per_input);
            for v in 0..out {
                for c in 0..inputs {
                    let src_alive = match &producer {
                        None => true,
                        Some((alive, per_channel)) => alive[c / per_channel],
                    };
                    for _ in 0..per_input {
                        weights.push(own[v] && src_alive);
                    }
                }
            }
            LayerMask {
                units: own.clone(),
                weights,
                bias: own,
            }
        })
        .collect()
}

/// Coordinates cleared by pruning conv1 filter `f` of LeNet-5, listed by
/// walking tensor indices.
pub fn lenet_conv1_filter_closure(f: usize) -> Vec<(usize, &'static str, usize)> {
    let mut out = Vec::new();
    for c in 0..1 {
        for y in 0..5 {
            for x in 0..5 {
                out.push((0, "weight", ((f + c) * 5 + y) * 5 + x));
            }
        }
    }
    out.push((0, "bias", f));
    for o in 0..50 {
        for y in 0..5 {
            for x in 0..5 {
                out.push((1, "weight", ((o * 20 + f) * 5 + y) * 5 + x));
            }
        }
    }
    out
}

/// LeNet-5 with random weights and a random subset of units masked in each
/// prunable layer (at least one survivor per layer).
pub fn random_mask_lenet(seed: u64) -> ModelGraph {
    let mut m = build_lenet5();
    m.init_params(seed);
    let mut g = rng(seed ^ 0xA5A5);
    for id in 0..3 {
        let n = m.layer(id).unit_count;
        let frac = g.random_range(0.0..0.95);
        for u in 1..n {
            if g.random_bool(frac) {
                m.mask_unit(id, u).unwrap();
            }
        }
    }
    m
}

/// MNIST directory from `PRUNEKIT_DATA_DIR` or the workspace `data/mnist`.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("PRUNEKIT_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    prunekit::data::mnist_paths(&dir, prunekit::data::Split::Test)
        .ok()
        .map(|_| dir)
}
