//! Normalized L1 ranking, global and per-layer thresholds, plan
//! application with dependency propagation, importance scores, and
//! compaction of masked models into smaller dense ones.
//!
//! A unit's normalized norm is the L1 sum of its incoming weights divided by
//! their count; biases are neither summed nor counted. The classifier layer
//! is never ranked. Selection is count-exact: a plan at fraction `p` over
//! `K` ranked entries selects exactly [`selection_count`]`(p, K)` of them,
//! ordered by `(norm, layer id, index)` ascending. Masked weights are stored
//! as exact zeros, so already-pruned units rank first and raising `p` only
//! ever grows the pruned set.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, LayerMask, LayerParams, LayerSpec, MaskStore, ModelGraph};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    Unit,
    Weight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    GlobalStructured,
    LayerwiseStructured,
    GlobalWeight,
    LayerwiseWeight,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::GlobalStructured,
        Variant::LayerwiseStructured,
        Variant::GlobalWeight,
        Variant::LayerwiseWeight,
    ];

    pub fn granularity(self) -> Granularity {
        match self {
            Variant::GlobalStructured | Variant::LayerwiseStructured => Granularity::Unit,
            Variant::GlobalWeight | Variant::LayerwiseWeight => Granularity::Weight,
        }
    }

    pub fn is_global(self) -> bool {
        matches!(self, Variant::GlobalStructured | Variant::GlobalWeight)
    }

    pub fn is_structured(self) -> bool {
        self.granularity() == Granularity::Unit
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::GlobalStructured => "global-structured",
            Variant::LayerwiseStructured => "layerwise-structured",
            Variant::GlobalWeight => "global-weight",
            Variant::LayerwiseWeight => "layerwise-weight",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

/// One rankable entry: a unit (filter/neuron) or, at weight granularity, a
/// flat weight index within the layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormEntry {
    pub layer: usize,
    pub index: usize,
    pub norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormTable {
    pub granularity: Granularity,
    pub entries: Vec<NormEntry>,
}

impl NormTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitRef {
    pub layer: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub variant: Variant,
    pub p: f64,
    /// Largest selected norm (0 when nothing is selected). Diagnostic only.
    pub threshold_value: f64,
    pub selected: Vec<UnitRef>,
}

impl PrunePlan {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Normalized L1 norms of every prunable unit (or weight) in layer order.
pub fn normalized_norms(model: &ModelGraph, granularity: Granularity) -> NormTable {
    // Masked entries get -0.0: equal to 0 but ordered by `total_cmp` ahead of
    // live units whose weights happen to be all zero, so re-planning at the
    // same p picks the already-masked set again.
    let mut entries = Vec::new();
    for (l, p) in model.layers().iter().zip(model.params()) {
        if !l.is_prunable() {
            continue;
        }
        let w = p.weight.data();
        let mask = model.masks().layer(l.id);
        match granularity {
            Granularity::Unit => {
                let wpu = l.weights_per_unit;
                for (u, row) in w.chunks_exact(wpu).enumerate() {
                    let l1: f64 = row.iter().map(|x| x.abs()).sum();
                    entries.push(NormEntry {
                        layer: l.id,
                        index: u,
                        norm: if mask.units[u] { l1 / wpu as f64 } else { -0.0 },
                    });
                }
            }
            Granularity::Weight => entries.extend(w.iter().enumerate().map(|(i, x)| NormEntry {
                layer: l.id,
                index: i,
                norm: if mask.weights[i] { x.abs() } else { -0.0 },
            })),
        }
    }
    NormTable {
        granularity,
        entries,
    }
}

/// `floor(p·K)`, tolerant of the rounding error in `p·K` when the exact
/// product is an integer.
pub fn selection_count(p: f64, k: usize) -> usize {
    let raw = p * k as f64;
    ((raw + 1e-9 * raw.max(1.0)).floor() as usize).min(k)
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "pruning fraction {p} outside [0, 1]"
        )));
    }
    Ok(())
}

fn rank(a: &NormEntry, b: &NormEntry) -> Ordering {
    a.norm
        .total_cmp(&b.norm)
        .then(a.layer.cmp(&b.layer))
        .then(a.index.cmp(&b.index))
}

fn take_smallest(entries: &[NormEntry], p: f64) -> Vec<NormEntry> {
    let mut sorted = entries.to_vec();
    sorted.sort_by(rank);
    sorted.truncate(selection_count(p, entries.len()));
    sorted
}

fn variant_for(granularity: Granularity, global: bool) -> Variant {
    match (granularity, global) {
        (Granularity::Unit, true) => Variant::GlobalStructured,
        (Granularity::Unit, false) => Variant::LayerwiseStructured,
        (Granularity::Weight, true) => Variant::GlobalWeight,
        (Granularity::Weight, false) => Variant::LayerwiseWeight,
    }
}

fn plan_from(variant: Variant, p: f64, chosen: Vec<NormEntry>) -> PrunePlan {
    let threshold_value = chosen.iter().map(|e| e.norm).fold(0.0, f64::max);
    PrunePlan {
        variant,
        p,
        threshold_value,
        selected: chosen
            .into_iter()
            .map(|e| UnitRef {
                layer: e.layer,
                index: e.index,
            })
            .collect(),
    }
}

/// Stacks all entries, sorts ascending, and selects the lowest fraction `p`.
pub fn global_threshold(table: &NormTable, p: f64) -> Result<PrunePlan> {
    check_p(p)?;
    if table.is_empty() {
        return Err(Error::invalid("global_threshold on an empty norm table"));
    }
    let chosen = take_smallest(&table.entries, p);
    Ok(plan_from(variant_for(table.granularity, true), p, chosen))
}

/// Selects the lowest fraction `p` within each layer independently.
pub fn layerwise_threshold(table: &NormTable, p: f64) -> Result<PrunePlan> {
    check_p(p)?;
    if table.is_empty() {
        return Err(Error::invalid("layerwise_threshold on an empty norm table"));
    }
    let mut by_layer: BTreeMap<usize, Vec<NormEntry>> = BTreeMap::new();
    for e in &table.entries {
        by_layer.entry(e.layer).or_default().push(*e);
    }
    let chosen = by_layer
        .values()
        .flat_map(|entries| take_smallest(entries, p))
        .collect();
    Ok(plan_from(variant_for(table.granularity, false), p, chosen))
}

/// Ranks `model` as `variant` prescribes and selects fraction `p`.
pub fn plan(model: &ModelGraph, variant: Variant, p: f64) -> Result<PrunePlan> {
    let table = normalized_norms(model, variant.granularity());
    if variant.is_global() {
        global_threshold(&table, p)
    } else {
        layerwise_threshold(&table, p)
    }
}

/// Masks everything the plan selects. Unit plans propagate to dependent
/// weights, batch-norm markers, and coupled layers; weight plans mask
/// single entries. The plan is validated in full before anything changes.
pub fn apply_plan(model: &mut ModelGraph, plan: &PrunePlan) -> Result<()> {
    let granularity = plan.variant.granularity();
    for r in &plan.selected {
        let l = model
            .layers()
            .get(r.layer)
            .ok_or_else(|| Error::Prune(format!("plan references missing layer {}", r.layer)))?;
        if l.kind == LayerKind::ClassifierDense {
            return Err(Error::Prune(format!(
                "internal consistency failure: plan selects classifier layer {} entry {}",
                l.name, r.index
            )));
        }
        if !l.is_prunable() {
            return Err(Error::Prune(format!(
                "plan selects unprunable layer {}",
                l.name
            )));
        }
        let limit = match granularity {
            Granularity::Unit => l.unit_count,
            Granularity::Weight => l.unit_count * l.weights_per_unit,
        };
        if r.index >= limit {
            return Err(Error::Prune(format!(
                "plan entry {} out of range for {} ({limit} entries)",
                r.index, l.name
            )));
        }
    }
    for r in &plan.selected {
        match granularity {
            Granularity::Unit => model.mask_unit(r.layer, r.index)?,
            Granularity::Weight => model.mask_weight(r.layer, r.index)?,
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub layer: usize,
    pub index: usize,
    pub score: f64,
}

/// Each entry's share of the summed normalized norms across the network.
pub fn importance_scores(table: &NormTable) -> Result<Vec<Importance>> {
    let total: f64 = table.entries.iter().map(|e| e.norm).sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::invalid(
            "importance scores need at least one positive norm",
        ));
    }
    Ok(table
        .entries
        .iter()
        .map(|e| Importance {
            layer: e.layer,
            index: e.index,
            score: e.norm / total,
        })
        .collect())
}

/// Verifies that every cleared unit bit carries its full dependency set:
/// own weights and bias, successor input slots, batch-norm markers, and
/// coupled twins.
pub fn check_dependency_closure(model: &ModelGraph) -> Result<()> {
    let masks = model.masks();
    for l in model.layers().iter().filter(|l| l.is_prunable()) {
        let m = masks.layer(l.id);
        for u in (0..l.unit_count).filter(|&u| !m.units[u]) {
            let fail = |what: String| {
                Err(Error::Prune(format!(
                    "{} unit {u}: {what} still unmasked",
                    l.name
                )))
            };
            if m.bias[u]
                || m.weights[u * l.weights_per_unit..(u + 1) * l.weights_per_unit]
                    .iter()
                    .any(|&k| k)
            {
                return fail("own weights or bias".into());
            }
            for &s in &l.successors {
                let sl = model.layer(s);
                let sm = masks.layer(s);
                let span = l.spatial_multiplicity * sl.slot_len();
                for v in 0..sl.unit_count {
                    let base = v * sl.weights_per_unit + u * span;
                    if sm.weights[base..base + span].iter().any(|&k| k) {
                        return fail(format!("input slice in {}", sl.name));
                    }
                }
            }
            for bn in model.markers_of(l.id) {
                let bm = masks.layer(bn);
                if bm.units[u] || bm.weights[u] || bm.bias[u] {
                    return fail("batch-norm marker".into());
                }
            }
            for twin in model.coupled_with(l.id) {
                if masks.layer(twin).units[u] {
                    return fail(format!("coupled layer {}", model.layer(twin).name));
                }
            }
        }
    }
    Ok(())
}

/// Rebuilds the network without masked units. The result has the same
/// forward function, smaller layers, and no structural masks.
pub fn compact(model: &ModelGraph) -> Result<ModelGraph> {
    check_dependency_closure(model)?;
    let layers = model.layers();
    let masks = model.masks();
    let survivors: Vec<Vec<usize>> = layers
        .iter()
        .map(|l| {
            let m = masks.layer(l.id);
            (0..l.unit_count).filter(|&u| m.units[u]).collect()
        })
        .collect();
    for (l, s) in layers.iter().zip(&survivors) {
        if s.is_empty() {
            return Err(Error::Prune(format!(
                "layer {} has no surviving units; the compacted network would be degenerate",
                l.name
            )));
        }
    }

    let mut new_layers = Vec::with_capacity(layers.len());
    let mut new_params = Vec::with_capacity(layers.len());
    let mut new_masks = Vec::with_capacity(layers.len());
    for (l, p) in layers.iter().zip(model.params()) {
        let keep = &survivors[l.id];
        // Input slots that survive, in original order.
        let slots: Vec<usize> = match (l.kind, l.input) {
            (LayerKind::BatchnormMarker, _) | (_, None) => (0..l.input_slots).collect(),
            (_, Some(src)) => {
                let mult = layers[src].spatial_multiplicity;
                survivors[src]
                    .iter()
                    .flat_map(|&u| u * mult..(u + 1) * mult)
                    .collect()
            }
        };
        let m = masks.layer(l.id);
        let (weight, wmask) = if l.kind == LayerKind::BatchnormMarker {
            let w: Vec<f64> = keep.iter().map(|&u| p.weight.data()[u]).collect();
            (w, keep.iter().map(|&u| m.weights[u]).collect::<Vec<bool>>())
        } else {
            let slot = l.slot_len();
            let mut w = Vec::with_capacity(keep.len() * slots.len() * slot);
            let mut wm = Vec::with_capacity(w.capacity());
            for &u in keep {
                for &s in &slots {
                    let base = u * l.weights_per_unit + s * slot;
                    w.extend_from_slice(&p.weight.data()[base..base + slot]);
                    wm.extend_from_slice(&m.weights[base..base + slot]);
                }
            }
            (w, wm)
        };
        let bias: Vec<f64> = keep.iter().map(|&u| p.bias.data()[u]).collect();
        let bmask: Vec<bool> = keep.iter().map(|&u| m.bias[u]).collect();
        let spec = LayerSpec {
            unit_count: keep.len(),
            input_slots: if l.kind == LayerKind::BatchnormMarker {
                1
            } else {
                slots.len()
            },
            ..l.clone()
        };
        new_params.push(LayerParams {
            weight: Tensor::new(spec.weight_shape(), weight)?,
            bias: Tensor::new([keep.len()], bias)?,
        });
        new_masks.push(LayerMask {
            units: vec![true; keep.len()],
            weights: wmask,
            bias: bmask,
        });
        new_layers.push(spec);
    }
    let mut out = ModelGraph::new(
        model.input_shape().to_vec(),
        new_layers,
        new_params,
        model.couplings().to_vec(),
    )?;
    out.set_masks(MaskStore::from_layers(new_masks))?;
    Ok(out)
}

/// Maximum absolute difference between the logits of two models over
/// `images`, evaluated in batches.
pub fn forward_deviation(
    a: &ModelGraph,
    b: &ModelGraph,
    images: &Tensor,
    batch: usize,
) -> Result<f64> {
    let n = images.shape().first().copied().unwrap_or(0);
    let mut worst: f64 = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + batch.max(1)).min(n);
        let x = images.slice_outer(start, end)?;
        worst = worst.max(a.forward(&x)?.max_abs_diff(&b.forward(&x)?)?);
        start = end;
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_lenet5, build_synthetic_residual, Counting};

    fn table(layers: &[&[f64]]) -> NormTable {
        let mut entries = Vec::new();
        for (l, norms) in layers.iter().enumerate() {
            for (i, &n) in norms.iter().enumerate() {
                entries.push(NormEntry {
                    layer: l,
                    index: i,
                    norm: n,
                });
            }
        }
        NormTable {
            granularity: Granularity::Unit,
            entries,
        }
    }

    fn picks(plan: &PrunePlan) -> Vec<(usize, usize)> {
        let mut v: Vec<_> = plan.selected.iter().map(|r| (r.layer, r.index)).collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn zero_fraction_selects_nothing() {
        let plan = global_threshold(&table(&[&[0.3, 0.1]]), 0.0).unwrap();
        assert!(plan.selected.is_empty());
        assert_eq!(plan.threshold_value, 0.0);
    }

    #[test]
    fn half_of_one_layer() {
        let plan = global_threshold(&table(&[&[0.4, 0.1, 0.3, 0.2]]), 0.5).unwrap();
        assert_eq!(picks(&plan), [(0, 1), (0, 3)]);
        assert_eq!(plan.threshold_value, 0.2);
    }

    #[test]
    fn ties_break_by_position() {
        let plan = global_threshold(&table(&[&[0.2, 0.2, 0.5]]), 1.0 / 3.0).unwrap();
        assert_eq!(picks(&plan), [(0, 0)]);
    }

    #[test]
    fn global_versus_layerwise() {
        let t = table(&[&[0.1, 0.2], &[0.9, 1.0]]);
        assert_eq!(picks(&global_threshold(&t, 0.5).unwrap()), [(0, 0), (0, 1)]);
        assert_eq!(
            picks(&layerwise_threshold(&t, 0.5).unwrap()),
            [(0, 0), (1, 0)]
        );
        let single = table(&[&[0.5, 0.1, 0.7, 0.3, 0.2]]);
        for p in [0.0, 0.2, 0.5, 0.99, 1.0] {
            assert_eq!(
                global_threshold(&single, p).unwrap().selected,
                layerwise_threshold(&single, p).unwrap().selected
            );
        }
    }

    #[test]
    fn fraction_out_of_range() {
        let t = table(&[&[0.1]]);
        assert!(global_threshold(&t, 1.5).is_err());
        assert!(layerwise_threshold(&t, -0.1).is_err());
        assert!(global_threshold(&table(&[]), 0.5).is_err());
    }

    #[test]
    fn selection_count_is_floor() {
        assert_eq!(selection_count(0.29, 100), 29);
        assert_eq!(selection_count(0.5, 7), 3);
        assert_eq!(selection_count(1.0, 570), 570);
        assert_eq!(selection_count(0.9, 570), 513);
        assert_eq!(selection_count(0.0, 10), 0);
    }

    #[test]
    fn constant_filter_norm_is_the_constant() {
        let mut m = build_lenet5();
        m.params_mut()[0].weight.data_mut()[..25].fill(0.3);
        m.params_mut()[1].weight.data_mut()[..500].fill(0.3);
        let t = normalized_norms(&m, Granularity::Unit);
        assert!((t.entries[0].norm - 0.3).abs() < 1e-15);
        assert!((t.entries[20].norm - 0.3).abs() < 1e-15);
        assert_eq!(t.len(), 20 + 50 + 500);
    }

    #[test]
    fn importance_by_hand() {
        let s = importance_scores(&table(&[&[1.0, 3.0]])).unwrap();
        assert_eq!(s[0].score, 0.25);
        assert_eq!(s[1].score, 0.75);
        let u = importance_scores(&table(&[&[0.2; 5]])).unwrap();
        assert!(u.iter().all(|i| (i.score - 0.2).abs() < 1e-15));
        assert!(importance_scores(&table(&[&[0.0, 0.0]])).is_err());
    }

    #[test]
    fn classifier_selection_is_rejected() {
        let mut m = build_lenet5();
        m.init_params(0);
        let plan = PrunePlan {
            variant: Variant::GlobalStructured,
            p: 0.1,
            threshold_value: 0.0,
            selected: vec![UnitRef { layer: 3, index: 0 }],
        };
        let before = m.clone();
        assert!(matches!(apply_plan(&mut m, &plan), Err(Error::Prune(_))));
        assert_eq!(m, before);
    }

    #[test]
    fn empty_plan_leaves_model_unchanged() {
        let mut m = build_lenet5();
        m.init_params(5);
        let before = m.clone();
        let plan = global_threshold(&normalized_norms(&m, Granularity::Unit), 0.0).unwrap();
        apply_plan(&mut m, &plan).unwrap();
        assert_eq!(m, before);
    }

    #[test]
    fn coupled_members_share_a_pruned_filter() {
        let mut g = build_synthetic_residual(1, 4).unwrap();
        g.init_params(1);
        let members = g.couplings()[0].members.clone();
        let plan = PrunePlan {
            variant: Variant::GlobalStructured,
            p: 0.0,
            threshold_value: 0.0,
            selected: vec![UnitRef {
                layer: members[1],
                index: 2,
            }],
        };
        apply_plan(&mut g, &plan).unwrap();
        for &m in &members {
            assert!(!g.masks().layer(m).units[2]);
        }
        check_dependency_closure(&g).unwrap();
    }

    #[test]
    fn compacting_an_unmasked_model_is_a_copy() {
        let mut m = build_lenet5();
        m.init_params(2);
        let c = compact(&m).unwrap();
        assert_eq!(c.layers(), m.layers());
        assert_eq!(c.params(), m.params());
    }

    #[test]
    fn compacted_shapes() {
        let mut m = build_lenet5();
        m.init_params(2);
        for u in 0..10 {
            m.mask_unit(0, u * 2).unwrap();
        }
        let c = compact(&m).unwrap();
        assert_eq!(c.layer(0).unit_count, 10);
        assert_eq!(c.params()[1].weight.shape(), &[50, 10, 5, 5]);
        assert_eq!(
            c.param_count(Counting::Total),
            m.param_count(Counting::Unmasked)
        );
    }

    #[test]
    fn degenerate_compaction_is_rejected() {
        let mut m = build_lenet5();
        for u in 0..20 {
            m.mask_unit(0, u).unwrap();
        }
        assert!(compact(&m).is_err());
    }

    #[test]
    fn plan_json_round_trip() {
        let plan = global_threshold(&table(&[&[0.4, 0.1, 0.3]]), 0.7).unwrap();
        let back = PrunePlan::from_json(&plan.to_json().unwrap()).unwrap();
        assert_eq!(back, plan);
        assert!(plan.to_json().unwrap().contains("\"global-structured\""));
    }
}
