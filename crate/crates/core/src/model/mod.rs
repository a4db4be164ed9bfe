//! Networks as ordered layer graphs with parameters, binary masks,
//! structural dependency links, and coupling groups.
//!
//! Every weighted layer owns a weight tensor and a bias tensor. A unit is a
//! conv filter or a dense neuron; its incoming weights are one contiguous
//! row of the weight tensor. A layer's input is either the network input
//! or the output of exactly one earlier layer, and each input slot (a conv
//! input channel or a dense input column) belongs to one unit of that
//! predecessor: slot `s` comes from unit `s / spatial_multiplicity`.
//!
//! Batch-norm layers are modeled as markers only: per-filter scale/shift
//! parameters counted and masked alongside their conv, never evaluated.

pub mod checkpoint;
mod masks;

pub use masks::{LayerMask, MaskStore};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, rng};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

const INIT_STREAM: u64 = 0x1417;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv,
    Dense,
    ClassifierDense,
    BatchnormMarker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: usize,
    pub name: String,
    pub kind: LayerKind,
    /// Filters for conv, neurons for dense.
    pub unit_count: usize,
    pub weights_per_unit: usize,
    /// Layers reading this layer's output through their weights.
    pub successors: Vec<usize>,
    /// Successor input slots fed by one unit of this layer.
    pub spatial_multiplicity: usize,
    /// Producer of this layer's input; `None` is the network input. For a
    /// batch-norm marker, the conv it is attached to.
    pub input: Option<usize>,
    /// Conv input channels or dense input width.
    pub input_slots: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub relu: bool,
    pub pool: bool,
    /// Layer whose output is added before the activation (identity shortcut).
    pub residual: Option<usize>,
}

impl LayerSpec {
    pub fn is_weighted(&self) -> bool {
        self.kind != LayerKind::BatchnormMarker
    }

    pub fn is_prunable(&self) -> bool {
        matches!(self.kind, LayerKind::Conv | LayerKind::Dense)
    }

    /// Weights per input slot within one unit (`k·k` for conv, 1 for dense).
    pub fn slot_len(&self) -> usize {
        match self.kind {
            LayerKind::Conv => self.kernel * self.kernel,
            LayerKind::BatchnormMarker => 1,
            _ => 1,
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Conv => vec![self.unit_count, self.input_slots, self.kernel, self.kernel],
            LayerKind::Dense | LayerKind::ClassifierDense => {
                vec![self.unit_count, self.input_slots]
            }
            LayerKind::BatchnormMarker => vec![self.unit_count],
        }
    }

    pub fn param_count(&self) -> usize {
        self.unit_count * self.weights_per_unit + self.unit_count
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingGroup {
    pub members: Vec<usize>,
}

/// Weight and bias of one layer. For batch-norm markers these hold the
/// per-filter scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Counting {
    Total,
    Unmasked,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    params: Vec<LayerParams>,
    masks: MaskStore,
    couplings: Vec<CouplingGroup>,
}

/// Taped forward pass: logits plus the leaf handles of every weighted layer.
pub struct TapedForward {
    pub logits: Var,
    pub params: Vec<Option<(Var, Var)>>,
}

impl ModelGraph {
    /// Assembles and validates a graph. `successors` and `weights_per_unit`
    /// in the specs are recomputed from `input` links.
    pub fn new(
        input_shape: Vec<usize>,
        mut layers: Vec<LayerSpec>,
        params: Vec<LayerParams>,
        couplings: Vec<CouplingGroup>,
    ) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.id != i {
                return Err(Error::Graph(format!(
                    "layer {} stored at position {i}",
                    l.id
                )));
            }
        }
        let n = layers.len();
        for l in layers.iter_mut() {
            l.successors.clear();
            l.weights_per_unit = match l.kind {
                LayerKind::BatchnormMarker => 1,
                _ => l.input_slots * l.slot_len(),
            };
        }
        for i in 0..n {
            let (kind, input) = (layers[i].kind, layers[i].input);
            if let Some(src) = input {
                if src >= i {
                    return Err(Error::Graph(format!(
                        "layer {i} reads from later layer {src}"
                    )));
                }
                if kind != LayerKind::BatchnormMarker {
                    layers[src].successors.push(i);
                }
            }
        }
        let masks = MaskStore::full(&layers);
        let g = Self {
            input_shape,
            layers,
            params,
            masks,
            couplings,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let classifiers: Vec<_> = self
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::ClassifierDense)
            .collect();
        if classifiers.len() != 1 {
            return Err(Error::Graph(format!(
                "expected exactly one classifier layer, found {}",
                classifiers.len()
            )));
        }
        if !classifiers[0].successors.is_empty() {
            return Err(Error::Graph(
                "classifier layer must not have successors".into(),
            ));
        }
        if self.params.len() != self.layers.len() || self.masks.len() != self.layers.len() {
            return Err(Error::Graph(
                "parameter/mask store does not match layer list".into(),
            ));
        }
        for (l, p) in self.layers.iter().zip(&self.params) {
            if l.unit_count == 0 || l.weights_per_unit == 0 {
                return Err(Error::Graph(format!(
                    "layer {} has no units or no weights",
                    l.name
                )));
            }
            if p.weight.shape() != l.weight_shape().as_slice() || p.bias.shape() != [l.unit_count] {
                return Err(Error::ShapeMismatch {
                    op: "layer parameters",
                    left: l.weight_shape(),
                    right: p.weight.shape().to_vec(),
                });
            }
            if l.kind == LayerKind::BatchnormMarker {
                let host = l.input.map(|h| &self.layers[h]);
                if host.map(|h| (h.kind, h.unit_count)) != Some((LayerKind::Conv, l.unit_count)) {
                    return Err(Error::Graph(format!(
                        "{} is not attached to a matching conv",
                        l.name
                    )));
                }
            }
            let mults: Vec<usize> = l
                .successors
                .iter()
                .map(|&s| self.layers[s].input_slots / l.unit_count.max(1))
                .collect();
            for (&s, &m) in l.successors.iter().zip(&mults) {
                if m != l.spatial_multiplicity || self.layers[s].input_slots != l.unit_count * m {
                    return Err(Error::Graph(format!(
                        "{} feeds {} with {} slots, expected {} units x {}",
                        l.name,
                        self.layers[s].name,
                        self.layers[s].input_slots,
                        l.unit_count,
                        l.spatial_multiplicity
                    )));
                }
            }
        }
        for g in &self.couplings {
            let counts: Vec<usize> = g
                .members
                .iter()
                .map(|&m| self.layers[m].unit_count)
                .collect();
            if g.members.len() < 2 || counts.windows(2).any(|w| w[0] != w[1]) {
                return Err(Error::Graph(format!(
                    "coupling group {:?} is malformed",
                    g.members
                )));
            }
            if g.members.iter().any(|&m| !self.layers[m].is_prunable()) {
                return Err(Error::Graph(format!(
                    "coupling group {:?} contains an unprunable layer",
                    g.members
                )));
            }
        }
        Ok(())
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, id: usize) -> &LayerSpec {
        &self.layers[id]
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    /// Mutable parameters alongside the (read-only) masks, for optimizer steps.
    pub fn params_and_masks_mut(&mut self) -> (&mut [LayerParams], &MaskStore) {
        (&mut self.params, &self.masks)
    }

    pub fn masks(&self) -> &MaskStore {
        &self.masks
    }

    pub fn masks_mut(&mut self) -> &mut MaskStore {
        &mut self.masks
    }

    pub fn couplings(&self) -> &[CouplingGroup] {
        &self.couplings
    }

    pub fn classifier_id(&self) -> usize {
        self.layers
            .iter()
            .position(|l| l.kind == LayerKind::ClassifierDense)
            .expect("validated")
    }

    /// Batch-norm markers attached to `layer`.
    pub fn markers_of(&self, layer: usize) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .filter(move |l| l.kind == LayerKind::BatchnormMarker && l.input == Some(layer))
            .map(|l| l.id)
    }

    pub fn param_count(&self, counting: Counting) -> usize {
        match counting {
            Counting::Total => self.layers.iter().map(LayerSpec::param_count).sum(),
            Counting::Unmasked => self.masks.unmasked_count(),
        }
    }

    /// Re-draws all parameters: weights and biases of weighted layers from
    /// U(-1/√fan_in, 1/√fan_in), marker scales 1 and shifts 0.
    pub fn init_params(&mut self, seed: u64) {
        for (l, p) in self.layers.iter().zip(self.params.iter_mut()) {
            if l.kind == LayerKind::BatchnormMarker {
                p.weight.data_mut().fill(1.0);
                p.bias.data_mut().fill(0.0);
                continue;
            }
            let bound = 1.0 / (l.weights_per_unit as f64).sqrt();
            let mut r = rng(derive_seed(seed, INIT_STREAM, l.id as u64));
            p.weight
                .data_mut()
                .iter_mut()
                .for_each(|w| *w = r.random_range(-bound..bound));
            p.bias
                .data_mut()
                .iter_mut()
                .for_each(|b| *b = r.random_range(-bound..bound));
        }
        self.masks.zero_masked(&mut self.params);
    }

    /// Forces every masked parameter entry to exactly zero.
    pub fn zero_masked_params(&mut self) {
        self.masks.zero_masked(&mut self.params);
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        if images.shape().len() != 1 + self.input_shape.len()
            || images.shape()[1..] != self.input_shape[..]
        {
            let mut want = vec![0];
            want.extend_from_slice(&self.input_shape);
            return Err(Error::ShapeMismatch {
                op: "forward input",
                left: images.shape().to_vec(),
                right: want,
            });
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. Parameters enter as masked copies
    /// (`w ⊙ mask`); with `track_grads` they are gradient leaves.
    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        images: Tensor,
        track_grads: bool,
    ) -> Result<TapedForward> {
        let (logits, params, _) = self.run(tape, images, track_grads)?;
        Ok(TapedForward { logits, params })
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        tape: &mut Tape,
        images: Tensor,
        track_grads: bool,
    ) -> Result<(Var, Vec<Option<(Var, Var)>>, Vec<Option<Var>>)> {
        self.check_input(&images)?;
        let input = tape.leaf(images);
        let mut outputs: Vec<Option<Var>> = vec![None; self.layers.len()];
        let mut params = vec![None; self.layers.len()];
        for (l, p) in self.layers.iter().zip(&self.params) {
            if !l.is_weighted() {
                continue;
            }
            let mask = self.masks.layer(l.id);
            let w = tape.leaf(
                mask.apply_weights(&p.weight)
                    .with_requires_grad(track_grads),
            );
            let b = tape.leaf(mask.apply_bias(&p.bias).with_requires_grad(track_grads));
            params[l.id] = Some((w, b));
            let x = match l.input {
                None => input,
                Some(src) => outputs[src]
                    .ok_or_else(|| Error::Graph(format!("{} input not computed", l.name)))?,
            };
            let mut z = match l.kind {
                LayerKind::Conv => tape.conv2d(x, w, b, l.stride, l.padding)?,
                _ => {
                    let flat = if tape.value(x)?.shape().len() == 2 {
                        x
                    } else {
                        tape.flatten(x)?
                    };
                    tape.dense(flat, w, b)?
                }
            };
            if let Some(r) = l.residual {
                let skip = outputs[r]
                    .ok_or_else(|| Error::Graph(format!("{} shortcut not computed", l.name)))?;
                z = tape.add(z, skip)?;
            }
            if l.relu {
                z = tape.relu(z)?;
            }
            if l.pool {
                z = tape.maxpool2x2(z)?;
            }
            outputs[l.id] = Some(z);
        }
        let logits = outputs[self.classifier_id()].expect("classifier evaluated");
        Ok((logits, params, outputs))
    }

    /// Untaped inference: logits `[N, classes]`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (logits, _, _) = self.run(&mut tape, images.clone(), false)?;
        Ok(tape.value(logits)?.clone())
    }

    /// Untaped inference returning the output of every weighted layer (after
    /// activation and pooling), indexed by layer id.
    pub fn forward_outputs(&self, images: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let mut tape = Tape::new();
        let (_, _, outputs) = self.run(&mut tape, images.clone(), false)?;
        outputs
            .into_iter()
            .map(|o| o.map(|v| tape.value(v).cloned()).transpose())
            .collect()
    }

    /// Batched inference over a whole image tensor, returning predicted classes.
    pub fn predict(&self, images: &Tensor, batch: usize) -> Result<Vec<usize>> {
        let n = images.shape().first().copied().unwrap_or(0);
        let mut preds = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + batch.max(1)).min(n);
            let logits = self.forward(&images.slice_outer(start, end)?)?;
            let classes = logits.shape()[1];
            for row in logits.data().chunks_exact(classes) {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                preds.push(best);
            }
            start = end;
        }
        Ok(preds)
    }

    /// Replaces parameters wholesale; shapes must match.
    pub fn set_params(&mut self, params: Vec<LayerParams>) -> Result<()> {
        if params.len() != self.layers.len()
            || params.iter().zip(&self.params).any(|(a, b)| {
                a.weight.shape() != b.weight.shape() || a.bias.shape() != b.bias.shape()
            })
        {
            return Err(Error::Graph(
                "replacement parameters do not match the graph".into(),
            ));
        }
        self.params = params;
        Ok(())
    }

    pub fn set_masks(&mut self, masks: MaskStore) -> Result<()> {
        if !masks.matches(&self.layers) {
            return Err(Error::Graph("mask store does not match the graph".into()));
        }
        self.masks = masks;
        Ok(())
    }

    /// `layer` plus every layer reachable from it through coupling groups.
    pub fn coupled_with(&self, layer: usize) -> Vec<usize> {
        let mut set = vec![layer];
        let mut grew = true;
        while grew {
            grew = false;
            for g in &self.couplings {
                if g.members.iter().any(|m| set.contains(m)) {
                    for &m in &g.members {
                        if !set.contains(&m) {
                            set.push(m);
                            grew = true;
                        }
                    }
                }
            }
        }
        set.sort_unstable();
        set
    }

    /// Removes unit `unit` of `layer` and everything that depends on it: its
    /// own weights and bias, the matching input slots of every successor,
    /// attached batch-norm scale/shift, and the same unit in all coupled
    /// layers. Masked entries are zeroed in the parameter store.
    pub fn mask_unit(&mut self, layer: usize, unit: usize) -> Result<()> {
        let spec = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Prune(format!("no layer {layer}")))?;
        if !spec.is_prunable() {
            return Err(Error::Prune(format!(
                "layer {} ({:?}) is not prunable",
                spec.name, spec.kind
            )));
        }
        if unit >= spec.unit_count {
            return Err(Error::Prune(format!(
                "unit {unit} out of range for {} with {} units",
                spec.name, spec.unit_count
            )));
        }
        for member in self.coupled_with(layer) {
            self.mask_single_unit(member, unit);
        }
        Ok(())
    }

    fn mask_single_unit(&mut self, layer: usize, unit: usize) {
        let spec = &self.layers[layer];
        let wpu = spec.weights_per_unit;
        let own = self.masks.layer_mut(layer);
        own.units[unit] = false;
        own.bias[unit] = false;
        own.weights[unit * wpu..(unit + 1) * wpu].fill(false);
        let p = &mut self.params[layer];
        p.bias.data_mut()[unit] = 0.0;
        p.weight.data_mut()[unit * wpu..(unit + 1) * wpu].fill(0.0);

        let mult = spec.spatial_multiplicity;
        for &succ in &self.layers[layer].successors {
            let s = &self.layers[succ];
            let (swpu, slot) = (s.weights_per_unit, s.slot_len());
            let lo = unit * mult * slot;
            let hi = (unit + 1) * mult * slot;
            let m = self.masks.layer_mut(succ);
            let w = self.params[succ].weight.data_mut();
            for v in 0..s.unit_count {
                m.weights[v * swpu + lo..v * swpu + hi].fill(false);
                w[v * swpu + lo..v * swpu + hi].fill(0.0);
            }
        }
        let markers: Vec<usize> = self.markers_of(layer).collect();
        for bn in markers {
            let m = self.masks.layer_mut(bn);
            m.units[unit] = false;
            m.weights[unit] = false;
            m.bias[unit] = false;
            self.params[bn].weight.data_mut()[unit] = 0.0;
            self.params[bn].bias.data_mut()[unit] = 0.0;
        }
    }

    /// Masks one weight entry (flat index into the layer's weight tensor)
    /// without any propagation.
    pub fn mask_weight(&mut self, layer: usize, index: usize) -> Result<()> {
        let spec = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Prune(format!("no layer {layer}")))?;
        if !spec.is_prunable() {
            return Err(Error::Prune(format!("layer {} is not prunable", spec.name)));
        }
        let m = self.masks.layer_mut(layer);
        if index >= m.weights.len() {
            return Err(Error::Prune(format!(
                "weight {index} out of range for {} with {} weights",
                spec.name,
                m.weights.len()
            )));
        }
        m.weights[index] = false;
        self.params[layer].weight.data_mut()[index] = 0.0;
        Ok(())
    }
}

fn weighted(
    id: usize,
    name: &str,
    kind: LayerKind,
    units: usize,
    input: Option<usize>,
    input_slots: usize,
    kernel: usize,
) -> LayerSpec {
    LayerSpec {
        id,
        name: name.to_string(),
        kind,
        unit_count: units,
        weights_per_unit: 0,
        successors: Vec::new(),
        spatial_multiplicity: 1,
        input,
        input_slots,
        kernel,
        stride: 1,
        padding: 0,
        relu: kind != LayerKind::ClassifierDense,
        pool: false,
        residual: None,
    }
}

fn marker(id: usize, host: &LayerSpec) -> LayerSpec {
    LayerSpec {
        id,
        name: format!("{}.bn", host.name),
        kind: LayerKind::BatchnormMarker,
        unit_count: host.unit_count,
        weights_per_unit: 1,
        successors: Vec::new(),
        spatial_multiplicity: 1,
        input: Some(host.id),
        input_slots: 1,
        kernel: 0,
        stride: 0,
        padding: 0,
        relu: false,
        pool: false,
        residual: None,
    }
}

fn zero_params(layers: &[LayerSpec]) -> Vec<LayerParams> {
    layers
        .iter()
        .map(|l| {
            let mut l2 = l.clone();
            if l2.kind != LayerKind::BatchnormMarker {
                l2.weights_per_unit = l2.input_slots * l2.slot_len();
            }
            LayerParams {
                weight: Tensor::zeros(l2.weight_shape()),
                bias: Tensor::zeros([l.unit_count]),
            }
        })
        .collect()
}

/// LeNet-5 for 28×28 MNIST: conv 20@5×5 → pool → conv 50@5×5 → pool →
/// dense 500 → classifier 10, ReLU after every hidden layer. 431,080
/// parameters. Weights are zero until [`ModelGraph::init_params`].
pub fn build_lenet5() -> ModelGraph {
    let mut conv1 = weighted(0, "conv1", LayerKind::Conv, 20, None, 1, 5);
    conv1.pool = true;
    let mut conv2 = weighted(1, "conv2", LayerKind::Conv, 50, Some(0), 20, 5);
    conv2.pool = true;
    conv2.spatial_multiplicity = 16;
    let fc1 = weighted(2, "fc1", LayerKind::Dense, 500, Some(1), 800, 0);
    let fc2 = weighted(3, "fc2", LayerKind::ClassifierDense, 10, Some(2), 500, 0);
    let layers = vec![conv1, conv2, fc1, fc2];
    let params = zero_params(&layers);
    ModelGraph::new(vec![1, 28, 28], layers, params, Vec::new()).expect("LeNet-5 is well formed")
}

/// A small residual network on 1×8×8 inputs for exercising pruning logic:
/// a 3×3 stem conv, then `stages` blocks of two 3×3 convs whose second conv
/// adds the block input before its ReLU, a 16-neuron dense layer, and a
/// 10-way classifier. Every conv carries a batch-norm marker. Each block's
/// second conv is coupled with the layer producing its shortcut.
pub fn build_synthetic_residual(stages: usize, filters: usize) -> Result<ModelGraph> {
    if stages == 0 || filters == 0 {
        return Err(Error::invalid(
            "synthetic residual graph needs stages >= 1 and filters >= 1",
        ));
    }
    let side = 8;
    let mut layers = Vec::new();
    let mut couplings = Vec::new();
    let conv = |layers: &mut Vec<LayerSpec>, name: String, input: Option<usize>, cin: usize| {
        let id = layers.len();
        let mut l = weighted(id, &name, LayerKind::Conv, filters, input, cin, 3);
        l.padding = 1;
        layers.push(l);
        let m = marker(id + 1, &layers[id]);
        layers.push(m);
        id
    };
    let stem = conv(&mut layers, "stem".into(), None, 1);
    let mut block_input = stem;
    for s in 1..=stages {
        let a = conv(
            &mut layers,
            format!("block{s}.conv_a"),
            Some(block_input),
            filters,
        );
        let b = conv(&mut layers, format!("block{s}.conv_b"), Some(a), filters);
        layers[b].residual = Some(block_input);
        couplings.push(CouplingGroup {
            members: vec![block_input, b],
        });
        block_input = b;
    }
    layers[block_input].spatial_multiplicity = side * side;
    let hidden = layers.len();
    layers.push(weighted(
        hidden,
        "fc",
        LayerKind::Dense,
        16,
        Some(block_input),
        filters * side * side,
        0,
    ));
    let cls = layers.len();
    layers.push(weighted(
        cls,
        "classifier",
        LayerKind::ClassifierDense,
        10,
        Some(hidden),
        16,
        0,
    ));
    let params = zero_params(&layers);
    ModelGraph::new(vec![1, side, side], layers, params, couplings)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet_parameter_count() {
        let m = build_lenet5();
        assert_eq!(m.param_count(Counting::Total), 431_080);
        assert_eq!(m.param_count(Counting::Unmasked), 431_080);
        let per_layer: Vec<usize> = m.layers().iter().map(LayerSpec::param_count).collect();
        assert_eq!(per_layer, [520, 25_050, 400_500, 5_010]);
    }

    #[test]
    fn lenet_classifier_and_links() {
        let m = build_lenet5();
        let c = m.classifier_id();
        assert_eq!(m.layer(c).name, "fc2");
        assert!(!m.layer(c).is_prunable());
        assert_eq!(m.layer(1).successors, [2]);
        assert_eq!(m.layer(1).spatial_multiplicity, 16);
    }

    #[test]
    fn lenet_forward_shape() {
        let mut m = build_lenet5();
        m.init_params(1);
        let logits = m.forward(&Tensor::zeros([1, 1, 28, 28])).unwrap();
        assert_eq!(logits.shape(), &[1, 10]);
        assert!(m.forward(&Tensor::zeros([1, 1, 27, 28])).is_err());
    }

    #[test]
    fn residual_has_one_group_per_stage() {
        let g = build_synthetic_residual(1, 4).unwrap();
        assert_eq!(g.couplings().len(), 1);
        assert_eq!(g.couplings()[0].members.len(), 2);
        let g3 = build_synthetic_residual(3, 4).unwrap();
        assert_eq!(g3.couplings().len(), 3);
        let mut g3 = g3;
        g3.init_params(3);
        let logits = g3.forward(&Tensor::full([2, 1, 8, 8], 0.5)).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        assert!(build_synthetic_residual(0, 4).is_err());
    }

    #[test]
    fn init_is_deterministic() {
        let mut a = build_lenet5();
        let mut b = build_lenet5();
        a.init_params(42);
        b.init_params(42);
        assert_eq!(a.params(), b.params());
        b.init_params(43);
        assert_ne!(a.params(), b.params());
    }
}
