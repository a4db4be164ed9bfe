use super::{LayerParams, LayerSpec};
use crate::tensor::Tensor;

/// Binary keep-masks of one layer. `true` keeps the entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerMask {
    pub units: Vec<bool>,
    pub weights: Vec<bool>,
    pub bias: Vec<bool>,
}

impl LayerMask {
    fn full(layer: &LayerSpec) -> Self {
        Self {
            units: vec![true; layer.unit_count],
            weights: vec![true; layer.unit_count * layer.weights_per_unit],
            bias: vec![true; layer.unit_count],
        }
    }

    fn apply(keep: &[bool], t: &Tensor) -> Tensor {
        let mut out = t.clone();
        out.zero_grad();
        out.data_mut()
            .iter_mut()
            .zip(keep)
            .filter(|(_, &k)| !k)
            .for_each(|(x, _)| *x = 0.0);
        out
    }

    pub fn apply_weights(&self, w: &Tensor) -> Tensor {
        Self::apply(&self.weights, w)
    }

    pub fn apply_bias(&self, b: &Tensor) -> Tensor {
        Self::apply(&self.bias, b)
    }

    pub fn unmasked(&self) -> usize {
        self.weights
            .iter()
            .chain(&self.bias)
            .filter(|&&k| k)
            .count()
    }

    pub fn pruned_units(&self) -> usize {
        self.units.iter().filter(|&&k| !k).count()
    }

    pub fn pruned_weights(&self) -> usize {
        self.weights.iter().filter(|&&k| !k).count()
    }
}

/// Per-layer masks, indexed by layer id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskStore {
    layers: Vec<LayerMask>,
}

impl MaskStore {
    pub fn full(layers: &[LayerSpec]) -> Self {
        Self {
            layers: layers.iter().map(LayerMask::full).collect(),
        }
    }

    pub fn from_layers(layers: Vec<LayerMask>) -> Self {
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer(&self, id: usize) -> &LayerMask {
        &self.layers[id]
    }

    pub fn layer_mut(&mut self, id: usize) -> &mut LayerMask {
        &mut self.layers[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &LayerMask> {
        self.layers.iter()
    }

    pub fn matches(&self, specs: &[LayerSpec]) -> bool {
        self.layers.len() == specs.len()
            && self.layers.iter().zip(specs).all(|(m, l)| {
                m.units.len() == l.unit_count
                    && m.bias.len() == l.unit_count
                    && m.weights.len() == l.unit_count * l.weights_per_unit
            })
    }

    pub fn unmasked_count(&self) -> usize {
        self.layers.iter().map(LayerMask::unmasked).sum()
    }

    /// True when every bit cleared in `earlier` is also cleared here.
    pub fn covers(&self, earlier: &MaskStore) -> bool {
        self.layers.len() == earlier.layers.len()
            && self.layers.iter().zip(&earlier.layers).all(|(now, then)| {
                let pairs = |a: &[bool], b: &[bool]| {
                    a.len() == b.len() && a.iter().zip(b).all(|(&n, &t)| t || !n)
                };
                pairs(&now.units, &then.units)
                    && pairs(&now.weights, &then.weights)
                    && pairs(&now.bias, &then.bias)
            })
    }

    pub fn zero_masked(&self, params: &mut [LayerParams]) {
        for (m, p) in self.layers.iter().zip(params.iter_mut()) {
            for (x, &k) in p.weight.data_mut().iter_mut().zip(&m.weights) {
                if !k {
                    *x = 0.0;
                }
            }
            for (x, &k) in p.bias.data_mut().iter_mut().zip(&m.bias) {
                if !k {
                    *x = 0.0;
                }
            }
        }
    }
}
