use super::Tensor;
use crate::error::{Error, Result};

/// Momentum SGD whose updates respect binary masks.
///
/// Per entry: `v ← momentum·v + g`, `p ← p − lr·v`, then both `p` and `v`
/// are multiplied by the mask bit, so a masked entry is exactly `0.0` after
/// every step and carries no velocity into the next.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// One update over `params`. `masks[i]`, when present, must have the
    /// same length as `params[i]`. Consumes the gradients.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        masks: &[Option<&[bool]>],
        lr: f64,
    ) -> Result<()> {
        if masks.len() != params.len() {
            return Err(Error::invalid(format!(
                "sgd_step: {} params but {} mask slots",
                params.len(),
                masks.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::invalid(
                "sgd_step: parameter list changed between steps",
            ));
        }
        for (i, (p, mask)) in params.iter().zip(masks).enumerate() {
            if p.grad().is_none() {
                return Err(Error::invalid(format!(
                    "sgd_step: parameter {i} (shape {:?}) has no gradient",
                    p.shape()
                )));
            }
            if let Some(m) = mask {
                if m.len() != p.numel() {
                    return Err(Error::ShapeMismatch {
                        op: "sgd_step mask",
                        left: p.shape().to_vec(),
                        right: vec![m.len()],
                    });
                }
            }
        }
        for ((p, mask), v) in params.iter_mut().zip(masks).zip(&mut self.velocity) {
            let g = p.take_grad().expect("checked above");
            let data = p.data_mut();
            for j in 0..data.len() {
                v[j] = self.momentum * v[j] + g[j];
                data[j] -= lr * v[j];
            }
            if let Some(m) = mask {
                for ((x, vj), &keep) in data.iter_mut().zip(v.iter_mut()).zip(m.iter()) {
                    if !keep {
                        *x = 0.0;
                        *vj = 0.0;
                    }
                }
            }
        }
        Ok(())
    }
}
