use crate::error::{Result, TameError};

use super::{Gradients, Network};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub nesterov: bool,
    pub weight_decay: f32,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            batch_size: 128,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TameError::config("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TameError::config("momentum must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TameError::config("weight_decay must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(TameError::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity {
    tensors: Vec<Vec<f32>>,
}

impl Velocity {
    pub fn zeros_like(net: &Network) -> Self {
        Velocity {
            tensors: net.params().iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn tensors(&self) -> &[Vec<f32>] {
        &self.tensors
    }
}

/// One SGD update in place.
///
/// With `d = g + weight_decay · w` and `v ← momentum · v + d`, the step is `w ← w − lr · d'`
/// where `d' = d + momentum · v` under Nesterov and `d' = v` otherwise. Masked weights and
/// their velocity are pinned to zero.
pub fn sgd_step(
    net: &mut Network,
    grads: &Gradients,
    cfg: &SgdConfig,
    velocity: &mut Velocity,
) -> Result<()> {
    let mut params = net.params_mut();
    if params.len() != grads.tensors.len() || params.len() != velocity.tensors.len() {
        return Err(TameError::Shape {
            expected: vec![params.len()],
            actual: vec![grads.tensors.len(), velocity.tensors.len()],
        });
    }
    for (((w, mask), g), v) in params
        .iter_mut()
        .zip(&grads.tensors)
        .zip(velocity.tensors.iter_mut())
    {
        if w.len() != g.len() || w.len() != v.len() {
            return Err(TameError::Shape {
                expected: vec![w.len()],
                actual: vec![g.len(), v.len()],
            });
        }
        for i in 0..w.len() {
            if mask.is_some_and(|m| !m[i]) {
                w[i] = 0.0;
                v[i] = 0.0;
                continue;
            }
            let d = g[i] + cfg.weight_decay * w[i];
            v[i] = cfg.momentum * v[i] + d;
            let step = if cfg.nesterov {
                d + cfg.momentum * v[i]
            } else {
                v[i]
            };
            w[i] -= cfg.learning_rate * step;
        }
    }
    Ok(())
}
