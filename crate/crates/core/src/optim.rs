//! Momentum SGD with coupled weight decay and a warmup-then-cosine learning rate.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    /// Rate reached at the end of warmup.
    pub peak_lr: f64,
    /// Epochs of linear increase from zero to `peak_lr`.
    pub warmup_epochs: f64,
    /// Length of the whole run; the cosine decay reaches zero here.
    pub total_epochs: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            peak_lr: 0.1,
            warmup_epochs: 2.0,
            total_epochs: 60.0,
            momentum: 0.875,
            weight_decay: 3e-5,
            label_smoothing: 0.1,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return bad("peak learning rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label smoothing must lie in [0, 1)");
        }
        if !(self.warmup_epochs >= 0.0 && self.total_epochs > 0.0) {
            return bad("warmup epochs must be >= 0 and total epochs > 0");
        }
        Ok(())
    }

    /// Learning rate at a fractional epoch position.
    pub fn learning_rate(&self, epoch: f64) -> f64 {
        if epoch < self.warmup_epochs {
            return self.peak_lr * epoch / self.warmup_epochs;
        }
        let span = self.total_epochs - self.warmup_epochs;
        if span <= 0.0 {
            return self.peak_lr;
        }
        let progress = ((epoch - self.warmup_epochs) / span).clamp(0.0, 1.0);
        0.5 * self.peak_lr * (1.0 + (PI * progress).cos())
    }
}

/// One velocity buffer per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState<T> {
    pub velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new<S: AsRef<[T]>>(params: &[S]) -> Self {
        SgdState { velocity: params.iter().map(|p| vec![T::zero(); p.as_ref().len()]).collect() }
    }
}

/// Applies `v = mu * v + (g + wd * w); w -= lr * v` to every parameter.
///
/// Entries whose gate is `false` are skipped entirely: the parameter keeps its
/// value and its velocity is cleared.
pub fn sgd_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    gates: &[Option<&[bool]>],
    state: &mut SgdState<T>,
    config: &SgdConfig,
    epoch: f64,
) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    assert_eq!(params.len(), state.velocity.len(), "one velocity buffer per parameter");
    let lr = T::lit(config.learning_rate(epoch));
    let mu = T::lit(config.momentum);
    let wd = T::lit(config.weight_decay);
    for (i, param) in params.iter_mut().enumerate() {
        let grad = grads[i];
        let vel = &mut state.velocity[i];
        assert_eq!(param.len(), grad.len());
        let gate = gates.get(i).copied().flatten();
        for j in 0..param.len() {
            if let Some(g) = gate {
                if !g[j] {
                    vel[j] = T::zero();
                    continue;
                }
            }
            vel[j] = mu * vel[j] + grad[j] + wd * param[j];
            param[j] -= lr * vel[j];
        }
    }
}
