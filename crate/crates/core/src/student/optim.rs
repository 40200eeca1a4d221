//! Classical SGD with momentum and L2 weight decay, plus the linear-warmup
//! cosine learning-rate schedule.

use super::net::{LayerGrad, Linear, MlpGradients};
use crate::error::{Error, Result};

/// Per-parameter momentum buffers and the fixed optimizer hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    buffers: Vec<LayerGrad>,
    momentum: f64,
    weight_decay: f64,
}

impl OptimizerState {
    pub fn new(layers: &[Linear], momentum: f64, weight_decay: f64) -> Self {
        Self {
            buffers: layers.iter().map(LayerGrad::zeros_like).collect(),
            momentum,
            weight_decay,
        }
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn weight_decay(&self) -> f64 {
        self.weight_decay
    }

    pub fn buffers(&self) -> &[LayerGrad] {
        &self.buffers
    }
}

/// One update: `buf <- m*buf + grad + wd*param; param <- param - lr*buf`.
/// Weight decay applies to weights only, never biases. A non-finite gradient
/// aborts with the offending step index.
pub fn sgd_step(
    layers: &mut [Linear],
    grads: &MlpGradients,
    state: &mut OptimizerState,
    lr: f64,
    step: u64,
) -> Result<()> {
    if layers.len() != grads.layers.len() || layers.len() != state.buffers.len() {
        return Err(Error::CountMismatch {
            what: "layer",
            left: layers.len(),
            right: grads.layers.len(),
        });
    }
    if !grads.is_finite() {
        return Err(Error::State(format!(
            "non-finite gradient at step {step}"
        )));
    }
    let m = state.momentum;
    let wd = state.weight_decay;
    for ((layer, grad), buf) in layers
        .iter_mut()
        .zip(grads.layers.iter())
        .zip(state.buffers.iter_mut())
    {
        for ((p, g), b) in layer
            .weight
            .data_mut()
            .iter_mut()
            .zip(grad.weight.data().iter())
            .zip(buf.weight.data_mut().iter_mut())
        {
            *b = m * *b + g + wd * *p;
            *p -= lr * *b;
        }
        for ((p, g), b) in layer
            .bias
            .iter_mut()
            .zip(grad.bias.iter())
            .zip(buf.bias.iter_mut())
        {
            *b = m * *b + g;
            *p -= lr * *b;
        }
    }
    Ok(())
}

/// Linear ramp from 0 to `base_lr` over the warmup fraction, then cosine
/// decay to 0 at the end of training.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_epochs: usize, total_epochs: usize) -> Result<Self> {
        if total_epochs == 0 || warmup_epochs >= total_epochs {
            return Err(Error::InvalidParameter {
                name: "schedule",
                message: format!(
                    "need total_epochs > warmup_epochs, got {total_epochs} and {warmup_epochs}"
                ),
            });
        }
        if !(base_lr >= 0.0) || !base_lr.is_finite() {
            return Err(Error::InvalidParameter {
                name: "base_lr",
                message: format!("base learning rate must be finite and >= 0, got {base_lr}"),
            });
        }
        Ok(Self {
            base_lr,
            warmup_epochs,
            total_epochs,
        })
    }

    /// Warmup fraction of the run.
    pub fn warmup_fraction(&self) -> f64 {
        self.warmup_epochs as f64 / self.total_epochs as f64
    }

    /// Learning rate at epoch fraction `t` in [0, 1].
    pub fn lr_at(&self, t: f64) -> f64 {
        let t = t.clamp(0.0, 1.0);
        let w = self.warmup_fraction();
        if t < w {
            self.base_lr * t / w
        } else {
            let progress = if w < 1.0 { (t - w) / (1.0 - w) } else { 0.0 };
            0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::EmbeddingMatrix;

    fn single_param_layer(v: f64) -> Vec<Linear> {
        vec![Linear::new(EmbeddingMatrix::new(1, 1, vec![v]).unwrap(), vec![0.0]).unwrap()]
    }

    fn grad_of(g: f64) -> MlpGradients {
        MlpGradients {
            layers: vec![LayerGrad {
                weight: EmbeddingMatrix::new(1, 1, vec![g]).unwrap(),
                bias: vec![0.0],
            }],
        }
    }

    #[test]
    fn plain_step_with_empty_buffer() {
        let mut layers = single_param_layer(1.0);
        let mut state = OptimizerState::new(&layers, 0.9, 0.0);
        sgd_step(&mut layers, &grad_of(0.5), &mut state, 0.1, 0).unwrap();
        assert!((layers[0].weight.get(0, 0) - (1.0 - 0.1 * 0.5)).abs() <= 1e-15);
    }

    #[test]
    fn momentum_coasting_with_zero_gradient() {
        let mut layers = single_param_layer(1.0);
        let mut state = OptimizerState::new(&layers, 0.9, 0.0);
        sgd_step(&mut layers, &grad_of(1.0), &mut state, 0.1, 0).unwrap();
        let after_first = layers[0].weight.get(0, 0);
        sgd_step(&mut layers, &grad_of(0.0), &mut state, 0.1, 1).unwrap();
        // buffer was 1.0, decays to 0.9, param moves by lr*0.9.
        assert!((layers[0].weight.get(0, 0) - (after_first - 0.1 * 0.9)).abs() <= 1e-15);
    }

    #[test]
    fn two_steps_match_closed_form_recursion() {
        let (m, wd, lr) = (0.9, 1e-4, 0.03);
        let (g1, g2) = (0.7, -0.2);
        let p0 = 2.0;
        let mut layers = single_param_layer(p0);
        let mut state = OptimizerState::new(&layers, m, wd);
        sgd_step(&mut layers, &grad_of(g1), &mut state, lr, 0).unwrap();
        sgd_step(&mut layers, &grad_of(g2), &mut state, lr, 1).unwrap();
        // Unrolled recursion.
        let b1 = g1 + wd * p0;
        let p1 = p0 - lr * b1;
        let b2 = m * b1 + g2 + wd * p1;
        let p2 = p1 - lr * b2;
        assert!((layers[0].weight.get(0, 0) - p2).abs() <= 1e-12);
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut layers = single_param_layer(1.0);
        layers[0].bias[0] = 1.0;
        let mut state = OptimizerState::new(&layers, 0.9, 0.5);
        sgd_step(&mut layers, &grad_of(0.0), &mut state, 0.1, 0).unwrap();
        // Weight decays, bias untouched (zero grad, no decay).
        assert!(layers[0].weight.get(0, 0) < 1.0);
        assert_eq!(layers[0].bias[0], 1.0);
    }

    #[test]
    fn non_finite_gradient_reports_step() {
        let mut layers = single_param_layer(1.0);
        let mut state = OptimizerState::new(&layers, 0.9, 0.0);
        let err = sgd_step(&mut layers, &grad_of(f64::NAN), &mut state, 0.1, 17).unwrap_err();
        assert!(err.to_string().contains("step 17"), "{err}");
    }

    #[test]
    fn schedule_junction_terminus_midpoint() {
        let s = Schedule::new(0.03, 5, 30).unwrap();
        let w = s.warmup_fraction();
        assert!((s.lr_at(w) - 0.03).abs() <= 1e-12);
        assert!(s.lr_at(1.0).abs() <= 1e-12);
        assert!((s.lr_at((1.0 + w) / 2.0) - 0.015).abs() <= 1e-12);
    }

    #[test]
    fn schedule_continuous_at_warmup_junction() {
        let s = Schedule::new(0.5, 3, 20).unwrap();
        let w = s.warmup_fraction();
        let eps = 1e-9;
        let left = s.lr_at(w - eps);
        let right = s.lr_at(w + eps);
        assert!((left - 0.5).abs() <= 1e-7);
        assert!((right - 0.5).abs() <= 1e-7);
        assert!((s.lr_at(w) - 0.5).abs() <= 1e-12);
    }

    #[test]
    fn zero_warmup_starts_at_base_lr() {
        let s = Schedule::new(0.1, 0, 10).unwrap();
        assert!((s.lr_at(0.0) - 0.1).abs() <= 1e-12);
    }

    #[test]
    fn schedule_rejects_warmup_not_below_total() {
        assert!(Schedule::new(0.1, 10, 10).is_err());
        assert!(Schedule::new(0.1, 11, 10).is_err());
    }
}
