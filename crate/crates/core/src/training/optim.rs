use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update using the gradients stored on `params`.
/// `lrs` holds one learning rate per tensor.
pub fn adam_step(params: &mut ModelParams, state: &mut AdamState, lrs: &[f64]) -> Result<()> {
    let names = params.names();
    let tensors = params.tensors_mut();
    if lrs.len() != tensors.len() || state.m.len() != tensors.len() {
        return Err(Error::InvalidArgument(format!(
            "adam_step: {} tensors, {} learning rates, {} moment buffers",
            tensors.len(),
            lrs.len(),
            state.m.len()
        )));
    }
    for (name, t) in names.iter().zip(tensors.iter()) {
        if t.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for (i, t) in tensors.iter_mut().enumerate() {
        let lr = lrs[i];
        let (values, grads) = t.values_and_grad_mut();
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..values.len() {
            let g = grads[j];
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            values[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// `base · γ^(total_layers − 1 − layer)`: the topmost layer trains at
/// `base` and each layer below at a further factor of `γ`.
pub fn layerwise_lr(base: f64, gamma: f64, layer: usize, total_layers: usize) -> Result<f64> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::config("layer_decay", format!("must lie in (0, 1], got {gamma}")));
    }
    if layer >= total_layers {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range for {total_layers} layers"
        )));
    }
    Ok(base * gamma.powi((total_layers - 1 - layer) as i32))
}

/// Learning rate of every parameter tensor, in canonical order.
pub fn tensor_learning_rates(config: &ModelConfig, base: f64, gamma: f64) -> Result<Vec<f64>> {
    let total = config.num_layer_groups();
    config
        .layer_groups()
        .into_iter()
        .map(|g| layerwise_lr(base, gamma, g, total))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> ModelParams {
        let cfg = ModelConfig {
            vocab_size: 8,
            d_model: 4,
            n_heads: 2,
            n_layers: 1,
            max_len: 4,
        };
        ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut p = params();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        p.zero_grad();
        let lrs = vec![0.1; p.tensors().len()];
        adam_step(&mut p, &mut s, &lrs).unwrap();
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = params();
        let before = p.clone();
        let mut s = AdamState::new(&p);
        for t in p.tensors_mut() {
            t.grad_mut().fill(1.0);
        }
        let lr = 0.01;
        adam_step(&mut p, &mut s, &vec![lr; before.tensors().len()]).unwrap();
        let expected = lr / (1.0 + ADAM_EPS);
        for (a, b) in p.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((y - x - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn non_finite_gradient_is_named() {
        let mut p = params();
        let mut s = AdamState::new(&p);
        p.tensor_mut("lm_head").unwrap().grad_mut()[3] = f64::NAN;
        let lrs = vec![0.1; p.tensors().len()];
        let err = adam_step(&mut p, &mut s, &lrs).unwrap_err();
        assert!(err.to_string().contains("lm_head"));
    }

    #[test]
    fn layerwise_schedule() {
        for l in 0..3 {
            assert_eq!(layerwise_lr(0.1, 1.0, l, 3).unwrap(), 0.1);
        }
        let lrs: Vec<f64> = (0..3).map(|l| layerwise_lr(1.0, 0.5, l, 3).unwrap()).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 1.0]);
        assert_eq!(layerwise_lr(0.3, 0.7, 4, 5).unwrap(), 0.3);
        assert!(matches!(layerwise_lr(1.0, 0.0, 0, 3), Err(Error::Config { .. })));
        assert!(layerwise_lr(1.0, 1.1, 0, 3).is_err());
    }

    #[test]
    fn tensor_rates_follow_groups() {
        let p = params();
        let lrs = tensor_learning_rates(p.config(), 1.0, 0.5).unwrap();
        assert_eq!(lrs[0], 0.25);
        assert_eq!(lrs[2], 0.5);
        assert_eq!(*lrs.last().unwrap(), 1.0);
    }
}
