//! Named trainable parameters and the Adam update.

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// A named leaf tensor with persistent optimizer state.
#[derive(Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<Parameter> {
        let n = values.len();
        Ok(Parameter {
            name: name.into(),
            tensor: Tensor::var(shape, values)?,
            trainable: true,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
        })
    }

    /// Frozen parameter: participates in forward passes, never updated.
    pub fn frozen(name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<Parameter> {
        let mut p = Parameter::new(name, shape, values)?;
        p.trainable = false;
        p.tensor = p.tensor.detach();
        Ok(p)
    }

    pub fn values(&self) -> &[f64] {
        self.tensor.values()
    }

    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }

    /// Replaces the stored values with a fresh leaf (used by checkpoint load).
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        let shape = self.tensor.shape().to_vec();
        self.tensor = if self.trainable {
            Tensor::var(&shape, values)?
        } else {
            Tensor::from_vec(&shape, values)?
        };
        Ok(())
    }
}

/// Adam hyperparameters with decoupled weight decay.
///
/// Defaults follow the transformer training recipe used throughout:
/// lr 4.5e-4, beta1 0.9, beta2 0.96, weight decay 4.5e-4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 4.5e-4,
            beta1: 0.9,
            beta2: 0.96,
            weight_decay: 4.5e-4,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

/// One bias-corrected Adam step over `params`; gradients are consumed and
/// zeroed. `step_index` counts from 1.
pub fn adam_step(params: &mut [Parameter], cfg: &AdamConfig, step_index: usize) -> Result<()> {
    let t = step_index.max(1) as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for p in params.iter_mut() {
        if !p.trainable {
            p.tensor.clear_grad();
            continue;
        }
        let grad = p
            .tensor
            .grad()
            .ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
        let shape = p.tensor.shape().to_vec();
        let mut values = p.tensor.values().to_vec();
        for i in 0..values.len() {
            let g = grad[i];
            p.first_moment[i] = cfg.beta1 * p.first_moment[i] + (1.0 - cfg.beta1) * g;
            p.second_moment[i] = cfg.beta2 * p.second_moment[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = p.first_moment[i] / bc1;
            let v_hat = p.second_moment[i] / bc2;
            values[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * values[i]);
        }
        // fresh leaf: grads zeroed, old graph no longer referenced
        p.tensor = Tensor::var(&shape, values)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_recipe() {
        let cfg = AdamConfig::default();
        assert_eq!(cfg.beta1, 0.9);
        assert_eq!(cfg.beta2, 0.96);
        assert_eq!(cfg.weight_decay, 4.5e-4);
        assert_eq!(cfg.lr, 4.5e-4);
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = Parameter::new("w", &[2], vec![1.5, -0.5]).unwrap();
        p.tensor.mul(&Tensor::zeros(&[2])).unwrap().sum().backward().unwrap();
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(std::slice::from_mut(&mut p), &cfg, 1).unwrap();
        assert_eq!(p.values(), &[1.5, -0.5]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // with g = 1 the bias-corrected first step is lr / (1 + eps)
        let mut p = Parameter::new("w", &[1], vec![0.0]).unwrap();
        p.tensor.sum().backward().unwrap();
        let cfg = AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        adam_step(std::slice::from_mut(&mut p), &cfg, 1).unwrap();
        assert!((p.values()[0] + 0.1).abs() < 1e-6, "{}", p.values()[0]);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut p = Parameter::new("w", &[1], vec![0.0]).unwrap();
        let err = adam_step(std::slice::from_mut(&mut p), &AdamConfig::default(), 1).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn step_zeroes_grads() {
        let mut p = Parameter::new("w", &[1], vec![1.0]).unwrap();
        p.tensor.sum().backward().unwrap();
        adam_step(std::slice::from_mut(&mut p), &AdamConfig::default(), 1).unwrap();
        assert!(p.tensor.grad().is_none());
    }
}
