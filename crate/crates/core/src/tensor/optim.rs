use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl SgdConfig {
    pub fn new(learning_rate: f32, momentum: f32, weight_decay: f32) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid("sgd", format!("learning rate {learning_rate} must be positive")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("sgd", format!("momentum {momentum} must be in [0, 1)")));
        }
        if !(weight_decay >= 0.0) {
            return Err(Error::invalid("sgd", format!("weight decay {weight_decay} must be non-negative")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
        })
    }
}

/// A named trainable leaf together with its momentum buffer.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub velocity: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        let value = Tensor::from_vec(data, shape)?.requires_grad();
        let velocity = vec![0.0; value.numel()];
        Ok(Self {
            name: name.into(),
            value,
            velocity,
        })
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> Vec<f32> {
        self.value.to_vec()
    }

    pub fn set_data(&self, data: &[f32]) {
        self.value.update_data(|d| d.copy_from_slice(data));
    }

    /// Read-only copy for use inside a graph that must not reach this
    /// parameter.
    pub fn frozen(&self) -> Tensor {
        self.value.detach()
    }
}

/// Heavy-ball SGD:
/// `buf <- momentum*buf + grad + weight_decay*param; param <- param - lr*buf`.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Param>, config: &SgdConfig) -> Result<()> {
    let mut params: Vec<&mut Param> = params.into_iter().collect();
    if let Some(p) = params.iter().find(|p| p.value.grad().is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    for p in params.iter_mut() {
        let grad = p.value.grad().expect("checked above");
        let lr = config.learning_rate;
        let Param { value, velocity, .. } = &mut **p;
        value.update_data(|data| {
            for ((w, buf), g) in data.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                *buf = config.momentum * *buf + g + config.weight_decay * *w;
                if lr != 0.0 {
                    *w -= lr * *buf;
                }
            }
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param_with_grad(value: f32, grad: f32) -> Param {
        let p = Param::new("w", vec![value], &[1]).unwrap();
        p.value.scale(grad).sum().backward().unwrap();
        p
    }

    fn cfg(lr: f32, momentum: f32, wd: f32) -> SgdConfig {
        SgdConfig {
            learning_rate: lr,
            momentum,
            weight_decay: wd,
        }
    }

    #[test]
    fn plain_step() {
        let mut ps = vec![param_with_grad(1.0, 0.5)];
        sgd_step(&mut ps, &cfg(0.1, 0.0, 0.0)).unwrap();
        assert!((ps[0].data()[0] - 0.95).abs() < 1e-7);
    }

    #[test]
    fn zero_grad_is_noop() {
        let mut ps = vec![param_with_grad(1.0, 0.0)];
        sgd_step(&mut ps, &cfg(0.7, 0.0, 0.0)).unwrap();
        assert_eq!(ps[0].data()[0], 1.0);
    }

    #[test]
    fn momentum_two_steps() {
        let mut ps = vec![param_with_grad(0.0, 1.0)];
        let c = cfg(0.1, 0.9, 0.0);
        sgd_step(&mut ps, &c).unwrap();
        assert!((ps[0].data()[0] + 0.1).abs() < 1e-7);
        // grad stays at 1.0 (it is only cleared explicitly)
        sgd_step(&mut ps, &c).unwrap();
        assert!((ps[0].velocity[0] - 1.9).abs() < 1e-6);
        assert!((ps[0].data()[0] + 0.29).abs() < 1e-6);
    }

    #[test]
    fn weight_decay_pulls_towards_zero() {
        let mut ps = vec![param_with_grad(2.0, 0.0)];
        sgd_step(&mut ps, &cfg(0.1, 0.0, 0.5)).unwrap();
        assert!((ps[0].data()[0] - 1.9).abs() < 1e-6);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut ps = vec![Param::new("orphan", vec![1.0], &[1]).unwrap()];
        let err = sgd_step(&mut ps, &cfg(0.1, 0.0, 0.0)).unwrap_err();
        assert!(err.to_string().contains("orphan"));
    }

    #[test]
    fn config_validation() {
        assert!(SgdConfig::new(0.0, 0.9, 0.0).is_err());
        assert!(SgdConfig::new(1e-3, 1.0, 0.0).is_err());
        assert!(SgdConfig::new(1e-3, 0.9, -1.0).is_err());
        assert!(SgdConfig::new(1e-3, 0.9, 5e-4).is_ok());
    }

    proptest::proptest! {
        #[test]
        fn zero_learning_rate_keeps_bits(values in proptest::collection::vec(-10.0f32..10.0, 1..16),
                                         scale in -3.0f32..3.0) {
            let n = values.len();
            let mut ps = vec![Param::new("w", values.clone(), &[n]).unwrap()];
            ps[0].value.scale(scale).sum().backward().unwrap();
            sgd_step(&mut ps, &cfg(0.0, 0.9, 5e-4)).unwrap();
            let after = ps[0].data();
            for (a, b) in after.iter().zip(&values) {
                proptest::prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
