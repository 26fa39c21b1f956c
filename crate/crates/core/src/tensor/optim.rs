//! Named trainable parameters and the SGD-with-momentum update rule.

use super::{scalar_from, Gradients, Scalar, Tensor};
use crate::error::{Error, Result};

/// A named leaf tensor with its momentum accumulator.
///
/// The value tensor is replaced wholesale on every update; graphs built
/// before an update keep referencing the old node, which is exactly the
/// single-step semantics the training loop needs.
pub struct Parameter<S: Scalar> {
    name: String,
    value: Tensor<S>,
    momentum: Vec<S>,
    trainable: bool,
}

impl<S: Scalar> Parameter<S> {
    /// Gradient-carrying parameter (online networks).
    pub fn trainable(name: impl Into<String>, values: Vec<S>, shape: &[usize]) -> Result<Self> {
        let momentum = vec![S::zero(); values.len()];
        Ok(Parameter {
            name: name.into(),
            value: Tensor::leaf(values, shape, true)?,
            momentum,
            trainable: true,
        })
    }

    /// Parameter that never receives gradients (target network).
    pub fn frozen(name: impl Into<String>, values: Vec<S>, shape: &[usize]) -> Result<Self> {
        Ok(Parameter {
            name: name.into(),
            value: Tensor::leaf(values, shape, false)?,
            momentum: Vec::new(),
            trainable: false,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Leaf tensor to use when building a forward graph.
    pub fn value(&self) -> &Tensor<S> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn momentum_buffer(&self) -> &[S] {
        &self.momentum
    }

    /// Replace the parameter values (same shape), e.g. after an optimizer
    /// step, an EMA blend, or a checkpoint load.
    pub fn set_values(&mut self, values: Vec<S>) -> Result<()> {
        if values.len() != self.value.numel() {
            return Err(Error::contract(format!(
                "parameter {}: {} values for shape {:?}",
                self.name,
                values.len(),
                self.value.shape()
            )));
        }
        self.value = Tensor::leaf(values, &self.value.shape().to_vec(), self.trainable)?;
        Ok(())
    }

    /// Convert a trainable parameter into a frozen one (linear-probe mode).
    pub fn freeze(&mut self) -> Result<()> {
        self.trainable = false;
        self.momentum = Vec::new();
        self.value = Tensor::leaf(
            self.value.values().to_vec(),
            &self.value.shape().to_vec(),
            false,
        )?;
        Ok(())
    }
}

/// SGD with momentum and weight decay:
/// `buf <- momentum * buf + (grad + weight_decay * param)`, then
/// `param <- param - lr * buf`.
///
/// Every parameter must have a gradient in `grads`; run
/// [`Gradients::ensure_zeros`] first for parameters that were legitimately
/// unreachable from the loss.
pub fn sgd_update<'a, S: Scalar>(
    params: impl IntoIterator<Item = &'a mut Parameter<S>>,
    grads: &Gradients<S>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let lr = scalar_from::<S>(lr);
    let mu = scalar_from::<S>(momentum);
    let wd = scalar_from::<S>(weight_decay);
    for p in params {
        if !p.trainable {
            return Err(Error::contract(format!(
                "sgd_update on frozen parameter {}",
                p.name
            )));
        }
        let g = grads.get(&p.value).ok_or_else(|| {
            Error::contract(format!("missing gradient for trainable parameter {}", p.name))
        })?;
        let old = p.value.values();
        let mut next = Vec::with_capacity(old.len());
        for ((buf, &gi), &pi) in p.momentum.iter_mut().zip(g).zip(old) {
            *buf = mu * *buf + (gi + wd * pi);
            next.push(pi - lr * *buf);
        }
        p.set_values(next)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn grads_for(p: &Parameter<f64>, factor: f64) -> Gradients<f64> {
        // loss = factor * sum(p) -> grad = factor everywhere.
        let loss = p.value().mul_scalar(factor).unwrap().sum().unwrap();
        backward(&loss).unwrap()
    }

    #[test]
    fn plain_step_matches_hand_arithmetic() {
        let mut p = Parameter::trainable("w", vec![1.0], &[1]).unwrap();
        let grads = grads_for(&p, 1.0);
        sgd_update([&mut p], &grads, 0.03, 0.0, 0.0).unwrap();
        assert!((p.value().values()[0] - 0.97).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Parameter::trainable("w", vec![0.4, -1.5], &[2]).unwrap();
        let grads = grads_for(&p, 0.0);
        sgd_update([&mut p], &grads, 0.5, 0.0, 0.0).unwrap();
        assert_eq!(p.value().values(), &[0.4, -1.5]);
    }

    #[test]
    fn momentum_two_step_recurrence() {
        // momentum 0.9, constant grad 1, lr 1, start 0: -1 then -2.9.
        let mut p = Parameter::trainable("w", vec![0.0], &[1]).unwrap();
        for expected in [-1.0, -2.9] {
            let grads = grads_for(&p, 1.0);
            sgd_update([&mut p], &grads, 1.0, 0.9, 0.0).unwrap();
            assert!((p.value().values()[0] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_gradient_is_a_contract_error() {
        let mut p = Parameter::trainable("w", vec![1.0], &[1]).unwrap();
        let other = Parameter::trainable("v", vec![2.0], &[1]).unwrap();
        let grads = grads_for(&other, 1.0);
        assert!(matches!(
            sgd_update([&mut p], &grads, 0.1, 0.9, 0.0),
            Err(crate::Error::Contract(_))
        ));
    }

    #[test]
    fn frozen_parameters_cannot_be_stepped() {
        let mut p = Parameter::frozen("t", vec![1.0], &[1]).unwrap();
        let donor = Parameter::trainable("w", vec![1.0], &[1]).unwrap();
        let grads = grads_for(&donor, 1.0);
        assert!(sgd_update([&mut p], &grads, 0.1, 0.9, 0.0).is_err());
    }

    #[test]
    fn weight_decay_enters_the_buffer() {
        // buf = g + wd*p = 1 + 0.1*2 = 1.2; p' = 2 - 0.5*1.2 = 1.4.
        let mut p = Parameter::trainable("w", vec![2.0], &[1]).unwrap();
        let grads = grads_for(&p, 1.0);
        sgd_update([&mut p], &grads, 0.5, 0.0, 0.1).unwrap();
        assert!((p.value().values()[0] - 1.4).abs() < 1e-12);
    }
}
