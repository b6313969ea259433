//! Adam with bias correction, applied in place over a parameter list.

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    pub beta1: S,
    pub beta2: S,
    pub epsilon: S,
    pub t: u64,
    slots: Vec<Slot<S>>,
}

#[derive(Debug, Clone)]
struct Slot<S> {
    m: Vec<S>,
    v: Vec<S>,
}

impl<S: Scalar> Default for AdamState<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        AdamState {
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            epsilon: S::from_f64(1e-8),
            t: 0,
            slots: Vec::new(),
        }
    }

    /// Moment buffers for checkpointing, in parameter order.
    pub fn moments(&self) -> impl Iterator<Item = (&[S], &[S])> {
        self.slots.iter().map(|s| (s.m.as_slice(), s.v.as_slice()))
    }

    /// Restores moment buffers (in the same parameter order they were saved).
    pub fn restore(&mut self, t: u64, moments: Vec<(Vec<S>, Vec<S>)>) {
        self.t = t;
        self.slots = moments.into_iter().map(|(m, v)| Slot { m, v }).collect();
    }

    /// One bias-corrected update over `params`. Every parameter must hold a
    /// gradient; gradients are cleared afterwards. The parameter order must
    /// be stable across calls.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<S>)], lr: S) -> Result<()> {
        if lr <= S::zero() || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        if self.slots.is_empty() {
            self.slots = params
                .iter()
                .map(|(_, p)| Slot {
                    m: vec![S::zero(); p.numel()],
                    v: vec![S::zero(); p.numel()],
                })
                .collect();
        }
        if self.slots.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, got {}",
                self.slots.len(),
                params.len()
            )));
        }
        self.t += 1;
        let one = S::one();
        let bc1 = one - self.beta1.powi(self.t as i32);
        let bc2 = one - self.beta2.powi(self.t as i32);
        for ((name, param), slot) in params.iter_mut().zip(&mut self.slots) {
            let grad = param
                .grad
                .as_ref()
                .ok_or_else(|| Error::MissingGradient(name.clone()))?;
            if grad.len() != slot.m.len() {
                return Err(Error::shape(name.as_str(), &[slot.m.len()], &[grad.len()]));
            }
            for i in 0..grad.len() {
                let g = grad[i];
                slot.m[i] = self.beta1 * slot.m[i] + (one - self.beta1) * g;
                slot.v[i] = self.beta2 * slot.v[i] + (one - self.beta2) * g * g;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                param.data[i] = param.data[i] - lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            param.clear_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = Tensor::<f64>::zeros(&[1]).unwrap().with_grad();
        p.accumulate_grad(&[0.1]).unwrap();
        let mut adam = AdamState::new();
        adam.step(&mut [("p".to_string(), &mut p)], 1e-4).unwrap();
        // bias-corrected first step: m_hat/sqrt(v_hat) = sign(g) up to epsilon
        assert!((p.data[0] + 1e-4).abs() < 1e-9, "got {}", p.data[0]);
        assert_eq!(adam.t, 1);
        assert!(p.grad.is_none());
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::<f64>::constant(&[3], 0.7).unwrap().with_grad();
        p.accumulate_grad(&[0.0, 0.0, 0.0]).unwrap();
        let mut adam = AdamState::new();
        adam.step(&mut [("p".to_string(), &mut p)], 1e-2).unwrap();
        assert_eq!(p.data, vec![0.7; 3]);
    }

    #[test]
    fn identical_inputs_give_identical_updates() {
        let run = || {
            let mut p = Tensor::<f32>::uniform(&[8], 3, -1.0, 1.0).unwrap().with_grad();
            let mut adam = AdamState::new();
            for step in 0..5 {
                let g: Vec<f32> = (0..8).map(|i| ((i + step) as f32).sin()).collect();
                p.accumulate_grad(&g).unwrap();
                adam.step(&mut [("p".to_string(), &mut p)], 1e-3).unwrap();
            }
            p.data
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = Tensor::<f64>::zeros(&[2]).unwrap().with_grad();
        let mut adam = AdamState::new();
        let err = adam.step(&mut [("enc.w".to_string(), &mut p)], 1e-3).unwrap_err();
        assert!(err.to_string().contains("enc.w"));
    }
}
