//! Dense row-major tensor with optional gradient storage.
//!
//! Tensors are the storage type for everything learnable: feature maps,
//! window weights, MLP parameters. Stored scalars must stay finite;
//! operations that could produce NaN/Inf are expected to fail loudly
//! rather than propagate.

use crate::error::{Error, Result};
use crate::numerics::Scalar;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    pub shape: Vec<usize>,
    pub data: Vec<S>,
    pub requires_grad: bool,
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = checked_numel(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
            requires_grad: false,
            grad: None,
        })
    }

    pub fn constant(shape: &[usize], value: S) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite("constant fill".into()));
        }
        let n = checked_numel(shape)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
            grad: None,
        })
    }

    /// Uniform fill driven by a caller-owned stream; used for model init
    /// where many tensors draw from one seeded generator.
    pub fn uniform_from(shape: &[usize], rng: &mut ChaCha8Rng, lo: S, hi: S) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::InvalidArgument(format!(
                "bad uniform range [{lo}, {hi}]"
            )));
        }
        let n = checked_numel(shape)?;
        let data = (0..n).map(|_| rng.gen_range(lo..=hi)).collect();
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Uniform fill reproducible from a standalone seed.
    pub fn uniform(shape: &[usize], seed: u64, lo: S, hi: S) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::uniform_from(shape, &mut rng, lo, hi)
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let n = checked_numel(shape)?;
        if n != data.len() {
            return Err(Error::shape("from_vec", shape, &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("from_vec".into()));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Reinterpret the flat data under a new shape of equal element count.
    pub fn reshape(&mut self, shape: &[usize]) -> Result<()> {
        let n = checked_numel(shape)?;
        if n != self.data.len() {
            return Err(Error::shape("reshape", shape, &self.shape));
        }
        self.shape = shape.to_vec();
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), n);
        }
        Ok(())
    }

    /// Add `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[S]) -> Result<()> {
        if delta.len() != self.data.len() {
            return Err(Error::shape("accumulate_grad", &self.shape, &[delta.len()]));
        }
        let grad = self
            .grad
            .get_or_insert_with(|| vec![S::zero(); self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += *d;
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::InvalidArgument("empty shape".into()));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArgument(format!(
            "zero-sized dimension in {shape:?}"
        )));
    }
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::InvalidArgument(format!("shape {shape:?} overflows usize")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_matches_shape() {
        let t = Tensor::<f32>::zeros(&[2, 2]).unwrap();
        assert_eq!(t.shape, vec![2, 2]);
        assert_eq!(t.data, vec![0.0; 4]);
    }

    #[test]
    fn constant_fill() {
        let t = Tensor::<f32>::constant(&[3], 1.5).unwrap();
        assert_eq!(t.data, vec![1.5, 1.5, 1.5]);
    }

    #[test]
    fn uniform_is_reproducible() {
        let a = Tensor::<f64>::uniform(&[4], 7, -1.0, 1.0).unwrap();
        let b = Tensor::<f64>::uniform(&[4], 7, -1.0, 1.0).unwrap();
        assert_eq!(a.data, b.data);
        assert!(a.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Tensor::<f32>::zeros(&[]).is_err());
        assert!(Tensor::<f32>::zeros(&[2, 0]).is_err());
        assert!(Tensor::<f32>::constant(&[1], f32::NAN).is_err());
        assert!(Tensor::<f32>::from_vec(&[2], vec![1.0, f32::INFINITY]).is_err());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::<f32>::zeros(&[2]).unwrap().with_grad();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5]).unwrap();
        assert_eq!(t.grad.as_deref(), Some(&[1.5, 2.5][..]));
        t.clear_grad();
        assert!(t.grad.is_none());
    }
}
