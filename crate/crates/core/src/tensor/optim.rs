//! Stochastic gradient descent with classic (heavy-ball) momentum.

use super::{ParamStore, Real, Tensor};
use crate::error::{arg_err, shape_err, Result};

/// Optimiser state: one velocity buffer per parameter tensor.
#[derive(Debug, Clone)]
pub struct SgdMomentum<T> {
    lr: f64,
    momentum: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> SgdMomentum<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(arg_err!("learning rate must be positive, got {lr}"));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(arg_err!("momentum must lie in [0, 1), got {momentum}"));
        }
        let velocity = params
            .ids()
            .map(|id| Tensor::zeros(params.value(id).shape().to_vec()))
            .collect();
        Ok(SgdMomentum {
            lr,
            momentum,
            velocity,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(arg_err!("learning rate must be positive, got {lr}"));
        }
        self.lr = lr;
        Ok(())
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    /// `v <- momentum * v + g; w <- w - lr * v` using the gradients held in
    /// `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(shape_err!(
                "optimiser tracks {} tensors, store has {}",
                self.velocity.len(),
                params.len()
            ));
        }
        for (id, vel) in params.ids().zip(self.velocity.iter_mut()) {
            let (value, grad) = params.value_and_grad_mut(id);
            if value.shape() != vel.shape() || grad.shape() != vel.shape() {
                return Err(shape_err!(
                    "velocity {:?} does not match parameter {:?}",
                    vel.shape(),
                    value.shape()
                ));
            }
            for ((w, v), g) in value
                .data_mut()
                .iter_mut()
                .zip(vel.data_mut())
                .zip(grad.data())
            {
                let nv = self.momentum * v.as_f64() + g.as_f64();
                *v = T::from_f64(nv);
                *w = T::from_f64(w.as_f64() - self.lr * nv);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(w)).unwrap();
        s
    }

    #[test]
    fn one_step() {
        let mut s = single(1.0);
        let id = s.id("w").unwrap();
        s.grad_mut(id).data_mut()[0] = 0.5;
        let mut opt = SgdMomentum::new(&s, 0.1, 0.9).unwrap();
        opt.step(&mut s).unwrap();
        assert!((opt.velocity()[0].item() - 0.5).abs() < 1e-15);
        assert!((s.value(id).item() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut s = single(-2.5);
        let mut opt = SgdMomentum::new(&s, 0.1, 0.9).unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(s.id("w").unwrap()).item(), -2.5);
    }

    #[test]
    fn constant_gradient_recurrence() {
        let mut s = single(0.0);
        let id = s.id("w").unwrap();
        s.grad_mut(id).data_mut()[0] = 1.0;
        let mut opt = SgdMomentum::new(&s, 0.1, 0.9).unwrap();
        opt.step(&mut s).unwrap();
        let w1 = s.value(id).item();
        opt.step(&mut s).unwrap();
        let w2 = s.value(id).item();
        assert!((w1 - -0.1).abs() < 1e-15);
        assert!(((w1 - w2) - 0.19).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_hyperparameters_and_shapes() {
        let s = single(0.0);
        assert!(SgdMomentum::new(&s, 0.0, 0.9).is_err());
        assert!(SgdMomentum::new(&s, 0.1, 1.0).is_err());
        let mut opt = SgdMomentum::new(&s, 0.1, 0.9).unwrap();
        let mut other = single(0.0);
        other.insert("extra", Tensor::zeros(vec![2])).unwrap();
        assert!(opt.step(&mut other).is_err());
    }
}
