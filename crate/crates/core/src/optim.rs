use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<Option<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self::with_betas(lr, (0.9, 0.999), 1e-8)
    }

    pub fn with_betas(lr: f64, betas: (f64, f64), eps: f64) -> Self {
        Adam { lr, beta1: betas.0, beta2: betas.1, eps, step: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the stored gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable() && p.grad().is_none()) {
            return Err(Error::MissingGradient(p.name().to_string()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        if self.moments.len() < store.len() {
            self.moments.resize_with(store.len(), || None);
        }
        for (p, slot) in store.params_mut().iter_mut().zip(&mut self.moments) {
            if !p.trainable() {
                continue;
            }
            let (value, grad) = ParamStore::param_parts_mut(p);
            let grad = grad.expect("checked above");
            let (m, v) = slot.get_or_insert_with(|| (Tensor::zeros(grad.shape()), Tensor::zeros(grad.shape())));
            for (((w, &gi), mi), vi) in value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn store_with(w: f64) -> (ParamStore<f64>, crate::ParamId) {
        let mut s = ParamStore::new();
        let id = s.register("w", Tensor::scalar(w), true).unwrap();
        (s, id)
    }

    fn set_grad(s: &mut ParamStore<f64>, id: crate::ParamId, g: f64) {
        let mut m = BTreeMap::new();
        m.insert(id, Tensor::scalar(g));
        s.accumulate(&m);
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut s, id) = store_with(0.3);
        let mut adam = Adam::new(1e-3);
        set_grad(&mut s, id, 0.0);
        adam.step(&mut s).unwrap();
        assert_eq!(s.value(id).item(), 0.3);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let (mut s, _) = store_with(0.3);
        assert!(matches!(Adam::new(1e-3).step(&mut s), Err(Error::MissingGradient(_))));
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let (mut s, id) = store_with(0.0);
        let mut adam = Adam::new(1e-3);
        for _ in 0..100 {
            set_grad(&mut s, id, -0.5);
            adam.step(&mut s).unwrap();
        }
        assert!(s.value(id).item() > 0.09);
    }

    #[test]
    fn first_step_on_square() {
        // f(w) = w², g = 2w = 2 at w = 1; bias-corrected first step is lr·g/(|g| + eps).
        let (mut s, id) = store_with(1.0);
        let mut adam = Adam::new(1e-3);
        set_grad(&mut s, id, 2.0);
        adam.step(&mut s).unwrap();
        let expected = 1.0 - 1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((s.value(id).item() - expected).abs() < 1e-15);
        assert_eq!(adam.steps(), 1);
    }
}
