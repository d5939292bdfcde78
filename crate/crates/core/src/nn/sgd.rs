use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Element;

/// Plain stochastic gradient descent with a constant learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdOptimizer {
    learning_rate: f64,
}

impl SgdOptimizer {
    pub fn new(learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::Invalid(format!(
                "learning rate must be positive and finite, got {learning_rate}"
            )));
        }
        Ok(SgdOptimizer { learning_rate })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// `p <- p - lr * grad(p)` for every parameter, then zeroes the gradients.
    pub fn step<T: Element>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some((name, _)) = store.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::MissingGradient(name.to_string()));
        }
        let lr = T::from_f64(self.learning_rate);
        for (_, p) in store.iter_mut() {
            let grad = p.grad.take().expect("checked above");
            for (v, g) in p.data_mut().iter_mut().zip(&grad) {
                *v -= lr * *g;
            }
            p.grad = Some(vec![T::zero(); grad.len()]);
        }
        Ok(())
    }
}
