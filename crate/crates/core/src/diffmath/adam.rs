use super::tape::{Gradients, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam optimizer state: one first/second moment accumulator per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState { step: 0, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros.clone(), v: zeros }
    }

    /// Applies one bias-corrected Adam update in place.
    ///
    /// `grads` must hold exactly one entry per stored parameter. A gradient
    /// containing NaN rejects the whole update and leaves state untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if grads.len() != params.len() || params.ids().any(|id| grads.get(id).is_none()) {
            return Err(Error::Contract(format!(
                "adam: {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.m.len() != params.len() {
            return Err(Error::Contract("adam: state does not match parameter set".into()));
        }
        for (id, g) in grads.iter() {
            if g.shape() != params.get(id).shape() {
                return Err(Error::dim(
                    "adam",
                    format!("gradient {:?} for parameter {:?}", g.shape(), params.get(id).shape()),
                ));
            }
            if g.data().iter().any(|v| v.is_nan()) {
                return Err(Error::NanGradient { param: params.name(id).to_string() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id);
            for (((pi, mi), vi), gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
