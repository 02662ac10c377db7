use super::ParamStore;
use crate::error::{Error, Result};

/// Moment estimates and step counter for [`Adam`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        AdamState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.v[index]
    }
}

/// Bias-corrected Adam.
pub struct Adam;

impl Adam {
    /// One update of every trainable parameter, then zero the gradients.
    pub fn step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
        if state.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer state tracks {} tensors, store has {}",
                state.m.len(),
                store.len()
            )));
        }
        for id in store.ids() {
            let t = store.get(id);
            if t.requires_grad && t.grad().is_none() {
                return Err(Error::Contract(format!(
                    "parameter `{}` has no gradient",
                    store.name(id)
                )));
            }
        }

        state.step += 1;
        let bc1 = 1.0 - state.beta1.powi(state.step as i32);
        let bc2 = 1.0 - state.beta2.powi(state.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let t = store.get_mut(id);
            if !t.requires_grad {
                continue;
            }
            let grad = t.grad().expect("checked above").to_vec();
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
                v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= state.lr * mhat / (vhat.sqrt() + state.eps);
            }
            t.zero_grad();
        }
        Ok(())
    }
}
