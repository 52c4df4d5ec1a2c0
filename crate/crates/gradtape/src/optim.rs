use crate::error::{GradError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// AdamW moments and hyperparameters for one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub step_count: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl OptimState {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
            lr,
            weight_decay,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update with decoupled weight decay. Frozen
/// parameters are left untouched. A non-finite gradient rejects the whole
/// step before anything is modified.
pub fn adamw_step(store: &mut ParamStore, grads: &[Tensor], state: &mut OptimState) -> Result<()> {
    if grads.len() != store.len() || state.first_moment.len() != store.len() {
        return Err(GradError::Invalid(format!(
            "{} parameters, {} gradients, {} moment slots",
            store.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for id in store.ids() {
        let g = &grads[id.0];
        if g.shape() != store.get(id).shape() || state.first_moment[id.0].shape() != g.shape() {
            return Err(GradError::Shape {
                op: "adamw_step",
                detail: format!(
                    "parameter `{}` is {:?}, gradient {:?}",
                    store.name(id),
                    store.get(id).shape(),
                    g.shape()
                ),
            });
        }
        if store.is_trainable(id) && !g.is_finite() {
            return Err(GradError::NonFiniteGradient(store.name(id).to_string()));
        }
    }

    state.step_count += 1;
    let (b1, b2) = state.betas;
    let t = state.step_count as f64;
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.is_trainable(id) {
            continue;
        }
        let g = grads[id.0].data();
        let m = state.first_moment[id.0].data_mut();
        let v = state.second_moment[id.0].data_mut();
        let w = store.get_mut(id).data_mut();
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] *= 1.0 - state.lr * state.weight_decay;
            w[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let total = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = max_norm / total;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    total
}
