use super::param::ParamStore;
use super::tensor::Tensor;

/// Adam moments for one [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-4)
    }
}

/// One bias-corrected Adam update over every parameter in `store`; gradients
/// are zeroed afterwards.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) {
    if state.first_moment.len() != store.len() {
        state.first_moment = store.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        state.second_moment = state.first_moment.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let correction1 = 1.0 - state.beta1.powi(t);
    let correction2 = 1.0 - state.beta2.powi(t);
    let (b1, b2) = (state.beta1, state.beta2);

    for ((p, m), v) in store
        .iter_mut()
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        let values = p.tensor.values_mut();
        let grads = p.gradient.values();
        for (((w, &g), m), v) in values
            .iter_mut()
            .zip(grads)
            .zip(m.values_mut())
            .zip(v.values_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *w -= state.learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    store.zero_grads();
}
