use super::Tensor;

/// First/second moment estimates for every parameter tensor, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub const DEFAULT_LR: f64 = 0.001;

    /// Zeroed moments shaped like `params`, with the usual defaults
    /// (beta1 0.9, beta2 0.999, epsilon 1e-8).
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, lr: f64) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. `params`, `grads` and the state moments
/// must line up one-to-one with matching shapes.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState) {
    assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
    assert_eq!(params.len(), state.m.len(), "parameter/moment count mismatch");
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.epsilon);

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
        let pd = p.data_mut();
        for (((w, &gv), mv), vv) in pd.iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
