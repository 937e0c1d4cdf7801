use super::{ModelError, Params, StudentModel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Params,
    v: Params,
    t: u64,
}

impl AdamState {
    pub fn new(model: &StudentModel) -> Self {
        Self {
            config: AdamConfig::default(),
            m: model.params.zeros_like(),
            v: model.params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// Bias-corrected Adam update of one flat tensor. `t` is the 1-based step.
pub fn adam_update(params: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], t: u64, lr: f64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Applies one Adam step. Rejects the step, leaving model and state
/// untouched, if any gradient is non-finite or shapes disagree.
pub fn optimizer_step(
    model: &mut StudentModel,
    grads: &Params,
    lr: f64,
    state: &mut AdamState,
) -> Result<(), ModelError> {
    if !grads.same_shapes(&model.params) || !state.m.same_shapes(&model.params) {
        return Err(ModelError::ShapeMismatch);
    }
    for t in grads.tensors() {
        if t.data.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFiniteGradient { tensor: t.name });
        }
    }
    state.t += 1;
    let step = state.t;
    let cfg = state.config;
    let g = grads.tensors();
    let m = state.m.tensors_mut();
    let v = state.v.tensors_mut();
    for (((p, g), m), v) in model.params.tensors_mut().into_iter().zip(g).zip(m).zip(v) {
        adam_update(p.data, g.data, m.data, v.data, step, lr, &cfg);
    }
    model.step += 1;
    Ok(())
}
