use super::{GradSet, NetError, ParamSet};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment accumulators plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: GradSet,
    pub v: GradSet,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zero_grads(),
            v: params.zero_grads(),
            step: 0,
        }
    }
}

impl Adam {
    pub fn step(&self, params: &mut ParamSet, grads: &GradSet, state: &mut AdamState) -> Result<(), NetError> {
        grads.check_congruent(params)?;
        state.m.check_congruent(params)?;
        state.v.check_congruent(params)?;
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for (k, named) in params.layers_mut().iter_mut().enumerate() {
            let g = &grads.layers[k];
            let m = &mut state.m.layers[k];
            let v = &mut state.v.layers[k];
            for i in 0..named.layer.w.len() {
                update(&mut named.layer.w[i], g.w[i], &mut m.w[i], &mut v.w[i]);
            }
            for i in 0..named.layer.b.len() {
                update(&mut named.layer.b[i], g.b[i], &mut m.b[i], &mut v.b[i]);
            }
        }
        Ok(())
    }
}

/// One Adam update with default moment decays and the given learning rate.
pub fn opt_step(params: &mut ParamSet, grads: &GradSet, state: &mut AdamState, lr: f64) -> Result<(), NetError> {
    Adam { lr, ..Adam::default() }.step(params, grads, state)
}
