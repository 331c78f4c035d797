//! Adam optimizer with externally serializable moment state.

use super::nn::{ParamId, ParamStore};
use super::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state: first/second moments per parameter plus the step counter.
///
/// Moments are stored in parameter-registration order so they serialize into the
/// checkpoint container as named tensors (`<param>.m` / `<param>.v`).
pub struct Adam {
    pub config: AdamConfig,
    pub step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let m = store.ids().map(|id| Tensor::zeros(&store.get(id).shape)).collect();
        let v = store.ids().map(|id| Tensor::zeros(&store.get(id).shape)).collect();
        Adam {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// Applies one update over `(id, grad)` pairs. Parameters without a gradient
    /// this step are left untouched (their moments do not decay either, keeping
    /// the update equivalent to a zero-grad step being skipped deterministically).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let t = self.step as f64;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for (id, grad) in grads {
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.get_mut(*id);
            debug_assert_eq!(p.shape, grad.shape, "adam: grad shape mismatch");
            for i in 0..p.data.len() {
                let gi = grad.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }

    /// Moment tensors for checkpointing, in registration order.
    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Restores moments and step counter (inverse of [`Adam::moments`]).
    pub fn restore(&mut self, m: Vec<Tensor>, v: Vec<Tensor>, step: usize) {
        assert_eq!(m.len(), self.m.len(), "adam restore: moment count");
        assert_eq!(v.len(), self.v.len(), "adam restore: moment count");
        self.m = m;
        self.v = v;
        self.step = step;
    }
}
