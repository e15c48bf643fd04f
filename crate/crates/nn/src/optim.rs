use crate::params::{GradBuffer, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed subset of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u32,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, cfg: AdamConfig) -> Self {
        let m = ids.iter().map(|&id| vec![0.0; store.get(id).len()]).collect();
        let v = ids.iter().map(|&id| vec![0.0; store.get(id).len()]).collect();
        Self {
            cfg,
            ids,
            m,
            v,
            t: 0,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// Changes the step size; moment estimates are kept.
    pub fn set_lr(&mut self, lr: f32) {
        self.cfg.lr = lr;
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (k, &id) in self.ids.iter().enumerate() {
            let g = grads.get(id);
            let p = store.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
