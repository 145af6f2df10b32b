use crate::params::{ParamId, ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are indexed by parameter id.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Option<Tensor<T>>>,
    second: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>) -> Self {
        Self {
            config,
            step: 0,
            first: vec![None; store.len()],
            second: vec![None; store.len()],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Moment buffers `(m, v)` for a parameter, if it has been updated.
    pub fn moments(&self, id: ParamId) -> Option<(&Tensor<T>, &Tensor<T>)> {
        match (&self.first[id.index()], &self.second[id.index()]) {
            (Some(m), Some(v)) => Some((m, v)),
            _ => None,
        }
    }

    pub fn restore(&mut self, step: u64, moments: Vec<(ParamId, Tensor<T>, Tensor<T>)>) {
        self.step = step;
        for (id, m, v) in moments {
            self.first[id.index()] = Some(m);
            self.second[id.index()] = Some(v);
        }
    }

    /// Apply one update with learning rate `lr`. Parameters without a gradient are untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2_sqrt = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(c.eps);
        let decay = T::from_f64_lossy(1.0 - lr * c.weight_decay);
        for (id, g) in grads {
            if store.kind(*id) != ParamKind::Trainable {
                continue;
            }
            let m = self.first[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((mi, vi), &gi) in m.data_mut().iter_mut().zip(v.data_mut().iter_mut()).zip(g.data()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
            }
            let (m, v) = (&*m, &*v);
            store.update(*id, |p| {
                for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                    *pi = *pi * decay - step_size * mi / (vi.sqrt() * inv_bc2_sqrt + eps);
                }
            });
        }
    }
}
