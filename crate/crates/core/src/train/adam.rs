use crate::error::{ensure, Result};
use crate::numcore::{ParamStore, Scalar};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.99;
pub const ADAM_EPS: f64 = 1e-8;

/// Per-parameter Adam moments, kept in f64.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<T: Scalar>(store: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    /// One bias-corrected update of every trainable parameter, each with the
    /// learning rate `lr_for(name)`; frozen parameters are skipped. All
    /// gradients are zeroed afterwards.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr_for: &dyn Fn(&str) -> f64) -> Result<()> {
        ensure!(
            self.m.len() == store.len(),
            "adam_step",
            "optimizer tracks {} parameters, store has {}",
            self.m.len(),
            store.len()
        );
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get(id);
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            ensure!(
                m.len() == p.value.numel(),
                "adam_step",
                "moment size {} != parameter {} size {}",
                m.len(),
                p.name,
                p.value.numel()
            );
            let lr = lr_for(&p.name);
            let mut value = p.value.to_f64_vec();
            for (i, &g) in p.grad.iter().enumerate() {
                let g = g.to_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                value[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
            let value = value.into_iter().map(T::from_f64).collect();
            store.set_value(id, value)?;
        }
        store.zero_grads();
        Ok(())
    }
}
