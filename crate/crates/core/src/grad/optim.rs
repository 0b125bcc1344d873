use serde::{Deserialize, Serialize};

use super::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip_norm: 1.0,
        }
    }
}

pub struct AdamW {
    config: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let c = self.config;
        let norm = store.grad_norm();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.0;
            let p = store.get_mut(id);
            let Some(grad) = p.grad.as_ref() else { continue };
            let grad = grad.data().to_vec();
            let value = p.value.data_mut();
            for j in 0..value.len() {
                let g = grad[j] * clip;
                self.m[i][j] = c.beta1 * self.m[i][j] + (1.0 - c.beta1) * g;
                self.v[i][j] = c.beta2 * self.v[i][j] + (1.0 - c.beta2) * g * g;
                let mhat = self.m[i][j] / bc1;
                let vhat = self.v[i][j] / bc2;
                if c.weight_decay > 0.0 {
                    value[j] -= c.lr * c.weight_decay * value[j];
                }
                value[j] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{Graph, Tensor};

    #[test]
    fn descends_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![3.0, -2.0])).unwrap();
        let cfg = AdamWConfig {
            lr: 0.1,
            clip_norm: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &store);
        for _ in 0..300 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.mul(x, x).unwrap();
            let l = g.sum(sq).unwrap();
            g.backward_into(l, &mut store).unwrap();
            opt.step(&mut store);
        }
        assert_eq!(opt.steps(), 300);
        assert!(store.value(id).data().iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn first_step_moves_each_weight_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![1.0, 1.0])).unwrap();
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: 0.01,
                clip_norm: 0.0,
                ..AdamWConfig::default()
            },
            &store,
        );
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let w = g.input(Tensor::vector(vec![5.0, -0.2]));
        let m = g.mul(x, w).unwrap();
        let l = g.sum(m).unwrap();
        g.backward_into(l, &mut store).unwrap();
        opt.step(&mut store);
        let v = store.value(id).data();
        assert!((v[0] - 0.99).abs() < 1e-6 && (v[1] - 1.01).abs() < 1e-6, "{v:?}");
    }
}
