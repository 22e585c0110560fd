use ndarray::{Array2, Zip};

use crate::autograd::{ParamGrads, ParamStore};

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Option<Array2<f64>>>,
    v: Vec<Option<Array2<f64>>>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        if self.m.len() < params.len() {
            self.m.resize(params.len(), None);
            self.v.resize(params.len(), None);
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        for id in 0..params.len() {
            let Some(g) = grads.get(id) else { continue };
            let p = params.get_mut(id);
            let m = self.m[id].get_or_insert_with(|| Array2::zeros(p.dim()));
            let v = self.v[id].get_or_insert_with(|| Array2::zeros(p.dim()));
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                if wd > 0.0 {
                    *p -= lr * wd * *p;
                }
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Linear decay from `base` to zero over `total` steps.
pub fn linear_schedule(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - step as f64 / total as f64).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[1.0, -2.0]]);
        let grads = ParamGrads(vec![Some(array![[0.5, -3.0]])]);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        opt.step(&mut store, &grads, 0.1);
        assert_abs_diff_eq!(store.get(id)[[0, 0]], 0.9, epsilon = 1e-6);
        assert_abs_diff_eq!(store.get(id)[[0, 1]], -1.9, epsilon = 1e-6);
    }

    #[test]
    fn decoupled_decay_without_gradient_signal() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[2.0]]);
        let grads = ParamGrads(vec![Some(array![[0.0]])]);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.5);
        opt.step(&mut store, &grads, 0.1);
        assert_abs_diff_eq!(store.get(id)[[0, 0]], 2.0 - 0.1 * 0.5 * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[3.0, -4.0]]);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.0);
        for _ in 0..2000 {
            let g = store.get(id).mapv(|w| 2.0 * w);
            opt.step(&mut store, &ParamGrads(vec![Some(g)]), 0.01);
        }
        assert!(store.get(id).iter().all(|w| w.abs() < 1e-2));
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(linear_schedule(1.0, 0, 10), 1.0);
        assert_eq!(linear_schedule(1.0, 5, 10), 0.5);
        assert_eq!(linear_schedule(1.0, 10, 10), 0.0);
    }
}
