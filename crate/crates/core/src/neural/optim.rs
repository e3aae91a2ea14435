use serde::{Deserialize, Serialize};

use super::param::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f64) -> Self {
        Adam { lr, ..Self::default() }
    }

    /// One bias-corrected Adam update of every parameter; gradients are
    /// cleared afterwards.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        for p in &mut store.params {
            let g = p.grad.take().expect("checked above");
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            ndarray::Zip::from(&mut p.value)
                .and(&mut p.adam_m)
                .and(&mut p.adam_v)
                .and(&g)
                .for_each(|w, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ClipMode {
    #[default]
    Norm,
    Value,
}

/// Clip gradients in place and return the global norm before clipping.
/// `Norm` rescales all gradients together; `Value` clamps each entry.
pub fn clip_gradients(store: &mut ParamStore, max: f64, mode: ClipMode) -> f64 {
    let norm = store.grad_norm();
    match mode {
        ClipMode::Norm => {
            if norm > max {
                let scale = max / norm;
                for g in store.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                    *g *= scale;
                }
            }
        }
        ClipMode::Value => {
            for g in store.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                g.mapv_inplace(|v| v.clamp(-max, max));
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn store_with_grad(value: Array2<f64>, grad: Array2<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", value);
        s.get_mut(id).grad = Some(grad);
        s
    }

    #[test]
    fn zero_grad_leaves_parameter() {
        let mut s = store_with_grad(array![[1.0, -2.0]], array![[0.0, 0.0]]);
        Adam::default().step(&mut s).unwrap();
        assert_eq!(s.params[0].value, array![[1.0, -2.0]]);
        assert!(s.params[0].grad.is_none());
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store_with_grad(array![[0.0, 0.0, 0.0]], array![[3.0, -0.01, 250.0]]);
        let adam = Adam::default();
        adam.step(&mut s).unwrap();
        for (w, g) in s.params[0].value.iter().zip([3.0f64, -0.01, 250.0]) {
            assert!((w + adam.lr * g.signum()).abs() < 1e-9, "{w}");
        }
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = ParamStore::new();
        s.add("lonely", Array2::zeros((1, 1)));
        assert!(matches!(Adam::default().step(&mut s), Err(Error::MissingGradient(n)) if n == "lonely"));
    }

    #[test]
    fn deterministic_trajectories() {
        let run = || {
            let mut s = store_with_grad(array![[0.5, 1.5]], array![[0.0, 0.0]]);
            for k in 0..20 {
                let w = s.params[0].value.clone();
                s.params[0].grad = Some(w.mapv(|x| 2.0 * x + k as f64 * 0.1));
                Adam::with_lr(0.05).step(&mut s).unwrap();
            }
            s.params[0].value.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn norm_clipping() {
        let mut s = store_with_grad(array![[0.0, 0.0]], array![[3.0, 4.0]]);
        let before = clip_gradients(&mut s, 0.5, ClipMode::Norm);
        assert_eq!(before, 5.0);
        let g = s.params[0].grad.as_ref().unwrap();
        assert!((g[[0, 0]] - 0.3).abs() < 1e-15 && (g[[0, 1]] - 0.4).abs() < 1e-15);
        assert!(s.grad_norm() <= 0.5 + 1e-12);

        let mut small = store_with_grad(array![[0.0, 0.0]], array![[0.15, 0.2]]);
        clip_gradients(&mut small, 0.5, ClipMode::Norm);
        assert_eq!(small.params[0].grad.as_ref().unwrap(), &array![[0.15, 0.2]]);

        let mut zero = store_with_grad(array![[0.0]], array![[0.0]]);
        clip_gradients(&mut zero, 0.5, ClipMode::Norm);
        assert_eq!(zero.params[0].grad.as_ref().unwrap(), &array![[0.0]]);
    }

    #[test]
    fn value_clipping() {
        let mut s = store_with_grad(array![[0.0, 0.0]], array![[3.0, -0.2]]);
        clip_gradients(&mut s, 0.5, ClipMode::Value);
        assert_eq!(s.params[0].grad.as_ref().unwrap(), &array![[0.5, -0.2]]);
    }
}
