use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{NnError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimKind {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for OptimKind {
    fn default() -> Self {
        OptimKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    /// Rescale the global gradient norm down to this value before stepping.
    pub max_grad_norm: Option<f64>,
}

impl OptimConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimKind::default(),
            lr,
            max_grad_norm: None,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimKind::Sgd,
            lr,
            max_grad_norm: None,
        }
    }
}

/// Per-parameter moment buffers plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: OptimConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(store: &ParamStore, config: OptimConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(NnError::Config(format!("learning rate must be positive, got {}", config.lr)));
        }
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        })
    }
}

/// Applies one update from the accumulated gradients, then zeroes them.
pub fn optimizer_step(store: &mut ParamStore, state: &mut OptimState) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(NnError::Internal(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    let clip = match state.config.max_grad_norm {
        Some(max) => {
            let norm = store.grad_norm();
            if norm > max && norm > 0.0 {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let lr = state.config.lr;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let grad: Vec<f64> = store.grad(id).iter().map(|g| g * clip).collect();
        if grad.len() != store.get(id).len() || state.m[i].len() != grad.len() {
            return Err(NnError::Internal(format!(
                "gradient/parameter shape mismatch for `{}`",
                store.name(id)
            )));
        }
        match state.config.kind {
            OptimKind::Sgd => {
                for (p, g) in store.get_mut(id).data_mut().iter_mut().zip(&grad) {
                    *p = (*p as f64 - lr * g) as f32;
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
                let p = store.get_mut(id).data_mut();
                for k in 0..grad.len() {
                    let g = grad[k];
                    let mk = beta1 * m[k] as f64 + (1.0 - beta1) * g;
                    let vk = beta2 * v[k] as f64 + (1.0 - beta2) * g * g;
                    m[k] = mk as f32;
                    v[k] = vk as f32;
                    let update = lr * (mk / bc1) / ((vk / bc2).sqrt() + eps);
                    p[k] = (p[k] as f64 - update) as f32;
                }
            }
        }
    }
    store.zero_grad();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f32) -> ParamStore {
        let mut s = ParamStore::new(0);
        s.insert("x", Tensor::from_vec(&[1], vec![v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut s = ParamStore::new(3);
        s.add_uniform("a", &[3, 4], 4).unwrap();
        let before = s.clone();
        let mut st = OptimState::new(&s, OptimConfig::adam(0.01)).unwrap();
        optimizer_step(&mut s, &mut st).unwrap();
        assert!(s.values_equal(&before));
        let mut st = OptimState::new(&s, OptimConfig::sgd(0.01)).unwrap();
        optimizer_step(&mut s, &mut st).unwrap();
        assert!(s.values_equal(&before));
    }

    #[test]
    fn first_adam_step_moves_by_learning_rate() {
        let mut s = scalar_store(0.5);
        let id = s.id("x").unwrap();
        s.grad_mut(id)[0] = 1.0;
        let mut st = OptimState::new(&s, OptimConfig::adam(0.01)).unwrap();
        optimizer_step(&mut s, &mut st).unwrap();
        let moved = 0.5 - s.get(id).data()[0] as f64;
        assert!((moved - 0.01).abs() < 1e-7, "moved {moved}");
        assert_eq!(st.step, 1);
        assert_eq!(s.grad(id)[0], 0.0);
    }

    #[test]
    fn identical_stores_step_identically() {
        let mk = || {
            let mut s = ParamStore::new(11);
            s.add_uniform("a", &[5], 5).unwrap();
            let id = s.id("a").unwrap();
            s.grad_mut(id).copy_from_slice(&[0.1, -0.2, 0.3, 0.0, 1.5]);
            s
        };
        let (mut a, mut b) = (mk(), mk());
        let mut sa = OptimState::new(&a, OptimConfig::adam(1e-3)).unwrap();
        let mut sb = OptimState::new(&b, OptimConfig::adam(1e-3)).unwrap();
        optimizer_step(&mut a, &mut sa).unwrap();
        optimizer_step(&mut b, &mut sb).unwrap();
        assert!(a.values_equal(&b));
    }

    #[test]
    fn rejects_mismatched_state() {
        let mut s = scalar_store(1.0);
        let other = ParamStore::new(0);
        let mut st = OptimState::new(&other, OptimConfig::adam(0.1)).unwrap();
        assert!(matches!(optimizer_step(&mut s, &mut st), Err(NnError::Internal(_))));
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let s = scalar_store(1.0);
        assert!(OptimState::new(&s, OptimConfig::adam(0.0)).is_err());
    }
}
