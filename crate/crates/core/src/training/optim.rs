use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

/// First-order optimizer with optional global-norm gradient clipping.
///
/// Gradients are read from the store's `grad` slots; per-parameter state is
/// allocated on the first step.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    steps: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, clip_norm: Option<f64>) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        if let Some(c) = clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(Optimizer {
            kind,
            lr,
            clip_norm,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Clips, then applies one update. Returns the gradient norm before
    /// clipping. A non-finite gradient aborts without touching any parameter.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<f64> {
        if let Some(name) = first_non_finite(store) {
            return Err(Error::NonFinite(format!("gradient of `{name}`")));
        }
        let norm = store.grad_norm().as_f64();
        if let Some(c) = self.clip_norm {
            if norm > c {
                store.scale_grads(T::of(c / norm));
            }
        }
        if self.first.is_empty() {
            self.first = store.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
            if self.kind == OptimizerKind::Adam {
                self.second = self.first.clone();
            }
        }
        self.steps += 1;
        let lr = T::of(self.lr);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let (value, grad) = (p.value.data_mut(), p.grad.data());
            match self.kind {
                OptimizerKind::Sgd => {
                    for (v, &g) in value.iter_mut().zip(grad) {
                        *v -= lr * g;
                    }
                }
                OptimizerKind::Momentum => {
                    let mu = T::of(MOMENTUM);
                    for ((v, &g), vel) in value.iter_mut().zip(grad).zip(&mut self.first[k]) {
                        *vel = mu * *vel + g;
                        *v -= lr * *vel;
                    }
                }
                OptimizerKind::Adam => {
                    let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
                    let c1 = T::one() - b1.powi(self.steps as i32);
                    let c2 = T::one() - b2.powi(self.steps as i32);
                    let eps = T::of(ADAM_EPS);
                    let moments = self.first[k].iter_mut().zip(&mut self.second[k]);
                    for ((v, &g), (m, s)) in value.iter_mut().zip(grad).zip(moments) {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *s = b2 * *s + (T::one() - b2) * g * g;
                        let m_hat = *m / c1;
                        let s_hat = *s / c2;
                        *v -= lr * m_hat / (s_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(norm)
    }
}

/// Name of the first parameter whose gradient holds a NaN or infinity.
pub fn first_non_finite<T: Scalar>(store: &ParamStore<T>) -> Option<String> {
    store
        .iter()
        .find(|(_, p)| !p.grad.all_finite())
        .map(|(_, p)| p.name.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("theta", Tensor::from_vec(vec![value])).unwrap();
        s.get_mut(id).grad = Tensor::from_vec(vec![grad]);
        s
    }

    fn theta(s: &ParamStore<f64>) -> f64 {
        s.by_name("theta").unwrap().value.data()[0]
    }

    #[test]
    fn sgd_moves_by_lr_times_gradient() {
        let mut s = store_with(1.0, 1.0);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, None).unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(theta(&s), 1.0 - 0.1);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut s = store_with(0.0, 1.0);
        let mut opt = Optimizer::new(OptimizerKind::Momentum, 0.1, None).unwrap();
        opt.step(&mut s).unwrap();
        assert!((theta(&s) + 0.1).abs() < 1e-15);
        opt.step(&mut s).unwrap();
        // v = 0.9·1 + 1 = 1.9
        assert!((theta(&s) + 0.1 + 0.19).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut s = store_with(0.0, 1.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3, None).unwrap();
        opt.step(&mut s).unwrap();
        // m̂ = 1, v̂ = 1, so Δ = −lr / (1 + ε)
        let expect = -1e-3 / (1.0 + 1e-8);
        assert!((theta(&s) - expect).abs() < 1e-18);
        assert!((theta(&s) + 9.999_999_90e-4).abs() < 1e-12);
    }

    #[test]
    fn adam_step_size_is_lr_for_any_constant_gradient() {
        for g in [1e-3, 0.5, 40.0] {
            let mut s = store_with(0.0, g);
            let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-2, None).unwrap();
            opt.step(&mut s).unwrap();
            assert!((theta(&s) + 1e-2).abs() < 1e-7, "g={g}");
        }
    }

    #[test]
    fn clipping_scales_global_norm() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("a", Tensor::from_vec(vec![0.0, 0.0])).unwrap();
        let b = s.add("b", Tensor::from_vec(vec![0.0])).unwrap();
        s.get_mut(a).grad = Tensor::from_vec(vec![6.0, 0.0]);
        s.get_mut(b).grad = Tensor::from_vec(vec![8.0]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1.0, Some(1.0)).unwrap();
        let norm = opt.step(&mut s).unwrap();
        assert_eq!(norm, 10.0);
        assert!((s.value(a).data()[0] + 0.6).abs() < 1e-15);
        assert!((s.value(b).data()[0] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn clipping_leaves_small_gradients_alone() {
        let mut s = store_with(0.0, 0.5);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1.0, Some(1.0)).unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(theta(&s), -0.5);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut s = store_with(2.0, f64::NAN);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3, Some(5.0)).unwrap();
        match opt.step(&mut s) {
            Err(Error::NonFinite(m)) => assert!(m.contains("theta")),
            other => panic!("{other:?}"),
        }
        assert_eq!(theta(&s), 2.0);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        assert!(Optimizer::<f64>::new(OptimizerKind::Sgd, 0.0, None).is_err());
        assert!(Optimizer::<f64>::new(OptimizerKind::Sgd, 0.1, Some(0.0)).is_err());
    }
}
