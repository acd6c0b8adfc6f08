use serde::{Deserialize, Serialize};

use crate::{Error, ParamStore, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; non-positive disables clipping.
    pub clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-5, clip: 100.0 }
    }
}

/// Moment accumulators for one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct OptimState<T> {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub applied_norm: f64,
}

impl<T: Real> OptimState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<T>> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self { config, step: 0, first: zeros.clone(), second: zeros }
    }
}

/// One Adam update from the gradients currently held in `store`.
///
/// Gradients are rescaled to the configured global norm first. A non-finite
/// gradient aborts the step and leaves parameters and moments untouched.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, opt: &mut OptimState<T>) -> Result<StepStats> {
    assert_eq!(opt.first.len(), store.len(), "optimizer built for another store");
    for (_, p) in store.iter() {
        if !p.grad.is_finite() {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }
    let cfg = opt.config;
    let norm = store.grad_norm().as_f64();
    let factor = if cfg.clip > 0.0 && norm > cfg.clip { cfg.clip / norm } else { 1.0 };
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let (lr, eps, f) = (T::lit(cfg.lr), T::lit(cfg.eps), T::lit(factor));
    let (bc1, bc2) = (T::lit(bc1), T::lit(bc2));
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let p = store.get_mut(id);
        let m = opt.first[i].data_mut();
        let v = opt.second[i].data_mut();
        for ((w, &g), (mi, vi)) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(p.grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g = g * f;
            *mi = b1 * *mi + (T::one() - b1) * g;
            *vi = b2 * *vi + (T::one() - b2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w = *w - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(StepStats { grad_norm: norm, applied_norm: norm * factor })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(grad: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(&[grad.len()]));
        s.get_mut(id).grad = Tensor::from_f64(&[grad.len()], grad).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store_with(&[0.0, 0.0]);
        let mut opt = OptimState::new(&s, AdamConfig::default());
        adam_step(&mut s, &mut opt).unwrap();
        assert!(s.iter().all(|(_, p)| p.value.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn first_step_is_signed_lr() {
        let mut s = store_with(&[0.7, -2.0]);
        let cfg = AdamConfig { lr: 0.01, eps: 1e-8, clip: 0.0, ..Default::default() };
        let mut opt = OptimState::new(&s, cfg);
        adam_step(&mut s, &mut opt).unwrap();
        let w = s.iter().next().unwrap().1.value.data().to_vec();
        // m̂ = g and v̂ = g², so the step is lr · g / (|g| + eps)
        assert!((w[0] + 0.01 * 0.7 / (0.7 + 1e-8)).abs() < 1e-15);
        assert!((w[1] - 0.01 * 2.0 / (2.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn clipping_rescales_to_threshold() {
        let mut s = store_with(&[6.0, 8.0]);
        let mut opt = OptimState::new(&s, AdamConfig { clip: 1.0, ..Default::default() });
        let stats = adam_step(&mut s, &mut opt).unwrap();
        assert!((stats.grad_norm - 10.0).abs() < 1e-12);
        assert!((stats.applied_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut s = store_with(&[f64::NAN, 1.0]);
        let mut opt = OptimState::new(&s, AdamConfig::default());
        assert!(matches!(adam_step(&mut s, &mut opt), Err(Error::NonFiniteGradient(_))));
        assert_eq!(opt.step, 0);
        assert!(s.iter().all(|(_, p)| p.value.data().iter().all(|&v| v == 0.0)));
    }
}
