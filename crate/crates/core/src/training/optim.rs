//! AdamW with the amsgrad running maximum.
//!
//! Per element, with step count `t` after increment:
//!
//! ```text
//! θ ← θ·(1 − lr·wd)
//! m ← β1·m + (1−β1)·g
//! v ← β2·v + (1−β2)·g²
//! v̂ ← max(v̂, v)
//! θ ← θ − lr/(1−β1ᵗ) · m / (sqrt(v̂)/sqrt(1−β2ᵗ) + ε)
//! ```
//!
//! Decay is applied first and is not scaled by the adaptive denominator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptState {
    pub config: AdamConfig,
    pub m: ParamSet,
    pub v: ParamSet,
    pub v_max: ParamSet,
    pub t: u64,
}

impl OptState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            v_max: params.zeros_like(),
            t: 0,
        }
    }
}

/// One update. A non-finite gradient aborts before anything is modified.
pub fn opt_step(params: &mut ParamSet, grads: &ParamSet, state: &mut OptState) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) {
        return Err(Error::Shape("parameters, gradients and optimizer state differ".into()));
    }
    for (name, t) in grads.iter() {
        if let Some(pos) = t.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("gradient of {name}[{pos}] is {}", t.data[pos])));
        }
    }
    let c = state.config;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2_sqrt = (1.0 - c.beta2.powi(t)).sqrt();
    let step = c.lr / bc1;
    let decay = 1.0 - c.lr * c.weight_decay;
    for i in 0..params.len() {
        let g = grads.data(i);
        let m = state.m.data_mut(i);
        for (m, &g) in m.iter_mut().zip(g) {
            *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        }
        let v = state.v.data_mut(i);
        for (v, &g) in v.iter_mut().zip(g) {
            *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        }
        let (v, vmax) = (state.v.data(i), state.v_max.data_mut(i));
        for (vm, &v) in vmax.iter_mut().zip(v) {
            *vm = vm.max(v);
        }
        let (m, vmax) = (state.m.data(i), state.v_max.data(i));
        for ((p, &m), &vm) in params.data_mut(i).iter_mut().zip(m).zip(vmax) {
            *p *= decay;
            *p -= step * m / (vm.sqrt() / bc2_sqrt + c.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ParamSlot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params(values: &[f64]) -> ParamSet {
        let mut p = ParamSet::zeros(&[ParamSlot::new("w", &[values.len()], 1)]);
        p.tensor_mut(0).data = values.to_vec();
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = params(&[1.0, -2.0, 0.5]);
        let before = p.clone();
        let mut s = OptState::new(&p, AdamConfig::new(0.1, 0.0));
        for _ in 0..5 {
            opt_step(&mut p, &before.zeros_like(), &mut s).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.t, 5);
    }

    #[test]
    fn first_step_closed_form() {
        let g = [0.3, -2.0, 1e-9, 0.0];
        let theta = [1.0, 2.0, -3.0, 4.0];
        let (lr, wd, eps) = (0.01, 0.1, 1e-8);
        let mut p = params(&theta);
        let mut s = OptState::new(&p, AdamConfig::new(lr, wd));
        opt_step(&mut p, &params(&g), &mut s).unwrap();
        for k in 0..4 {
            let want = theta[k] * (1.0 - lr * wd) - lr * g[k] / (g[k].abs() + eps);
            assert!((p.tensor(0).data[k] - want).abs() < 1e-12, "{k}");
        }
    }

    #[test]
    fn zero_betas_give_normalized_descent() {
        let mut p = params(&[0.0, 0.0]);
        let mut cfg = AdamConfig::new(0.5, 0.0);
        cfg.beta1 = 0.0;
        cfg.beta2 = 0.0;
        let mut s = OptState::new(&p, cfg);
        opt_step(&mut p, &params(&[2.0, -0.25]), &mut s).unwrap();
        opt_step(&mut p, &params(&[1.0, -0.25]), &mut s).unwrap();
        // v̂ keeps the larger first gradient for element 0.
        let d = &p.tensor(0).data;
        assert!((d[0] - (-0.5 * 2.0 / (2.0 + 1e-8) - 0.5 * 1.0 / (2.0 + 1e-8))).abs() < 1e-12);
        assert!((d[1] - (0.5 + 0.5) * 0.25 / (0.25 + 1e-8)).abs() < 1e-12);
    }

    #[test]
    fn running_max_never_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = params(&[0.0; 6]);
        let mut s = OptState::new(&p, AdamConfig::new(1e-3, 1e-2));
        let mut prev = vec![0.0; 6];
        for _ in 0..1000 {
            let scale = if rng.random::<f64>() < 0.1 { 10.0 } else { 0.1 };
            let g: Vec<f64> = (0..6).map(|_| rng.random_range(-scale..scale)).collect();
            opt_step(&mut p, &params(&g), &mut s).unwrap();
            let vmax = s.v_max.tensor(0).data.clone();
            for k in 0..6 {
                assert!(vmax[k] >= prev[k]);
                assert!(vmax[k] >= s.v.tensor(0).data[k]);
                assert!(s.v.tensor(0).data[k] >= 0.0);
            }
            prev = vmax;
        }
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = params(&[1.0, 2.0]);
        let mut s = OptState::new(&p, AdamConfig::new(0.1, 0.1));
        let before = p.clone();
        let err = opt_step(&mut p, &params(&[0.0, f64::NAN]), &mut s).unwrap_err();
        assert!(err.to_string().contains("w[1]"), "{err}");
        assert_eq!(p, before);
        assert_eq!(s.t, 0);
    }
}
