//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::nn::Params;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("bad Adam configuration {self:?}")))
        }
    }
}

/// Moment accumulators for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(size: usize, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(AdamState {
            first_moment: vec![0.0; size],
            second_moment: vec![0.0; size],
            step_count: 0,
            config,
        })
    }
}

/// One Adam update of `params` from its accumulated gradient, which is
/// cleared afterwards.
pub fn adam_step(params: &mut Tensor, state: &mut AdamState) -> Result<()> {
    let grad = params
        .grad()
        .ok_or_else(|| Error::MissingGradient(format!("{:?}", params.shape())))?
        .to_vec();
    if state.first_moment.len() != params.len() || state.second_moment.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("state for {} values, params have {}", state.first_moment.len(), params.len()),
        ));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);
    let step_size = learning_rate / bias1;
    let bias2_sqrt = bias2.sqrt();
    let values = params.values_mut();
    for i in 0..values.len() {
        let g = grad[i];
        let m = beta1 * state.first_moment[i] + (1.0 - beta1) * g;
        let v = beta2 * state.second_moment[i] + (1.0 - beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let denom = v.sqrt() / bias2_sqrt + epsilon;
        values[i] -= step_size * m / denom;
    }
    params.clear_grad();
    Ok(())
}

/// Adam over every tensor of a parameter container.
///
/// Tensors without `requires_grad` are skipped; trainable tensors that
/// received no gradient this step are treated as having a zero gradient.
#[derive(Clone, Debug)]
pub struct Optimizer {
    states: Vec<AdamState>,
}

impl Optimizer {
    pub fn new<P: Params<Tensor>>(params: &P, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let mut states = Vec::new();
        params.visit("", &mut |_, t| {
            states.push(AdamState {
                first_moment: vec![0.0; t.len()],
                second_moment: vec![0.0; t.len()],
                step_count: 0,
                config,
            })
        });
        Ok(Optimizer { states })
    }

    pub fn step<P: Params<Tensor>>(&mut self, params: &mut P) -> Result<()> {
        let mut i = 0;
        let mut err = None;
        let states = &mut self.states;
        params.visit_mut(&mut |t| {
            let state = &mut states[i];
            i += 1;
            if !t.requires_grad() || err.is_some() {
                return;
            }
            if t.grad().is_none() {
                let zeros = vec![0.0; t.len()];
                let _ = t.accumulate_grad(&zeros);
            }
            if let Err(e) = adam_step(t, state) {
                err = Some(e);
            }
        });
        err.map_or(Ok(()), Err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(values: Vec<f64>) -> Tensor {
        let n = values.len();
        Tensor::new(vec![1, n], values).unwrap().with_requires_grad(true)
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = param(vec![1.0, -2.0]);
        let mut s = AdamState::new(2, AdamConfig::default()).unwrap();
        s.first_moment = vec![0.5, 0.5];
        s.second_moment = vec![0.25, 0.25];
        p.accumulate_grad(&[0.0, 0.0]).unwrap();
        let before = p.values().to_vec();
        // Moments decay; the update is tiny but not exactly zero because the
        // first moment was non-zero. With fresh moments the update is zero.
        adam_step(&mut p, &mut s).unwrap();
        assert!(s.first_moment.iter().all(|m| *m < 0.5 && *m > 0.0));
        assert!(s.second_moment.iter().all(|v| *v < 0.25 && *v > 0.0));
        let mut q = param(before.clone());
        let mut fresh = AdamState::new(2, AdamConfig::default()).unwrap();
        q.accumulate_grad(&[0.0, 0.0]).unwrap();
        adam_step(&mut q, &mut fresh).unwrap();
        assert_eq!(q.values(), before.as_slice());
    }

    #[test]
    fn first_step_matches_hand_formula() {
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        let g = [0.3, -2.0, 1e-9];
        let mut p = param(vec![0.0; 3]);
        p.accumulate_grad(&g).unwrap();
        let mut s = AdamState::new(3, cfg).unwrap();
        adam_step(&mut p, &mut s).unwrap();
        for (i, gi) in g.iter().enumerate() {
            let want = -cfg.learning_rate * gi / (gi.abs() + cfg.epsilon);
            assert!((p.values()[i] - want).abs() < 1e-15, "{} vs {want}", p.values()[i]);
        }
        assert_eq!(s.step_count, 1);
        assert!(p.grad().is_none());
    }

    #[test]
    fn constant_gradient_approaches_sign_step() {
        let cfg = AdamConfig::default();
        let mut p = param(vec![0.0, 0.0]);
        let mut s = AdamState::new(2, cfg).unwrap();
        let mut last = vec![0.0; 2];
        for _ in 0..2000 {
            let before = p.values().to_vec();
            p.accumulate_grad(&[0.7, -3.0]).unwrap();
            adam_step(&mut p, &mut s).unwrap();
            last = p.values().iter().zip(&before).map(|(a, b)| a - b).collect();
        }
        assert!((last[0] + cfg.learning_rate).abs() < 1e-8);
        assert!((last[1] - cfg.learning_rate).abs() < 1e-8);
    }

    #[test]
    fn missing_gradient_rejected() {
        let mut p = param(vec![1.0]);
        let mut s = AdamState::new(1, AdamConfig::default()).unwrap();
        assert!(matches!(adam_step(&mut p, &mut s), Err(Error::MissingGradient(_))));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = AdamConfig {
            beta1: 1.0,
            ..AdamConfig::default()
        };
        assert!(AdamState::new(1, cfg).is_err());
    }
}
