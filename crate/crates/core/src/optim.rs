//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Number of applied steps.
    pub t: u64,
    /// Steps skipped because of non-finite gradients.
    pub skipped: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            t: 0,
            skipped: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    SkippedNonFinite,
}

/// One Adam update of `params` in place. A step whose gradients contain a
/// NaN or infinity leaves parameters and moments untouched and is counted.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<StepOutcome> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
    }
    if !grads.iter().all(Tensor::is_finite) {
        state.skipped += 1;
        return Ok(StepOutcome::SkippedNonFinite);
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let (pd, gd) = (p.data_mut(), g.data());
        for (((pi, &gi), mi), vi) in pd.iter_mut().zip(gd).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *pi -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(StepOutcome::Applied)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::zeros(&[3]);
        let g = Tensor::ones(&[3]);
        let mut state = AdamState::new([&p]);
        let cfg = AdamConfig {
            learning_rate: 1e-3,
            ..AdamConfig::default()
        };
        adam_step(&mut [&mut p], &[g], &mut state, &cfg).unwrap();
        let expected = -1e-3 * (1.0 / (1.0 + 1e-8));
        for &v in p.data() {
            assert!((v - expected).abs() < 1e-18, "{v}");
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::new(&[2], vec![0.5, -1.0]).unwrap();
        let before = p.clone();
        let mut state = AdamState::new([&p]);
        adam_step(&mut [&mut p], &[Tensor::zeros(&[2])], &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn equal_gradients_update_identically() {
        let mut a = Tensor::full(&[2], 0.25);
        let mut b = Tensor::full(&[2], 0.25);
        let g = Tensor::new(&[2], vec![0.3, -2.0]).unwrap();
        let mut state = AdamState::new([&a, &b]);
        for _ in 0..5 {
            adam_step(&mut [&mut a, &mut b], &[g.clone(), g.clone()], &mut state, &AdamConfig::default()).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = Tensor::zeros(&[2]);
        let mut state = AdamState::new([&p]);
        let g = Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap();
        let out = adam_step(&mut [&mut p], &[g], &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!((state.t, state.skipped), (0, 1));
        assert_eq!(p, Tensor::zeros(&[2]));
    }
}
