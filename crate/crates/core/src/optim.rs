//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    m: Tensor,
    v: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    step: u64,
    moments: Vec<Moments>,
}

impl AdamWState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            step: 0,
            moments: params
                .iter()
                .map(|p| Moments {
                    m: Tensor::zeros(p.shape()),
                    v: Tensor::zeros(p.shape()),
                })
                .collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update of every tensor in `params`, in place.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamWState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.moments.len() {
        return Err(Error::shape(format!(
            "adamw: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.moments.len()
        )));
    }
    for ((p, g), s) in params.iter().zip(grads).zip(&state.moments) {
        if p.shape() != g.shape() || p.shape() != s.m.shape() {
            return Err(Error::shape(format!(
                "adamw: param {:?}, grad {:?}, state {:?}",
                p.shape(),
                g.shape(),
                s.m.shape()
            )));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), s) in params.iter_mut().zip(grads).zip(&mut state.moments) {
        let m = s.m.data_mut();
        let v = s.v.data_mut();
        for (((x, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gr;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gr * gr;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x -= lr * cfg.weight_decay * *x;
            *x -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay() -> AdamWConfig {
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut p = vec![Tensor::row_vector(&[1.0, -3.0])];
        let g = vec![Tensor::zeros(&[1, 2])];
        let mut st = AdamWState::new(&p);
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut st, 0.1, &no_decay()).unwrap();
        }
        assert_eq!(p[0].data(), &[1.0, -3.0]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m̂ = g and v̂ = g² after bias correction, so the step is lr·g/(|g| + eps).
        let mut p = vec![Tensor::scalar(2.0)];
        let mut st = AdamWState::new(&p);
        adamw_step(&mut p, &[Tensor::scalar(0.5)], &mut st, 0.01, &no_decay()).unwrap();
        let expected = 2.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
        assert!((p[0].data()[0] - 1.99).abs() < 1e-9);

        let mut p = vec![Tensor::scalar(2.0)];
        let mut st = AdamWState::new(&p);
        adamw_step(&mut p, &[Tensor::scalar(-3.0)], &mut st, 0.01, &no_decay()).unwrap();
        assert!((p[0].data()[0] - 2.01).abs() < 1e-9);
    }

    #[test]
    fn decay_only_shrinks() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut p = vec![Tensor::row_vector(&[4.0, -2.0])];
        let mut st = AdamWState::new(&p);
        adamw_step(&mut p, &[Tensor::zeros(&[1, 2])], &mut st, 0.5, &cfg).unwrap();
        assert_eq!(p[0].data(), &[4.0 * (1.0 - 0.05), -2.0 * (1.0 - 0.05)]);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut p = vec![Tensor::zeros(&[2, 2])];
        let mut st = AdamWState::new(&p);
        let err = adamw_step(&mut p, &[Tensor::zeros(&[1, 4])], &mut st, 0.1, &no_decay());
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }
}
