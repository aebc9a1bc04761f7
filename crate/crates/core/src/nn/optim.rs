use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Adaptive-moment optimizer state (β1 = 0.9, β2 = 0.999, ε = 1e-8).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }
}

pub fn opt_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(LabError::ShapeMismatch(format!(
            "params {}, grads {}, optimizer state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Cosine decay from `lr_max` to `lr_min` over `total` iterations.
pub fn cosine_lr(iter: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total <= 1 {
        return lr_max;
    }
    let p = iter.min(total - 1) as f64 / (total - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * p).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0, 3.5];
        let mut s = AdamState::new(3);
        opt_step(&mut p, &[0.0; 3], &mut s, 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.5]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = vec![1.0; 3];
        let mut s = AdamState::new(3);
        assert!(matches!(
            opt_step(&mut p, &[0.0; 2], &mut s, 0.1),
            Err(LabError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn quadratic_probe_shrinks_tenfold() {
        let run = || {
            let mut w = vec![1.0];
            let mut s = AdamState::new(1);
            for _ in 0..200 {
                let g = 2.0 * w[0];
                opt_step(&mut w, &[g], &mut s, 0.05).unwrap();
            }
            w[0]
        };
        let a = run();
        assert!(a.abs() <= 0.1, "{a}");
        assert_eq!(a.to_bits(), run().to_bits());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-4), 1e-3);
        assert!((cosine_lr(99, 100, 1e-3, 1e-4) - 1e-4).abs() < 1e-15);
    }
}
