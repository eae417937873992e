//! AdamW with decoupled weight decay.

use crate::error::{check_dim, Error, Result};
use crate::param::HasParams;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every trainable parameter, in visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// One update of every trainable parameter of `model` from its accumulated gradient.
    pub fn step(&mut self, model: &mut dyn HasParams) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let cfg = self.config;
        let fresh = self.first.is_empty();
        let mut slot = 0;
        let mut failure = None;
        let (first, second) = (&mut self.first, &mut self.second);
        model.visit_params_mut("", &mut |name, p| {
            if !p.trainable || failure.is_some() {
                return;
            }
            if fresh {
                first.push(vec![0.0; p.len()]);
                second.push(vec![0.0; p.len()]);
            }
            match (first.get_mut(slot), second.get_mut(slot)) {
                (Some(m), Some(v)) if m.len() == p.len() => {
                    adamw_update(&mut p.value, &p.grad, m, v, &cfg, t);
                }
                _ => failure = Some(Error::contract(format!("optimizer state does not match `{name}`"))),
            }
            slot += 1;
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if slot != self.first.len() {
            return Err(Error::contract("optimizer state covers a different parameter set"));
        }
        Ok(())
    }
}

/// In-place AdamW update of one parameter array at step `t` (1-based).
pub fn adamw_update(
    value: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &AdamWConfig,
    t: u64,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        value[i] -= cfg.lr * cfg.weight_decay * value[i];
        value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Checked [`adamw_update`] over plain slices.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    cfg: &AdamWConfig,
    t: u64,
) -> Result<()> {
    check_dim("gradient", params.len(), grads.len())?;
    check_dim("first moment", params.len(), m.len())?;
    check_dim("second moment", params.len(), v.len())?;
    if t == 0 {
        return Err(Error::contract("adamw step count starts at 1"));
    }
    adamw_update(params, grads, m, v, cfg, t);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_leaves_params() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![0.3, -1.2];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        for t in 1..10 {
            adamw_step(&mut p, &[0.0, 0.0], &mut m, &mut v, &cfg, t).unwrap();
        }
        assert_eq!(p, vec![0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        let cfg = AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            ..Default::default()
        };
        let g = [0.5, -2.0, 1e-3];
        let mut p = vec![0.0; 3];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        adamw_step(&mut p, &g, &mut m, &mut v, &cfg, 1).unwrap();
        for i in 0..3 {
            assert_eq!(p[i].signum(), -g[i].signum());
            assert!((p[i].abs() - cfg.lr).abs() < 1e-7);
        }
        assert!(v.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn quadratic_converges_to_analytic_minimum() {
        // f(a, b) = (a − 3)² + 10 (b + 1)², minimum at (3, −1).
        let cfg = AdamWConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = vec![0.0, 0.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        let mut converged_at = None;
        for t in 1..=5000 {
            let g = [2.0 * (p[0] - 3.0), 20.0 * (p[1] + 1.0)];
            adamw_step(&mut p, &g, &mut m, &mut v, &cfg, t).unwrap();
            if converged_at.is_none() && (p[0] - 3.0).abs() < 1e-6 && (p[1] + 1.0).abs() < 1e-6 {
                converged_at = Some(t);
            }
        }
        assert!(converged_at.is_some(), "ended at {p:?}");
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let cfg = AdamWConfig::default();
        let mut p = vec![0.0; 2];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        assert!(adamw_step(&mut p, &[1.0], &mut m, &mut v, &cfg, 1).is_err());
    }
}
