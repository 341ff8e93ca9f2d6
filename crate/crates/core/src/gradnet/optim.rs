//! Momentum SGD and the learning-rate schedules used for training and for
//! input optimization.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::gradnet::backward::Gradients;
use crate::gradnet::network::Network;

/// `v <- momentum * v + g; p <- p - lr * v`.
///
/// Nothing is written if any updated value would be non-finite.
pub fn sgd_step(
    params: &mut [f32],
    grads: &[f32],
    velocity: &mut [f32],
    lr: f32,
    momentum: f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::ShapeMismatch {
            context: "sgd step",
            left: vec![params.len()],
            right: vec![grads.len(), velocity.len()],
        });
    }
    let finite = params
        .iter()
        .zip(grads)
        .zip(velocity.iter())
        .all(|((&p, &g), &v)| {
            let nv = momentum * v + g;
            nv.is_finite() && (p - lr * nv).is_finite()
        });
    if !finite {
        return Err(Error::NonFinite("sgd update".into()));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Momentum SGD over every parameter of a [`Network`].
#[derive(Debug, Clone)]
pub struct MomentumSgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: Vec<Vec<f32>>,
}

impl MomentumSgd {
    pub fn new(net: &Network, lr: f32, momentum: f32) -> Result<Self> {
        if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!(
                "sgd needs lr > 0 and momentum in [0, 1), got lr={lr} momentum={momentum}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: net.params().iter().map(|(_, a)| vec![0.0; a.len()]).collect(),
        })
    }

    pub fn step(&mut self, net: &mut Network, grads: &Gradients) -> Result<()> {
        if grads.tensors.len() != self.velocity.len() {
            return Err(Error::InvalidConfig(
                "gradient set does not match the network".into(),
            ));
        }
        // Validate the full update before touching any parameter.
        for ((p, g), v) in net
            .params()
            .iter()
            .zip(&grads.tensors)
            .zip(&self.velocity)
        {
            let ok = p.1.data().iter().zip(g.data()).zip(v).all(|((&p, &g), &v)| {
                let nv = self.momentum * v + g;
                nv.is_finite() && (p - self.lr * nv).is_finite()
            });
            if !ok {
                return Err(Error::NonFinite(format!("sgd update of {}", p.0)));
            }
        }
        for ((p, g), v) in net
            .params_mut()
            .into_iter()
            .zip(&grads.tensors)
            .zip(&mut self.velocity)
        {
            sgd_step(p.data_mut(), g.data(), v, self.lr, self.momentum)?;
        }
        Ok(())
    }
}

/// `base * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (PI * step as f64 / total as f64).cos())
}

/// Step decay: `base * decay^k` where `k` counts milestones already passed.
pub fn step_lr(base: f64, decay: f64, epoch: usize, milestones: &[usize]) -> f64 {
    let passed = milestones.iter().filter(|&&m| epoch >= m).count();
    base * decay.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_lr_zero_momentum_with_grad_equal_params_zeroes() {
        let mut p = vec![0.5, -2.0, 3.25];
        let g = p.clone();
        let mut v = vec![0.0; 3];
        sgd_step(&mut p, &g, &mut v, 1.0, 0.0).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.5, -2.0];
        let mut v = vec![0.0; 2];
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9).unwrap();
        assert_eq!(p, vec![0.5, -2.0]);
    }

    #[test]
    fn momentum_matches_scalar_recurrence() {
        // Scalar oracle: v_k = m v_{k-1} + g, p_k = p_{k-1} - lr v_k.
        let (lr, m, g) = (0.1f64, 0.9f64, 0.7f64);
        let (mut po, mut vo) = (1.0f64, 0.0f64);
        let mut p = vec![1.0f32];
        let mut v = vec![0.0f32];
        for _ in 0..2 {
            vo = m * vo + g;
            po -= lr * vo;
            sgd_step(&mut p, &[g as f32], &mut v, lr as f32, m as f32).unwrap();
        }
        // Two steps on a constant gradient move by lr * (1 + 1.9) * g.
        assert!((1.0 - po - lr * 2.9 * g).abs() < 1e-12);
        assert!((f64::from(p[0]) - po).abs() < 1e-6);
    }

    #[test]
    fn non_finite_update_is_rejected_untouched() {
        let mut p = vec![1.0f32, f32::MAX];
        let mut v = vec![0.0f32; 2];
        let r = sgd_step(&mut p, &[0.0, -f32::MAX], &mut v, 10.0, 0.0);
        assert!(r.is_err());
        assert_eq!(p, vec![1.0, f32::MAX]);
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.01, 0, 100), 0.01);
        assert!((cosine_lr(0.01, 50, 100) - 0.005).abs() < 1e-15);
        assert!(cosine_lr(0.01, 100, 100).abs() < 1e-15);
    }

    #[test]
    fn step_decay() {
        assert_eq!(step_lr(1.0, 0.1, 0, &[5, 8]), 1.0);
        assert!((step_lr(1.0, 0.1, 5, &[5, 8]) - 0.1).abs() < 1e-15);
        assert!((step_lr(1.0, 0.1, 9, &[5, 8]) - 0.01).abs() < 1e-15);
    }
}
