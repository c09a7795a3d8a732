//! SGD with classical momentum.

use super::{Result, Tensor, TensorError};

/// `v <- momentum * v + g; p <- p - lr * v`, with one velocity buffer per
/// parameter slot that persists across steps.
#[derive(Debug, Clone)]
pub struct SgdOptimizer {
    lr: f64,
    momentum: f64,
    velocities: Vec<Vec<f64>>,
}

impl SgdOptimizer {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if lr <= 0.0 {
            return Err(TensorError::BadParameter {
                op: "sgd",
                detail: format!("lr must be positive, got {lr}"),
            });
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(TensorError::BadParameter {
                op: "sgd",
                detail: format!("momentum must be in [0, 1), got {momentum}"),
            });
        }
        Ok(Self {
            lr,
            momentum,
            velocities: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Adjust the learning rate (used by step-decay schedules); velocity
    /// buffers are kept.
    pub fn set_lr(&mut self, lr: f64) {
        assert!(lr > 0.0, "lr must stay positive");
        self.lr = lr;
    }

    /// Apply one update. Parameter order must be stable across calls: velocity
    /// buffers are matched by position.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(TensorError::BadParameter {
                op: "sgd",
                detail: format!("{} params but {} grads", params.len(), grads.len()),
            });
        }
        if self.velocities.is_empty() {
            self.velocities = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "sgd",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let v = &mut self.velocities[i];
            let mut data = p.data().to_vec();
            for ((pv, vv), gv) in data.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
            *p = Tensor::new(p.shape().to_vec(), data)?.with_requires_grad(p.requires_grad());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_step_moves_against_gradient() {
        let mut opt = SgdOptimizer::new(0.1, 0.0).unwrap();
        let mut params = vec![Tensor::scalar(1.0)];
        let grads = vec![Tensor::scalar(2.0)];
        opt.step(&mut params, &grads).unwrap();
        assert!((params[0].item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates_across_steps() {
        let mut opt = SgdOptimizer::new(0.1, 0.9).unwrap();
        let mut params = vec![Tensor::scalar(0.0)];
        let grads = vec![Tensor::scalar(1.0)];
        opt.step(&mut params, &grads).unwrap();
        assert!((params[0].item() - (-0.1)).abs() < 1e-15);
        opt.step(&mut params, &grads).unwrap();
        // second step: v = 0.9 + 1 = 1.9, so p = -0.1 - 0.19
        assert!((params[0].item() - (-0.29)).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut opt = SgdOptimizer::new(0.5, 0.0).unwrap();
        let mut params = vec![Tensor::new(vec![2], vec![1.5, -2.5]).unwrap()];
        let grads = vec![Tensor::zeros(vec![2])];
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params[0].data(), &[1.5, -2.5]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = SgdOptimizer::new(0.1, 0.0).unwrap();
        let mut params = vec![Tensor::zeros(vec![2])];
        let grads = vec![Tensor::zeros(vec![3])];
        assert!(opt.step(&mut params, &grads).is_err());
    }

    #[test]
    fn non_positive_lr_is_rejected() {
        assert!(SgdOptimizer::new(0.0, 0.0).is_err());
    }
}
