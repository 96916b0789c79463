//! Adam with bias correction and a linear warmup / linear decay schedule.

use crate::tensor::{Result, Tensor, TensorError};

/// Optimizer hyperparameters and schedule shape.
///
/// The effective learning rate climbs linearly from 0 to `peak_lr` over
/// `warmup_steps`, then decays linearly to 0 at `total_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-9,
            peak_lr: 5e-5,
            warmup_steps: 4000,
            total_steps: 400_000,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 > 0.0 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return Err(TensorError::InvalidArgument(format!(
                "require 0 < beta1 < beta2 < 1, got beta1={} beta2={}",
                self.beta1, self.beta2
            )));
        }
        if self.epsilon <= 0.0 {
            return Err(TensorError::InvalidArgument(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(TensorError::InvalidArgument(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }

    /// Effective learning rate at `step` (1-based).
    pub fn learning_rate(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return 0.0;
        }
        self.peak_lr * (self.total_steps - step) as f64
            / (self.total_steps - self.warmup_steps) as f64
    }
}

/// First and second moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        AdamState {
            m: Tensor::zeros(shape.to_vec()),
            v: Tensor::zeros(shape.to_vec()),
        }
    }
}

/// One Adam update in place. `step` is 1-based and shared across parameters.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    state: &mut AdamState,
    config: &OptimizerConfig,
    step: u64,
) -> Result<()> {
    if step == 0 {
        return Err(TensorError::InvalidArgument("adam step must be >= 1".into()));
    }
    if param.shape() != grad.shape() || param.shape() != state.m.shape() || param.shape() != state.v.shape() {
        return Err(TensorError::ShapeMismatch {
            kernel: "adam_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    let lr = config.learning_rate(step);
    let bc1 = 1.0 - config.beta1.powi(step as i32);
    let bc2 = 1.0 - config.beta2.powi(step as i32);
    let (b1, b2, eps) = (config.beta1, config.beta2, config.epsilon);
    for ((p, g), (m, v)) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(state.m.data_mut().iter_mut().zip(state.v.data_mut().iter_mut()))
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar reference implementation used as the oracle.
    fn scalar_adam(
        p0: f64,
        grads: &[f64],
        cfg: &OptimizerConfig,
        start_step: u64,
    ) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (i, g) in grads.iter().enumerate() {
            let step = start_step + i as u64;
            let lr = cfg.learning_rate(step);
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let m_hat = m / (1.0 - cfg.beta1.powi(step as i32));
            let v_hat = v / (1.0 - cfg.beta2.powi(step as i32));
            p -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        p
    }

    fn cfg() -> OptimizerConfig {
        OptimizerConfig {
            peak_lr: 0.1,
            warmup_steps: 10,
            total_steps: 100,
            ..Default::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let cfg = cfg();
        let mut p = Tensor::from_vec(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::zeros(vec![3]);
        let mut state = AdamState::new(&[3]);
        adam_step(&mut p, &g, &mut state, &cfg, 1).unwrap();
        assert_eq!(p.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn warmup_boundary_hits_peak_exactly() {
        let cfg = cfg();
        assert_eq!(cfg.learning_rate(10), 0.1);
        assert!((cfg.learning_rate(5) - 0.05).abs() < 1e-15);
        assert!((cfg.learning_rate(55) - 0.05).abs() < 1e-15);
        assert_eq!(cfg.learning_rate(100), 0.0);
        assert_eq!(cfg.learning_rate(250), 0.0);
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        let cfg = cfg();
        let mut p = Tensor::from_vec(vec![1], vec![0.7]).unwrap();
        let g = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        let mut state = AdamState::new(&[1]);
        adam_step(&mut p, &g, &mut state, &cfg, 1).unwrap();
        adam_step(&mut p, &g, &mut state, &cfg, 2).unwrap();
        let expect = scalar_adam(0.7, &[1.0, 1.0], &cfg, 1);
        assert!((p.data()[0] - expect).abs() <= 1e-12);
    }

    #[test]
    fn tensor_update_equals_elementwise_scalar_oracle() {
        use rand::{Rng, SeedableRng};
        let cfg = cfg();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 17;
        let p0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gs: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut p = Tensor::from_vec(vec![n], p0.clone()).unwrap();
        let mut state = AdamState::new(&[n]);
        for (i, g) in gs.iter().enumerate() {
            let gt = Tensor::from_vec(vec![n], g.clone()).unwrap();
            adam_step(&mut p, &gt, &mut state, &cfg, (i + 1) as u64).unwrap();
        }
        for j in 0..n {
            let series: Vec<f64> = gs.iter().map(|g| g[j]).collect();
            let expect = scalar_adam(p0[j], &series, &cfg, 1);
            assert!((p.data()[j] - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let cfg = cfg();
        let mut p = Tensor::zeros(vec![2]);
        let g = Tensor::zeros(vec![3]);
        let mut state = AdamState::new(&[2]);
        assert!(adam_step(&mut p, &g, &mut state, &cfg, 1).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        let bad = OptimizerConfig {
            beta1: 0.999,
            beta2: 0.9,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = OptimizerConfig {
            warmup_steps: 11,
            total_steps: 10,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
