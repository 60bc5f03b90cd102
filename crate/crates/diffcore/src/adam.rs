use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam optimizer state for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Adam {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Rebuilds a state from saved moments, e.g. when loading a checkpoint.
    pub fn from_parts(config: AdamConfig, step: u64, first: Vec<Tensor>, second: Vec<Tensor>) -> Result<Self> {
        if first.len() != second.len()
            || first.iter().zip(&second).any(|(m, v)| m.shape() != v.shape())
        {
            return shape_err("adam", "first and second moments disagree");
        }
        Ok(Adam {
            config,
            step,
            first,
            second,
        })
    }

    pub fn timestep(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return shape_err(
                "adam",
                format!(
                    "{} params, {} grads, state for {}",
                    params.len(),
                    grads.len(),
                    self.first.len()
                ),
            );
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return shape_err("adam", format!("param {:?} grad {:?}", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let m_hat = md[i] / c1;
                let v_hat = vd[i] / c2;
                pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = vec![Tensor::vector(vec![0.5, -2.0])];
        let mut opt = Adam::new(AdamConfig::default(), &params);
        for _ in 0..5 {
            opt.step(&mut params, &[Tensor::zeros(vec![2])]).unwrap();
        }
        assert_eq!(params[0].data(), &[0.5, -2.0]);
        assert_eq!(opt.timestep(), 5);
    }

    #[test]
    fn single_step_hand_calculation() {
        // m = (1-b1) g, v = (1-b2) g^2; bias correction recovers g and g^2,
        // so the step is -lr * g / (|g| + eps).
        let cfg = AdamConfig::with_lr(0.1);
        let g = [3.0, -0.02, 1e-9];
        let mut params = vec![Tensor::vector(vec![0.0; 3])];
        let mut opt = Adam::new(cfg, &params);
        opt.step(&mut params, &[Tensor::vector(g.to_vec())]).unwrap();
        for (p, gi) in params[0].data().iter().zip(g) {
            let expected = -0.1 * gi / (gi.abs() + 1e-8);
            assert!((p - expected).abs() < 1e-12, "{p} vs {expected}");
        }
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let lr = 0.01;
        let mut params = vec![Tensor::vector(vec![0.0])];
        let mut opt = Adam::new(AdamConfig::with_lr(lr), &params);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..2000 {
            opt.step(&mut params, &[Tensor::vector(vec![0.7])]).unwrap();
            let now = params[0].data()[0];
            last_step = prev - now;
            prev = now;
        }
        assert!((last_step - lr).abs() < 1e-6 * lr + 1e-9);
    }

    #[test]
    fn shape_mismatch() {
        let mut params = vec![Tensor::vector(vec![0.0, 0.0])];
        let mut opt = Adam::new(AdamConfig::default(), &params);
        assert!(opt.step(&mut params, &[Tensor::zeros(vec![3])]).is_err());
        assert!(opt.step(&mut params, &[]).is_err());
    }
}
