use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Adam with decoupled weight decay. Moments are kept at 64 bits.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
            shapes: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. `params` and `grads` are matched by position and
    /// must keep the same order and shapes across calls.
    pub fn step<T: Real>(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if self.shapes.is_empty() {
            self.shapes = params.iter().map(|p| p.shape().to_vec()).collect();
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        } else if self.shapes.len() != params.len()
            || self.shapes.iter().zip(params.iter()).any(|(s, p)| s != p.shape())
        {
            return Err(Error::dim("parameter set changed between Adam steps"));
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first[k];
            let v = &mut self.second[k];
            for (i, (w, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let mut x = w.as_f64();
                x -= lr * weight_decay * x;
                let gi = gi.as_f64();
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                x -= lr * m_hat / (v_hat.sqrt() + eps);
                *w = T::lit(x);
            }
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate: `initial × factor^(milestones passed)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub factor: f64,
    pub milestones: Vec<usize>,
}

impl LrSchedule {
    pub fn new(initial: f64, factor: f64, milestones: Vec<usize>) -> Self {
        Self {
            initial,
            factor,
            milestones,
        }
    }

    /// Rate in effect during zero-based `epoch`. A milestone `m` counts as
    /// passed from epoch `m` onwards.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.initial * self.factor.powi(passed as i32)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::new(1e-5, 0.1, vec![70, 90])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut adam = Adam::new(AdamConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        let mut p = Tensor::<f64>::vector(vec![0.5]);
        let g = Tensor::<f64>::vector(vec![1.0]);
        adam.step(&mut [&mut p], &[g]).unwrap();
        let expected = 0.5 - 0.01 * (1.0 / (1.0 + 1e-8));
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        let mut p = Tensor::<f32>::vector(vec![1.0, -2.0, 3.5]);
        let before = p.clone();
        for _ in 0..10 {
            adam.step(&mut [&mut p], &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(adam.steps(), 10);
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut a = Tensor::<f32>::vector(vec![0.3, 0.3]);
        let mut b = Tensor::<f32>::vector(vec![0.3, 0.3]);
        let g = Tensor::<f32>::vector(vec![0.7, 0.7]);
        for _ in 0..3 {
            adam.step(&mut [&mut a, &mut b], &[g.clone(), g.clone()]).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(a.data()[0], a.data()[1]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = Tensor::<f32>::vector(vec![1.0, 2.0]);
        let g = Tensor::<f32>::vector(vec![1.0]);
        assert!(matches!(adam.step(&mut [&mut p], &[g]), Err(Error::Dimension(_))));
    }

    #[test]
    fn schedule_milestones() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 1e-5);
        assert!((s.lr_at(69) - 1e-5).abs() < 1e-20);
        assert!((s.lr_at(75) - 1e-6).abs() < 1e-18);
        assert!((s.lr_at(95) - 1e-7).abs() < 1e-19);
    }
}
