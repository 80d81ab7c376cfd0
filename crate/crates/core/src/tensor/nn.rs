use rand::Rng;

use super::{BatchStats, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Position-wise affine map `y = x·W + b` with `W` stored `in × out`.
/// A 1×1 convolution over a flattened feature map is exactly this.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T: Real> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub struct LinearVars<'t, T: Real> {
    pub weight: Var<'t, T>,
    pub bias: Var<'t, T>,
}

impl<T: Real> Linear<T> {
    /// Fan-in uniform initialization: `U(-1/√in, 1/√in)` for weights and bias.
    pub fn uniform<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = if inputs == 0 { 0.0 } else { 1.0 / (inputs as f64).sqrt() };
        let mut draw = |n: usize| -> Vec<T> {
            (0..n)
                .map(|_| T::lit(if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 }))
                .collect()
        };
        let weight = Tensor::new(vec![inputs, outputs], draw(inputs * outputs)).expect("shape");
        let bias = Tensor::vector(draw(outputs));
        Self { weight, bias }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn identity(channels: usize) -> Self {
        let mut weight = Tensor::zeros(&[channels, channels]);
        for i in 0..channels {
            weight.data_mut()[i * channels + i] = T::one();
        }
        Self {
            weight,
            bias: Tensor::zeros(&[channels]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> LinearVars<'t, T> {
        let leaf = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        LinearVars {
            weight: leaf(&self.weight),
            bias: leaf(&self.bias),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn cast<U: Real>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

impl<'t, T: Real> LinearVars<'t, T> {
    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(self.weight)?.add(self.bias)
    }

    pub fn vars(&self) -> Vec<Var<'t, T>> {
        vec![self.weight, self.bias]
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T: Real> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BatchNormVars<'t, T: Real> {
    pub gamma: Var<'t, T>,
    pub beta: Var<'t, T>,
}

impl<T: Real> BatchNorm<T> {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: Self::MOMENTUM,
            eps: Self::EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> BatchNormVars<'t, T> {
        let leaf = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BatchNormVars {
            gamma: leaf(&self.gamma),
            beta: leaf(&self.beta),
        }
    }

    /// Batch-statistics normalization; the caller folds the returned
    /// statistics into the running estimates with [`BatchNorm::update_running`].
    pub fn forward_train<'t>(
        &self,
        vars: &BatchNormVars<'t, T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, BatchStats)> {
        x.batch_norm(vars.gamma, vars.beta, self.eps)
    }

    /// Running-statistics normalization.
    pub fn forward_eval<'t>(&self, vars: &BatchNormVars<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let c = self.channels();
        if x.shape().last() != Some(&c) {
            return Err(Error::dim(format!(
                "batch norm over {c} channels applied to {:?}",
                x.shape()
            )));
        }
        let tape = x.tape();
        let inv_std: Vec<T> = self
            .running_var
            .data()
            .iter()
            .map(|v| T::lit(1.0 / (v.as_f64() + self.eps).sqrt()))
            .collect();
        let mean = tape.constant(self.running_mean.clone());
        let inv_std = tape.constant(Tensor::vector(inv_std));
        x.sub(mean)?.mul(inv_std)?.mul(vars.gamma)?.add(vars.beta)
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, s) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = T::lit((1.0 - m) * r.as_f64() + m * s);
        }
        for (r, s) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = T::lit((1.0 - m) * r.as_f64() + m * s);
        }
    }

    /// Trainable parameters (running statistics excluded).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn cast<U: Real>(&self) -> BatchNorm<U> {
        BatchNorm {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

impl<'t, T: Real> BatchNormVars<'t, T> {
    pub fn vars(&self) -> Vec<Var<'t, T>> {
        vec![self.gamma, self.beta]
    }
}
