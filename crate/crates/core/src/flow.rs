//! Affine-coupling normalizing flow with a normal and an abnormal Gaussian
//! base, plus the likelihood and focal objectives trained on top of it.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Linear, LinearVars, Real, Tape, Tensor, Var};

pub const DEFAULT_BLOCKS: usize = 10;
pub const DEFAULT_CLAMP: f64 = 1.9;
pub const DEFAULT_FOCAL_GAMMA: f64 = 2.0;

const LOG_TWO_PI: f64 = 1.837_877_066_409_345_5;

/// `(2c/π)·atan(s/c)`: odd, increasing, bounded by `c` in magnitude.
pub fn soft_clamp(s: f64, c: f64) -> f64 {
    2.0 * c / PI * (s / c).atan()
}

pub fn soft_clamp_var<'t, T: Real>(s: Var<'t, T>, c: f64) -> Var<'t, T> {
    s.scale(T::lit(1.0 / c)).atan().scale(T::lit(2.0 * c / PI))
}

/// One coupling step. The first `C/2` channels (rounded down) condition an
/// affine map of the rest, then channels are permuted and scaled by fixed
/// constants.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBlock<T: Real = f32> {
    /// `C/2 → 2C`, followed by ReLU.
    pub hidden: Linear<T>,
    /// `2C → 2·(C − C/2)`: scale logits, then shifts.
    pub output: Linear<T>,
    /// Output channel `j` takes input channel `permutation[j]`.
    pub permutation: Vec<usize>,
    /// Frozen per-channel factor applied after the permutation.
    pub scale: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Flow<T: Real = f32> {
    pub channels: usize,
    pub clamp: f64,
    pub blocks: Vec<CouplingBlock<T>>,
}

pub struct FlowVars<'t, T: Real> {
    blocks: Vec<(LinearVars<'t, T>, LinearVars<'t, T>)>,
}

impl<'t, T: Real> FlowVars<'t, T> {
    pub fn params(&self) -> Vec<Var<'t, T>> {
        self.blocks
            .iter()
            .flat_map(|(h, o)| h.vars().into_iter().chain(o.vars()))
            .collect()
    }
}

fn inverse_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (j, &i) in p.iter().enumerate() {
        inv[i] = j;
    }
    inv
}

impl<T: Real> Flow<T> {
    /// Fresh flow: zero output layers and unit scales make it a pure channel
    /// permutation with zero log-determinant.
    pub fn new<R: Rng>(channels: usize, n_blocks: usize, clamp: f64, rng: &mut R) -> Result<Self> {
        if channels < 2 {
            return Err(Error::contract(format!(
                "coupling needs at least 2 channels, got {channels}"
            )));
        }
        if !(clamp > 0.0) {
            return Err(Error::contract("clamp coefficient must be positive"));
        }
        let active = channels / 2;
        let passive = channels - active;
        let blocks = (0..n_blocks)
            .map(|_| {
                let mut permutation: Vec<usize> = (0..channels).collect();
                permutation.shuffle(rng);
                CouplingBlock {
                    hidden: Linear::uniform(active, 2 * channels, rng),
                    output: Linear::zeros(2 * channels, 2 * passive),
                    permutation,
                    scale: Tensor::full(&[channels], T::one()),
                }
            })
            .collect();
        Ok(Self {
            channels,
            clamp,
            blocks,
        })
    }

    fn split(&self) -> (Vec<usize>, Vec<usize>, usize) {
        let active = self.channels / 2;
        let passive = self.channels - active;
        ((0..active).collect(), (active..self.channels).collect(), passive)
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> FlowVars<'t, T> {
        FlowVars {
            blocks: self
                .blocks
                .iter()
                .map(|b| (b.hidden.bind(tape, trainable), b.output.bind(tape, trainable)))
                .collect(),
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.rank() != 2 || x.cols() != self.channels {
            return Err(Error::dim(format!(
                "flow over {} channels applied to {:?}",
                self.channels,
                x.shape()
            )));
        }
        if !x.is_finite() {
            return Err(Error::Numeric("non-finite flow input".into()));
        }
        Ok(())
    }

    fn scale_and_shift<'t>(
        &self,
        hidden: &LinearVars<'t, T>,
        output: &LinearVars<'t, T>,
        active: Var<'t, T>,
        passive: usize,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let out = output.forward(hidden.forward(active)?.relu())?;
        let logits: Vec<usize> = (0..passive).collect();
        let shifts: Vec<usize> = (passive..2 * passive).collect();
        let s = soft_clamp_var(out.gather(1, &logits)?, self.clamp);
        Ok((s, out.gather(1, &shifts)?))
    }

    /// `N × C` input to `(z, log_det)` with `log_det` of shape `[N]`.
    pub fn forward_var<'t>(&self, vars: &FlowVars<'t, T>, x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        self.check(&x.value())?;
        let tape = x.tape();
        let (active_idx, passive_idx, passive) = self.split();
        let n = x.value().rows();
        let mut log_det = tape.constant(Tensor::zeros(&[n]));
        let mut h = x;
        for (block, (hidden, output)) in self.blocks.iter().zip(&vars.blocks) {
            let a = h.gather(1, &active_idx)?;
            let b = h.gather(1, &passive_idx)?;
            let (s, t) = self.scale_and_shift(hidden, output, a, passive)?;
            let b = b.mul(s.exp()?)?.add(t)?;
            h = tape.concat(&[a, b], 1)?.gather(1, &block.permutation)?;
            h = h.mul(tape.constant(block.scale.clone()))?;
            let fixed: f64 = block.scale.data().iter().map(|v| v.as_f64().abs().ln()).sum();
            log_det = log_det.add(s.sum_axis(1)?)?.affine(T::one(), T::lit(fixed));
        }
        Ok((h, log_det))
    }

    /// Value-only forward pass.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<f64>)> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let (z, log_det) = self.forward_var(&vars, tape.constant(x.clone()))?;
        let z = (*z.value()).clone();
        Ok((z, log_det.value().to_f64_vec()))
    }

    /// Exact inverse; the returned log-determinant is that of the inverse
    /// map and cancels the forward one.
    pub fn inverse(&self, z: &Tensor<T>) -> Result<(Tensor<T>, Vec<f64>)> {
        self.check(z)?;
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let (active_idx, passive_idx, passive) = self.split();
        let n = z.rows();
        let mut log_det = tape.constant(Tensor::zeros(&[n]));
        let mut h = tape.constant(z.clone());
        for (block, (hidden, output)) in self.blocks.iter().zip(&vars.blocks).rev() {
            let recip = block.scale.data().iter().map(|v| T::one() / *v).collect();
            h = h.mul(tape.constant(Tensor::vector(recip)))?;
            h = h.gather(1, &inverse_permutation(&block.permutation))?;
            let a = h.gather(1, &active_idx)?;
            let b = h.gather(1, &passive_idx)?;
            let (s, t) = self.scale_and_shift(hidden, output, a, passive)?;
            let b = b.sub(t)?.mul(s.neg().exp()?)?;
            h = tape.concat(&[a, b], 1)?;
            let fixed: f64 = block.scale.data().iter().map(|v| v.as_f64().abs().ln()).sum();
            log_det = log_det.sub(s.sum_axis(1)?)?.affine(T::one(), T::lit(-fixed));
        }
        let x = (*h.value()).clone();
        Ok((x, log_det.value().to_f64_vec()))
    }

    /// Trainable tensors in the order of [`FlowVars::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| {
                let mut v = b.hidden.params_mut();
                v.extend(b.output.params_mut());
                v
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> Flow<U> {
        Flow {
            channels: self.channels,
            clamp: self.clamp,
            blocks: self
                .blocks
                .iter()
                .map(|b| CouplingBlock {
                    hidden: b.hidden.cast(),
                    output: b.output.cast(),
                    permutation: b.permutation.clone(),
                    scale: b.scale.cast(),
                })
                .collect(),
        }
    }
}

/// Which Gaussian a log-density is taken under.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Base {
    /// `N(0, I)`.
    Normal,
    /// `N(a·1, I)`.
    Abnormal,
}

impl Base {
    fn mean(self, offset: f64) -> f64 {
        match self {
            Base::Normal => 0.0,
            Base::Abnormal => offset,
        }
    }
}

/// `−(C/2)·log 2π − ½|z − μ|² + log_det`.
pub fn log_prob(z: &[f64], log_det: f64, base: Base, offset: f64) -> f64 {
    let mu = base.mean(offset);
    let sq: f64 = z.iter().map(|v| (v - mu).powi(2)).sum();
    -0.5 * z.len() as f64 * LOG_TWO_PI - 0.5 * sq + log_det
}

/// Row-wise log-density of an `N × C` latent, shape `[N]`.
pub fn log_prob_var<'t, T: Real>(z: Var<'t, T>, log_det: Var<'t, T>, base: Base, offset: f64) -> Result<Var<'t, T>> {
    let c = z.shape()[1] as f64;
    let sq = z.affine(T::one(), T::lit(-base.mean(offset))).square().sum_axis(1)?;
    sq.affine(T::lit(-0.5), T::lit(-0.5 * c * LOG_TWO_PI)).add(log_det)
}

fn check_labels(labels: &[u8], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::dim(format!("{} labels for {n} positions", labels.len())));
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::contract("position labels must be 0 or 1"));
    }
    Ok(())
}

/// Mean negative log-likelihood, normal rows under the normal base and
/// abnormal rows under the abnormal one.
pub fn ml_loss(log_p_normal: &[f64], log_p_abnormal: &[f64], labels: &[u8]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::contract("likelihood loss over an empty batch"));
    }
    check_labels(labels, log_p_normal.len())?;
    check_labels(labels, log_p_abnormal.len())?;
    let total: f64 = labels
        .iter()
        .zip(log_p_normal.iter().zip(log_p_abnormal))
        .map(|(&y, (&n, &a))| if y == 1 { a } else { n })
        .sum();
    Ok(-total / labels.len() as f64)
}

pub fn ml_loss_var<'t, T: Real>(log_p_normal: Var<'t, T>, log_p_abnormal: Var<'t, T>, labels: &[u8]) -> Result<Var<'t, T>> {
    if labels.is_empty() {
        return Err(Error::contract("likelihood loss over an empty batch"));
    }
    check_labels(labels, log_p_normal.value().numel())?;
    let tape = log_p_normal.tape();
    let y = tape.constant(Tensor::vector(labels.iter().map(|&v| T::lit(v as f64)).collect()));
    let not_y = tape.constant(Tensor::vector(labels.iter().map(|&v| T::lit(1.0 - v as f64)).collect()));
    let picked = log_p_normal.mul(not_y)?.add(log_p_abnormal.mul(y)?)?;
    Ok(picked.mean().neg())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Posterior of the abnormal base, `sigmoid(log p_a − log p_n)`.
pub fn classification_score(log_p_normal: f64, log_p_abnormal: f64) -> f64 {
    sigmoid(log_p_abnormal - log_p_normal)
}

/// Mean of `−(1 − p_t)^γ log p_t` with `p_t = s` for abnormal labels and
/// `1 − s` for normal ones.
pub fn focal_loss(scores: &[f64], labels: &[u8], gamma: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::contract("focal loss over an empty batch"));
    }
    check_labels(labels, scores.len())?;
    let mut total = 0.0;
    for (&s, &y) in scores.iter().zip(labels) {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::Domain(format!("score {s} outside (0, 1)")));
        }
        let pt = if y == 1 { s } else { 1.0 - s };
        total += -(1.0 - pt).powf(gamma) * pt.ln();
    }
    Ok(total / scores.len() as f64)
}

/// Focal loss from logits `log p_a − log p_n`, evaluated in log space.
pub fn focal_loss_var<'t, T: Real>(logits: Var<'t, T>, labels: &[u8], gamma: f64) -> Result<Var<'t, T>> {
    if labels.is_empty() {
        return Err(Error::contract("focal loss over an empty batch"));
    }
    check_labels(labels, logits.value().numel())?;
    let tape = logits.tape();
    let sign = tape.constant(Tensor::vector(
        labels.iter().map(|&y| if y == 1 { T::one() } else { -T::one() }).collect(),
    ));
    // u is the logit of p_t
    let u = logits.mul(sign)?;
    let log_pt = u.log_sigmoid();
    let weight = u.neg().log_sigmoid().scale(T::lit(gamma)).exp()?;
    Ok(weight.mul(log_pt)?.mean().neg())
}

/// Likelihood plus focal loss of one batch; returns the total together with
/// the two parts.
pub fn nf_total_loss_var<'t, T: Real>(
    z: Var<'t, T>,
    log_det: Var<'t, T>,
    labels: &[u8],
    offset: f64,
    gamma: f64,
) -> Result<(Var<'t, T>, Var<'t, T>, Var<'t, T>)> {
    let lp_n = log_prob_var(z, log_det, Base::Normal, offset)?;
    let lp_a = log_prob_var(z, log_det, Base::Abnormal, offset)?;
    let ml = ml_loss_var(lp_n, lp_a, labels)?;
    let focal = focal_loss_var(lp_a.sub(lp_n)?, labels, gamma)?;
    Ok((ml.add(focal)?, ml, focal))
}
