//! Feature constraintor and its hypersphere objectives.
//!
//! Value-level functions work on `f64` slices and back the reports and
//! oracles; the `*_var` variants build the same quantities on a tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{BatchNorm, BatchNormVars, BatchStats, Linear, LinearVars, Real, Tape, Tensor, Var};

/// Upper bound on the outer radius.
pub const RADIUS_CAP: f64 = 0.4;
/// Ratio between inner and outer radius.
pub const INNER_RATIO: f64 = 0.99;

/// Position-wise `Linear → BatchNorm → ReLU → Linear`, `C → C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Constraintor<T: Real = f32> {
    pub first: Linear<T>,
    pub norm: BatchNorm<T>,
    pub second: Linear<T>,
}

pub struct ConstraintorVars<'t, T: Real> {
    pub first: LinearVars<'t, T>,
    pub norm: BatchNormVars<'t, T>,
    pub second: LinearVars<'t, T>,
}

impl<T: Real> Constraintor<T> {
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Self {
        Self {
            first: Linear::uniform(channels, channels, rng),
            norm: BatchNorm::new(channels),
            second: Linear::uniform(channels, channels, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.first.inputs()
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> ConstraintorVars<'t, T> {
        ConstraintorVars {
            first: self.first.bind(tape, trainable),
            norm: self.norm.bind(tape, trainable),
            second: self.second.bind(tape, trainable),
        }
    }

    fn check(&self, x: &Var<'_, T>) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.channels() {
            return Err(Error::dim(format!(
                "constraintor over {} channels applied to {shape:?}",
                self.channels()
            )));
        }
        Ok(())
    }

    /// Batch-statistics forward pass.
    pub fn forward_train<'t>(
        &self,
        vars: &ConstraintorVars<'t, T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, BatchStats)> {
        self.check(&x)?;
        let h = vars.first.forward(x)?;
        let (h, stats) = self.norm.forward_train(&vars.norm, h)?;
        Ok((vars.second.forward(h.relu())?, stats))
    }

    /// Running-statistics forward pass.
    pub fn forward_eval<'t>(&self, vars: &ConstraintorVars<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check(&x)?;
        let h = vars.first.forward(x)?;
        let h = self.norm.forward_eval(&vars.norm, h)?;
        vars.second.forward(h.relu())
    }

    /// Evaluation-mode map of a `positions × C` matrix.
    pub fn constrain(&self, map: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let vars = self.bind(&tape, false);
        let out = self.forward_eval(&vars, tape.constant(map.clone()))?;
        Ok((*out.value()).clone())
    }

    pub fn update_running(&mut self, stats: &BatchStats) {
        self.norm.update_running(stats);
    }

    /// Weight matrices subject to the regularizer.
    pub fn weights(&self) -> [&Tensor<T>; 2] {
        [&self.first.weight, &self.second.weight]
    }

    /// Trainable tensors in the order of [`ConstraintorVars::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = self.first.params_mut();
        out.extend(self.norm.params_mut());
        out.extend(self.second.params_mut());
        out
    }

    pub fn cast<U: Real>(&self) -> Constraintor<U> {
        Constraintor {
            first: self.first.cast(),
            norm: self.norm.cast(),
            second: self.second.cast(),
        }
    }
}

impl<'t, T: Real> ConstraintorVars<'t, T> {
    pub fn params(&self) -> Vec<Var<'t, T>> {
        let mut out = self.first.vars();
        out.extend(self.norm.vars());
        out.extend(self.second.vars());
        out
    }

    pub fn weights(&self) -> [Var<'t, T>; 2] {
        [self.first.weight, self.second.weight]
    }
}

/// Radii and barrier settings for the two-sphere objective. The centre is
/// the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HypersphereConfig {
    pub r_max: f64,
    pub r_min: f64,
    /// Barrier precision.
    pub t: f64,
    /// Weight regularization strength.
    pub lambda: f64,
}

impl HypersphereConfig {
    pub fn new(r_max: f64, r_min: f64, t: f64, lambda: f64) -> Result<Self> {
        if !(0.0 < r_min && r_min < r_max) {
            return Err(Error::contract(format!(
                "radii must satisfy 0 < r_min < r_max, got {r_min} and {r_max}"
            )));
        }
        if !(t > 0.0) || !(lambda >= 0.0) {
            return Err(Error::contract("t must be positive and lambda non-negative"));
        }
        Ok(Self {
            r_max,
            r_min,
            t,
            lambda,
        })
    }

    /// Radii from a batch of abnormal residual rows, see [`dynamic_radii`].
    pub fn dynamic(abnormal: &Tensor<f32>, t: f64, lambda: f64) -> Result<Self> {
        let (r_max, r_min) = dynamic_radii(abnormal);
        Self::new(r_max, r_min, t, lambda)
    }
}

/// `sqrt(|v|² + 1) − 1`.
pub fn pseudo_huber_dist(v: &[f64]) -> f64 {
    let sq: f64 = v.iter().map(|x| x * x).sum();
    // sq / (sqrt(sq + 1) + 1) is the same value without cancellation
    sq / ((sq + 1.0).sqrt() + 1.0)
}

fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

/// `−log σ(−s) · eˢ / t`. Convex and increasing in `s`, vanishing as
/// `s → −∞`.
pub fn log_barrier_term(s: f64, t: f64) -> f64 {
    softplus(s) * s.exp() / t
}

/// Single-sphere barrier objective: mean barrier term of `D − r` plus the
/// weight penalty.
pub fn occ_loss(distances: &[f64], r: f64, t: f64, weights: &[&Tensor<f32>], lambda: f64) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::contract("occ loss over an empty batch"));
    }
    let barrier = distances.iter().map(|d| log_barrier_term(d - r, t)).sum::<f64>() / distances.len() as f64;
    Ok(barrier + weight_regularizer(weights, lambda))
}

/// Mean of the outer and inner barrier terms over normal distances.
pub fn bi_occ_loss(distances: &[f64], cfg: &HypersphereConfig) -> Result<f64> {
    if distances.is_empty() {
        return Err(Error::contract("bi-sphere loss over an empty batch"));
    }
    let total: f64 = distances
        .iter()
        .map(|&d| log_barrier_term(d - cfg.r_max, cfg.t) + log_barrier_term(cfg.r_min - d, cfg.t))
        .sum();
    Ok(total / distances.len() as f64)
}

/// Two-sphere loss plus the mean displacement `|ψ(x) − x|` of abnormal
/// rows. An empty abnormal set contributes nothing.
pub fn ai_occ_loss(
    normal_distances: &[f64],
    abnormal_inputs: &[Vec<f64>],
    abnormal_outputs: &[Vec<f64>],
    cfg: &HypersphereConfig,
) -> Result<f64> {
    if abnormal_inputs.len() != abnormal_outputs.len() {
        return Err(Error::dim("abnormal inputs and outputs differ in count"));
    }
    let base = bi_occ_loss(normal_distances, cfg)?;
    if abnormal_inputs.is_empty() {
        return Ok(base);
    }
    let mut shift = 0.0;
    for (x, y) in abnormal_inputs.iter().zip(abnormal_outputs) {
        if x.len() != y.len() {
            return Err(Error::dim("abnormal row widths differ"));
        }
        shift += x.iter().zip(y).map(|(a, b)| (b - a).powi(2)).sum::<f64>().sqrt();
    }
    Ok(base + shift / abnormal_inputs.len() as f64)
}

/// `(r_max, r_min)` with `r_max = min(max pseudo-Huber distance, cap)`.
/// Without abnormal rows `r_max` is the cap.
pub fn dynamic_radii(abnormal: &Tensor<f32>) -> (f64, f64) {
    let rows = if abnormal.rank() == 2 { abnormal.rows() } else { 0 };
    let r_max = if rows == 0 {
        RADIUS_CAP
    } else {
        (0..rows)
            .map(|r| {
                let v: Vec<f64> = abnormal.row(r).iter().map(|&x| x as f64).collect();
                pseudo_huber_dist(&v)
            })
            .fold(f64::NEG_INFINITY, f64::max)
            .min(RADIUS_CAP)
    };
    (r_max, INNER_RATIO * r_max)
}

/// `λ/2 · Σ |W|²_F`.
pub fn weight_regularizer<T: Real>(weights: &[&Tensor<T>], lambda: f64) -> f64 {
    0.5 * lambda * weights.iter().map(|w| w.sum_squares()).sum::<f64>()
}

/// Row-wise pseudo-Huber distance of an `N × C` variable, shape `[N]`.
pub fn pseudo_huber_var<'t, T: Real>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let sq = x.square().sum_axis(1)?;
    Ok(sq.affine(T::one(), T::one()).sqrt()?.affine(T::one(), -T::one()))
}

/// Element-wise barrier term of `s`.
pub fn log_barrier_var<'t, T: Real>(s: Var<'t, T>, t: f64) -> Result<Var<'t, T>> {
    let soft = s.neg().log_sigmoid().neg();
    Ok(soft.mul(s.exp()?)?.scale(T::lit(1.0 / t)))
}

pub fn occ_loss_var<'t, T: Real>(
    distances: Var<'t, T>,
    r: f64,
    t: f64,
    weights: &[Var<'t, T>],
    lambda: f64,
) -> Result<Var<'t, T>> {
    if distances.value().numel() == 0 {
        return Err(Error::contract("occ loss over an empty batch"));
    }
    let barrier = log_barrier_var(distances.affine(T::one(), T::lit(-r)), t)?.mean();
    barrier.add(weight_regularizer_var(distances.tape(), weights, lambda)?)
}

pub fn bi_occ_loss_var<'t, T: Real>(distances: Var<'t, T>, cfg: &HypersphereConfig) -> Result<Var<'t, T>> {
    if distances.value().numel() == 0 {
        return Err(Error::contract("bi-sphere loss over an empty batch"));
    }
    let outer = log_barrier_var(distances.affine(T::one(), T::lit(-cfg.r_max)), cfg.t)?;
    let inner = log_barrier_var(distances.affine(-T::one(), T::lit(cfg.r_min)), cfg.t)?;
    Ok(outer.add(inner)?.mean())
}

/// `abnormal` pairs `(x, ψ(x))` as `M × C` variables; `None` when the batch
/// holds no abnormal rows.
pub fn ai_occ_loss_var<'t, T: Real>(
    normal_distances: Var<'t, T>,
    abnormal: Option<(Var<'t, T>, Var<'t, T>)>,
    cfg: &HypersphereConfig,
) -> Result<Var<'t, T>> {
    let base = bi_occ_loss_var(normal_distances, cfg)?;
    match abnormal {
        Some((x, y)) if x.value().numel() > 0 => {
            let shift = y.sub(x)?.square().sum_axis(1)?.sqrt()?.mean();
            base.add(shift)
        }
        _ => Ok(base),
    }
}

pub fn weight_regularizer_var<'t, T: Real>(
    tape: &'t Tape<T>,
    weights: &[Var<'t, T>],
    lambda: f64,
) -> Result<Var<'t, T>> {
    let mut total = tape.scalar(T::zero());
    for w in weights {
        total = total.add(w.square().sum())?;
    }
    Ok(total.scale(T::lit(0.5 * lambda)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoapBubble {
    /// `sqrt(d − 2·sqrt(d·t))`.
    pub threshold: f64,
    /// `1 − e^{−t}`.
    pub bound: f64,
    pub empirical_fraction: f64,
    pub passed: bool,
}

/// Samples `n_samples` standard normal vectors in `d` dimensions and counts
/// how many reach the shell radius. Passes when the fraction is at least
/// the bound minus three binomial standard errors.
pub fn soap_bubble_check(d: usize, t: f64, n_samples: usize, seed: u64) -> Result<SoapBubble> {
    let df = d as f64;
    let inner = df - 2.0 * (df * t).sqrt();
    if !(t >= 0.0) || !(inner > 0.0) {
        return Err(Error::contract(format!(
            "shell radius undefined for d = {d}, t = {t}"
        )));
    }
    if n_samples < 1000 {
        return Err(Error::contract("soap bubble check needs at least 1000 samples"));
    }
    let threshold = inner.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..n_samples {
        let sq: f64 = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal).powi(2)).sum();
        if sq >= inner {
            hits += 1;
        }
    }
    let bound = 1.0 - (-t).exp();
    let empirical_fraction = hits as f64 / n_samples as f64;
    let slack = 3.0 * (bound * (1.0 - bound) / n_samples as f64).sqrt();
    Ok(SoapBubble {
        threshold,
        bound,
        empirical_fraction,
        passed: empirical_fraction >= bound - slack,
    })
}
