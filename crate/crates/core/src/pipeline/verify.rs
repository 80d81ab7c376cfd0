//! Runtime self-checks: the soap-bubble bound plus a set of fast oracle and
//! invariant comparisons over the numeric building blocks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::RunConfig;
use crate::constraintor::soap_bubble_check;
use crate::error::Result;
use crate::flow::Flow;
use crate::residual::nearest_row;
use crate::scoring::{auroc, upsample_bilinear, Grid};
use crate::tensor::{Linear, LrSchedule, Tensor};
use crate::vq::efdm_match;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("{tag} {}: {}", self.name, self.detail)
    }
}

fn check(name: &'static str, outcome: Result<(bool, String)>) -> Check {
    match outcome {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Runs every check; deterministic for a given `seed`.
pub fn run_checks(seed: u64) -> Vec<Check> {
    let mut out = Vec::new();
    for d in [256, 1024] {
        out.push(check(
            if d == 256 { "soap_bubble_d256" } else { "soap_bubble_d1024" },
            soap_bubble_check(d, 4.0, 10_000, seed).map(|s| {
                (
                    s.passed,
                    format!("fraction {:.4} vs bound {:.4}", s.empirical_fraction, s.bound),
                )
            }),
        ));
    }
    out.push(check("lr_schedule", Ok(lr_schedule())));
    out.push(check("nearest_reference_oracle", nearest_oracle(seed)));
    out.push(check("efdm_examples", efdm_examples()));
    out.push(check("auroc_pair_oracle", auroc_oracle(seed)));
    out.push(check("bilinear_example", bilinear_example()));
    out.push(check("flow_inverse", flow_inverse(seed)));
    out.push(check("config_round_trip", config_round_trip()));
    out
}

fn lr_schedule() -> (bool, String) {
    let s = LrSchedule::default();
    let got = [s.lr_at(0), s.lr_at(75), s.lr_at(95)];
    let want = [1e-5, 1e-6, 1e-7];
    let ok = got.iter().zip(want).all(|(g, w)| ((g - w) / w).abs() < 1e-12);
    (ok, format!("{got:?}"))
}

fn nearest_oracle(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (rows, cols) = (1000, 8);
    let pool = Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect())?;
    let mut mismatches = 0;
    for _ in 0..200 {
        let q: Vec<f32> = (0..cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let (got, _) = nearest_row(&q, &pool)?;
        let mut best = (0, f64::INFINITY);
        for r in 0..rows {
            let d: f64 = pool.row(r).iter().zip(&q).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
            if d < best.1 {
                best = (r, d);
            }
        }
        mismatches += usize::from(got != best.0);
    }
    Ok((mismatches == 0, format!("{mismatches} mismatches over 200 queries")))
}

fn efdm_examples() -> Result<(bool, String)> {
    let zero = efdm_match(&[3.0, 1.0, 2.0], &[10.0, 20.0, 30.0], 0.0)?;
    let half = efdm_match(&[3.0, 1.0, 2.0], &[10.0, 20.0, 30.0], 0.5)?;
    let ok = zero == [30.0, 10.0, 20.0] && half == [16.5, 5.5, 11.0];
    Ok((ok, format!("{zero:?} {half:?}")))
}

fn auroc_oracle(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut mismatches = 0;
    for _ in 0..100 {
        let scores: Vec<f64> = (0..50).map(|_| rng.random_range(0..12) as f64).collect();
        let mut labels: Vec<u8> = (0..50).map(|_| rng.random_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, si) in scores.iter().enumerate() {
            for (j, sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
                }
            }
        }
        mismatches += usize::from(auroc(&scores, &labels)? != wins / pairs);
    }
    Ok((mismatches == 0, format!("{mismatches} mismatches over 100 instances")))
}

fn bilinear_example() -> Result<(bool, String)> {
    let up = upsample_bilinear(&Grid::new(2, 2, vec![0.0, 1.0, 2.0, 3.0])?, 3, 3)?;
    let ok = up.values == [0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0];
    Ok((ok, format!("{:?}", up.values)))
}

fn flow_inverse(seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = 6;
    let mut flow = Flow::<f32>::new(channels, 4, 1.9, &mut rng)?;
    for b in &mut flow.blocks {
        b.output = Linear::uniform(2 * channels, b.output.outputs(), &mut rng);
    }
    let x = Tensor::matrix(64, channels, (0..64 * channels).map(|_| rng.random_range(-3.0f32..3.0)).collect())?;
    let (z, ld) = flow.forward(&x)?;
    let (back, ld_inv) = flow.inverse(&z)?;
    let err = x
        .data()
        .iter()
        .zip(back.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    let det_err = ld.iter().zip(&ld_inv).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
    Ok((err < 1e-4 && det_err < 1e-4, format!("max error {err:.2e}, log-det mismatch {det_err:.2e}")))
}

fn config_round_trip() -> Result<(bool, String)> {
    let cfg = RunConfig::default();
    let back = RunConfig::parse(&cfg.to_text())?;
    Ok((back == cfg, format!("sha256 {}", cfg.digest())))
}
