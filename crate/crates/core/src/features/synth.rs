use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{downsample_mask, FeatureDataset, ImageRecord, LayerSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Range of the per-class scale factor applied to all channel deviations.
const CLASS_SCALE: (f64, f64) = (0.1, 0.4);
/// Per-channel jitter around the class scale.
const CHANNEL_JITTER: (f64, f64) = (0.75, 1.25);
/// Anomalous block extent as a fraction of the image side.
const BLOCK_FRACTION: (f64, f64) = (0.125, 0.3);

/// Parameters of the synthetic multi-class generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub images_per_class: usize,
    /// Fraction of each class's images that receive a planted anomaly.
    pub anomaly_fraction: f64,
    pub image_height: usize,
    pub image_width: usize,
    pub layers: Vec<LayerSpec>,
    /// Norm of every class mean vector.
    pub class_separation: f64,
    /// Norm of the perturbation added at anomalous positions.
    pub anomaly_magnitude: f64,
    pub seed: u64,
}

impl SynthSpec {
    fn check(&self) -> Result<()> {
        if self.n_classes == 0 || self.images_per_class == 0 {
            return Err(Error::contract("class and image counts must be positive"));
        }
        if self.layers.is_empty() {
            return Err(Error::contract("at least one feature layer is required"));
        }
        if !(0.0..1.0).contains(&self.anomaly_fraction) {
            return Err(Error::contract(format!(
                "anomaly_fraction {} outside [0, 1)",
                self.anomaly_fraction
            )));
        }
        for spec in &self.layers {
            if spec.height == 0 || spec.width == 0 || spec.channels == 0 {
                return Err(Error::contract("layer extents must be positive"));
            }
            if spec.height > self.image_height || spec.width > self.image_width {
                return Err(Error::contract("feature layers cannot exceed the image size"));
            }
        }
        if self.class_separation < 0.0 || self.anomaly_magnitude < 0.0 {
            return Err(Error::contract("separation and magnitude must be non-negative"));
        }
        Ok(())
    }
}

fn unit_direction<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

struct ClassModel {
    means: Vec<Vec<f64>>,
    scales: Vec<Vec<f64>>,
}

/// Generates a labeled multi-class dataset.
///
/// Normal positions of class `k` are `μ_k + σ_k ⊙ ε` with `|μ_k| =
/// class_separation` and class-specific channel scales `σ_k`. An abnormal
/// image gets one rectangular block; every feature position whose cell
/// touches the block is shifted by a vector of norm `anomaly_magnitude`.
pub fn synth_dataset(spec: &SynthSpec) -> Result<FeatureDataset> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h0, w0) = (spec.image_height, spec.image_width);
    let mut dataset = FeatureDataset::new(h0, w0, spec.layers.clone());

    let classes: Vec<ClassModel> = (0..spec.n_classes)
        .map(|_| {
            let class_scale = rng.random_range(CLASS_SCALE.0..CLASS_SCALE.1);
            let means = spec
                .layers
                .iter()
                .map(|l| {
                    unit_direction(&mut rng, l.channels)
                        .into_iter()
                        .map(|x| x * spec.class_separation)
                        .collect()
                })
                .collect();
            let scales = spec
                .layers
                .iter()
                .map(|l| {
                    (0..l.channels)
                        .map(|_| class_scale * rng.random_range(CHANNEL_JITTER.0..CHANNEL_JITTER.1))
                        .collect()
                })
                .collect();
            ClassModel { means, scales }
        })
        .collect();

    let n_abnormal = (spec.anomaly_fraction * spec.images_per_class as f64).round() as usize;
    for (k, class) in classes.iter().enumerate() {
        let mut abnormal = vec![false; spec.images_per_class];
        abnormal[..n_abnormal].iter_mut().for_each(|a| *a = true);
        abnormal.shuffle(&mut rng);
        for &is_abnormal in &abnormal {
            let mut features: Vec<Vec<f64>> = spec
                .layers
                .iter()
                .enumerate()
                .map(|(l, s)| {
                    let mut data = Vec::with_capacity(s.positions() * s.channels);
                    for _ in 0..s.positions() {
                        for c in 0..s.channels {
                            let eps: f64 = rng.sample(StandardNormal);
                            data.push(class.means[l][c] + class.scales[l][c] * eps);
                        }
                    }
                    data
                })
                .collect();
            let mut mask = vec![0u8; h0 * w0];
            if is_abnormal {
                let side = |extent: usize, rng: &mut ChaCha8Rng| {
                    let lo = ((extent as f64 * BLOCK_FRACTION.0).round() as usize).max(1);
                    let hi = ((extent as f64 * BLOCK_FRACTION.1).round() as usize).max(lo);
                    rng.random_range(lo..=hi)
                };
                let bh = side(h0, &mut rng);
                let bw = side(w0, &mut rng);
                let top = rng.random_range(0..=h0 - bh);
                let left = rng.random_range(0..=w0 - bw);
                for r in top..top + bh {
                    mask[r * w0 + left..r * w0 + left + bw].fill(1);
                }
                for (l, s) in spec.layers.iter().enumerate() {
                    let cells = downsample_mask(&mask, (h0, w0), (s.height, s.width))?;
                    let shift: Vec<f64> = unit_direction(&mut rng, s.channels)
                        .into_iter()
                        .map(|x| x * spec.anomaly_magnitude)
                        .collect();
                    for (p, &hit) in cells.iter().enumerate() {
                        if hit == 1 {
                            for (c, d) in shift.iter().enumerate() {
                                features[l][p * s.channels + c] += d;
                            }
                        }
                    }
                }
            }
            let features = features
                .into_iter()
                .zip(&spec.layers)
                .map(|(data, s)| {
                    Tensor::matrix(
                        s.positions(),
                        s.channels,
                        data.into_iter().map(|x| x as f32).collect(),
                    )
                })
                .collect::<Result<_>>()?;
            dataset.images.push(ImageRecord {
                class_id: k as u32,
                label: u8::from(is_abnormal),
                mask,
                features,
            });
        }
    }
    dataset.validate()?;
    Ok(dataset)
}
