//! Training, evaluation, checkpoints and run manifests.

mod checkpoint;
mod config;
mod eval;
mod train;
pub mod verify;

pub use checkpoint::{Checkpoint, LayerModel, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{Ablation, RunConfig};
pub use eval::{
    evaluate, evaluate_with, read_score_maps, score_image, write_score_maps, EvalOptions, Evaluation,
    SCORE_MAP_MAGIC,
};
pub use train::{train, train_with, EpochLog, TrainOutcome};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::{build_reference_pool, FeatureDataset, ImageRecord, ReferencePool};
use crate::residual::to_residual;
use crate::tensor::Tensor;

/// Seeded choice of `per_class` normal images for every class, each list
/// sorted. Classes with fewer normal images contribute all of them.
pub fn select_references<R: Rng>(
    dataset: &FeatureDataset,
    per_class: usize,
    rng: &mut R,
) -> Result<BTreeMap<u32, Vec<usize>>> {
    if per_class == 0 {
        return Err(Error::contract("at least one reference image per class is required"));
    }
    let mut out = BTreeMap::new();
    for class in dataset.class_ids() {
        let normals: Vec<usize> = dataset
            .images
            .iter()
            .enumerate()
            .filter(|(_, im)| im.class_id == class && im.is_normal())
            .map(|(i, _)| i)
            .collect();
        if normals.is_empty() {
            return Err(Error::contract(format!("class {class} has no normal image")));
        }
        let mut picked: Vec<usize> = normals
            .choose_multiple(rng, per_class.min(normals.len()))
            .copied()
            .collect();
        picked.sort_unstable();
        out.insert(class, picked);
    }
    Ok(out)
}

/// [`select_references`] from a fresh generator, flattened and sorted.
pub fn draw_references(dataset: &FeatureDataset, per_class: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = select_references(dataset, per_class, &mut rng)?
        .into_values()
        .flatten()
        .collect();
    all.sort_unstable();
    Ok(all)
}

/// Groups reference indices by class and builds one pool per class.
pub fn class_pools(dataset: &FeatureDataset, references: &[usize]) -> Result<BTreeMap<u32, ReferencePool>> {
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for &i in references {
        let image = dataset
            .images
            .get(i)
            .ok_or_else(|| Error::contract(format!("reference index {i} out of range")))?;
        by_class.entry(image.class_id).or_default().push(i);
    }
    by_class
        .into_iter()
        .map(|(class, idx)| Ok((class, build_reference_pool(dataset, &idx)?)))
        .collect()
}

/// Per-layer maps entering the learned stages: residuals against `pool`,
/// or the raw features when no pool is given.
pub(crate) fn layer_inputs(image: &ImageRecord, pool: Option<&ReferencePool>) -> Result<Vec<Tensor<f32>>> {
    match pool {
        Some(pool) => Ok(to_residual(&image.features, pool)?.layers),
        None => Ok(image.features.clone()),
    }
}

/// Provenance written beside checkpoints and reports.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub seed: u64,
    pub config_sha256: String,
    /// Dataset indices of the reference images.
    pub references: Vec<usize>,
}

impl Manifest {
    pub fn new(config: &RunConfig, seed: u64, references: &[usize]) -> Self {
        let mut references = references.to_vec();
        references.sort_unstable();
        Self {
            seed,
            config_sha256: config.digest(),
            references,
        }
    }

    pub fn to_text(&self) -> String {
        let refs: Vec<String> = self.references.iter().map(|r| r.to_string()).collect();
        let mut out = String::new();
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "config_sha256 = {}", self.config_sha256);
        let _ = writeln!(out, "reference_indices = {}", refs.join(","));
        out
    }

    /// `<artifact>.manifest`.
    pub fn path_for(artifact: &Path) -> PathBuf {
        let mut name = artifact.as_os_str().to_owned();
        name.push(".manifest");
        PathBuf::from(name)
    }

    /// Writes the manifest beside `artifact`.
    pub fn write_beside(&self, artifact: &Path) -> Result<PathBuf> {
        let path = Self::path_for(artifact);
        fs::write(&path, self.to_text())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{synth_dataset, LayerSpec, SynthSpec};

    fn data() -> FeatureDataset {
        synth_dataset(&SynthSpec {
            n_classes: 3,
            images_per_class: 10,
            anomaly_fraction: 0.3,
            image_height: 8,
            image_width: 8,
            layers: vec![LayerSpec::new(4, 4, 3)],
            class_separation: 2.0,
            anomaly_magnitude: 1.0,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn references_are_normal_per_class_and_seeded() {
        let ds = data();
        let a = draw_references(&ds, 4, 7).unwrap();
        assert_eq!(a, draw_references(&ds, 4, 7).unwrap());
        assert_eq!(a.len(), 12);
        for class in ds.class_ids() {
            let n = a.iter().filter(|&&i| ds.images[i].class_id == class).count();
            assert_eq!(n, 4);
        }
        assert!(a.iter().all(|&i| ds.images[i].is_normal()));
        // only 7 normal images per class exist
        assert_eq!(draw_references(&ds, 50, 7).unwrap().len(), 21);
    }

    #[test]
    fn pools_group_by_class() {
        let ds = data();
        let refs = draw_references(&ds, 2, 1).unwrap();
        let pools = class_pools(&ds, &refs).unwrap();
        assert_eq!(pools.len(), 3);
        assert!(pools.values().all(|p| p.layer(0).rows() == 2 * 16));
    }

    #[test]
    fn manifest_lines() {
        let cfg = RunConfig::default();
        let m = Manifest::new(&cfg, 9, &[5, 1]);
        let text = m.to_text();
        assert!(text.contains("seed = 9\n"));
        assert!(text.contains("reference_indices = 1,5\n"));
        assert!(text.contains(&cfg.digest()));
        assert_eq!(Manifest::path_for(Path::new("/tmp/x.ck")), PathBuf::from("/tmp/x.ck.manifest"));
    }
}
