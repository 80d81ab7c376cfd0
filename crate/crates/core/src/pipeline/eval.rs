use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::{class_pools, layer_inputs};
use crate::codec::{put_f32s, put_u32, Cursor};
use crate::error::{Error, Result};
use crate::features::{FeatureDataset, ImageRecord, ReferencePool};
use crate::flow::{classification_score, log_prob, Base};
use crate::scoring::{likelihood_score, merge_maps, Grid, MetricReport, ScoreMap};
use crate::vq::fdm_apply;

pub const SCORE_MAP_MAGIC: &[u8; 4] = b"RSSM";
const SCORE_MAP_VERSION: u32 = 1;

/// Test-time switches that need no retraining.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub use_fdm: bool,
    pub use_mac: bool,
    pub fdm_alpha: f64,
}

impl EvalOptions {
    pub fn from_config(config: &RunConfig) -> Self {
        Self {
            use_fdm: config.ablation.use_fdm,
            use_mac: config.ablation.use_mac,
            fdm_alpha: config.fdm_alpha,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Dataset indices of the scored images: every non-reference image.
    pub scored: Vec<usize>,
    pub maps: Vec<ScoreMap>,
    pub report: MetricReport,
}

/// Evaluates with the switches stored in the checkpoint.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &FeatureDataset, references: &[usize]) -> Result<Evaluation> {
    evaluate_with(checkpoint, dataset, references, &EvalOptions::from_config(&checkpoint.config))
}

/// Scores every image that is not a reference and computes the metrics.
/// Each image is matched against the pool built from the references of
/// its own class.
pub fn evaluate_with(
    checkpoint: &Checkpoint,
    dataset: &FeatureDataset,
    references: &[usize],
    options: &EvalOptions,
) -> Result<Evaluation> {
    dataset.validate()?;
    if dataset.layers != checkpoint.layers {
        return Err(Error::dim("dataset layers differ from the checkpoint's"));
    }
    let pools = class_pools(dataset, references)?;
    let reserved: BTreeSet<usize> = references.iter().copied().collect();
    let scored: Vec<usize> = (0..dataset.len()).filter(|i| !reserved.contains(i)).collect();
    if scored.is_empty() {
        return Err(Error::contract("every image is a reference; nothing to score"));
    }
    let maps: Vec<ScoreMap> = scored
        .par_iter()
        .map(|&i| {
            let image = &dataset.images[i];
            let pool = pools
                .get(&image.class_id)
                .ok_or_else(|| Error::contract(format!("no reference images for class {}", image.class_id)))?;
            score_image(checkpoint, image, pool, options, (dataset.height, dataset.width))
        })
        .collect::<Result<_>>()?;
    let labels: Vec<u8> = scored.iter().map(|&i| dataset.images[i].label).collect();
    let masks: Vec<Vec<u8>> = scored.iter().map(|&i| dataset.images[i].mask.clone()).collect();
    let report = MetricReport::compute(&maps, &labels, &masks)?;
    Ok(Evaluation { scored, maps, report })
}

/// Full-resolution anomaly map of one image.
pub fn score_image(
    checkpoint: &Checkpoint,
    image: &ImageRecord,
    pool: &ReferencePool,
    options: &EvalOptions,
    extent: (usize, usize),
) -> Result<ScoreMap> {
    let ablation = checkpoint.config.ablation;
    let inputs = layer_inputs(image, ablation.use_residual.then_some(pool))?;
    let mut likelihood = Vec::with_capacity(inputs.len());
    let mut classification = Vec::with_capacity(inputs.len());
    for ((x, model), spec) in inputs.into_iter().zip(&checkpoint.models).zip(&checkpoint.layers) {
        let x = if options.use_fdm {
            let cb = model
                .codebook
                .as_ref()
                .ok_or_else(|| Error::contract("matching requested but the checkpoint has no codebook"))?;
            fdm_apply(&x, cb, options.fdm_alpha)?
        } else {
            x
        };
        let x = if ablation.use_constraintor {
            model.constraintor.constrain(&x)?
        } else {
            x
        };
        let (z, log_det) = model.flow.forward(&x)?;
        let mut lik = Vec::with_capacity(z.rows());
        let mut cls = Vec::with_capacity(z.rows());
        for (r, &ld) in log_det.iter().enumerate() {
            let row: Vec<f64> = z.row(r).iter().map(|&v| v as f64).collect();
            let lp_n = log_prob(&row, ld, Base::Normal, checkpoint.config.a);
            let lp_a = log_prob(&row, ld, Base::Abnormal, checkpoint.config.a);
            lik.push(likelihood_score(&row, ld));
            cls.push(classification_score(lp_n, lp_a));
        }
        likelihood.push(Grid::new(spec.height, spec.width, lik)?);
        classification.push(Grid::new(spec.height, spec.width, cls)?);
    }
    merge_maps(&likelihood, &classification, extent.0, extent.1, options.use_mac)
}

/// `RSSM` file: magic, version u32, H0 u32, W0 u32, n u32, then n grids
/// of H0·W0 f32 values.
pub fn write_score_maps(path: impl AsRef<Path>, maps: &[ScoreMap]) -> Result<()> {
    let (h, w) = maps
        .first()
        .map(|m| (m.grid.height, m.grid.width))
        .unwrap_or((0, 0));
    let mut out = Vec::new();
    out.extend_from_slice(SCORE_MAP_MAGIC);
    out.extend_from_slice(&SCORE_MAP_VERSION.to_le_bytes());
    put_u32(&mut out, h, "height")?;
    put_u32(&mut out, w, "width")?;
    put_u32(&mut out, maps.len(), "map count")?;
    for m in maps {
        if (m.grid.height, m.grid.width) != (h, w) {
            return Err(Error::dim("score maps differ in extent"));
        }
        let values: Vec<f32> = m.grid.values.iter().map(|&v| v as f32).collect();
        put_f32s(&mut out, &values);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads an `RSSM` file back as grids.
pub fn read_score_maps(path: impl AsRef<Path>) -> Result<Vec<Grid>> {
    let bytes = fs::read(path)?;
    let mut cur = Cursor::new(&bytes);
    if cur.take(4)? != SCORE_MAP_MAGIC {
        return Err(Error::Format("bad magic, expected \"RSSM\"".into()));
    }
    let version = cur.u32()?;
    if version != SCORE_MAP_VERSION {
        return Err(Error::Format(format!("unsupported score map version {version}")));
    }
    let (h, w, n) = (cur.usize()?, cur.usize()?, cur.usize()?);
    let grids = (0..n)
        .map(|_| Grid::new(h, w, cur.f32s(h * w)?.into_iter().map(f64::from).collect()))
        .collect::<Result<_>>()?;
    cur.finish()?;
    Ok(grids)
}

#[cfg(test)]
mod tests {
    use super::super::{draw_references, train};
    use super::*;
    use crate::features::{synth_dataset, LayerSpec, SynthSpec};

    fn data(seed: u64) -> FeatureDataset {
        synth_dataset(&SynthSpec {
            n_classes: 2,
            images_per_class: 12,
            anomaly_fraction: 0.25,
            image_height: 8,
            image_width: 8,
            layers: vec![LayerSpec::new(4, 4, 4), LayerSpec::new(2, 2, 6)],
            class_separation: 3.0,
            anomaly_magnitude: 3.0,
            seed,
        })
        .unwrap()
    }

    fn checkpoint() -> Checkpoint {
        let cfg = RunConfig {
            epochs: 1,
            batch_size: 8,
            lr: 1e-3,
            codebook_size: 16,
            coupling_blocks: 2,
            n_fs: 2,
            ..RunConfig::default()
        };
        train(&data(1), &cfg).unwrap().checkpoint
    }

    #[test]
    fn references_are_never_scored() {
        let ck = checkpoint();
        let ds = data(2);
        let refs = draw_references(&ds, 2, 5).unwrap();
        let ev = evaluate(&ck, &ds, &refs).unwrap();
        assert_eq!(ev.scored.len(), ds.len() - refs.len());
        assert!(ev.scored.iter().all(|i| !refs.contains(i)));
        assert_eq!(ev.maps.len(), ev.scored.len());
        for m in &ev.maps {
            assert_eq!((m.grid.height, m.grid.width), (8, 8));
            assert_eq!(m.image_score, m.grid.values.iter().copied().fold(f64::MIN, f64::max));
        }
        let r = ev.report;
        for v in [r.image_auroc, r.pixel_auroc, r.pro_03] {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn evaluation_survives_a_checkpoint_round_trip() {
        let ck = checkpoint();
        let ds = data(2);
        let refs = draw_references(&ds, 2, 5).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(evaluate(&ck, &ds, &refs).unwrap(), evaluate(&back, &ds, &refs).unwrap());
    }

    #[test]
    fn missing_class_pool_is_a_contract_error() {
        let ck = checkpoint();
        let ds = data(2);
        let refs: Vec<usize> = draw_references(&ds, 2, 5)
            .unwrap()
            .into_iter()
            .filter(|&i| ds.images[i].class_id == 0)
            .collect();
        assert!(matches!(evaluate(&ck, &ds, &refs), Err(Error::Contract(_))));
    }

    #[test]
    fn score_map_file_round_trips() {
        let ck = checkpoint();
        let ds = data(2);
        let refs = draw_references(&ds, 2, 5).unwrap();
        let ev = evaluate(&ck, &ds, &refs).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("maps.rssm");
        write_score_maps(&path, &ev.maps).unwrap();
        let grids = read_score_maps(&path).unwrap();
        assert_eq!(grids.len(), ev.maps.len());
        for (g, m) in grids.iter().zip(&ev.maps) {
            for (a, b) in g.values.iter().zip(&m.grid.values) {
                assert_eq!(*a, *b as f32 as f64);
            }
        }
    }
}
