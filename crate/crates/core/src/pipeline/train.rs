use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::checkpoint::{Checkpoint, LayerModel};
use super::config::RunConfig;
use super::{class_pools, layer_inputs, select_references};
use crate::constraintor::{
    ai_occ_loss_var, bi_occ_loss_var, pseudo_huber_var, weight_regularizer_var, HypersphereConfig,
};
use crate::error::{Error, Result};
use crate::features::{downsample_mask, FeatureDataset};
use crate::flow::nf_total_loss_var;
use crate::tensor::{Adam, BatchStats, Tape, Tensor};
use crate::vq::{vq_loss_var, Codebook};

/// Mean per-batch losses of one epoch, summed over layers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochLog {
    /// One-based.
    pub epoch: usize,
    pub lr: f64,
    /// Two-sphere loss, with the anomaly-invariant term when enabled.
    pub occ: f64,
    pub reg: f64,
    pub ml: f64,
    pub focal: f64,
    pub vq: f64,
    pub total: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!(
            "epoch {} lr={:e} total={:.6} occ={:.6} reg={:.6} ml={:.6} focal={:.6} vq={:.6}",
            self.epoch, self.lr, self.total, self.occ, self.reg, self.ml, self.focal, self.vq
        )
    }

    fn accumulate(&mut self, other: &EpochLog) {
        self.occ += other.occ;
        self.reg += other.reg;
        self.ml += other.ml;
        self.focal += other.focal;
        self.vq += other.vq;
        self.total += other.total;
    }

    fn scaled(mut self, factor: f64) -> Self {
        for v in [
            &mut self.occ,
            &mut self.reg,
            &mut self.ml,
            &mut self.focal,
            &mut self.vq,
            &mut self.total,
        ] {
            *v *= factor;
        }
        self
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
    /// Training-time reference images per class. They never enter a batch.
    pub references: BTreeMap<u32, Vec<usize>>,
}

impl TrainOutcome {
    pub fn reference_indices(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.references.values().flatten().copied().collect();
        all.sort_unstable();
        all
    }
}

/// Layer inputs and downsampled position labels of one training image.
struct Prepared {
    maps: Vec<Tensor<f32>>,
    labels: Vec<Vec<u8>>,
}

struct LayerStep {
    grads: Vec<Tensor<f32>>,
    stats: Option<BatchStats>,
    log: EpochLog,
}

pub fn train(dataset: &FeatureDataset, config: &RunConfig) -> Result<TrainOutcome> {
    train_with(dataset, config, |_| {})
}

/// Trains every layer model jointly with one optimizer. `on_epoch` sees
/// each epoch's log as soon as it is complete.
pub fn train_with<F: FnMut(&EpochLog)>(
    dataset: &FeatureDataset,
    config: &RunConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome> {
    config.validate()?;
    dataset.validate()?;
    if !dataset.images.iter().any(|im| im.is_normal()) {
        return Err(Error::contract("training data holds no normal image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let references = select_references(dataset, config.n_fs, &mut rng)?;
    let mut checkpoint = Checkpoint::init(config, &dataset.layers, &mut rng)?;

    let reserved: BTreeSet<usize> = references.values().flatten().copied().collect();
    let flat: Vec<usize> = reserved.iter().copied().collect();
    let pools = class_pools(dataset, &flat)?;
    let mut order: Vec<usize> = (0..dataset.len()).filter(|i| !reserved.contains(i)).collect();
    if order.is_empty() {
        return Err(Error::contract("no training images left after reserving references"));
    }

    let prepared: Vec<Option<Prepared>> = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            if reserved.contains(&i) {
                return Ok(None);
            }
            let image = &dataset.images[i];
            let pool = config.ablation.use_residual.then(|| &pools[&image.class_id]);
            let maps = layer_inputs(image, pool)?;
            let labels = dataset
                .layers
                .iter()
                .map(|s| downsample_mask(&image.mask, (dataset.height, dataset.width), (s.height, s.width)))
                .collect::<Result<_>>()?;
            Ok(Some(Prepared { maps, labels }))
        })
        .collect::<Result<_>>()?;

    order.shuffle(&mut rng);
    if config.ablation.use_fdm {
        let first: Vec<usize> = order.iter().take(config.batch_size).copied().collect();
        for (l, model) in checkpoint.models.iter_mut().enumerate() {
            let (rows, _) = stack(&prepared, &first, l)?;
            model.codebook = Some(Codebook::sample_from(&rows, config.codebook_size, &mut rng)?);
        }
    }

    let schedule = config.schedule();
    let mut adam = Adam::new(config.adam());
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if epoch > 0 {
            order.shuffle(&mut rng);
        }
        let lr = schedule.lr_at(epoch);
        adam.set_lr(lr);
        let mut log = EpochLog::default();
        let batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        for batch in &batches {
            let steps: Vec<LayerStep> = checkpoint
                .models
                .par_iter()
                .enumerate()
                .map(|(l, model)| {
                    let (rows, labels) = stack(&prepared, batch, l)?;
                    layer_step(model, config, rows, &labels)
                })
                .collect::<Result<_>>()?;
            let mut params = Vec::new();
            let mut grads = Vec::new();
            for (model, step) in checkpoint.models.iter_mut().zip(steps) {
                if let Some(stats) = &step.stats {
                    model.constraintor.update_running(stats);
                }
                log.accumulate(&step.log);
                grads.extend(step.grads);
                params.extend(trainable(model, config));
            }
            adam.step(&mut params, &grads)?;
        }
        let mut log = log.scaled(1.0 / batches.len() as f64);
        log.epoch = epoch + 1;
        log.lr = lr;
        on_epoch(&log);
        history.push(log);
    }
    Ok(TrainOutcome {
        checkpoint,
        history,
        references,
    })
}

/// Rows and labels of layer `l` over the given images, in order.
fn stack(prepared: &[Option<Prepared>], images: &[usize], l: usize) -> Result<(Tensor<f32>, Vec<u8>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut cols = 0;
    for &i in images {
        let p = prepared[i]
            .as_ref()
            .ok_or_else(|| Error::contract(format!("image {i} is a reference image")))?;
        cols = p.maps[l].cols();
        data.extend_from_slice(p.maps[l].data());
        labels.extend_from_slice(&p.labels[l]);
    }
    Ok((Tensor::matrix(labels.len(), cols, data)?, labels))
}

/// Parameters updated by the optimizer, in the order gradients are listed.
fn trainable<'m>(model: &'m mut LayerModel, config: &RunConfig) -> Vec<&'m mut Tensor<f32>> {
    let mut out = Vec::new();
    if config.ablation.use_constraintor {
        out.extend(model.constraintor.params_mut());
    }
    out.extend(model.flow.params_mut());
    if config.ablation.use_fdm {
        if let Some(cb) = model.codebook.as_mut() {
            out.push(&mut cb.embeddings);
        }
    }
    out
}

fn rows_of(x: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let data = idx.iter().flat_map(|&r| x.row(r).iter().copied()).collect();
    Tensor::matrix(idx.len(), x.cols(), data)
}

/// Losses and gradients of one layer over one batch.
fn layer_step(model: &LayerModel, config: &RunConfig, rows: Tensor<f32>, labels: &[u8]) -> Result<LayerStep> {
    let tape = Tape::new();
    let normal: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let abnormal: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let x = tape.constant(rows.clone());
    let mut log = EpochLog::default();
    let mut total = tape.scalar(0.0f32);
    let mut param_vars = Vec::new();
    let mut stats = None;

    let flow_input = if config.ablation.use_constraintor {
        let cvars = model.constraintor.bind(&tape, true);
        param_vars.extend(cvars.params());
        let (y, batch_stats) = model.constraintor.forward_train(&cvars, x)?;
        stats = Some(batch_stats);
        if !normal.is_empty() {
            let cfg = HypersphereConfig::dynamic(&rows_of(&rows, &abnormal)?, config.t, config.lambda)?;
            let d = pseudo_huber_var(y.gather(0, &normal)?)?;
            let occ = if config.ai_occ_active() && !abnormal.is_empty() {
                ai_occ_loss_var(d, Some((x.gather(0, &abnormal)?, y.gather(0, &abnormal)?)), &cfg)?
            } else {
                bi_occ_loss_var(d, &cfg)?
            };
            log.occ = occ.value().item()? as f64;
            total = total.add(occ)?;
        }
        let reg = weight_regularizer_var(&tape, &cvars.weights(), config.lambda)?;
        log.reg = reg.value().item()? as f64;
        total = total.add(reg)?;
        // the flow sees constrained features as fixed inputs
        y.detach()
    } else {
        x
    };

    let fvars = model.flow.bind(&tape, true);
    param_vars.extend(fvars.params());
    let (z, log_det) = model.flow.forward_var(&fvars, flow_input)?;
    let (nf, ml, focal) = nf_total_loss_var(z, log_det, labels, config.a, config.focal_gamma)?;
    log.ml = ml.value().item()? as f64;
    log.focal = focal.value().item()? as f64;
    total = total.add(nf)?;

    if config.ablation.use_fdm {
        let cb = model
            .codebook
            .as_ref()
            .ok_or_else(|| Error::contract("codebook used before initialization"))?;
        let cb_var = tape.param(cb.embeddings.clone());
        param_vars.push(cb_var);
        let vq = vq_loss_var(x, cb_var, config.vq_beta)?;
        log.vq = vq.value().item()? as f64;
        total = total.add(vq)?;
    }

    log.total = total.value().item()? as f64;
    if !log.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {}", log.total)));
    }
    let grads = total.backward()?;
    Ok(LayerStep {
        grads: param_vars.iter().map(|v| grads.wrt(v)).collect(),
        stats,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{synth_dataset, LayerSpec, SynthSpec};

    fn data() -> FeatureDataset {
        synth_dataset(&SynthSpec {
            n_classes: 2,
            images_per_class: 12,
            anomaly_fraction: 0.25,
            image_height: 8,
            image_width: 8,
            layers: vec![LayerSpec::new(4, 4, 4), LayerSpec::new(2, 2, 6)],
            class_separation: 3.0,
            anomaly_magnitude: 2.0,
            seed: 11,
        })
        .unwrap()
    }

    fn small() -> RunConfig {
        RunConfig {
            epochs: 2,
            batch_size: 8,
            lr: 1e-3,
            codebook_size: 16,
            coupling_blocks: 2,
            n_fs: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_epochs_gives_initialized_model() {
        let cfg = RunConfig { epochs: 0, ..small() };
        let out = train(&data(), &cfg).unwrap();
        assert!(out.history.is_empty());
        assert!(out.checkpoint.models.iter().all(|m| m.codebook.as_ref().unwrap().len() == 16));
        assert_eq!(out.reference_indices().len(), 4);
    }

    #[test]
    fn training_is_deterministic_and_moves_parameters() {
        let ds = data();
        let a = train(&ds, &small()).unwrap();
        let b = train(&ds, &small()).unwrap();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
        assert_eq!(a.history, b.history);
        let init = train(&ds, &RunConfig { epochs: 0, ..small() }).unwrap();
        assert_ne!(init.checkpoint, a.checkpoint);
        assert!(a.history.iter().all(|h| h.total.is_finite() && h.occ > 0.0 && h.vq > 0.0));
    }

    #[test]
    fn ablated_stages_stay_untouched() {
        let ds = data();
        let cfg = RunConfig {
            ablation: super::super::Ablation::NONE,
            ..small()
        };
        let init = train(&ds, &RunConfig { epochs: 0, ..cfg.clone() }).unwrap();
        let out = train(&ds, &cfg).unwrap();
        for (a, b) in init.checkpoint.models.iter().zip(&out.checkpoint.models) {
            assert_eq!(a.constraintor, b.constraintor);
            assert!(b.codebook.is_none());
            assert_ne!(a.flow, b.flow);
        }
        assert!(out.history.iter().all(|h| h.occ == 0.0 && h.vq == 0.0));
    }

    #[test]
    fn class_without_normal_images_is_rejected() {
        let mut ds = data();
        for im in &mut ds.images {
            if im.class_id == 1 {
                im.label = 1;
                im.mask[0] = 1;
            }
        }
        assert!(matches!(train(&ds, &small()), Err(Error::Contract(_))));
    }
}
