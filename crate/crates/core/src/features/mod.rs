//! Multi-layer feature datasets: the in-memory model, the `RSFD` binary
//! format, few-shot reference pools, mask downsampling and a synthetic
//! generator.

mod format;
mod synth;

pub use format::{read_dataset, read_dataset_from, write_dataset, write_dataset_to, DATASET_MAGIC, DATASET_VERSION};
pub use synth::{synth_dataset, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Extents of one feature layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl LayerSpec {
    pub const fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

/// One image: label, full-resolution mask, and one `positions × channels`
/// feature map per layer (row-major positions, channel fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub class_id: u32,
    /// 0 normal, 1 abnormal.
    pub label: u8,
    pub mask: Vec<u8>,
    pub features: Vec<Tensor<f32>>,
}

impl ImageRecord {
    pub fn is_normal(&self) -> bool {
        self.label == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureDataset {
    pub height: usize,
    pub width: usize,
    pub layers: Vec<LayerSpec>,
    pub images: Vec<ImageRecord>,
}

impl FeatureDataset {
    pub fn new(height: usize, width: usize, layers: Vec<LayerSpec>) -> Self {
        Self {
            height,
            width,
            layers,
            images: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Sorted distinct class ids.
    pub fn class_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.images.iter().map(|im| im.class_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// A dataset holding only the images of the listed classes, order kept.
    pub fn filter_classes(&self, classes: &[u32]) -> Self {
        Self {
            height: self.height,
            width: self.width,
            layers: self.layers.clone(),
            images: self
                .images
                .iter()
                .filter(|im| classes.contains(&im.class_id))
                .cloned()
                .collect(),
        }
    }

    /// A dataset holding the images at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let images = indices
            .iter()
            .map(|&i| {
                self.images
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::contract(format!("image index {i} out of range")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            height: self.height,
            width: self.width,
            layers: self.layers.clone(),
            images,
        })
    }

    /// Checks every structural invariant.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Format("dataset declares zero feature layers".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Format("image extent must be positive".into()));
        }
        for (l, spec) in self.layers.iter().enumerate() {
            if spec.height == 0 || spec.width == 0 || spec.channels == 0 {
                return Err(Error::Format(format!("layer {l} has a zero extent")));
            }
        }
        for (i, image) in self.images.iter().enumerate() {
            self.validate_image(i, image)?;
        }
        Ok(())
    }

    pub(crate) fn validate_image(&self, index: usize, image: &ImageRecord) -> Result<()> {
        let fail = |message: String| Error::Validation { index, message };
        if image.label > 1 {
            return Err(fail(format!("label {} is not 0 or 1", image.label)));
        }
        if image.mask.len() != self.height * self.width {
            return Err(fail(format!(
                "mask holds {} pixels, expected {}",
                image.mask.len(),
                self.height * self.width
            )));
        }
        if let Some(v) = image.mask.iter().find(|&&v| v > 1) {
            return Err(fail(format!("mask value {v} is not binary")));
        }
        let any_anomalous = image.mask.contains(&1);
        if any_anomalous != (image.label == 1) {
            return Err(fail(format!(
                "label {} disagrees with mask (anomalous pixels present: {any_anomalous})",
                image.label
            )));
        }
        if image.features.len() != self.layers.len() {
            return Err(fail(format!(
                "{} feature blocks, header declares {} layers",
                image.features.len(),
                self.layers.len()
            )));
        }
        for (l, (map, spec)) in image.features.iter().zip(&self.layers).enumerate() {
            if map.shape() != [spec.positions(), spec.channels] {
                return Err(fail(format!(
                    "layer {l} map has shape {:?}, expected [{}, {}]",
                    map.shape(),
                    spec.positions(),
                    spec.channels
                )));
            }
            if !map.is_finite() {
                return Err(fail(format!("layer {l} contains non-finite values")));
            }
        }
        Ok(())
    }
}

/// Per-layer flat matrices of normal reference vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferencePool {
    /// One `rows × C_l` matrix per layer.
    pub layers: Vec<Tensor<f32>>,
    /// Dataset indices of the images the pool was built from.
    pub image_indices: Vec<usize>,
}

impl ReferencePool {
    pub fn layer(&self, l: usize) -> &Tensor<f32> {
        &self.layers[l]
    }

    pub fn total_rows(&self) -> usize {
        self.layers.iter().map(|t| t.rows()).sum()
    }
}

/// Stacks every position of every referenced image into per-layer pools,
/// in (image, row, column) order.
pub fn build_reference_pool(dataset: &FeatureDataset, indices: &[usize]) -> Result<ReferencePool> {
    if indices.is_empty() {
        return Err(Error::contract("reference pool needs at least one image"));
    }
    let mut seen = indices.to_vec();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::contract("reference indices must be distinct"));
    }
    for &i in indices {
        let image = dataset
            .images
            .get(i)
            .ok_or_else(|| Error::contract(format!("reference index {i} out of range")))?;
        if !image.is_normal() {
            return Err(Error::contract(format!(
                "reference image {i} is labeled abnormal"
            )));
        }
    }
    let layers = dataset
        .layers
        .iter()
        .enumerate()
        .map(|(l, spec)| {
            let mut data = Vec::with_capacity(indices.len() * spec.positions() * spec.channels);
            for &i in indices {
                data.extend_from_slice(dataset.images[i].features[l].data());
            }
            Tensor::matrix(indices.len() * spec.positions(), spec.channels, data)
        })
        .collect::<Result<_>>()?;
    Ok(ReferencePool {
        layers,
        image_indices: indices.to_vec(),
    })
}

/// Block partition bounds `[start, end)` of output cell `i` when `source`
/// cells are split into `target` blocks.
pub(crate) fn block_bounds(i: usize, source: usize, target: usize) -> (usize, usize) {
    (i * source / target, (i + 1) * source / target)
}

/// Max-pools a binary `source.0 × source.1` mask onto a coarser grid: an
/// output cell is 1 iff any pixel of its block is 1.
pub fn downsample_mask(
    mask: &[u8],
    source: (usize, usize),
    target: (usize, usize),
) -> Result<Vec<u8>> {
    let (h0, w0) = source;
    let (h, w) = target;
    if mask.len() != h0 * w0 {
        return Err(Error::dim(format!(
            "mask holds {} pixels, expected {h0}×{w0}",
            mask.len()
        )));
    }
    if h > h0 || w > w0 || h == 0 || w == 0 {
        return Err(Error::contract(format!(
            "cannot downsample {h0}×{w0} to {h}×{w}"
        )));
    }
    let mut out = vec![0u8; h * w];
    for i in 0..h {
        let (r0, r1) = block_bounds(i, h0, h);
        for j in 0..w {
            let (c0, c1) = block_bounds(j, w0, w);
            let hit = (r0..r1).any(|r| mask[r * w0 + c0..r * w0 + c1].contains(&1));
            out[i * w + j] = u8::from(hit);
        }
    }
    Ok(out)
}
