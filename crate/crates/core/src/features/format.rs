//! `RSFD` feature-file codec. Little-endian throughout:
//!
//! ```text
//! magic "RSFD" | version u32 = 1 | H0 u32 | W0 u32 | L u32 | L × (H_l, W_l, C_l) u32
//! n_images u32 | per image: class_id u32, label u8, mask H0·W0 u8,
//!                           L blocks of H_l·W_l·C_l f32 (channel fastest)
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{FeatureDataset, ImageRecord, LayerSpec};
use crate::codec::Cursor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"RSFD";
pub const DATASET_VERSION: u32 = 1;

pub fn write_dataset(dataset: &FeatureDataset, path: impl AsRef<Path>) -> Result<()> {
    dataset.validate()?;
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset_to(dataset, &mut out)?;
    out.flush()?;
    Ok(())
}

/// Serializes without touching the filesystem. Does not validate.
pub fn write_dataset_to<W: Write>(dataset: &FeatureDataset, out: &mut W) -> Result<()> {
    let u32_of = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))
    };
    out.write_all(DATASET_MAGIC)?;
    out.write_all(&DATASET_VERSION.to_le_bytes())?;
    out.write_all(&u32_of(dataset.height, "height")?.to_le_bytes())?;
    out.write_all(&u32_of(dataset.width, "width")?.to_le_bytes())?;
    out.write_all(&u32_of(dataset.layers.len(), "layer count")?.to_le_bytes())?;
    for spec in &dataset.layers {
        for v in [spec.height, spec.width, spec.channels] {
            out.write_all(&u32_of(v, "layer extent")?.to_le_bytes())?;
        }
    }
    out.write_all(&u32_of(dataset.images.len(), "image count")?.to_le_bytes())?;
    let mut buf = Vec::new();
    for image in &dataset.images {
        out.write_all(&image.class_id.to_le_bytes())?;
        out.write_all(&[image.label])?;
        out.write_all(&image.mask)?;
        for map in &image.features {
            buf.clear();
            for v in map.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
    }
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    read_dataset_from(&bytes)
}

/// Parses and validates an in-memory `RSFD` image.
pub fn read_dataset_from(bytes: &[u8]) -> Result<FeatureDataset> {
    let mut cur = Cursor::new(bytes);
    let magic = cur.take(4)?;
    if magic != DATASET_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"RSFD\"",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = cur.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let height = cur.usize()?;
    let width = cur.usize()?;
    let n_layers = cur.usize()?;
    let mut layers = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let h = cur.usize()?;
        let w = cur.usize()?;
        let c = cur.usize()?;
        layers.push(LayerSpec::new(h, w, c));
    }
    let mut dataset = FeatureDataset::new(height, width, layers);
    dataset.validate()?;
    let n_images = cur.usize()?;
    for index in 0..n_images {
        let class_id = cur.u32()?;
        let label = cur.take(1)?[0];
        let mask = cur.take(height * width)?.to_vec();
        let mut features = Vec::with_capacity(dataset.layers.len());
        for spec in &dataset.layers {
            let n = spec.positions() * spec.channels;
            let raw = cur.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            features.push(Tensor::matrix(spec.positions(), spec.channels, data)?);
        }
        let image = ImageRecord {
            class_id,
            label,
            mask,
            features,
        };
        dataset.validate_image(index, &image)?;
        dataset.images.push(image);
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last image",
            bytes.len() - cur.pos
        )));
    }
    Ok(dataset)
}
