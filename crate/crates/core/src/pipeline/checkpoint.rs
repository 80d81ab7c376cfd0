//! Trained parameters and their `RSCK` file codec:
//!
//! ```text
//! magic "RSCK" | version u32 | config length u32 | config text (UTF-8)
//! L u32 | L × (H_l, W_l, C_l) u32
//! per layer, blocks of (count u32, count × f32):
//!   constraintor: W1, b1, γ, β, running mean, running var, W2, b2
//!   flow, per coupling block: hidden W, hidden b, output W, output b,
//!                             permutation, fixed scale
//!   codebook: K·C values (count 0 when absent)
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use crate::codec::{put_f32s, put_u32, Cursor};
use crate::constraintor::Constraintor;
use crate::error::{Error, Result};
use crate::features::LayerSpec;
use crate::flow::Flow;
use crate::tensor::Tensor;
use crate::vq::Codebook;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Learned components of one feature layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerModel {
    pub constraintor: Constraintor,
    pub flow: Flow,
    /// Present once the codebook has been initialized.
    pub codebook: Option<Codebook>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub layers: Vec<LayerSpec>,
    pub models: Vec<LayerModel>,
}

impl Checkpoint {
    /// Freshly initialized parameters, layer by layer from one generator.
    pub fn init<R: Rng>(config: &RunConfig, layers: &[LayerSpec], rng: &mut R) -> Result<Self> {
        config.validate()?;
        let models = layers
            .iter()
            .map(|spec| {
                Ok(LayerModel {
                    constraintor: Constraintor::new(spec.channels, rng),
                    flow: Flow::new(spec.channels, config.coupling_blocks, config.clamp, rng)?,
                    codebook: None,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            layers: layers.to_vec(),
            models,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = self.config.to_text();
        put_u32(&mut out, text.len(), "config length")?;
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, self.layers.len(), "layer count")?;
        for spec in &self.layers {
            for v in [spec.height, spec.width, spec.channels] {
                put_u32(&mut out, v, "layer extent")?;
            }
        }
        let block = |out: &mut Vec<u8>, values: &[f32]| -> Result<()> {
            put_u32(out, values.len(), "block length")?;
            put_f32s(out, values);
            Ok(())
        };
        for model in &self.models {
            let c = &model.constraintor;
            for t in [
                &c.first.weight,
                &c.first.bias,
                &c.norm.gamma,
                &c.norm.beta,
                &c.norm.running_mean,
                &c.norm.running_var,
                &c.second.weight,
                &c.second.bias,
            ] {
                block(&mut out, t.data())?;
            }
            for b in &model.flow.blocks {
                block(&mut out, b.hidden.weight.data())?;
                block(&mut out, b.hidden.bias.data())?;
                block(&mut out, b.output.weight.data())?;
                block(&mut out, b.output.bias.data())?;
                let perm: Vec<f32> = b.permutation.iter().map(|&p| p as f32).collect();
                block(&mut out, &perm)?;
                block(&mut out, b.scale.data())?;
            }
            match &model.codebook {
                Some(cb) => block(&mut out, cb.embeddings.data())?,
                None => block(&mut out, &[])?,
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let magic = cur.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected \"RSCK\"",
                String::from_utf8_lossy(magic)
            )));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = cur.usize()?;
        let text = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| Error::Format("config snapshot is not UTF-8".into()))?;
        let config = RunConfig::parse(text)?;
        let n_layers = cur.usize()?;
        let mut layers = Vec::with_capacity(n_layers.min(64));
        for _ in 0..n_layers {
            let (h, w, c) = (cur.usize()?, cur.usize()?, cur.usize()?);
            layers.push(LayerSpec::new(h, w, c));
        }
        // shapes are fixed by the config, so a zero-seeded init gives the
        // skeleton to fill
        let mut skeleton = Self::init(&config, &layers, &mut ChaCha8Rng::seed_from_u64(0))?;
        for model in &mut skeleton.models {
            let c = &mut model.constraintor;
            for t in [
                &mut c.first.weight,
                &mut c.first.bias,
                &mut c.norm.gamma,
                &mut c.norm.beta,
                &mut c.norm.running_mean,
                &mut c.norm.running_var,
                &mut c.second.weight,
                &mut c.second.bias,
            ] {
                fill(&mut cur, t)?;
            }
            let channels = model.flow.channels;
            for b in &mut model.flow.blocks {
                fill(&mut cur, &mut b.hidden.weight)?;
                fill(&mut cur, &mut b.hidden.bias)?;
                fill(&mut cur, &mut b.output.weight)?;
                fill(&mut cur, &mut b.output.bias)?;
                let mut perm = Tensor::<f32>::zeros(&[channels]);
                fill(&mut cur, &mut perm)?;
                b.permutation = perm.data().iter().map(|&p| p as usize).collect();
                let mut sorted = b.permutation.clone();
                sorted.sort_unstable();
                if sorted != (0..channels).collect::<Vec<_>>() {
                    return Err(Error::Format(format!("invalid channel permutation near byte {}", cur.pos)));
                }
                fill(&mut cur, &mut b.scale)?;
            }
            let n = cur.usize()?;
            if n > 0 {
                if n % channels != 0 {
                    return Err(Error::Format(format!("codebook of {n} values over {channels} channels")));
                }
                let data = cur.f32s(n)?;
                model.codebook = Some(Codebook::new(Tensor::matrix(n / channels, channels, data)?)?);
            }
        }
        cur.finish()?;
        Ok(skeleton)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn fill(cur: &mut Cursor<'_>, target: &mut Tensor<f32>) -> Result<()> {
    let at = cur.pos;
    let n = cur.usize()?;
    if n != target.numel() {
        return Err(Error::Format(format!(
            "block at byte {at} holds {n} values, expected {}",
            target.numel()
        )));
    }
    let values = cur.f32s(n)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format(format!("non-finite parameter in block at byte {at}")));
    }
    target.data_mut().copy_from_slice(&values);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let cfg = RunConfig {
            coupling_blocks: 3,
            ..RunConfig::default()
        };
        let layers = [LayerSpec::new(4, 4, 3), LayerSpec::new(2, 2, 6)];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ck = Checkpoint::init(&cfg, &layers, &mut rng).unwrap();
        let rows = Tensor::matrix(5, 6, (0..30).map(|v| v as f32 * 0.1).collect()).unwrap();
        ck.models[1].codebook = Some(Codebook::sample_from(&rows, 4, &mut rng).unwrap());
        ck.models[0].flow.blocks[1].output.bias.data_mut()[0] = 0.25;
        ck
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"RSCK");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Checkpoint::from_bytes(&long), Err(Error::Format(_))));
    }
}
