//! Single-file checkpoints: magic, version, a JSON header, then little-endian
//! `f32` blobs (parameters, then optimizer velocity) in header order.

use std::path::Path;

use findkit_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{io_err, Error, Result};
use crate::taskkit::{Mixer, StreamCursor};
use crate::textenc::Vocabulary;

pub const MAGIC: &[u8; 8] = b"FINDKIT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub group: String,
    pub decay: bool,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub step: usize,
    pub config_hash: String,
    /// Canonical `key = value` dump of the training config.
    pub config: String,
    /// Vocabulary file contents (`token<TAB>id` lines).
    pub vocab: String,
    /// Root of every random stream; with `step` it fixes all later draws.
    pub seed: u64,
    pub mix_weights: Vec<usize>,
    pub batch_size: usize,
    pub streams: Vec<StreamCursor>,
    pub params: Vec<ParamEntry>,
    pub has_velocity: bool,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore<f32>,
    pub velocity: Option<Vec<Tensor<f32>>>,
}

impl Checkpoint {
    pub fn new(
        step: usize,
        config: &TrainConfig,
        vocab: &Vocabulary,
        params: &ParamStore<f32>,
        velocity: Option<&Vec<Tensor<f32>>>,
        mixer: &Mixer,
    ) -> Self {
        let entries = params
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                group: p.group.clone(),
                decay: p.decay,
                shape: p.value.shape().to_vec(),
            })
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                version: FORMAT_VERSION,
                step,
                config_hash: config.hash(),
                config: config.to_kv(),
                vocab: vocab.to_text(),
                seed: config.seed,
                mix_weights: mixer.spec().weights.clone(),
                batch_size: mixer.spec().batch_size,
                streams: mixer.state().to_vec(),
                params: entries,
                has_velocity: velocity.is_some(),
            },
            params: params.clone(),
            velocity: velocity.cloned(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(header.len() + 4 * self.params.num_elements() * 2 + 20);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.header.version.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, p) in self.params.iter() {
            p.value.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        for v in self.velocity.iter().flatten() {
            v.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a findkit checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.version != version {
            return Err(bad("header version disagrees with file version"));
        }
        let mut pos = 20 + hlen;
        let mut read = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
            pos += 4 * n;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Ok(Tensor::from_vec(shape, data))
        };
        let mut params = ParamStore::new();
        for e in &header.params {
            params.add(e.name.clone(), &e.group, e.decay, read(&e.shape)?);
        }
        let velocity = if header.has_velocity {
            Some(header.params.iter().map(|e| read(&e.shape)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        if pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after tensor data", bytes.len() - pos)));
        }
        Ok(Checkpoint { header, params, velocity })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(io_err(path))?)
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::parse(&self.header.config)
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::parse(&self.header.vocab)
    }

    /// Overwrites `target` values; names and shapes must agree one to one.
    pub fn copy_params_into(&self, target: &mut ParamStore<f32>) -> Result<()> {
        if target.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                target.len()
            )));
        }
        for ((_, dst), (_, src)) in target.iter_mut().zip(self.params.iter()) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: model {} {:?} vs checkpoint {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}
