//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `MONECKPT`, a little-endian `u64` header length,
//! a JSON header (format version, payload dtype, model config, tensor names
//! and shapes, training metadata), then every tensor's values in header
//! order as little-endian `f32` or `f64`.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{stream_seed, CapacityMode, Stream};
use crate::error::{Error, Result};
use crate::nested::{ModelConfig, ModelParams};
use crate::routing::SolverOptions;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MONECKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    #[default]
    F64,
}

/// What produced a checkpoint.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// `init`, `pretrain` or `finetune`.
    #[serde(default)]
    pub stage: String,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Capacity the model was fine-tuned at.
    #[serde(default)]
    pub capacity: Option<CapacityMode>,
    #[serde(default)]
    pub solver: Option<SolverOptions>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    dtype: DType,
    config: ModelConfig,
    tensors: Vec<Entry>,
    meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ModelParams, meta: CheckpointMeta) -> Self {
        Self { config, params, meta }
    }

    /// Freshly initialized weights, drawn from the run's init stream.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, Stream::Init));
        let meta = CheckpointMeta { stage: "init".into(), seed: Some(seed), ..Default::default() };
        Self::new(config, ModelParams::init(&config, &mut rng), meta)
    }

    pub fn to_bytes(&self, dtype: DType) -> Result<Vec<u8>> {
        let named = self.params.named_tensors();
        let header = Header {
            version: VERSION,
            dtype,
            config: self.config,
            tensors: named.iter().map(|(n, t)| Entry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = MAGIC.to_vec();
        out.extend((json.len() as u64).to_le_bytes());
        out.extend(json);
        for (_, t) in named {
            for &v in t.data() {
                match dtype {
                    DType::F32 => out.extend((v as f32).to_le_bytes()),
                    DType::F64 => out.extend(v.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
        let json = bytes
            .get(16..16usize.saturating_add(hlen))
            .ok_or_else(|| Error::Format("checkpoint truncated in header".into()))?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.version != VERSION {
            return Err(Error::Format(format!("checkpoint version {} unsupported", header.version)));
        }
        header.config.validate()?;

        // Shapes come from the config; the header must agree with them.
        let mut params = ModelParams::init(&header.config, &mut ChaCha8Rng::seed_from_u64(0));
        let expected = params.named_tensors();
        if expected.len() != header.tensors.len()
            || expected.iter().zip(&header.tensors).any(|((n, t), e)| *n != e.name || t.shape() != e.shape)
        {
            return Err(Error::Format("checkpoint tensors do not match its model config".into()));
        }
        let width = match header.dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        let payload = &bytes[16 + hlen..];
        if payload.len() != total * width {
            return Err(Error::Format(format!(
                "checkpoint payload has {} bytes, expected {}",
                payload.len(),
                total * width
            )));
        }
        let mut values = Vec::with_capacity(header.tensors.len());
        let mut chunks = payload.chunks_exact(width);
        for e in &header.tensors {
            let n = e.shape.iter().product();
            let data: Vec<f64> = chunks
                .by_ref()
                .take(n)
                .map(|b| match header.dtype {
                    DType::F32 => f32::from_le_bytes(b.try_into().expect("four bytes")) as f64,
                    DType::F64 => f64::from_le_bytes(b.try_into().expect("eight bytes")),
                })
                .collect();
            values.push(Tensor::new(&e.shape, data)?);
        }
        params.assign(values)?;
        Ok(Self { config: header.config, params, meta: header.meta })
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
        fs::write(path, self.to_bytes(dtype)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
