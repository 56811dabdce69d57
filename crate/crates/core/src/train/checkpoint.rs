//! Versioned single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "BTSF" | version u32 | in_channels u64 | epoch u64 | adam_t u64
//! config_len u64 | config JSON (TrainConfig)
//! history_len u64 | history f64 × history_len
//! n_arrays u64 | n_arrays × (name_len u32 | name | rows u64 | cols u64 | f64 × rows·cols)
//! ```
//!
//! Arrays are the model parameters in store order, then the Adam first
//! moments (`adam.m/<name>`) and second moments (`adam.v/<name>`).

use super::{Adam, TrainConfig};
use crate::encoders::EncoderConfig;
use crate::model::{Model, ModelConfig, ModelError, ParamStore};
use crate::tensor::Mat;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"BTSF";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("incompatible checkpoint: {0}")]
    VersionMismatch(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub in_channels: usize,
    pub params: ParamStore,
    pub adam: Adam,
    pub epoch: usize,
    pub loss_history: Vec<f64>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            CheckpointError::CorruptFile(format!("truncated while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        // Any count larger than the remaining bytes is corrupt.
        if n > (self.buf.len() - self.pos) as u64 {
            return Err(CheckpointError::CorruptFile(format!("{what} {n} exceeds file size")));
        }
        Ok(n as usize)
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| {
            CheckpointError::CorruptFile(format!("{what} length overflows"))
        })?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, value: &Mat) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    put_u64(out, value.nrows() as u64);
    put_u64(out, value.ncols() as u64);
    for v in value.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: self.in_channels,
            encoder: self.config.encoder.clone(),
            fusion: self.config.fusion.clone(),
        }
    }

    pub fn model(&self) -> std::result::Result<Model, ModelError> {
        Model::from_params(self.model_config(), self.params.clone())
    }

    /// The configuration blob as stored in the file.
    pub fn config_json(&self) -> String {
        serde_json::to_string(&self.config).expect("config serializes")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u64(&mut out, self.in_channels as u64);
        put_u64(&mut out, self.epoch as u64);
        put_u64(&mut out, self.adam.t);
        let config = self.config_json();
        put_u64(&mut out, config.len() as u64);
        out.extend_from_slice(config.as_bytes());
        put_u64(&mut out, self.loss_history.len() as u64);
        for v in &self.loss_history {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u64(&mut out, 3 * self.params.len() as u64);
        for (name, value) in self.params.iter() {
            put_array(&mut out, name, value);
        }
        for (name, m) in self.params.names().iter().zip(&self.adam.m) {
            put_array(&mut out, &format!("adam.m/{name}"), m);
        }
        for (name, v) in self.params.names().iter().zip(&self.adam.v) {
            put_array(&mut out, &format!("adam.v/{name}"), v);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::CorruptFile("bad magic bytes".into()));
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch(format!(
                "file version {version}, reader version {CHECKPOINT_VERSION}"
            )));
        }
        let in_channels = r.u64("in_channels")? as usize;
        let epoch = r.u64("epoch")? as usize;
        let adam_t = r.u64("optimizer step")?;
        let config_len = r.len("config length")?;
        let config_bytes = r.take(config_len, "config")?;
        let config: TrainConfig = serde_json::from_slice(config_bytes)
            .map_err(|e| CheckpointError::CorruptFile(format!("config blob: {e}")))?;
        let history_len = r.len("history length")?;
        let loss_history = r.f64s(history_len, "loss history")?;
        let n_arrays = r.len("array count")?;
        if n_arrays % 3 != 0 {
            return Err(CheckpointError::CorruptFile(format!("{n_arrays} arrays is not a multiple of 3")));
        }
        let mut arrays = Vec::with_capacity(n_arrays);
        for i in 0..n_arrays {
            let name_len = r.u32("array name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "array name")?)
                .map_err(|_| CheckpointError::CorruptFile(format!("array {i} name is not UTF-8")))?
                .to_string();
            let rows = r.len("rows")?;
            let cols = r.len("cols")?;
            let data = r.f64s(rows.saturating_mul(cols), &name)?;
            let value = Mat::from_shape_vec((rows, cols), data).expect("length checked");
            arrays.push((name, value));
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::CorruptFile(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        let n = n_arrays / 3;
        let mut params = ParamStore::new();
        let mut adam = Adam { m: Vec::new(), v: Vec::new(), t: adam_t };
        for (i, (name, value)) in arrays.into_iter().enumerate() {
            let (group, base) = (i / n, i % n);
            match group {
                0 => {
                    if params.index(&name).is_some() {
                        return Err(CheckpointError::CorruptFile(format!("duplicate array {name}")));
                    }
                    params.push(name, value);
                }
                _ => {
                    let prefix = if group == 1 { "adam.m/" } else { "adam.v/" };
                    let expected = format!("{prefix}{}", params.names()[base]);
                    if name != expected || value.dim() != params.values()[base].dim() {
                        return Err(CheckpointError::CorruptFile(format!(
                            "optimizer array {name} does not match {expected}"
                        )));
                    }
                    if group == 1 {
                        adam.m.push(value);
                    } else {
                        adam.v.push(value);
                    }
                }
            }
        }
        Ok(Self {
            config,
            in_channels,
            params,
            adam,
            epoch,
            loss_history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// Reads a checkpoint and checks that its arrays match its configuration.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let ckpt = Self::from_bytes(&bytes)?;
        ckpt.model()
            .map_err(|e| CheckpointError::VersionMismatch(format!("arrays disagree with config: {e}")))?;
        Ok(ckpt)
    }

    /// [`Checkpoint::load`] that additionally requires a given encoder
    /// configuration.
    pub fn load_compatible(path: impl AsRef<Path>, encoder: &EncoderConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        if &ckpt.config.encoder != encoder {
            return Err(CheckpointError::VersionMismatch(format!(
                "checkpoint encoder {:?} differs from requested {:?}",
                ckpt.config.encoder, encoder
            )));
        }
        Ok(ckpt)
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    checkpoint.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
