//! Self-describing binary checkpoints.
//!
//! Layout: 8-byte magic, little-endian u64 header length, JSON header, then
//! the little-endian tensor payload (parameters, then optimizer moments).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Layout, ModelConfig, ModelParams};
use super::scalar::Scalar;
use super::tokenizer::Tokenizer;
use super::train::{AdamState, TrainConfig, TrainOutcome};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"ICLCKPT1";

/// Enough to rebuild the shuffling stream of the run that produced a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Epochs whose shuffles have been consumed.
    pub epochs_done: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub tokenizer: Tokenizer,
    pub optimizer: Option<AdamState<T>>,
    pub rng: RngState,
    pub step: u64,
    pub train_config: Option<TrainConfig>,
    pub loss_trace: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the payload.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    model: ModelConfig,
    tokenizer: Tokenizer,
    step: u64,
    rng: RngState,
    train_config: Option<TrainConfig>,
    loss_trace: Vec<f64>,
    optimizer_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_outcome(outcome: TrainOutcome<T>, tokenizer: Tokenizer, config: &TrainConfig) -> Self {
        Self {
            params: outcome.params,
            tokenizer,
            rng: RngState {
                seed: config.seed,
                epochs_done: config.epochs as u64,
            },
            step: outcome.steps as u64,
            optimizer: Some(outcome.optimizer),
            train_config: Some(config.clone()),
            loss_trace: outcome.loss_trace,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.params.data.len();
        let mut tensors: Vec<TensorEntry> = self
            .params
            .blocks()
            .iter()
            .map(|b| TensorEntry {
                name: b.name.clone(),
                shape: b.shape.clone(),
                offset: b.offset,
            })
            .collect();
        if self.optimizer.is_some() {
            for (prefix, base) in [("adam.m", n), ("adam.v", 2 * n)] {
                tensors.push(TensorEntry {
                    name: prefix.into(),
                    shape: vec![n],
                    offset: base,
                });
            }
        }
        let header = Header {
            dtype: T::DTYPE.into(),
            model: self.params.config.clone(),
            tokenizer: self.tokenizer.clone(),
            step: self.step,
            rng: self.rng.clone(),
            train_config: self.train_config.clone(),
            loss_trace: self.loss_trace.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let tensors = if self.optimizer.is_some() { 3 } else { 1 };
        let mut out = Vec::with_capacity(16 + json.len() + tensors * n * T::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut write = |xs: &[T]| xs.iter().for_each(|&x| x.write_le(&mut out));
        write(&self.params.data);
        if let Some(o) = &self.optimizer {
            write(&o.m);
            write(&o.v);
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, out)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    /// Load a checkpoint, converting element type if it was saved in another precision.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let bad = |reason: String| Error::Format {
            path: path.display().to_string(),
            reason,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        let payload = &bytes[16 + hlen..];
        let values: Vec<T> = match header.dtype.as_str() {
            "f32" => read_all::<f32, T>(payload),
            "f64" => read_all::<f64, T>(payload),
            other => return Err(bad(format!("unknown dtype {other}"))),
        }
        .ok_or_else(|| bad("payload length is not a whole number of elements".into()))?;

        header.model.validate()?;
        let layout = Layout::new(&header.model);
        let n = layout.total;
        let sections = if header.optimizer_step.is_some() { 3 } else { 1 };
        if values.len() != sections * n {
            return Err(bad(format!(
                "payload holds {} values, expected {}",
                values.len(),
                sections * n
            )));
        }
        for (entry, block) in header.tensors.iter().zip(&layout.blocks) {
            if entry.name != block.name || entry.shape != block.shape || entry.offset != block.offset {
                return Err(bad(format!("tensor directory mismatch at {}", entry.name)));
            }
        }
        let mut it = values.into_iter();
        let data: Vec<T> = it.by_ref().take(n).collect();
        let optimizer = header.optimizer_step.map(|step| AdamState {
            m: it.by_ref().take(n).collect(),
            v: it.by_ref().take(n).collect(),
            step,
        });
        Ok(Self {
            params: ModelParams::from_data(header.model, data)?,
            tokenizer: header.tokenizer,
            optimizer,
            rng: header.rng,
            step: header.step,
            train_config: header.train_config,
            loss_trace: header.loss_trace,
        })
    }
}

fn read_all<S: Scalar, T: Scalar>(payload: &[u8]) -> Option<Vec<T>> {
    if !payload.len().is_multiple_of(S::BYTES) {
        return None;
    }
    Some(
        payload
            .chunks_exact(S::BYTES)
            .map(|c| T::of(S::read_le(c).f64()))
            .collect(),
    )
}
