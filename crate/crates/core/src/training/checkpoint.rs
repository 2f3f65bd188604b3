//! Single-file training checkpoints.
//!
//! Layout: the 8-byte magic `CSFCKPT1`, a little-endian `u64` header length,
//! a JSON header, then every tensor as little-endian `f32` in header order.
//! The header records a SHA-256 of the payload, so a truncated or altered
//! file is rejected before any state is built.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::OptimizerState;
use super::TrainState;
use crate::config::ExperimentConfig;
use crate::encoder::{Encoder, EncoderConfig, ParamSet, Tensor};
use crate::error::{CsfError, Result};

const MAGIC: &[u8; 8] = b"CSFCKPT1";

#[derive(Serialize, Deserialize)]
struct RngRecord {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    group: String,
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    encoder: EncoderConfig,
    experiment: ExperimentConfig,
    step: u64,
    loss_ema: Option<f64>,
    optimizer_updates: u64,
    rng: RngRecord,
    tensors: Vec<TensorRecord>,
    payload_sha256: String,
}

const GROUPS: [&str; 3] = ["param", "momentum", "second_moment"];

fn groups(state: &TrainState) -> [&ParamSet; 3] {
    [state.encoder.params(), &state.optimizer.first, &state.optimizer.second]
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.len() % 2 != 0 {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:08}.ckpt")
}

/// Writes `state` to `path` through a temporary file and a rename.
pub fn save_checkpoint(path: &Path, state: &TrainState, experiment: &ExperimentConfig) -> Result<()> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (group, set) in GROUPS.iter().zip(groups(state)) {
        for t in &set.tensors {
            tensors.push(TensorRecord {
                group: group.to_string(),
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset: payload.len() / 4,
                len: t.data.len(),
            });
            for v in &t.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        encoder: state.encoder.config().clone(),
        experiment: experiment.clone(),
        step: state.step,
        loss_ema: state.loss_ema,
        optimizer_updates: state.optimizer.updates,
        rng: RngRecord {
            seed: hex(&state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        tensors,
        payload_sha256: hex(&Sha256::digest(&payload)),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serialises");
    let tmp: PathBuf = path.with_extension("ckpt.tmp");
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
        f.write_all(&header_bytes)?;
        f.write_all(&payload)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| CsfError::io(path, e))
}

/// Reads a checkpoint and rebuilds the full training state, along with the
/// experiment config it was written under.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, ExperimentConfig)> {
    let bytes = std::fs::read(path).map_err(|e| CsfError::io(path, e))?;
    let bad = |msg: String| CsfError::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if header_len > body.len() {
        return Err(bad("truncated header".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[..header_len]).map_err(|e| bad(format!("corrupt header: {e}")))?;
    let payload = &body[header_len..];
    if hex(&Sha256::digest(payload)) != header.payload_sha256 {
        return Err(bad("payload checksum mismatch (file truncated or altered)".into()));
    }

    let mut sets = [ParamSet::default(), ParamSet::default(), ParamSet::default()];
    for rec in &header.tensors {
        let gi = GROUPS
            .iter()
            .position(|g| *g == rec.group)
            .ok_or_else(|| bad(format!("unknown tensor group `{}`", rec.group)))?;
        let end = (rec.offset + rec.len) * 4;
        if end > payload.len() || rec.shape.iter().product::<usize>() != rec.len {
            return Err(bad(format!("tensor `{}` out of range", rec.name)));
        }
        let data = payload[rec.offset * 4..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        sets[gi].tensors.push(Tensor {
            name: rec.name.clone(),
            shape: rec.shape.clone(),
            data,
        });
    }
    let [params, first, second] = sets;
    let mut encoder = Encoder::build(&header.encoder)?;
    encoder.set_params(params)?;
    encoder.params().check_layout(&first)?;
    encoder.params().check_layout(&second)?;

    let seed: [u8; 32] = unhex(&header.rng.seed)
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| bad("corrupt rng seed".into()))?;
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|_| bad("corrupt rng position".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);

    let state = TrainState {
        step: header.step,
        encoder,
        optimizer: OptimizerState {
            updates: header.optimizer_updates,
            first,
            second,
        },
        rng,
        loss_ema: header.loss_ema,
    };
    Ok((state, header.experiment))
}

/// The checkpoint with the highest step in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<(u64, PathBuf)>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).map_err(|e| CsfError::io(dir, e))? {
        let path = entry.map_err(|e| CsfError::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(step) = name
            .strip_prefix("step-")
            .and_then(|s| s.strip_suffix(".ckpt"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| step > *b) {
            best = Some((step, path));
        }
    }
    Ok(best)
}
