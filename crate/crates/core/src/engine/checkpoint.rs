//! Training checkpoints (`.ckpt`), little-endian:
//!
//! ```text
//! magic     [u8; 12] = "GAUSSOCC-CKP"
//! version   u32      = 1
//! config    [u8; 64]   hex SHA-256 of the run config, step count cleared
//! step      u64
//! rng       u64 seed, u128 word position
//! adam_t    u64
//! tensors   u32 count, then per tensor:
//!           u32 name length, name (UTF-8), u64 length,
//!           f64 × length values, first moments, second moments
//! ```

use std::path::Path;

use super::config::ModelConfig;
use super::optim::AdamW;
use super::train::TrainState;
use crate::numerics::{Parameters, RngState};
use crate::scene::io::{read_file, BinReader, BinWriter};
use crate::{Result, Rng};

pub const CHECKPOINT_MAGIC: &[u8; 12] = b"GAUSSOCC-CKP";

pub fn encode_checkpoint(state: &TrainState, cfg: &ModelConfig) -> Vec<u8> {
    let mut w = BinWriter::default();
    w.header(CHECKPOINT_MAGIC);
    w.bytes(cfg.model_hash().as_bytes());
    w.u64(state.step);
    let rng = state.rng.state();
    w.u64(rng.seed);
    w.u128(rng.word_pos);
    w.u64(state.optim.t);
    let params = state.model.named();
    let first = state.optim.first.named();
    let second = state.optim.second.named();
    w.u32(params.len() as u32);
    for (((name, p), (_, m)), (_, v)) in params.iter().zip(&first).zip(&second) {
        w.u32(name.len() as u32);
        w.bytes(name.as_bytes());
        w.u64(p.len() as u64);
        for t in [p, m, v] {
            for &x in t.data() {
                w.f64(x);
            }
        }
    }
    w.buf
}

/// Restores a state for `cfg`. The config hash and every tensor name and
/// length must match what `cfg` builds.
pub fn decode_checkpoint(bytes: &[u8], path: &Path, cfg: &ModelConfig) -> Result<TrainState> {
    let mut r = BinReader::new(bytes, path);
    r.header(CHECKPOINT_MAGIC)?;
    if r.bytes(64)? != cfg.model_hash().as_bytes() {
        return Err(r.err("checkpoint was written for a different config"));
    }
    let step = r.u64()?;
    let rng = RngState {
        seed: r.u64()?,
        word_pos: r.u128()?,
    };
    let t = r.u64()?;
    let mut state = TrainState::new(cfg)?;
    state.step = step;
    state.rng = Rng::from_state(rng);
    state.optim = AdamW::new(&state.model);
    state.optim.t = t;
    let count = r.u32()? as usize;
    let mut params = state.model.named_mut();
    let mut first = state.optim.first.named_mut();
    let mut second = state.optim.second.named_mut();
    if count != params.len() {
        return Err(r.err(format!("expected {} tensors, found {count}", params.len())));
    }
    for i in 0..count {
        let len = r.u32()? as usize;
        let name = r.bytes(len)?;
        if name != params[i].0.as_bytes() {
            let found = String::from_utf8_lossy(name);
            return Err(r.err(format!("expected tensor {}, found {found}", params[i].0)));
        }
        let n = r.u64()? as usize;
        if n != params[i].1.len() {
            return Err(r.err(format!("tensor {} has the wrong length", params[i].0)));
        }
        for t in [&mut params[i].1, &mut first[i].1, &mut second[i].1] {
            for x in t.data_mut() {
                *x = r.f64()?;
            }
        }
    }
    r.finish()?;
    Ok(state)
}

pub fn save_checkpoint(path: &Path, state: &TrainState, cfg: &ModelConfig) -> Result<()> {
    std::fs::write(path, encode_checkpoint(state, cfg))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<TrainState> {
    decode_checkpoint(&read_file(path)?, path, cfg)
}
