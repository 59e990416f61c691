//! Checkpoint file layout (all integers little-endian):
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 8     | magic `ECHOTOY1`                        |
//! | 4     | vocab_size (u32)                        |
//! | 4     | d_model (u32)                           |
//! | 4     | n_layers (u32)                          |
//! | 4     | n_heads (u32)                           |
//! | 4     | max_seq_len (u32)                       |
//! | 8     | seed (u64)                              |
//! | 4     | attention (u32, 0 causal, 1 bidirectional) |
//! | 8     | parameter count (u64)                   |
//! | 4·n   | parameters as f32, in `ParamLayout` order |

use std::io::{Read, Write};

use super::model::{ParamLayout, ToyModel, ToyModelConfig};
use crate::backend::{AttentionMode, BackendError};
use crate::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ECHOTOY1";

pub fn write_checkpoint<S: Scalar, W: Write>(model: &ToyModel<S>, mut out: W) -> Result<(), BackendError> {
    let c = model.config();
    let narrow = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| BackendError::Checkpoint(format!("{what} {v} does not fit in u32")))
    };
    out.write_all(CHECKPOINT_MAGIC)?;
    for (v, what) in [
        (c.vocab_size, "vocab_size"),
        (c.d_model, "d_model"),
        (c.n_layers, "n_layers"),
        (c.n_heads, "n_heads"),
        (c.max_seq_len, "max_seq_len"),
    ] {
        out.write_all(&narrow(v, what)?.to_le_bytes())?;
    }
    out.write_all(&c.seed.to_le_bytes())?;
    let attention: u32 = match c.attention {
        AttentionMode::Causal => 0,
        AttentionMode::Bidirectional => 1,
    };
    out.write_all(&attention.to_le_bytes())?;
    out.write_all(&(model.params().len() as u64).to_le_bytes())?;
    let mut body = Vec::with_capacity(model.params().len() * 4);
    for p in model.params() {
        body.extend_from_slice(&p.to_le_f32_bytes());
    }
    out.write_all(&body)?;
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<S: Scalar, R: Read>(mut input: R) -> Result<ToyModel<S>, BackendError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(BackendError::Checkpoint("bad magic".into()));
    }
    let mut u32s = [0usize; 5];
    for slot in &mut u32s {
        let mut b = [0u8; 4];
        input.read_exact(&mut b)?;
        *slot = u32::from_le_bytes(b) as usize;
    }
    let mut b8 = [0u8; 8];
    input.read_exact(&mut b8)?;
    let seed = u64::from_le_bytes(b8);
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b4)?;
    let attention = match u32::from_le_bytes(b4) {
        0 => AttentionMode::Causal,
        1 => AttentionMode::Bidirectional,
        other => return Err(BackendError::Checkpoint(format!("unknown attention code {other}"))),
    };
    let config = ToyModelConfig {
        vocab_size: u32s[0],
        d_model: u32s[1],
        n_layers: u32s[2],
        n_heads: u32s[3],
        max_seq_len: u32s[4],
        seed,
        attention,
    };
    config.validate()?;
    input.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;
    let expected = ParamLayout::new(&config).total();
    if count != expected {
        return Err(BackendError::Checkpoint(format!(
            "header declares {count} parameters, config implies {expected}"
        )));
    }
    let mut body = vec![0u8; count * 4];
    input.read_exact(&mut body)?;
    let params = body
        .chunks_exact(4)
        .map(|c| S::of(f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))))
        .collect();
    ToyModel::from_params(config, params)
}
