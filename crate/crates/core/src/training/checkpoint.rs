//! Training checkpoints.
//!
//! ```text
//! "LNLK" | version u8 | config_len u32 | config key=value text
//! | pair count u64 | completed epochs u32 | adam step u64
//! | rng seed [u8; 32] | rng stream u64 | rng word position u128
//! | weights_len u64 | .lnw bytes | tensor "adam.m" | tensor "adam.v"
//! ```
//! Little-endian throughout; tensors use the weight-file record layout.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{TrainError, Trainer};
use crate::autodiff::Tensor;
use crate::network::{decode_weights, encode_weights, read_tensor_at, write_tensor, Cursor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"LNLK";
pub const CHECKPOINT_VERSION: u8 = 1;

fn moments_tensor(values: &[f32]) -> Tensor<f32> {
    Tensor::from_vec([values.len(), 1, 1, 1], values.to_vec()).expect("length matches")
}

pub(super) fn encode(t: &Trainer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    let cfg = t.cfg.to_kv_string();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(t.train.len() as u64).to_le_bytes());
    out.extend_from_slice(&(t.epoch as u32).to_le_bytes());
    out.extend_from_slice(&t.adam.step.to_le_bytes());
    out.extend_from_slice(&t.rng.get_seed());
    out.extend_from_slice(&t.rng.get_stream().to_le_bytes());
    out.extend_from_slice(&t.rng.get_word_pos().to_le_bytes());
    let weights = encode_weights(&t.model);
    out.extend_from_slice(&(weights.len() as u64).to_le_bytes());
    out.extend_from_slice(&weights);
    let n = t.adam.m.len();
    write_tensor(&mut out, "adam.m", &[n], &moments_tensor(&t.adam.m));
    write_tensor(&mut out, "adam.v", &[n], &moments_tensor(&t.adam.v));
    out
}

fn corrupt(msg: impl Into<String>) -> TrainError {
    TrainError::Checkpoint(msg.into())
}

/// Overwrites the freshly built `t` with the checkpointed state.
pub(super) fn restore(t: &mut Trainer, bytes: &[u8]) -> Result<(), TrainError> {
    let mut cur = Cursor::new(bytes);
    let fmt = |e: crate::network::NetworkError| corrupt(e.to_string());
    if cur.take(4).map_err(fmt)? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = cur.u8().map_err(fmt)?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let len = cur.u32().map_err(fmt)?;
    let cfg = std::str::from_utf8(cur.take(len).map_err(fmt)?)
        .map_err(|_| corrupt("config text is not utf-8"))?;
    if cfg != t.cfg.to_kv_string() {
        return Err(corrupt(format!(
            "written with a different config:\n{cfg}"
        )));
    }
    let pairs = cur.u64().map_err(fmt)?;
    if pairs != t.train.len() as u64 {
        return Err(corrupt(format!(
            "written for {pairs} training pairs, dataset has {}",
            t.train.len()
        )));
    }
    let epoch = cur.u32().map_err(fmt)?;
    let step = cur.u64().map_err(fmt)?;
    let seed: [u8; 32] = cur.take(32).map_err(fmt)?.try_into().expect("32 bytes");
    let stream = cur.u64().map_err(fmt)?;
    let word_pos = u128::from_le_bytes(cur.take(16).map_err(fmt)?.try_into().expect("16 bytes"));
    let weights_len = usize::try_from(cur.u64().map_err(fmt)?)
        .map_err(|_| corrupt("weight block too large"))?;
    let model = decode_weights(cur.take(weights_len).map_err(fmt)?).map_err(fmt)?;
    if model.config() != &t.cfg.model_config() {
        return Err(corrupt("embedded model config differs"));
    }
    let n = model.num_params();
    let mut moments = Vec::with_capacity(2);
    for name in ["adam.m", "adam.v"] {
        let (got, dims, values) = read_tensor_at(&mut cur).map_err(fmt)?;
        if got != name || dims != [n] {
            return Err(corrupt(format!("expected {name} [{n}], found {got} {dims:?}")));
        }
        moments.push(values);
    }
    if !cur.is_empty() {
        return Err(corrupt("trailing bytes"));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    t.model = model;
    t.adam.v = moments.pop().expect("two tensors");
    t.adam.m = moments.pop().expect("two tensors");
    t.adam.step = step;
    t.epoch = epoch;
    t.rng = rng;
    Ok(())
}
