//! `.lnw` weight files.
//!
//! ```text
//! "LNLW" | version u8 | base_channels u32 | num_body_blocks u32 | dilation u32
//! | kernel u32 | tensor count u32 | tensors...
//! tensor: name_len u32 | name utf-8 | rank u8 | dims u32 x rank | f32 x prod(dims)
//! ```
//! All integers and floats little-endian. Each layer contributes
//! `<layer>.weight` (rank 4) and `<layer>.bias` (rank 1).

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig, NetworkError};
use crate::autodiff::Tensor;

pub const WEIGHTS_MAGIC: [u8; 4] = *b"LNLW";
pub const WEIGHTS_VERSION: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("fits in u32").to_le_bytes());
}

/// Appends one named tensor record with the given logical dims.
pub fn write_tensor(out: &mut Vec<u8>, name: &str, dims: &[usize], t: &Tensor<f32>) {
    debug_assert_eq!(dims.iter().product::<usize>(), t.len());
    put_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    out.push(dims.len() as u8);
    for &d in dims {
        put_u32(out, d);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Cursor over a byte buffer with format errors for short reads.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], NetworkError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NetworkError::Format("unexpected end of file".into()))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, NetworkError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<usize, NetworkError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    pub(crate) fn u64(&mut self) -> Result<u64, NetworkError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Reads one tensor record; returns its name, dims and values.
pub fn read_tensor(bytes: &[u8]) -> Result<(String, Vec<usize>, Vec<f32>, usize), NetworkError> {
    let mut cur = Cursor::new(bytes);
    let (name, dims, values) = read_tensor_at(&mut cur)?;
    Ok((name, dims, values, cur.pos))
}

pub(crate) fn read_tensor_at(
    cur: &mut Cursor<'_>,
) -> Result<(String, Vec<usize>, Vec<f32>), NetworkError> {
    let len = cur.u32()?;
    let name = String::from_utf8(cur.take(len)?.to_vec())
        .map_err(|_| NetworkError::Format("tensor name is not utf-8".into()))?;
    let rank = cur.u8()? as usize;
    let dims = (0..rank).map(|_| cur.u32()).collect::<Result<Vec<_>, _>>()?;
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| NetworkError::Format("tensor size overflows".into()))?;
    let raw = cur.take(count.checked_mul(4).ok_or_else(|| {
        NetworkError::Format("tensor size overflows".into())
    })?)?;
    let values = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((name, dims, values))
}

pub(crate) fn model_tensors(model: &Model) -> Vec<(String, Vec<usize>, &Tensor<f32>)> {
    model
        .layers()
        .iter()
        .flat_map(|l| {
            [
                (
                    format!("{}.weight", l.name),
                    l.conv.weight.shape().to_vec(),
                    &l.conv.weight,
                ),
                (
                    format!("{}.bias", l.name),
                    vec![l.conv.out_channels()],
                    &l.conv.bias,
                ),
            ]
        })
        .collect()
}

pub fn encode_weights(model: &Model) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.push(WEIGHTS_VERSION);
    for v in [cfg.base_channels, cfg.num_body_blocks, cfg.dilation, cfg.kernel] {
        put_u32(&mut out, v);
    }
    let tensors = model_tensors(model);
    put_u32(&mut out, tensors.len());
    for (name, dims, t) in tensors {
        write_tensor(&mut out, &name, &dims, t);
    }
    out
}

pub(crate) fn decode_weights_at(cur: &mut Cursor<'_>) -> Result<Model, NetworkError> {
    if cur.take(4)? != WEIGHTS_MAGIC {
        return Err(NetworkError::Format("bad magic".into()));
    }
    let version = cur.u8()?;
    if version != WEIGHTS_VERSION {
        return Err(NetworkError::Format(format!("unsupported version {version}")));
    }
    let config = ModelConfig {
        base_channels: cur.u32()?,
        num_body_blocks: cur.u32()?,
        dilation: cur.u32()?,
        kernel: cur.u32()?,
    };
    let mut model = Model::<f32>::zeros(config)
        .map_err(|e| NetworkError::Format(format!("embedded config rejected: {e}")))?;
    let expected: Vec<(String, Vec<usize>)> = model_tensors(&model)
        .into_iter()
        .map(|(n, d, _)| (n, d))
        .collect();
    let count = cur.u32()?;
    if count != expected.len() {
        return Err(NetworkError::ConfigMismatch(format!(
            "{count} tensors, config implies {}",
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(model.num_params());
    for (name, dims) in &expected {
        let (got_name, got_dims, data) = read_tensor_at(cur)?;
        if &got_name != name || &got_dims != dims {
            return Err(NetworkError::ConfigMismatch(format!(
                "tensor {got_name} {got_dims:?}, expected {name} {dims:?}"
            )));
        }
        values.extend(data);
    }
    model.set_flat(&values);
    Ok(model)
}

pub fn decode_weights(bytes: &[u8]) -> Result<Model, NetworkError> {
    let mut cur = Cursor::new(bytes);
    let model = decode_weights_at(&mut cur)?;
    if !cur.is_empty() {
        return Err(NetworkError::Format("trailing bytes after last tensor".into()));
    }
    Ok(model)
}

pub fn save_weights(model: &Model, path: impl AsRef<Path>) -> Result<(), NetworkError> {
    fs::write(path, encode_weights(model))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Model, NetworkError> {
    decode_weights(&fs::read(path)?)
}

/// Loads and checks the embedded config against `expected`.
pub fn load_weights_expecting(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<Model, NetworkError> {
    let model = load_weights(path)?;
    if model.config() != expected {
        return Err(NetworkError::ConfigMismatch(format!(
            "file has {:?}, expected {:?}",
            model.config(),
            expected
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_model;
    use proptest::prelude::*;

    fn small() -> ModelConfig {
        ModelConfig {
            base_channels: 3,
            num_body_blocks: 2,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn header_layout() {
        let bytes = encode_weights(&build_model(small(), 1).unwrap());
        assert_eq!(&bytes[..4], b"LNLW");
        assert_eq!(bytes[4], 1);
        assert_eq!(&bytes[5..9], &3u32.to_le_bytes());
        let (name, dims, _, _) = read_tensor(&bytes[4 + 1 + 16 + 4..]).unwrap();
        assert_eq!(name, "head.weight");
        assert_eq!(dims, vec![3, 1, 3, 3]);
    }

    #[test]
    fn file_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.lnw");
        let model = build_model(ModelConfig::desk(), 5).unwrap();
        save_weights(&model, &path).unwrap();
        assert_eq!(load_weights(&path).unwrap(), model);
        assert!(load_weights_expecting(&path, &ModelConfig::desk()).is_ok());
        assert!(matches!(
            load_weights_expecting(&path, &ModelConfig::default()),
            Err(NetworkError::ConfigMismatch(_))
        ));

        let bytes = fs::read(&path).unwrap();
        assert!(matches!(
            decode_weights(&bytes[..bytes.len() - 3]),
            Err(NetworkError::Format(_))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_weights(&bad), Err(NetworkError::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 7;
        assert!(matches!(decode_weights(&bad), Err(NetworkError::Format(_))));
        // Claim a wider network than the tensors that follow.
        let mut bad = bytes;
        bad[5..9].copy_from_slice(&64u32.to_le_bytes());
        assert!(matches!(decode_weights(&bad), Err(NetworkError::ConfigMismatch(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn bit_exact_roundtrip(seed in any::<u64>(), scale in -1e6f32..1e6f32) {
            let mut model = build_model(small(), seed).unwrap();
            for l in model.layers_mut() {
                for (i, v) in l.conv.bias.data_mut().iter_mut().enumerate() {
                    *v = scale / (i as f32 + 1.0);
                }
            }
            let decoded = decode_weights(&encode_weights(&model)).unwrap();
            let a: Vec<u32> = model.flatten().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = decoded.flatten().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
