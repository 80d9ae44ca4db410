//! `NNCKPT1` parameter files.
//!
//! Layout: the 8 magic bytes `NNCKPT1\n`, a little-endian `u64` holding the
//! byte length of a JSON index `[{name, shape, offset}]`, the index itself,
//! then every tensor as consecutive little-endian `f32` values. `offset` is
//! the byte offset of a tensor inside the payload section.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NNCKPT1\n";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

pub fn encode<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut index = Vec::with_capacity(store.len());
    let mut payload = Vec::with_capacity(store.num_elements() * 4);
    for p in store.iter() {
        index.push(IndexEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for &x in p.value.data() {
            payload.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    let json = serde_json::to_vec(&index).expect("index serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let bad = |m: &str| NnError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing NNCKPT1 header"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| bad("truncated index"))?;
    let index: Vec<IndexEntry> =
        serde_json::from_slice(json).map_err(|e| NnError::Checkpoint(format!("index: {e}")))?;
    let payload = &bytes[16 + len..];
    let mut store = ParamStore::new();
    let mut expected = 0u64;
    for e in index {
        if e.offset != expected {
            return Err(NnError::Checkpoint(format!(
                "tensor `{}` at offset {} (expected {expected})",
                e.name, e.offset
            )));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let raw = payload
            .get(start..start + 4 * n)
            .ok_or_else(|| NnError::Checkpoint(format!("tensor `{}` truncated", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        store.add(e.name, Tensor::new(e.shape, data)?)?;
        expected += 4 * n as u64;
    }
    if expected as usize != payload.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok(store)
}

pub fn write<T: Scalar>(store: &ParamStore<T>, mut w: impl Write) -> Result<()> {
    w.write_all(&encode(store))?;
    Ok(())
}

pub fn read<T: Scalar>(mut r: impl Read) -> Result<ParamStore<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(store))?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut s = ParamStore::new();
        s.add_weight("enc.w", 3, 5, &mut rng).unwrap();
        s.add_zeros("enc.b", 1, 5).unwrap();
        s.add("odd", Tensor::new(vec![7], vec![f32::MIN_POSITIVE, -0.0, 1e30, 3.5, -2.25, 0.1, 9.0]).unwrap())
            .unwrap();
        s
    }

    #[test]
    fn round_trip_is_byte_and_bit_exact() {
        let s = store();
        let bytes = encode(&s);
        assert_eq!(&bytes[..8], b"NNCKPT1\n");
        let back: ParamStore<f32> = decode(&bytes).unwrap();
        for (a, b) in s.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value.shape(), b.value.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = encode(&store());
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode::<f32>(&long).is_err());
    }
}
