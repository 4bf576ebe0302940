//! Binary checkpoint format.
//!
//! ```text
//! "AVTK" | version: u32 LE | metadata length: u64 LE | metadata (UTF-8 JSON) | payload
//! ```
//!
//! The metadata holds the run [`Config`] and a tensor table. Tensor offsets
//! are byte offsets from the start of the payload; buffers are raw
//! little-endian values laid out back to back.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensor::{DType, Element, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"AVTK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub trainable: bool,
}

impl TensorEntry {
    pub fn byte_len(&self) -> u64 {
        (self.shape.iter().product::<usize>() * self.dtype.size()) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub config: Config,
    pub tensors: Vec<TensorEntry>,
}

impl Metadata {
    /// Number of trainable scalars whose names pass `keep`.
    pub fn count(&self, keep: impl Fn(&str) -> bool) -> u64 {
        self.tensors
            .iter()
            .filter(|t| t.trainable && keep(&t.name))
            .map(|t| t.shape.iter().product::<usize>() as u64)
            .sum()
    }
}

pub fn encode<T: Element>(config: &Config, store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    for id in store.ids() {
        let t = store.get(id);
        tensors.push(TensorEntry {
            name: store.name(id).to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
            trainable: store.is_trainable(id),
        });
        for &v in t.data() {
            v.write_le(&mut payload);
        }
    }
    let meta = serde_json::to_vec(&Metadata {
        config: config.clone(),
        tensors,
    })
    .map_err(|e| Error::Invalid(format!("cannot encode checkpoint metadata: {e}")))?;
    let mut out = Vec::with_capacity(16 + meta.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse and validate the header and tensor table. Returns the metadata and
/// the payload slice.
pub fn decode_metadata(bytes: &[u8]) -> Result<(Metadata, &[u8])> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::NotCheckpoint);
    }
    if bytes.len() < 16 {
        return Err(Error::Offset("file ends inside the header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version > VERSION {
        return Err(Error::Version {
            found: version,
            supported: VERSION,
        });
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let meta_end = 16u64
        .checked_add(meta_len)
        .filter(|&e| e <= bytes.len() as u64)
        .ok_or_else(|| Error::Offset(format!("metadata length {meta_len} runs past the end of the file")))?
        as usize;
    let meta: Metadata = serde_json::from_slice(&bytes[16..meta_end])
        .map_err(|e| Error::Invalid(format!("corrupt checkpoint metadata: {e}")))?;
    let payload = &bytes[meta_end..];
    let mut next = 0u64;
    let mut names = std::collections::HashSet::new();
    for t in &meta.tensors {
        if !names.insert(t.name.as_str()) {
            return Err(Error::Invalid(format!("tensor `{}` listed twice", t.name)));
        }
        if t.offset < next || t.byte_len() == 0 {
            return Err(Error::Offset(format!("tensor `{}` offset {} is not increasing", t.name, t.offset)));
        }
        let end = t.offset + t.byte_len();
        if end > payload.len() as u64 {
            return Err(Error::Offset(format!(
                "tensor `{}` spans bytes {}..{end} of a {}-byte payload",
                t.name,
                t.offset,
                payload.len()
            )));
        }
        next = end;
    }
    Ok((meta, payload))
}

pub fn decode<T: Element>(bytes: &[u8]) -> Result<(Config, ParamStore<T>)> {
    let (meta, payload) = decode_metadata(bytes)?;
    let mut store = ParamStore::new();
    for t in &meta.tensors {
        let raw = &payload[t.offset as usize..(t.offset + t.byte_len()) as usize];
        let data: Vec<T> = match t.dtype {
            d if d == T::DTYPE => raw.chunks_exact(d.size()).map(T::read_le).collect(),
            DType::F32 => raw.chunks_exact(4).map(|c| T::lit(f32::read_le(c) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::read_le(c))).collect(),
        };
        let value = Tensor::new(t.shape.clone(), data)?;
        if t.trainable {
            store.add(&t.name, value);
        } else {
            store.add_buffer(&t.name, value);
        }
    }
    Ok((meta.config, store))
}

pub fn save_checkpoint<T: Element>(path: &Path, config: &Config, store: &ParamStore<T>) -> Result<()> {
    let bytes = encode(config, store)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Element>(path: &Path) -> Result<(Config, ParamStore<T>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn read_metadata(path: &Path) -> Result<Metadata> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_metadata(&bytes)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;
    use crate::model::TrackerModel;

    fn sample() -> (Config, ParamStore<f32>) {
        let cfg = Config::for_profile(Profile::Desk);
        let (_, store) = TrackerModel::init::<f32>(&cfg.model, 3).unwrap();
        (cfg, store)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (cfg, store) = sample();
        let bytes = encode(&cfg, &store).unwrap();
        let (c2, s2) = decode::<f32>(&bytes).unwrap();
        assert_eq!(c2, cfg);
        assert!(s2.same_values(&store));
        for id in store.ids() {
            assert_eq!(store.name(id), s2.name(id));
            assert_eq!(store.is_trainable(id), s2.is_trainable(id));
        }
        TrackerModel::bind(&c2.model, &s2).unwrap();
    }

    #[test]
    fn wrong_magic() {
        let (cfg, store) = sample();
        let mut bytes = encode(&cfg, &store).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode::<f32>(&bytes), Err(Error::NotCheckpoint)));
    }

    #[test]
    fn future_version() {
        let (cfg, store) = sample();
        let mut bytes = encode(&cfg, &store).unwrap();
        bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Version { .. })));
    }

    #[test]
    fn truncated_payload() {
        let (cfg, store) = sample();
        let bytes = encode(&cfg, &store).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_metadata(cut), Err(Error::Offset(_))));
    }

    #[test]
    fn offsets_increase() {
        let (cfg, store) = sample();
        let bytes = encode(&cfg, &store).unwrap();
        let (meta, payload) = decode_metadata(&bytes).unwrap();
        assert!(meta.tensors.windows(2).all(|w| w[0].offset < w[1].offset));
        let last = meta.tensors.last().unwrap();
        assert_eq!(last.offset + last.byte_len(), payload.len() as u64);
    }

    #[test]
    fn cross_dtype_load() {
        let (cfg, store) = sample();
        let bytes = encode(&cfg, &store).unwrap();
        let (_, s64) = decode::<f64>(&bytes).unwrap();
        assert!(s64.cast::<f32>().same_values(&store));
    }
}
