//! Binary checkpoint: parameters plus the config that produced them.
//!
//! Layout (little-endian):
//!
//! | field          | bytes                                 |
//! |----------------|---------------------------------------|
//! | magic          | `NRVC`                                |
//! | version        | u8 = 1                                |
//! | scalar width   | u8 (4 or 8)                           |
//! | config hash    | 32 raw SHA-256 bytes                  |
//! | config JSON    | u32 length + UTF-8                    |
//! | tensor count   | u32                                   |
//! | per tensor     | u16 name length, name, u8 rank, u32 dims, values |

use std::io::{Cursor, Read};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::components::{ModelConfig, NervModel};
use crate::error::{data_err, NervError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NRVC";
const VERSION: u8 = 1;

pub(crate) fn write_str16(out: &mut Vec<u8>, s: &str) {
    out.write_u16::<LittleEndian>(s.len() as u16).expect("vec write");
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn write_str32(out: &mut Vec<u8>, s: &str) {
    out.write_u32::<LittleEndian>(s.len() as u32).expect("vec write");
    out.extend_from_slice(s.as_bytes());
}

pub(crate) fn truncated(what: &str) -> NervError {
    NervError::Data(format!("truncated input while reading {what}"))
}

pub(crate) fn read_str16(cur: &mut Cursor<&[u8]>) -> Result<String> {
    let n = cur.read_u16::<LittleEndian>().map_err(|_| truncated("name length"))? as usize;
    let mut buf = vec![0; n];
    cur.read_exact(&mut buf).map_err(|_| truncated("name"))?;
    String::from_utf8(buf).map_err(|e| NervError::Data(e.to_string()))
}

pub(crate) fn read_str32(cur: &mut Cursor<&[u8]>) -> Result<String> {
    let n = cur.read_u32::<LittleEndian>().map_err(|_| truncated("string length"))? as usize;
    let remaining = cur.get_ref().len() - cur.position() as usize;
    if n > remaining {
        return Err(truncated("string"));
    }
    let mut buf = vec![0; n];
    cur.read_exact(&mut buf).map_err(|_| truncated("string"))?;
    String::from_utf8(buf).map_err(|e| NervError::Data(e.to_string()))
}

pub(crate) fn read_shape(cur: &mut Cursor<&[u8]>) -> Result<Vec<usize>> {
    let rank = cur.read_u8().map_err(|_| truncated("rank"))? as usize;
    (0..rank)
        .map(|_| cur.read_u32::<LittleEndian>().map(|d| d as usize).map_err(|_| truncated("dims")))
        .collect()
}

pub(crate) fn write_shape(out: &mut Vec<u8>, shape: &[usize]) {
    out.push(shape.len() as u8);
    for &d in shape {
        out.write_u32::<LittleEndian>(d as u32).expect("vec write");
    }
}

pub(crate) fn read_hash(cur: &mut Cursor<&[u8]>) -> Result<String> {
    let mut h = [0u8; 32];
    cur.read_exact(&mut h).map_err(|_| truncated("config hash"))?;
    Ok(hex::encode(h))
}

pub(crate) fn write_hash(out: &mut Vec<u8>, hash_hex: &str) {
    out.extend_from_slice(&hex::decode(hash_hex).expect("hex digest"));
}

/// Verifies that `json` is the config whose digest is `hash`.
pub(crate) fn config_from_json(json: &str, hash: &str) -> Result<ModelConfig> {
    let cfg = ModelConfig::from_json(json)?;
    if cfg.hash() != hash {
        return Err(NervError::HashMismatch { expected: cfg.hash(), found: hash.to_string() });
    }
    Ok(cfg)
}

/// Tensor count, then per tensor: name, shape and little-endian values.
pub(crate) fn write_store<T: Scalar>(out: &mut Vec<u8>, params: &ParamStore<T>) {
    out.write_u32::<LittleEndian>(params.len() as u32).expect("vec write");
    for (name, value) in params.iter() {
        write_str16(out, name);
        write_shape(out, value.shape());
        for &v in value.iter() {
            v.write_le(out);
        }
    }
}

/// Inverse of [`write_store`] for values stored `width` bytes wide.
pub(crate) fn read_store<T: Scalar>(cur: &mut Cursor<&[u8]>, width: usize) -> Result<ParamStore<T>> {
    let count = cur.read_u32::<LittleEndian>().map_err(|_| truncated("tensor count"))? as usize;
    let mut store = ParamStore::<T>::new();
    for _ in 0..count {
        let name = read_str16(cur)?;
        let shape = read_shape(cur)?;
        let n: usize = shape.iter().product();
        let remaining = cur.get_ref().len() - cur.position() as usize;
        if n * width > remaining {
            return Err(truncated(&name));
        }
        let mut buf = vec![0u8; n * width];
        cur.read_exact(&mut buf).map_err(|_| truncated(&name))?;
        let data: Vec<T> = buf
            .chunks_exact(width)
            .map(|c| if width == 4 { T::of(f32::read_le(c) as f64) } else { T::of(f64::read_le(c)) })
            .collect();
        store.add(name, ArrayD::from_shape_vec(IxDyn(&shape), data).expect("checkpoint tensor"));
    }
    Ok(store)
}

pub fn encode_checkpoint<T: Scalar>(config: &ModelConfig, params: &ParamStore<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(VERSION);
    out.push(T::BYTES as u8);
    write_hash(&mut out, &config.hash());
    write_str32(&mut out, &config.to_json());
    write_store(&mut out, params);
    out
}

/// Decodes a checkpoint into a model of element type `T`, converting from
/// the stored width when it differs.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<NervModel<T>> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
    if &magic != CHECKPOINT_MAGIC {
        return data_err("not a checkpoint (bad magic)");
    }
    let version = cur.read_u8().map_err(|_| truncated("version"))?;
    if version != VERSION {
        return data_err(format!("unsupported checkpoint version {version}"));
    }
    let width = cur.read_u8().map_err(|_| truncated("scalar width"))? as usize;
    if width != 4 && width != 8 {
        return data_err(format!("unsupported scalar width {width}"));
    }
    let hash = read_hash(&mut cur)?;
    let config = config_from_json(&read_str32(&mut cur)?, &hash)?;
    let store = read_store::<T>(&mut cur, width)?;
    let model = NervModel::<T>::new(&config, 0)?;
    model.with_params(store)
}
