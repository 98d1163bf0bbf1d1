//! Self-contained compressed model file.
//!
//! Layout (little-endian); every tensor header precedes all payloads:
//!
//! | field         | bytes                                              |
//! |---------------|----------------------------------------------------|
//! | magic         | `NRVB`                                             |
//! | version       | u8 = 1                                             |
//! | bits          | u8                                                 |
//! | config hash   | 32 raw SHA-256 bytes                               |
//! | config JSON   | u32 length + UTF-8                                 |
//! | tensor count  | u32                                                |
//! | per tensor    | u16 name length, name, u8 rank, u32 dims, f64 scale, u16 table size, (i16 symbol, u16 freq-1) per entry, u32 payload length |
//! | payloads      | concatenated in tensor order                       |

use std::io::{Cursor, Read};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::arith::{entropy_decode, entropy_encode, FrequencyTable};
use super::{check_bits, dequantize, quantize, QuantizedTensor};
use crate::components::{ModelConfig, NervModel};
use crate::error::{data_err, NervError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::trainer::checkpoint::{
    config_from_json, read_hash, read_shape, read_str16, read_str32, write_hash, write_shape, write_str16,
    write_str32,
};

pub const BITSTREAM_MAGIC: &[u8; 4] = b"NRVB";
const VERSION: u8 = 1;

/// One entropy-coded tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct CodedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub scale: f64,
    pub table: FrequencyTable,
    pub payload: Vec<u8>,
}

impl CodedTensor {
    pub fn encode(name: &str, q: &QuantizedTensor) -> Result<Self> {
        let table = FrequencyTable::from_symbols(&q.symbols);
        let payload = entropy_encode(&q.symbols, &table)?;
        Ok(CodedTensor { name: name.to_string(), shape: q.shape.clone(), scale: q.scale, table, payload })
    }

    pub fn decode(&self, bits: u8) -> Result<QuantizedTensor> {
        let count = self.shape.iter().product();
        let symbols = entropy_decode(&self.payload, &self.table, count)?;
        Ok(QuantizedTensor { shape: self.shape.clone(), symbols, scale: self.scale, bits })
    }

    pub(crate) fn write_header(&self, out: &mut Vec<u8>) {
        write_str16(out, &self.name);
        write_shape(out, &self.shape);
        out.write_f64::<LittleEndian>(self.scale).expect("vec write");
        out.write_u16::<LittleEndian>(self.table.len() as u16).expect("vec write");
        for (&s, &f) in self.table.symbols().iter().zip(self.table.freqs()) {
            out.write_i16::<LittleEndian>(s as i16).expect("vec write");
            out.write_u16::<LittleEndian>((f - 1) as u16).expect("vec write");
        }
        out.write_u32::<LittleEndian>(self.payload.len() as u32).expect("vec write");
    }

    /// Reads a header; the payload is filled in by [`read_payload`](Self::read_payload).
    pub(crate) fn read_header(cur: &mut Cursor<&[u8]>) -> Result<(Self, usize)> {
        let name = read_str16(cur)?;
        let shape = read_shape(cur)?;
        let scale = cur.read_f64::<LittleEndian>().map_err(|_| truncated("scale"))?;
        if !(scale.is_finite() && scale >= 0.0) {
            return data_err(format!("tensor {name} has invalid scale {scale}"));
        }
        let n = cur.read_u16::<LittleEndian>().map_err(|_| truncated("table size"))? as usize;
        let mut symbols = Vec::with_capacity(n);
        let mut freqs = Vec::with_capacity(n);
        for _ in 0..n {
            symbols.push(cur.read_i16::<LittleEndian>().map_err(|_| truncated("table"))? as i32);
            freqs.push(cur.read_u16::<LittleEndian>().map_err(|_| truncated("table"))? as u32 + 1);
        }
        let table = FrequencyTable::from_freqs(symbols, freqs)?;
        let len = cur.read_u32::<LittleEndian>().map_err(|_| truncated("payload length"))? as usize;
        Ok((CodedTensor { name, shape, scale, table, payload: Vec::new() }, len))
    }

    pub(crate) fn read_payload(&mut self, cur: &mut Cursor<&[u8]>, len: usize) -> Result<()> {
        let remaining = cur.get_ref().len() - cur.position() as usize;
        if len > remaining {
            return Err(truncated(&self.name));
        }
        self.payload = vec![0; len];
        cur.read_exact(&mut self.payload).map_err(|_| truncated(&self.name))
    }
}

pub(crate) fn truncated(what: &str) -> NervError {
    NervError::Data(format!("truncated bitstream while reading {what}"))
}

/// A compressed model: config, bit width and coded tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Bitstream {
    pub config: ModelConfig,
    pub bits: u8,
    pub tensors: Vec<CodedTensor>,
}

impl Bitstream {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BITSTREAM_MAGIC);
        out.push(VERSION);
        out.push(self.bits);
        write_hash(&mut out, &self.config.hash());
        write_str32(&mut out, &self.config.to_json());
        out.write_u32::<LittleEndian>(self.tensors.len() as u32).expect("vec write");
        for t in &self.tensors {
            t.write_header(&mut out);
        }
        for t in &self.tensors {
            out.extend_from_slice(&t.payload);
        }
        out
    }

    /// Parses and verifies the embedded config against its stored hash.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
        if &magic != BITSTREAM_MAGIC {
            return data_err("not a model bitstream (bad magic)");
        }
        let version = cur.read_u8().map_err(|_| truncated("version"))?;
        if version != VERSION {
            return data_err(format!("unsupported bitstream version {version}"));
        }
        let bits = cur.read_u8().map_err(|_| truncated("bits"))?;
        check_bits(bits).map_err(|e| NervError::Data(e.to_string()))?;
        let hash = read_hash(&mut cur)?;
        let config = config_from_json(&read_str32(&mut cur)?, &hash)?;
        let count = cur.read_u32::<LittleEndian>().map_err(|_| truncated("tensor count"))? as usize;
        let mut headers = Vec::new();
        for _ in 0..count {
            headers.push(CodedTensor::read_header(&mut cur)?);
        }
        let mut tensors = Vec::with_capacity(count);
        for (mut t, len) in headers {
            t.read_payload(&mut cur, len)?;
            tensors.push(t);
        }
        if cur.position() as usize != bytes.len() {
            return data_err("trailing bytes after bitstream payload");
        }
        Ok(Bitstream { config, bits, tensors })
    }

    pub fn payload_bytes(&self) -> usize {
        self.tensors.iter().map(|t| t.payload.len()).sum()
    }

    pub fn total_bytes(&self) -> usize {
        self.to_bytes().len()
    }

    pub fn header_bytes(&self) -> usize {
        self.total_bytes() - self.payload_bytes()
    }

    pub fn total_bits(&self) -> u64 {
        self.total_bytes() as u64 * 8
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum()
    }

    /// Refuses a bitstream produced for a different config.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if self.config.hash() != expected.hash() {
            return Err(NervError::HashMismatch { expected: expected.hash(), found: self.config.hash() });
        }
        Ok(())
    }
}

/// Quantizes every parameter at `bits` and entropy-codes it.
pub fn compress_model<T: Scalar>(model: &NervModel<T>, bits: u8) -> Result<Bitstream> {
    check_bits(bits)?;
    let tensors = model
        .params()
        .iter()
        .map(|(name, value)| CodedTensor::encode(name, &quantize(value, bits)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Bitstream { config: model.config().clone(), bits, tensors })
}

/// Rebuilds a model whose parameters are the dequantized symbols.
pub fn decompress_model<T: Scalar>(bitstream: &Bitstream) -> Result<NervModel<T>> {
    let mut store = ParamStore::<T>::new();
    for t in &bitstream.tensors {
        store.add(t.name.clone(), dequantize(&t.decode(bitstream.bits)?));
    }
    NervModel::<T>::new(&bitstream.config, 0)?.with_params(store)
}
