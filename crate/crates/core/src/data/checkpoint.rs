//! Binary checkpoint container: named f64 tensors with a trailing CRC.
//!
//! Layout: 8-byte magic `DRMMCKPT`, u32 LE version (= 1), u32 LE tensor
//! count, then per tensor a u16 LE name length, the UTF-8 name, a u8 dtype
//! code (0 = f64), a u8 rank, u64 LE dims, and the raw little-endian
//! payload. A u64 LE CRC-64 of every preceding byte closes the file.

use crate::error::{DrmmError, Result};
use crate::model::{Model, TrainMeta};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

pub const MAGIC: &[u8; 8] = b"DRMMCKPT";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 0;

/// CRC-64/XZ (reflected polynomial 0x42F0E1EBA9EA3693, init and xorout
/// all-ones).
#[derive(Debug, Clone)]
pub struct Crc64 {
    state: u64,
}

const CRC64_POLY_REFLECTED: u64 = 0xC96C_5795_D787_0F42;

fn crc64_table() -> &'static [u64; 256] {
    static TABLE: OnceLock<[u64; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [0u64; 256];
        for (i, entry) in table.iter_mut().enumerate() {
            let mut crc = i as u64;
            for _ in 0..8 {
                crc = if crc & 1 == 1 { (crc >> 1) ^ CRC64_POLY_REFLECTED } else { crc >> 1 };
            }
            *entry = crc;
        }
        table
    })
}

impl Crc64 {
    pub fn new() -> Crc64 {
        Crc64 { state: !0 }
    }

    pub fn update(&mut self, bytes: &[u8]) {
        let table = crc64_table();
        for &b in bytes {
            let idx = ((self.state ^ b as u64) & 0xFF) as usize;
            self.state = (self.state >> 8) ^ table[idx];
        }
    }

    pub fn value(&self) -> u64 {
        !self.state
    }
}

impl Default for Crc64 {
    fn default() -> Self {
        Crc64::new()
    }
}

pub fn crc64_xz(bytes: &[u8]) -> u64 {
    let mut crc = Crc64::new();
    crc.update(bytes);
    crc.value()
}

/// One named tensor inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub tensor: Tensor,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> TensorRecord {
        TensorRecord { name: name.into(), tensor }
    }
}

pub fn encode_records(records: &[TensorRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(records.len())
        .map_err(|_| DrmmError::InvalidParam("too many tensors for one checkpoint".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for rec in records {
        let name = rec.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| DrmmError::InvalidParam(format!("tensor name too long: {}", rec.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        out.push(DTYPE_F64);
        let rank = u8::try_from(rec.tensor.shape().len())
            .map_err(|_| DrmmError::InvalidParam(format!("tensor rank too large: {}", rec.name)))?;
        out.push(rank);
        for &d in rec.tensor.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in rec.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc64_xz(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(DrmmError::Format {
                offset: self.bytes.len() as u64,
                message: format!("unexpected end of file: wanted {} bytes at offset {}", n, self.pos),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<TensorRecord>> {
    if bytes.len() < MAGIC.len() + 4 + 4 + 8 {
        return Err(DrmmError::Format {
            offset: bytes.len() as u64,
            message: "file too short for a checkpoint header".into(),
        });
    }
    if &bytes[..8] != MAGIC {
        return Err(DrmmError::Format {
            offset: 0,
            message: format!(
                "bad magic: expected {:?}, got {:?}",
                String::from_utf8_lossy(MAGIC),
                String::from_utf8_lossy(&bytes[..8])
            ),
        });
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let computed = crc64_xz(body);
    if stored != computed {
        return Err(DrmmError::CrcMismatch { stored, computed });
    }
    let mut cur = Cursor { bytes: body, pos: 8 };
    let version = cur.u32()?;
    if version != VERSION {
        return Err(DrmmError::Format {
            offset: 8,
            message: format!("unsupported version {}", version),
        });
    }
    let count = cur.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name_off = cur.pos as u64;
        let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|_| DrmmError::Format {
            offset: name_off,
            message: "tensor name is not UTF-8".into(),
        })?;
        let dtype_off = cur.pos as u64;
        let dtype = cur.u8()?;
        if dtype != DTYPE_F64 {
            return Err(DrmmError::Format {
                offset: dtype_off,
                message: format!("unknown dtype code {} for {}", dtype, name),
            });
        }
        let rank = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut len: usize = 1;
        for _ in 0..rank {
            let dims_off = cur.pos as u64;
            let d = cur.u64()? as usize;
            len = len.checked_mul(d).ok_or(DrmmError::Format {
                offset: dims_off,
                message: format!("tensor {} dims overflow", name),
            })?;
            shape.push(d);
        }
        let payload = cur.take(len * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push(TensorRecord::new(name, Tensor::new(shape, data)?));
    }
    if cur.pos != body.len() {
        return Err(DrmmError::Format {
            offset: cur.pos as u64,
            message: format!("{} trailing bytes after last tensor", body.len() - cur.pos),
        });
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[TensorRecord]) -> Result<()> {
    fs::write(path, encode_records(records)?)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<TensorRecord>> {
    decode_records(&fs::read(path)?)
}

/// Saves a model plus its training metadata.
pub fn save_checkpoint(path: &Path, model: &Model, meta: &TrainMeta) -> Result<()> {
    let mut records = meta.to_records();
    records.extend(model.to_records());
    write_records(path, &records)
}

/// Loads a model and its training metadata back.
pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainMeta)> {
    let records = read_records(path)?;
    let meta = TrainMeta::from_records(&records)?;
    let model = Model::from_records(&records)?;
    Ok((model, meta))
}
