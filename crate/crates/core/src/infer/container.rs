//! Little-endian tensor container shared by avatars and checkpoints.
//!
//! ```text
//! magic[4] version:u32 n_tensors:u32 meta_len:u32 meta[meta_len] (JSON)
//! n_tensors × { name_len:u32 name dtype:u8 rank:u8 dims:u64[rank] offset:u64 nbytes:u64 }
//! payload, every tensor starting at a 64-byte aligned absolute offset
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use half::f16;

use crate::error::{Error, Result};
use crate::tensor::DEVICE;

pub const AVATAR_MAGIC: [u8; 4] = *b"BLAV";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"BLCK";
pub const VERSION: u32 = 1;
const ALIGN: usize = 64;

/// Element type on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    F32,
    F16,
}

impl Storage {
    fn code(self) -> u8 {
        match self {
            Storage::F32 => 0,
            Storage::F16 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Storage::F32),
            1 => Ok(Storage::F16),
            _ => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            Storage::F32 => 4,
            Storage::F16 => 2,
        }
    }
}

/// Serialize named tensors with a JSON metadata block.
pub fn encode(magic: [u8; 4], meta: &serde_json::Value, tensors: &[(String, Tensor)], storage: Storage) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(meta)?;
    let mut head = Vec::new();
    head.extend_from_slice(&magic);
    head.extend_from_slice(&VERSION.to_le_bytes());
    head.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    head.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    head.extend_from_slice(&meta);

    let table_len: usize = tensors
        .iter()
        .map(|(n, t)| 4 + n.len() + 2 + 8 * t.rank() + 16)
        .sum();
    let mut offset = align(head.len() + table_len);
    let mut table = Vec::with_capacity(table_len);
    let mut payloads = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let bytes: Vec<u8> = match storage {
            Storage::F32 => flat.iter().flat_map(|v| v.to_le_bytes()).collect(),
            Storage::F16 => flat.iter().flat_map(|v| f16::from_f32(*v).to_le_bytes()).collect(),
        };
        table.extend_from_slice(&(name.len() as u32).to_le_bytes());
        table.extend_from_slice(name.as_bytes());
        table.push(storage.code());
        table.push(t.rank() as u8);
        for d in t.dims() {
            table.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        table.extend_from_slice(&(offset as u64).to_le_bytes());
        table.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        payloads.push((offset, bytes));
        offset = align(offset + payloads.last().unwrap().1.len());
    }
    let mut out = head;
    out.extend_from_slice(&table);
    for (off, bytes) in payloads {
        out.resize(off, 0);
        out.extend_from_slice(&bytes);
    }
    Ok(out)
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("truncated header".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Decoded container: metadata, tensors (as f32) and the on-disk element type.
#[derive(Debug)]
pub struct Decoded {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
    pub order: Vec<String>,
}

pub fn decode(buf: &[u8], magic: [u8; 4]) -> Result<Decoded> {
    let mut r = Reader { buf, pos: 0 };
    let m = r.take(4)?;
    if m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(m),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = r.u32()? as usize;
    let meta_len = r.u32()? as usize;
    let meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Format(format!("metadata: {e}")))?;
    let mut tensors = BTreeMap::new();
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        let storage = Storage::from_code(r.u8()?)?;
        let rank = r.u8()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let offset = r.u64()? as usize;
        let nbytes = r.u64()? as usize;
        let count: usize = dims.iter().product();
        if nbytes != count * storage.width() {
            return Err(Error::Format(format!("tensor {name}: {nbytes} bytes for {count} elements")));
        }
        let end = offset.checked_add(nbytes).filter(|e| *e <= buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("tensor {name} runs past the end of the file")))?;
        if offset % ALIGN != 0 {
            return Err(Error::Format(format!("tensor {name} is not aligned")));
        }
        let bytes = &buf[offset..end];
        let data: Vec<f32> = match storage {
            Storage::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            Storage::F16 => bytes
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes(c.try_into().unwrap()).to_f32())
                .collect(),
        };
        order.push(name.clone());
        tensors.insert(name, Tensor::from_vec(data, dims, &DEVICE)?);
    }
    Ok(Decoded { meta, tensors, order })
}

pub fn write_file(
    path: &Path,
    magic: [u8; 4],
    meta: &serde_json::Value,
    tensors: &[(String, Tensor)],
    storage: Storage,
) -> Result<()> {
    let bytes = encode(magic, meta, tensors, storage)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path, magic: [u8; 4]) -> Result<Decoded> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, magic)
}
