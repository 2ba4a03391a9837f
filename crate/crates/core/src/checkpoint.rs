//! Single-file parameter container.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! magic   8  bytes  b"TNCKPT01"
//! count   u32       number of tensors
//! per tensor:
//!   name_len u16
//!   name     name_len bytes of UTF-8
//!   dtype    u8       bytes per element: 4 = f32, 8 = f64
//!   ndim     u8
//!   dims     ndim x u32
//!   data     product(dims) x dtype bytes, raw little-endian floats
//! ```
//!
//! The layout is deliberately flat so that non-Rust consumers can parse it
//! with a few dozen lines of code.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::tensor::Scalar;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"TNCKPT01";

/// One named tensor as stored on disk. Data is held as f64 regardless of
/// dtype; converting f32 through f64 is lossless, so round trips are
/// byte-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: u8,
    pub data: Vec<f64>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes named tensors in the container layout above.
pub fn save<T: Scalar>(
    path: impl AsRef<Path>,
    entries: &[(String, Vec<usize>, &[T])],
) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let emit = |res: std::io::Result<()>| res.map_err(|e| io_err(path, e));
    emit(w.write_all(MAGIC))?;
    emit(w.write_u32::<LittleEndian>(entries.len() as u32))?;
    for (name, shape, data) in entries {
        if name.len() > u16::MAX as usize {
            return Err(Error::contract(format!("tensor name too long: {name}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::contract(format!(
                "tensor {name}: shape {shape:?} does not match {} elements",
                data.len()
            )));
        }
        emit(w.write_u16::<LittleEndian>(name.len() as u16))?;
        emit(w.write_all(name.as_bytes()))?;
        emit(w.write_u8(T::DTYPE))?;
        emit(w.write_u8(shape.len() as u8))?;
        for &d in shape.iter() {
            emit(w.write_u32::<LittleEndian>(d as u32))?;
        }
        let mut bytes = Vec::with_capacity(data.len() * T::DTYPE as usize);
        for &v in data.iter() {
            v.write_le(&mut bytes);
        }
        emit(w.write_all(&bytes))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a container written by [`save`].
pub fn load(path: impl AsRef<Path>) -> Result<Vec<CheckpointEntry>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(format_err(path, "bad magic; not a checkpoint container"));
    }
    let count = r
        .read_u32::<LittleEndian>()
        .map_err(|e| io_err(path, e))?;
    let mut entries = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = r.read_u16::<LittleEndian>().map_err(|e| io_err(path, e))?;
        let mut name_bytes = vec![0u8; name_len as usize];
        r.read_exact(&mut name_bytes).map_err(|e| io_err(path, e))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| format_err(path, "tensor name is not UTF-8"))?;
        let dtype = r.read_u8().map_err(|e| io_err(path, e))?;
        if dtype != 4 && dtype != 8 {
            return Err(format_err(path, format!("unknown dtype tag {dtype}")));
        }
        let ndim = r.read_u8().map_err(|e| io_err(path, e))?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>().map_err(|e| io_err(path, e))? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * dtype as usize];
        r.read_exact(&mut raw).map_err(|e| io_err(path, e))?;
        let data: Vec<f64> = raw
            .chunks_exact(dtype as usize)
            .map(|c| {
                if dtype == 4 {
                    f32::read_le(c) as f64
                } else {
                    f64::read_le(c)
                }
            })
            .collect();
        entries.push(CheckpointEntry {
            name,
            shape,
            dtype,
            data,
        });
    }
    Ok(entries)
}
