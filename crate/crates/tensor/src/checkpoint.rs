//! Single-file checkpoint format for named parameter tensors.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  field
//! 0       magic bytes b"FGCK"
//! 4       u32 format version (currently 1)
//! 8       u32 metadata entry count M
//!         M entries, each:
//!             u32 key length, key bytes (UTF-8)
//!             u32 value length, value bytes (UTF-8)
//!         u32 parameter count P
//!         P manifest entries, each:
//!             u32 name length, name bytes (UTF-8)
//!             u8  dtype tag (0 = f64)
//!             u32 ndim, then ndim x u64 dimension sizes
//!         payloads: for each parameter in manifest order,
//!             numel x f64 values, little-endian, row-major
//! ```
//!
//! Values are written verbatim, so a checkpoint round-trips bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FGCK";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    Format(String),
}

impl std::fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io error: {e}"),
            CheckpointError::Format(msg) => write!(f, "bad checkpoint: {msg}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

pub fn save_checkpoint(
    path: &Path,
    entries: &[(String, &Tensor)],
    metadata: &BTreeMap<String, String>,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(metadata.len() as u32).to_le_bytes())?;
    for (k, v) in metadata {
        write_str(&mut w, k)?;
        write_str(&mut w, v)?;
    }
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        write_str(&mut w, name)?;
        w.write_all(&[DTYPE_F64])?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for (_, tensor) in entries {
        for v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(Vec<(String, Tensor)>, BTreeMap<String, String>), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format(format!(
            "magic {:?} does not match {:?}",
            magic, MAGIC
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let meta_count = read_u32(&mut r)? as usize;
    let mut metadata = BTreeMap::new();
    for _ in 0..meta_count {
        let k = read_str(&mut r)?;
        let v = read_str(&mut r)?;
        metadata.insert(k, v);
    }
    let param_count = read_u32(&mut r)? as usize;
    let mut manifest = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        let name = read_str(&mut r)?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        if dtype[0] != DTYPE_F64 {
            return Err(CheckpointError::Format(format!(
                "parameter {name}: unknown dtype tag {}",
                dtype[0]
            )));
        }
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            shape.push(u64::from_le_bytes(buf) as usize);
        }
        manifest.push((name, shape));
    }
    let mut entries = Vec::with_capacity(param_count);
    for (name, shape) in manifest {
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        let tensor = Tensor::from_vec(shape, data)
            .map_err(|e| CheckpointError::Format(format!("parameter {name}: {e}")))?;
        entries.push((name, tensor));
    }
    Ok((entries, metadata))
}

fn write_str<W: Write>(w: &mut W, s: &str) -> io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_str<R: Read>(r: &mut R) -> Result<String, CheckpointError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(CheckpointError::Format(format!("string length {len} too large")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CheckpointError::Format(e.to_string()))
}
