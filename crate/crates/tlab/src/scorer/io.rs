//! Binary parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"TLAB"                       magic
//! u32    version (currently 1)
//! u64    config byte length, then that many bytes of `key = value` text
//! u32    tensor count
//! per tensor:
//!   u32  name length, then the UTF-8 name
//!   u32  rank, then rank × u64 dimensions
//!   row-major f64 payload
//! ```
//!
//! Loading rebuilds the parameter set from the embedded config and demands
//! exactly the expected tensors with exactly the expected shapes, so a file
//! and a model architecture can never silently drift apart.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{zeros_for, ModelConfig, ModelParameters};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"TLAB";
const VERSION: u32 = 1;
/// Upper bound on the embedded config text; anything larger is a corrupt
/// length field, not a real config.
const MAX_CONFIG_BYTES: u64 = 1 << 20;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format(format!("parameter file ended while reading {what}")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut buf = [0u8; 8];
    read_exact(r, &mut buf, what)?;
    Ok(u64::from_le_bytes(buf))
}

/// Writes `config` and `params` to `path`, replacing any existing file.
pub fn save_parameters(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    params: &ModelParameters,
) -> Result<()> {
    config.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    let kv = config.to_kv_lines();
    write_u64(&mut w, kv.len() as u64)?;
    w.write_all(kv.as_bytes())?;

    let tensors = params.tensors();
    write_u32(&mut w, tensors.len() as u32)?;
    for (name, view) in tensors {
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        write_u32(&mut w, view.ndim() as u32)?;
        for &d in view.shape() {
            write_u64(&mut w, d as u64)?;
        }
        for &v in view.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a parameter container and validates it against its own embedded
/// config.
pub fn load_parameters(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParameters)> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "the magic number")?;
    if &magic != MAGIC {
        return Err(Error::Format("not a parameter file (bad magic number)".into()));
    }
    let version = read_u32(&mut r, "the version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported parameter file version {version}, expected {VERSION}"
        )));
    }

    let kv_len = read_u64(&mut r, "the config length")?;
    if kv_len > MAX_CONFIG_BYTES {
        return Err(Error::Format(format!(
            "config block of {kv_len} bytes exceeds the {MAX_CONFIG_BYTES}-byte bound"
        )));
    }
    let mut kv = vec![0u8; kv_len as usize];
    read_exact(&mut r, &mut kv, "the config block")?;
    let kv = String::from_utf8(kv)
        .map_err(|_| Error::Format("config block is not valid UTF-8".into()))?;
    let config = ModelConfig::from_kv_lines(&kv)?;
    config.validate()?;

    let mut params = zeros_for(&config);
    let expected = params.count();
    let declared = read_u32(&mut r, "the tensor count")? as usize;
    {
        let mut tensors = params.tensors_mut();
        if declared != tensors.len() {
            return Err(Error::Format(format!(
                "file declares {declared} tensors, model needs {}",
                tensors.len()
            )));
        }
        let mut filled = vec![false; tensors.len()];
        for _ in 0..tensors.len() {
            let name_len = read_u32(&mut r, "a tensor name length")? as usize;
            if name_len > 4096 {
                return Err(Error::Format("tensor name longer than 4096 bytes".into()));
            }
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name, "a tensor name")?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("tensor name is not valid UTF-8".into()))?;
            let rank = read_u32(&mut r, "a tensor rank")? as usize;
            if rank > 8 {
                return Err(Error::Format(format!("tensor {name} declares rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(read_u64(&mut r, "a tensor dimension")? as usize);
            }

            let slot = tensors
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {name:?}")))?;
            if filled[slot] {
                return Err(Error::Format(format!("tensor {name:?} appears twice")));
            }
            if tensors[slot].1.shape() != dims.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {name:?} has shape {dims:?}, model expects {:?}",
                    tensors[slot].1.shape()
                )));
            }
            let mut buf = [0u8; 8];
            for v in tensors[slot].1.iter_mut() {
                read_exact(&mut r, &mut buf, "tensor values")?;
                let x = f64::from_le_bytes(buf);
                if !x.is_finite() {
                    return Err(Error::Format(format!(
                        "tensor {name:?} contains a non-finite value"
                    )));
                }
                *v = x;
            }
            filled[slot] = true;
        }
    }

    let mut trailer = [0u8; 1];
    if r.read(&mut trailer)? != 0 {
        return Err(Error::Format("trailing bytes after the last tensor".into()));
    }
    debug_assert_eq!(params.count(), expected);
    Ok((config, params))
}
