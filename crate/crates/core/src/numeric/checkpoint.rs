//! Single-file parameter checkpoints.
//!
//! Layout:
//!
//! ```text
//! bytes 0..8    magic "FRCKPT01"
//! bytes 8..16   header length H (u64, little-endian)
//! bytes 16..16+H  UTF-8 header, newline-separated:
//!                 meta <key>=<value>
//!                 tensor <name> <offset> <d0>x<d1>x...
//! remainder     payload: little-endian f64 values
//! ```
//!
//! `offset` counts f64 values from the start of the payload. Tensors are
//! stored in parameter order and the payload length must equal the sum of
//! all tensor sizes exactly. Meta values may not contain newlines.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"FRCKPT01";

pub type Meta = BTreeMap<String, String>;

pub fn encode_checkpoint(store: &ParamStore, meta: &Meta) -> Result<Vec<u8>> {
    let mut header = String::new();
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Invalid(format!("meta entry {k:?} not encodable")));
        }
        header.push_str(&format!("meta {k}={v}\n"));
    }
    let mut offset = 0usize;
    for (name, t) in store.iter() {
        if name.contains(char::is_whitespace) {
            return Err(Error::Invalid(format!(
                "parameter name {name:?} has whitespace"
            )));
        }
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("tensor {name} {offset} {}\n", dims.join("x")));
        offset += t.len();
    }
    let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ParamStore, Meta)> {
    let corrupt = |msg: &str| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| corrupt("truncated header"))?;
    let header = std::str::from_utf8(body).map_err(|_| corrupt("header not utf-8"))?;
    let payload = &bytes[16 + hlen..];
    if !payload.len().is_multiple_of(8) {
        return Err(corrupt("payload not a whole number of f64 values"));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let mut meta = Meta::new();
    let mut store = ParamStore::new();
    let mut expected = 0usize;
    for line in header.lines() {
        if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest
                .split_once('=')
                .ok_or_else(|| corrupt("meta without '='"))?;
            meta.insert(k.to_string(), v.to_string());
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            let [name, offset, dims] = parts[..] else {
                return Err(corrupt("malformed tensor line"));
            };
            let offset: usize = offset.parse().map_err(|_| corrupt("bad offset"))?;
            let shape = dims
                .split('x')
                .map(str::parse)
                .collect::<std::result::Result<Vec<usize>, _>>()
                .map_err(|_| corrupt("bad shape"))?;
            let n: usize = shape.iter().product();
            if offset != expected {
                return Err(corrupt("tensor offsets not contiguous"));
            }
            let data = values
                .get(offset..offset + n)
                .ok_or_else(|| corrupt("payload shorter than manifest"))?
                .to_vec();
            expected += n;
            let t = Tensor::new(&shape, data).map_err(|e| corrupt(&e.to_string()))?;
            store.insert(name, t).map_err(|e| corrupt(&e.to_string()))?;
        } else if !line.is_empty() {
            return Err(corrupt("unknown header line"));
        }
    }
    if expected != values.len() {
        return Err(corrupt("payload length does not match manifest"));
    }
    Ok((store, meta))
}

/// Writes atomically: temp file in the same directory, then rename.
pub fn save_checkpoint(store: &ParamStore, meta: &Meta, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(store, meta)?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, Meta)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp-write");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
