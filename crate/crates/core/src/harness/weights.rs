//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PDW1"
//! u32                       tensor count
//! per tensor: u16 name length, name (UTF-8), u8 rank, rank x u32 extents
//! payload: every tensor's values as f64, in manifest order
//! u32                       CRC32 of the payload
//! ```
//!
//! Alongside the network tensors the file stores the running batch-norm
//! statistics and the full Adam state, so a loaded network is bit-identical
//! to the saved one.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{self, NetConfig, NetworkParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PDW1";

/// Named tensors of `params` in file order.
fn named_tensors(params: &NetworkParams) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (i, l) in params.layers.iter().enumerate() {
        out.push((format!("layer{i}.kernel"), l.kernel.clone()));
        out.push((format!("layer{i}.bias"), l.bias.clone()));
        out.push((format!("layer{i}.bn_gamma"), l.bn_gamma.clone()));
        out.push((format!("layer{i}.bn_beta"), l.bn_beta.clone()));
        out.push((format!("layer{i}.bn_running_mean"), l.bn_running_mean.clone()));
        out.push((format!("layer{i}.bn_running_var"), l.bn_running_var.clone()));
    }
    out.push(("head.weight".into(), params.head_weight.clone()));
    out.push(("head.bias".into(), params.head_bias.clone()));
    let a = &params.adam;
    for (j, m) in a.m.iter().enumerate() {
        out.push((format!("adam.m{j}"), m.clone()));
    }
    for (j, v) in a.v.iter().enumerate() {
        out.push((format!("adam.v{j}"), v.clone()));
    }
    let hyper = vec![a.step_count as f64, a.lr, a.beta1, a.beta2, a.epsilon];
    out.push(("adam.hyper".into(), Tensor::new(&[5], hyper).expect("rank-1 tensor")));
    out
}

pub fn encode(params: &NetworkParams) -> Vec<u8> {
    let tensors = named_tensors(params);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in &tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    let payload_start = out.len();
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a file image into a network shaped by `config`.
pub fn decode(bytes: &[u8], config: &NetConfig, path: &Path) -> Result<NetworkParams> {
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let truncated = || corrupt("file is truncated");
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok_or_else(truncated)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let count = r.u32().ok_or_else(truncated)? as usize;
    let mut manifest = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u16().ok_or_else(truncated)? as usize;
        let name = std::str::from_utf8(r.take(len).ok_or_else(truncated)?)
            .map_err(|_| corrupt("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u8().ok_or_else(truncated)? as usize;
        if rank == 0 || rank > Tensor::MAX_RANK {
            return Err(corrupt("tensor rank out of range"));
        }
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize).ok_or_else(truncated))
            .collect::<Result<Vec<_>>>()?;
        manifest.push((name, shape));
    }
    let values: usize = manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let payload = r
        .take(values.checked_mul(8).ok_or_else(truncated)?)
        .ok_or_else(truncated)?;
    let crc = r.u32().ok_or_else(truncated)?;
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes after checksum"));
    }
    if crc32fast::hash(payload) != crc {
        return Err(corrupt("payload checksum mismatch"));
    }

    let mut params = net::build(config)?;
    let expected = named_tensors(&params);
    let found: Vec<String> = manifest.iter().map(|(n, s)| format!("{n}{s:?}")).collect();
    let wanted: Vec<String> = expected.iter().map(|(n, t)| format!("{n}{:?}", t.shape())).collect();
    if found != wanted {
        let first = found
            .iter()
            .zip(&wanted)
            .position(|(a, b)| a != b)
            .unwrap_or(found.len().min(wanted.len()));
        return Err(Error::shape(
            "weight file manifest",
            wanted
                .get(first)
                .cloned()
                .unwrap_or_else(|| format!("{} tensors", wanted.len())),
            found
                .get(first)
                .cloned()
                .unwrap_or_else(|| format!("{} tensors", found.len())),
        ));
    }

    let mut chunks = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut next = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape, chunks.by_ref().take(n).collect()).expect("manifest shape checked")
    };
    for l in &mut params.layers {
        for t in [
            &mut l.kernel,
            &mut l.bias,
            &mut l.bn_gamma,
            &mut l.bn_beta,
            &mut l.bn_running_mean,
            &mut l.bn_running_var,
        ] {
            *t = next(t.shape());
        }
    }
    params.head_weight = next(params.head_weight.shape());
    params.head_bias = next(params.head_bias.shape());
    let a = &mut params.adam;
    for t in a.m.iter_mut().chain(a.v.iter_mut()) {
        *t = next(t.shape());
    }
    let hyper = next(&[5]).into_data();
    a.step_count = hyper[0] as u64;
    a.lr = hyper[1];
    a.beta1 = hyper[2];
    a.beta2 = hyper[3];
    a.epsilon = hyper[4];
    Ok(params)
}

/// Writes atomically: the file appears under `path` only once complete.
pub fn save_model(params: &NetworkParams, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(params)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path, config: &NetConfig) -> Result<NetworkParams> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, config, path)
}
