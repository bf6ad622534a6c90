//! Versioned binary container for network weights.
//!
//! Layout, all integers little-endian:
//! `"MLCK"`, `u32` version, 32-byte SHA-256 of the config JSON, `u32` length
//! and the config JSON, `u64` step, `u32` tensor count, then per tensor a
//! `u32`-prefixed name, `u32` rows, `u32` cols and `rows * cols` `f32` values.

use std::io::{Read, Write};

use memlab_core::{Error, Result};
use sha2::{Digest, Sha256};

use crate::net::{Network, NetworkConfig};

pub const MAGIC: &[u8; 4] = b"MLCK";
pub const VERSION: u32 = 1;

pub fn config_hash(config: &NetworkConfig) -> Result<[u8; 32]> {
    let json = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&json).into())
}

pub fn config_hash_hex(config: &NetworkConfig) -> Result<String> {
    Ok(hex::encode(config_hash(config)?))
}

pub fn save<W: Write>(net: &Network, step: u64, mut w: W) -> Result<()> {
    let json = serde_json::to_vec(&net.config)?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&Sha256::digest(&json))?;
    write_len(&mut w, json.len())?;
    w.write_all(&json)?;
    w.write_all(&step.to_le_bytes())?;
    write_len(&mut w, net.params.len())?;
    for p in &net.params {
        write_len(&mut w, p.name.len())?;
        w.write_all(p.name.as_bytes())?;
        write_len(&mut w, p.rows)?;
        write_len(&mut w, p.cols)?;
        let mut buf = Vec::with_capacity(4 * p.len());
        for &x in &p.value {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads a checkpoint back into a network with the stored configuration.
pub fn load<R: Read>(mut r: R) -> Result<(Network, u64)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut hash = [0u8; 32];
    r.read_exact(&mut hash)?;
    let json = read_bytes(&mut r)?;
    if Sha256::digest(&json).as_slice() != hash {
        return Err(Error::Format("config hash does not match its contents".into()));
    }
    let config: NetworkConfig = serde_json::from_slice(&json)?;
    let mut step = [0u8; 8];
    r.read_exact(&mut step)?;
    let mut net = Network::new(config, 0)?;
    let count = read_u32(&mut r)? as usize;
    if count != net.params.len() {
        return Err(Error::Format(format!("{count} tensors, expected {}", net.params.len())));
    }
    for p in &mut net.params {
        let name = String::from_utf8(read_bytes(&mut r)?).map_err(|e| Error::Format(e.to_string()))?;
        let (rows, cols) = (read_u32(&mut r)? as usize, read_u32(&mut r)? as usize);
        if name != p.name || rows != p.rows || cols != p.cols {
            return Err(Error::Format(format!("tensor {name} {rows}x{cols} does not match {} {}x{}", p.name, p.rows, p.cols)));
        }
        let mut buf = vec![0u8; 4 * rows * cols];
        r.read_exact(&mut buf)?;
        for (x, b) in p.value.iter_mut().zip(buf.chunks_exact(4)) {
            *x = f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
        }
    }
    Ok((net, u64::from_le_bytes(step)))
}

fn write_len<W: Write>(w: &mut W, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format("length exceeds u32".into()))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}
