//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, JSON header,
//! then raw little-endian values: every parameter in manifest order followed
//! by every momentum buffer in the same order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensor::{Precision, Real, Tensor};
use crate::train::{EpochLog, Trainer};

pub const MAGIC: &[u8; 8] = b"SKODECKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub config: Config,
    pub precision: Precision,
    pub manifest: Vec<ManifestEntry>,
    /// Completed epochs; the shuffle stream of the next epoch derives from it
    /// and `config.train.seed`.
    pub epoch: usize,
    pub log: Vec<EpochLog>,
    pub payload_bytes: usize,
    /// Hex SHA-256 of the payload.
    pub sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_bytes<T: Real>(trainer: &Trainer<T>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    for t in trainer.params.tensors() {
        t.data().iter().for_each(|&x| x.write_le(&mut payload));
    }
    for v in &trainer.velocity {
        v.iter().for_each(|&x| x.write_le(&mut payload));
    }
    let header = Header {
        version: FORMAT_VERSION,
        config: trainer.config.clone(),
        precision: T::PRECISION,
        manifest: trainer
            .params
            .iter()
            .map(|p| ManifestEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
        epoch: trainer.epoch,
        log: trainer.log.clone(),
        payload_bytes: payload.len(),
        sha256: hex(&Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Splits a container into its validated header and payload.
pub fn parse_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Integrity("missing checkpoint magic".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let rest = &bytes[16..];
    if rest.len() < len {
        return Err(Error::Integrity(format!(
            "header truncated: {} of {len} bytes",
            rest.len()
        )));
    }
    let header: Header = serde_json::from_slice(&rest[..len])
        .map_err(|e| Error::Integrity(format!("unreadable header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Compatibility(format!(
            "format version {} (this build reads {FORMAT_VERSION})",
            header.version
        )));
    }
    let payload = &rest[len..];
    if payload.len() != header.payload_bytes {
        return Err(Error::Integrity(format!(
            "payload is {} bytes, header says {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    if hex(&Sha256::digest(payload)) != header.sha256 {
        return Err(Error::Integrity("payload checksum mismatch".into()));
    }
    Ok((header, payload))
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Trainer<T>> {
    let (header, payload) = parse_header(bytes)?;
    if header.precision != T::PRECISION {
        return Err(Error::Compatibility(format!(
            "checkpoint stores {:?} precision, {:?} requested",
            header.precision,
            T::PRECISION
        )));
    }
    let mut trainer = Trainer::<T>::new(header.config.clone())?;
    let names: Vec<_> = trainer.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect();
    let stored: Vec<_> = header.manifest.iter().map(|m| (m.name.clone(), m.shape.clone())).collect();
    if names != stored {
        return Err(Error::Compatibility("parameter manifest does not match the model".into()));
    }
    let width = T::PRECISION.bytes();
    let total: usize = stored.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    if payload.len() != 2 * total * width {
        return Err(Error::Integrity(format!(
            "payload holds {} bytes, manifest needs {}",
            payload.len(),
            2 * total * width
        )));
    }
    let mut values = payload.chunks_exact(width).map(T::read_le);
    let ids: Vec<_> = trainer.params.ids().collect();
    for (id, (_, shape)) in ids.iter().zip(&stored) {
        let n = shape.iter().product();
        let data: Vec<T> = values.by_ref().take(n).collect();
        trainer.params.set(*id, Tensor::new(shape.clone(), data)?)?;
    }
    for v in trainer.velocity.iter_mut() {
        for (dst, x) in v.iter_mut().zip(values.by_ref()) {
            *dst = x;
        }
    }
    trainer.epoch = header.epoch;
    trainer.log = header.log;
    Ok(trainer)
}

pub fn save<T: Real>(trainer: &Trainer<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(trainer)?)?;
    Ok(())
}

pub fn load<T: Real>(path: impl AsRef<Path>) -> Result<Trainer<T>> {
    from_bytes(&fs::read(path)?)
}

/// Header of the checkpoint at `path` (validates the checksum too).
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    let bytes = fs::read(path)?;
    Ok(parse_header(&bytes)?.0)
}
