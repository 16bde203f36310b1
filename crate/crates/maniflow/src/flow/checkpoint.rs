//! Binary checkpoint format.
//!
//! Layout: magic bytes `MFLW`, version `u32` (little endian), header length
//! `u64` (little endian), a UTF-8 JSON header (architecture, seed, training
//! metadata, batch-norm statistics, optional encoder section), then all
//! parameters as little-endian 64-bit floats in canonical order — flow
//! parameters first, encoder parameters after when present. Round trips are
//! bit exact.

use super::{param_count, BnStats, FlowArchitecture, FlowModel};
use crate::encoder::{encoder_param_count, EncoderModel};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MFLW";
const VERSION: u32 = 1;

/// Seed and free-form training metadata carried in the header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            metadata: serde_json::Value::Null,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderHeader {
    widths: Vec<usize>,
    latent_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    arch: FlowArchitecture,
    seed: u64,
    #[serde(default)]
    metadata: serde_json::Value,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    bn_stats: Vec<BnStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    encoder: Option<EncoderHeader>,
}

/// A loaded checkpoint: the flow, its metadata, and the encoder when the
/// checkpoint holds a conditional autoencoding model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: FlowModel,
    pub meta: CheckpointMeta,
    pub encoder: Option<EncoderModel>,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &FlowModel,
    encoder: Option<&EncoderModel>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let header = Header {
        arch: model.arch.clone(),
        seed: meta.seed,
        metadata: meta.metadata.clone(),
        bn_stats: model.bn_stats.clone(),
        encoder: encoder.map(|e| EncoderHeader {
            widths: e.widths.clone(),
            latent_dim: e.latent_dim,
        }),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for p in &model.params {
        w.write_all(&p.to_le_bytes())?;
    }
    if let Some(enc) = encoder {
        for p in &enc.params {
            w.write_all(&p.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::invalid("not a flow checkpoint (bad magic bytes)"));
    }
    let mut v4 = [0u8; 4];
    r.read_exact(&mut v4)?;
    let version = u32::from_le_bytes(v4);
    if version != VERSION {
        return Err(Error::invalid(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut l8 = [0u8; 8];
    r.read_exact(&mut l8)?;
    let header_len = u64::from_le_bytes(l8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;
    header.arch.validate()?;

    let n_flow = param_count(&header.arch);
    let params = read_f64s(&mut r, n_flow)?;
    let encoder = match &header.encoder {
        Some(eh) => {
            let n_enc = encoder_param_count(&eh.widths, eh.latent_dim);
            let enc_params = read_f64s(&mut r, n_enc)?;
            Some(EncoderModel {
                widths: eh.widths.clone(),
                latent_dim: eh.latent_dim,
                params: enc_params,
            })
        }
        None => None,
    };
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::invalid("trailing bytes after checkpoint payload"));
    }
    if header.arch.use_batchnorm && header.bn_stats.len() != header.arch.num_layers {
        return Err(Error::invalid("checkpoint is missing batch-norm statistics"));
    }
    Ok(Checkpoint {
        model: FlowModel {
            arch: header.arch,
            params,
            bn_stats: header.bn_stats,
        },
        meta: CheckpointMeta {
            seed: header.seed,
            metadata: header.metadata,
        },
        encoder,
    })
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}
