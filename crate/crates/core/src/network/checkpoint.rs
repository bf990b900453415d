//! Single-file checkpoints. Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "CRXCKPT\0"
//! version  u32
//! hlen     u64      length of the JSON header
//! header   hlen bytes of UTF-8 JSON
//! payload  f64 values of every tensor listed in the header, in order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_network, ArchSpec, EpochRecord, Network};
use crate::autodiff::{Precision, Tensor};
use crate::codebook::CodingScheme;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CRXCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum TensorKind {
    Param,
    Buffer,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    arch: ArchSpec,
    schemes: Vec<CodingScheme>,
    seed: u64,
    precision: Precision,
    history: Vec<EpochRecord>,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    for p in net.store.params() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            kind: TensorKind::Param,
            shape: p.value.shape().to_vec(),
        });
    }
    for b in net.store.buffers() {
        tensors.push(TensorEntry {
            name: b.name.clone(),
            kind: TensorKind::Buffer,
            shape: b.value.shape().to_vec(),
        });
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        arch: net.arch.clone(),
        schemes: net.schemes.clone(),
        seed: net.seed,
        precision: net.precision,
        history: net.history.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let io = |e| Error::io(path, e);
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        w.write_all(&CHECKPOINT_MAGIC).map_err(io)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        let values = net
            .store
            .params()
            .iter()
            .map(|p| &p.value)
            .chain(net.store.buffers().iter().map(|b| &b.value));
        for t in values {
            for v in t.data() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b).map_err(io)?;
    let version = u32::from_le_bytes(u32b);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut u64b = [0u8; 8];
    r.read_exact(&mut u64b).map_err(io)?;
    let hlen = usize::try_from(u64::from_le_bytes(u64b))
        .map_err(|_| Error::Checkpoint("header length overflow".into()))?;
    let mut json = vec![0u8; hlen];
    r.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json)?;

    let mut net = build_network(&header.arch, &header.schemes, header.seed, header.precision)?;
    net.history = header.history;
    let expected = net.store.params().len() + net.store.buffers().len();
    if header.tensors.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{} tensors stored, architecture has {expected}",
            header.tensors.len()
        )));
    }
    let n_params = net.store.params().len();
    for (i, entry) in header.tensors.iter().enumerate() {
        let mut data = vec![0.0; entry.shape.iter().product()];
        for v in &mut data {
            r.read_exact(&mut u64b).map_err(io)?;
            *v = f64::from_le_bytes(u64b);
        }
        let value = Tensor::new(entry.shape.clone(), data)?;
        let (name, slot) = match entry.kind {
            TensorKind::Param if i < n_params => {
                let p = &mut net.store.params_mut()[i];
                (&p.name, &mut p.value)
            }
            TensorKind::Buffer if i >= n_params => {
                let b = &mut net.store.buffers_mut()[i - n_params];
                (&b.name, &mut b.value)
            }
            _ => return Err(Error::Checkpoint(format!("tensor {} out of order", entry.name))),
        };
        if *name != entry.name || slot.shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {} {:?} does not match {name} {:?}",
                entry.name,
                value.shape(),
                slot.shape()
            )));
        }
        *slot = value;
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
    }
    Ok(net)
}
