//! Parameter container: one JSON header line, then the flat parameter vector
//! as little-endian `f64`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Architecture, NetworkParams};
use crate::error::{Error, Result};

pub const FORMAT: &str = "amm-exec-dgm";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub width: usize,
    pub layers: usize,
    pub param_count: usize,
    pub seed: u64,
    pub iteration: usize,
}

pub fn write<W: Write>(mut w: W, net: &NetworkParams, seed: u64, iteration: usize) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        input_dim: net.arch.input_dim,
        width: net.arch.width,
        layers: net.arch.layers,
        param_count: net.len(),
        seed,
        iteration,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    let mut bytes = Vec::with_capacity(8 * net.len());
    for v in &net.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read<R: Read>(r: R) -> Result<(Header, NetworkParams)> {
    let mut r = BufReader::new(r);
    let mut line = Vec::new();
    r.read_until(b'\n', &mut line)?;
    let header: Header =
        serde_json::from_slice(&line).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported container {} v{}",
            header.format, header.version
        )));
    }
    let arch = Architecture {
        input_dim: header.input_dim,
        width: header.width,
        layers: header.layers,
    };
    if arch.param_count() != header.param_count {
        return Err(Error::Checkpoint(format!(
            "parameter count {} does not match architecture ({})",
            header.param_count,
            arch.param_count()
        )));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * header.param_count {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            8 * header.param_count,
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let net = NetworkParams::from_values(arch, values).expect("length checked");
    Ok((header, net))
}

pub fn save(path: &Path, net: &NetworkParams, seed: u64, iteration: usize) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write(std::io::BufWriter::new(f), net, seed, iteration)
}

pub fn load(path: &Path) -> Result<(Header, NetworkParams)> {
    let f = std::fs::File::open(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    read(f)
}
