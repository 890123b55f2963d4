//! Binary persistence of sampler output plus a CSV export.
//!
//! Layout of `draws.bin` (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "MSFPDRAW"
//! version   u32      1
//! dim       u64
//! chains    u64
//! draws     u64      post-warmup draws per chain
//! desc_len  u64      length of the UTF-8 layout descriptor
//! desc      desc_len bytes
//! values    chains * draws * dim f64, chain-major
//! ```
//!
//! Per-chain statistics are not part of the binary file; they go to the
//! companion text metadata.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::sampler::{ChainStats, Draws};

pub const MAGIC: &[u8; 8] = b"MSFPDRAW";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DrawsIoError {
    #[error("not a draws file (bad magic)")]
    BadMagic,
    #[error("unsupported draws file version {0}")]
    UnsupportedVersion(u32),
    #[error("draws file is truncated or inconsistent: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Draws read back from disk with the descriptor they were written with.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredDraws {
    pub descriptor: String,
    pub draws: Draws<f64>,
}

pub fn write_draws<W: Write>(mut out: W, draws: &Draws<f64>, descriptor: &str) -> Result<(), DrawsIoError> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for v in [draws.dim, draws.n_chains, draws.n_draws, descriptor.len()] {
        out.write_all(&(v as u64).to_le_bytes())?;
    }
    out.write_all(descriptor.as_bytes())?;
    for v in &draws.values {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, DrawsIoError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| DrawsIoError::Corrupt(e.to_string()))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_draws<R: Read>(mut input: R) -> Result<StoredDraws, DrawsIoError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| DrawsIoError::BadMagic)?;
    if &magic != MAGIC {
        return Err(DrawsIoError::BadMagic);
    }
    let mut vb = [0u8; 4];
    input.read_exact(&mut vb).map_err(|e| DrawsIoError::Corrupt(e.to_string()))?;
    let version = u32::from_le_bytes(vb);
    if version != VERSION {
        return Err(DrawsIoError::UnsupportedVersion(version));
    }
    let dim = read_u64(&mut input)? as usize;
    let chains = read_u64(&mut input)? as usize;
    let n_draws = read_u64(&mut input)? as usize;
    let desc_len = read_u64(&mut input)? as usize;
    let mut desc = vec![0u8; desc_len];
    input.read_exact(&mut desc).map_err(|e| DrawsIoError::Corrupt(e.to_string()))?;
    let descriptor = String::from_utf8(desc).map_err(|e| DrawsIoError::Corrupt(e.to_string()))?;
    let total = dim
        .checked_mul(chains)
        .and_then(|v| v.checked_mul(n_draws))
        .ok_or_else(|| DrawsIoError::Corrupt("size overflow".into()))?;
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() != total * 8 {
        return Err(DrawsIoError::Corrupt(format!("expected {} value bytes, found {}", total * 8, bytes.len())));
    }
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Ok(StoredDraws { descriptor, draws: Draws { n_chains: chains, n_draws, dim, values, stats: Vec::new() } })
}

pub fn save_draws(path: impl AsRef<Path>, draws: &Draws<f64>, descriptor: &str) -> Result<(), DrawsIoError> {
    write_draws(BufWriter::new(File::create(path)?), draws, descriptor)
}

pub fn load_draws(path: impl AsRef<Path>) -> Result<StoredDraws, DrawsIoError> {
    read_draws(BufReader::new(File::open(path)?))
}

/// Human-readable per-chain statistics.
pub fn format_chain_stats(stats: &[ChainStats]) -> String {
    let mut s = String::from("chain,mean_accept,divergences,step_size,mean_tree_depth,n_leapfrog\n");
    for (c, st) in stats.iter().enumerate() {
        s.push_str(&format!(
            "{},{:.4},{},{:.6},{:.3},{}\n",
            c, st.mean_accept, st.divergences, st.step_size, st.mean_tree_depth, st.n_leapfrog
        ));
    }
    s
}

/// Writes `chain,draw,<names...>` rows, one per stored draw.
pub fn write_draws_csv<W: Write>(out: W, draws: &Draws<f64>, names: &[String]) -> Result<(), DrawsIoError> {
    if names.len() != draws.dim {
        return Err(DrawsIoError::Corrupt(format!("{} names for {} coordinates", names.len(), draws.dim)));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["chain".to_string(), "draw".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for c in 0..draws.n_chains {
        for s in 0..draws.n_draws {
            let mut row = vec![c.to_string(), s.to_string()];
            row.extend(draws.draw(c, s).iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Draws<f64> {
        Draws { n_chains: 2, n_draws: 3, dim: 2, values: (0..12).map(|v| v as f64 * 0.5 - 1.0).collect(), stats: Vec::new() }
    }

    #[test]
    fn roundtrip() {
        let mut buf = Vec::new();
        write_draws(&mut buf, &sample(), "a:0:2").unwrap();
        let back = read_draws(buf.as_slice()).unwrap();
        assert_eq!(back.descriptor, "a:0:2");
        assert_eq!(back.draws, sample());
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(read_draws(&b"NOTDRAWS"[..]), Err(DrawsIoError::BadMagic)));
        let mut buf = Vec::new();
        write_draws(&mut buf, &sample(), "").unwrap();
        buf.pop();
        assert!(matches!(read_draws(buf.as_slice()), Err(DrawsIoError::Corrupt(_))));
        buf[8] = 9;
        assert!(matches!(read_draws(buf.as_slice()), Err(DrawsIoError::UnsupportedVersion(9))));
    }

    #[test]
    fn csv_export() {
        let mut buf = Vec::new();
        write_draws_csv(&mut buf, &sample(), &["x".into(), "y".into()]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("chain,draw,x,y"));
        assert_eq!(text.lines().count(), 7);
    }
}
