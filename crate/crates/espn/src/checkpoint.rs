//! Checkpoint file format: magic "ESPN", format version u32, channel
//! count u32, D_phi u64 (all little-endian), then D_phi little-endian
//! 32-bit floats. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{EspnError, Result};

pub const MAGIC: &[u8; 4] = b"ESPN";
pub const FORMAT_VERSION: u32 = 1;

pub fn save(path: &Path, channels: u32, values: &[f32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&channels.to_le_bytes())?;
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(u32, Vec<f32>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(EspnError::Checkpoint(format!(
            "bad magic {magic:?} in {}",
            path.display()
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(EspnError::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    r.read_exact(&mut b4)?;
    let channels = u32::from_le_bytes(b4);
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let d_phi = u64::from_le_bytes(b8) as usize;
    let mut buf = vec![0u8; d_phi * 4];
    r.read_exact(&mut buf)?;
    let values = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((channels, values))
}
