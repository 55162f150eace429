//! SDF3 volume container (little-endian):
//!
//! ```text
//! magic  "SDF3"          4 bytes
//! version u32            = 1
//! nx, ny, nz u32
//! components u32         1 = scalar SDF, 3 = velocity field
//! origin  f64 x 3
//! spacing f64 x 3
//! values  f32 x (nx*ny*nz*components), component-fastest then x-fastest
//! ```

use super::{GridSpec, SdfError, SdfVolume};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"SDF3";
pub const VERSION: u32 = 1;

pub fn write_volume(vol: &SdfVolume, path: &Path) -> Result<(), SdfError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_volume_to(vol, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_volume_to(vol: &SdfVolume, w: &mut impl Write) -> Result<(), SdfError> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for d in vol.grid.dims {
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&vol.components.to_le_bytes())?;
    for v in vol.grid.origin {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in vol.grid.spacing {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in &vol.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<SdfVolume, SdfError> {
    let mut r = BufReader::new(File::open(path)?);
    read_volume_from(&mut r)
}

pub fn read_volume_from(r: &mut impl Read) -> Result<SdfVolume, SdfError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(SdfError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(SdfError::BadVersion(version));
    }
    let nx = read_u32(r)?;
    let ny = read_u32(r)?;
    let nz = read_u32(r)?;
    let components = read_u32(r)?;
    if components != 1 && components != 3 {
        return Err(SdfError::BadComponents(components));
    }
    let mut origin = [0.0f64; 3];
    for v in origin.iter_mut() {
        *v = read_f64(r)?;
    }
    let mut spacing = [0.0f64; 3];
    for v in spacing.iter_mut() {
        *v = read_f64(r)?;
    }
    let grid = GridSpec::new([nx, ny, nz], origin, spacing)?;
    let expected = (nx as usize)
        .checked_mul(ny as usize)
        .and_then(|v| v.checked_mul(nz as usize))
        .and_then(|v| v.checked_mul(components as usize))
        .ok_or(SdfError::DimOverflow { nx, ny, nz, components })?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected * 4 {
        return Err(SdfError::Truncated {
            expected,
            found: payload.len() / 4,
        });
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    SdfVolume::new(grid, components, values)
}

fn read_u32(r: &mut impl Read) -> Result<u32, SdfError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, SdfError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
