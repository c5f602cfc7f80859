//! Binary persistence of a [`Field`] together with the model it was computed for.
//!
//! Layout, all little-endian:
//!
//! ```text
//!   magic      8 bytes   "RNLSF1\0\0"
//!   version    u32       1
//!   dim        u8
//!   per axis   u64 n, f64 min, f64 max
//!   model      f64 p, f64 beta, f64 Omega, f64 omega
//!   potential  u8 tag, then f64 coefficients (2, 3 or 2 for tags 0, 1, 2)
//!   samples    n₁·n₂ pairs (f64 re, f64 im), x₁ fastest
//! ```

use std::fs;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{Axis, Field, Grid};
use crate::physics::{ModelParams, PotentialSpec};

pub const MAGIC: &[u8; 8] = b"RNLSF1\0\0";
pub const VERSION: u32 = 1;

pub fn encode(field: &Field, params: &ModelParams) -> Vec<u8> {
    let axes = field.grid().axes();
    let mut out = Vec::with_capacity(64 + 16 * field.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(axes.len() as u8);
    for a in axes {
        out.extend_from_slice(&(a.n as u64).to_le_bytes());
        out.extend_from_slice(&a.min.to_le_bytes());
        out.extend_from_slice(&a.max.to_le_bytes());
    }
    for v in [params.p, params.beta, params.rotation, params.omega] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(params.potential.tag());
    for c in params.potential.coefficients() {
        out.extend_from_slice(&c.to_le_bytes());
    }
    for z in field.values() {
        out.extend_from_slice(&z.re.to_le_bytes());
        out.extend_from_slice(&z.im.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.pos + n > self.bytes.len() {
            return Err(format!(
                "size mismatch: header needs {} more bytes at offset {}",
                n, self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> std::result::Result<(Field, ModelParams), String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).map_err(|_| "bad magic".to_string())? != MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let dim = r.u8()? as usize;
    if !(1..=2).contains(&dim) {
        return Err(format!("unsupported dimension {dim}"));
    }
    let mut axes = Vec::with_capacity(dim);
    for _ in 0..dim {
        let n = r.u64()? as usize;
        let min = r.f64()?;
        let max = r.f64()?;
        axes.push(Axis::new(min, max, n));
    }
    let p = r.f64()?;
    let beta = r.f64()?;
    let rotation = r.f64()?;
    let omega = r.f64()?;
    let tag = r.u8()?;
    let count =
        PotentialSpec::coefficient_count(tag).ok_or(format!("unknown potential tag {tag}"))?;
    let coeffs = (0..count)
        .map(|_| r.f64())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let potential = PotentialSpec::from_tag(tag, &coeffs).ok_or("bad potential coefficients")?;

    let nodes: usize = axes.iter().map(|a| a.n).product();
    let remaining = bytes.len() - r.pos;
    if remaining != nodes * 16 {
        return Err(format!(
            "size mismatch: header declares {nodes} samples ({} bytes), file has {remaining}",
            nodes * 16
        ));
    }
    let grid = Grid::new(axes).map_err(|e| e.to_string())?;
    let data = bytes[r.pos..]
        .chunks_exact(16)
        .map(|c| {
            Complex64::new(
                f64::from_le_bytes(c[..8].try_into().unwrap()),
                f64::from_le_bytes(c[8..].try_into().unwrap()),
            )
        })
        .collect();
    let field = Field::new(grid, data).map_err(|e| e.to_string())?;
    Ok((
        field,
        ModelParams {
            p,
            beta,
            rotation,
            omega,
            potential,
        },
    ))
}

pub fn write_field(field: &Field, params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode(field, params))?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<(Field, ModelParams)> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|reason| Error::FieldFile {
        path: path.to_path_buf(),
        reason,
    })
}
