//! FMAP: a little-endian dump of one rendered BEV map.
//!
//! Layout: `"FMAP"`, `u16` version, `u32` W, H, C, `f64` cell size,
//! origin x, origin y, then `W*H*C` `f32` values in `(iy, ix, c)` order.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::encoders::FeatureMap;
use crate::error::{Error, Result};
use crate::geom::GridSpec;
use crate::real::Real;

pub const MAGIC: &[u8; 4] = b"FMAP";
pub const VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 4 + 2 + 12 + 24;

pub fn encode<T: Real>(map: &FeatureMap<T>) -> Vec<u8> {
    let g = &map.grid;
    let c = map.channels();
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * map.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [g.width, g.height, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in [g.cell_size, g.x_min, g.y_min] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in map.data.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<FeatureMap<f32>> {
    let bad = |m: &str| Error::Parse(format!("FMAP: {m}"));
    if bytes.len() < HEADER_BYTES {
        return Err(bad("truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let (w, h, c) = (u32_at(6), u32_at(10), u32_at(14));
    let (s, x0, y0) = (f64_at(18), f64_at(26), f64_at(34));
    let n = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| bad("dimensions overflow"))?;
    if bytes.len() != HEADER_BYTES + 4 * n {
        return Err(bad(&format!(
            "payload is {} bytes, expected {}",
            bytes.len() - HEADER_BYTES,
            4 * n
        )));
    }
    let grid = GridSpec::new(x0, y0, x0 + w as f64 * s, y0 + h as f64 * s, s)?;
    let data = bytes[HEADER_BYTES..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok(FeatureMap {
        grid,
        data: Tensor::from_vec(&[h, w, c], data)?,
    })
}

pub fn write<T: Real>(path: &Path, map: &FeatureMap<T>) -> Result<()> {
    std::fs::write(path, encode(map))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<FeatureMap<f32>> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FeatureMap<f64> {
        let grid = GridSpec::new(-2.0, -1.0, 2.0, 1.0, 0.5).unwrap();
        FeatureMap {
            grid,
            data: Tensor::from_fn(&[4, 8, 3], |i| i as f64 * 0.25 - 3.0),
        }
    }

    #[test]
    fn roundtrip_and_length() {
        let m = sample();
        let bytes = encode(&m);
        assert_eq!(bytes.len(), 4 + 2 + 12 + 24 + 4 * 8 * 4 * 3);
        let back = decode(&bytes).unwrap();
        assert_eq!(back.grid, m.grid);
        assert_eq!(back.data.cast::<f64>(), m.data);
    }

    #[test]
    fn header_fields_are_little_endian() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..4], b"FMAP");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[8, 0, 0, 0]);
        assert_eq!(&bytes[10..14], &[4, 0, 0, 0]);
        assert_eq!(&bytes[14..18], &[3, 0, 0, 0]);
        assert_eq!(f64::from_le_bytes(bytes[26..34].try_into().unwrap()), -2.0);
        // first value is cell (iy=0, ix=0), channel 0
        assert_eq!(f32::from_le_bytes(bytes[42..46].try_into().unwrap()), -3.0);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut bytes = encode(&sample());
        assert!(decode(&bytes[..20]).is_err());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
        let mut v2 = encode(&sample());
        v2[4] = 2;
        assert!(decode(&v2).is_err());
    }
}
