//! `PCF1` point-cloud files.
//!
//! Binary layout, little-endian: magic `PCF1`, `u32` point count, then
//! `count * 3` `f32` values, point-major. A text variant stores one
//! `x y z` line per point.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Point3, PointCloud};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PCF1";

pub fn encode(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + cloud.len() * 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in cloud.points() {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8], file: &str) -> Result<PointCloud> {
    if bytes.len() < 4 {
        return Err(Error::parse(file, "header", 0, "truncated magic"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::parse(file, "header", 0, "bad magic, expected PCF1"));
    }
    if bytes.len() < 8 {
        return Err(Error::parse(file, "header", 4, "truncated point count"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    let need = n * 12;
    if body.len() < need {
        let offset = 8 + body.len() - body.len() % 12;
        return Err(Error::parse(
            file,
            "body",
            offset as u64,
            format!("expected {n} points ({need} bytes), found {} bytes", body.len()),
        ));
    }
    if body.len() > need {
        return Err(Error::parse(file, "body", (8 + need) as u64, "trailing bytes after body"));
    }
    let mut pts = Vec::with_capacity(n);
    for (i, chunk) in body.chunks_exact(12).enumerate() {
        let mut p = [0.0; 3];
        for (a, v) in p.iter_mut().enumerate() {
            let off = a * 4;
            *v = f32::from_le_bytes(chunk[off..off + 4].try_into().unwrap()) as f64;
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(file, "body", (8 + i * 12) as u64, "non-finite coordinate"));
        }
        pts.push(p);
    }
    PointCloud::new(pts).map_err(|e| Error::parse(file, "body", 8, e.to_string()))
}

pub fn write(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, encode(cloud)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

pub fn encode_text(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 32);
    for p in cloud.points() {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    s
}

pub fn decode_text(text: &str, file: &str) -> Result<PointCloud> {
    let mut pts: Vec<Point3> = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            let vals: Vec<f64> = trimmed
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(file, "body", offset, format!("bad number: {e}")))?;
            if vals.len() != 3 {
                return Err(Error::parse(file, "body", offset, format!("expected 3 values, got {}", vals.len())));
            }
            pts.push([vals[0], vals[1], vals[2]]);
        }
        offset += line.len() as u64;
    }
    PointCloud::new(pts).map_err(|e| Error::parse(file, "body", 0, e.to_string()))
}

/// Read either variant, detected by the magic bytes.
pub fn read_any(path: &Path) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    if bytes.starts_with(MAGIC) {
        decode(&bytes, &name)
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::parse(&name, "body", e.valid_up_to() as u64, "not UTF-8 text"))?;
        decode_text(text, &name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud() -> PointCloud {
        PointCloud::new(vec![[0.5, -0.25, 1.0], [0.125, 0.0, -1.0]]).unwrap()
    }

    #[test]
    fn binary_layout() {
        let b = encode(&cloud());
        assert_eq!(&b[..4], b"PCF1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(b.len(), 8 + 24);
        assert_eq!(f32::from_le_bytes(b[8..12].try_into().unwrap()), 0.5);
        assert_eq!(decode(&b, "x").unwrap(), cloud());
    }

    #[test]
    fn truncated_body_reports_offset() {
        let b = encode(&cloud());
        let err = decode(&b[..20], "x.pcf").unwrap_err();
        match err {
            Error::Parse { section, offset, .. } => {
                assert_eq!(section, "body");
                assert_eq!(offset, 20);
            }
            e => panic!("unexpected {e}"),
        }
        assert!(matches!(decode(b"PCF", "x"), Err(Error::Parse { .. })));
        assert!(matches!(decode(b"XXXX0000", "x"), Err(Error::Parse { .. })));
    }

    #[test]
    fn text_round_trip() {
        let t = encode_text(&cloud());
        assert_eq!(decode_text(&t, "x").unwrap(), cloud());
        assert!(decode_text("1 2\n", "x").is_err());
    }
}
