//! Bit-exact tensor container (".egct") and binary PGM export.
//!
//! Container layout, all little-endian:
//!   magic "EGCT" | u8 version=1 | u8 dtype=0 (f32) | u16 rank |
//!   rank x u32 dims | row-major f32 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{EgcError, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"EGCT";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

fn format_err(offset: u64, msg: impl Into<String>) -> EgcError {
    EgcError::Format {
        offset,
        msg: msg.into(),
    }
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION, DTYPE_F32])?;
    let rank = u16::try_from(t.rank())
        .map_err(|_| EgcError::Shape(format!("rank {} exceeds u16", t.rank())))?;
    w.write_all(&rank.to_le_bytes())?;
    for &d in t.dims() {
        let d = u32::try_from(d)
            .map_err(|_| EgcError::Shape(format!("dim {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    let mut offset = 0u64;

    let mut magic = [0u8; 4];
    read_exact_at(&mut r, &mut magic, &mut offset, "magic")?;
    if &magic != MAGIC {
        return Err(format_err(0, format!("bad magic {magic:?}, expected \"EGCT\"")));
    }
    let mut head = [0u8; 2];
    read_exact_at(&mut r, &mut head, &mut offset, "version/dtype")?;
    if head[0] != VERSION {
        return Err(format_err(4, format!("unsupported version {}", head[0])));
    }
    if head[1] != DTYPE_F32 {
        return Err(format_err(5, format!("unsupported dtype {}", head[1])));
    }
    let mut rank_bytes = [0u8; 2];
    read_exact_at(&mut r, &mut rank_bytes, &mut offset, "rank")?;
    let rank = u16::from_le_bytes(rank_bytes) as usize;

    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut db = [0u8; 4];
        read_exact_at(&mut r, &mut db, &mut offset, "dims")?;
        dims.push(u32::from_le_bytes(db) as usize);
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        read_exact_at(&mut r, &mut buf, &mut offset, "payload")?;
        data.push(f32::from_le_bytes(buf));
    }
    // Anything after the payload is a malformed file, not padding.
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(format_err(offset, "trailing bytes after payload"));
    }
    Tensor::new(dims, data)
}

fn read_exact_at(
    r: &mut impl Read,
    buf: &mut [u8],
    offset: &mut u64,
    what: &str,
) -> Result<()> {
    let start = *offset;
    let mut filled = 0usize;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(format_err(
                start + filled as u64,
                format!("truncated while reading {what}"),
            ));
        }
        filled += n;
    }
    *offset += buf.len() as u64;
    Ok(())
}

/// Write an H x W tensor of values in [0, 1] as binary PGM (P5, maxval 255).
pub fn write_pgm(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(EgcError::Shape(format!(
            "PGM export needs a rank-2 tensor, got {:?}",
            t.dims()
        )));
    }
    let (h, w) = (t.dims()[0], t.dims()[1]);
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = t
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Read a binary PGM produced by [`write_pgm`] back into an H x W tensor in
/// [0, 1]. Only the P5/maxval-255 subset is supported.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let header_end = bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .nth(2)
        .map(|(i, _)| i + 1)
        .ok_or_else(|| format_err(0, "PGM header incomplete"))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| format_err(0, "PGM header not ASCII"))?;
    let mut fields = header.split_ascii_whitespace();
    if fields.next() != Some("P5") {
        return Err(format_err(0, "not a P5 PGM"));
    }
    let w: usize = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err(3, "bad width"))?;
    let h: usize = fields
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format_err(3, "bad height"))?;
    if fields.next() != Some("255") {
        return Err(format_err(3, "unsupported maxval"));
    }
    let payload = &bytes[header_end..];
    if payload.len() != w * h {
        return Err(format_err(
            header_end as u64,
            format!("payload {} bytes, expected {}", payload.len(), w * h),
        ));
    }
    let data: Vec<f32> = payload.iter().map(|&b| b as f32 / 255.0).collect();
    Tensor::new(vec![h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn egct_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.egct");
        let mut rng = crate::testutil::rng(11);
        let t = crate::testutil::random_tensor(&mut rng, vec![2, 3, 4]);
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(t.dims(), back.dims());
        for (a, b) in t.data().iter().zip(back.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn egct_file_size_matches_format_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.egct");
        let t = Tensor::zeros(vec![2, 3, 4]);
        write_tensor(&path, &t).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        // magic + version + dtype + rank + 3 dims + 24 floats
        assert_eq!(len, 4 + 1 + 1 + 2 + 3 * 4 + 24 * 4);
    }

    #[test]
    fn egct_bad_magic_reports_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.egct");
        std::fs::write(&path, b"XXXX\x01\x00\x01\x00\x02\x00\x00\x00").unwrap();
        match read_tensor(&path) {
            Err(EgcError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn egct_truncated_payload_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.egct");
        let t = Tensor::zeros(vec![4]);
        write_tensor(&path, &t).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 3]).unwrap();
        match read_tensor(&path) {
            Err(EgcError::Format { offset, msg }) => {
                assert!(offset >= 12, "offset {offset} should be inside payload");
                assert!(msg.contains("truncated"), "{msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn pgm_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let t = Tensor::new(vec![2, 3], vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.1]).unwrap();
        write_pgm(&path, &t).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.dims(), &[2, 3]);
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
