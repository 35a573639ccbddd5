//! On-disk formats.
//!
//! `RTEN` tensors: the 4 magic bytes `RTEN`, a version byte (1), a rank
//! byte, `rank` little-endian `u32` dimensions, then the values as
//! little-endian `f64` in row-major order.
//!
//! Masks are binary PGM (`P5`, maxval 255) and read back as values in `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RTEN";
const VERSION: u8 = 1;

pub fn rten_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.shape().len() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn parse_rten(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let bad = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(bad("missing RTEN magic"));
    }
    if bytes[4] != VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[4])));
    }
    let rank = bytes[5] as usize;
    let header = 6 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[6..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if bytes.len() != header + 8 * n {
        return Err(bad(&format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            bytes.len() - header,
            8 * n
        )));
    }
    let data = bytes[header..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))
}

pub fn write_rten(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, rten_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn read_rten(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_rten(&bytes, path)
}

/// Writes a `[1, H, W]` or `[H, W]` tensor of values in `[0, 1]` as 8-bit PGM.
pub fn write_pgm(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = match *t.shape() {
        [1, h, w] | [h, w] => (h, w),
        ref s => return Err(Error::pre(format!("PGM needs a single-channel image, got {s:?}"))),
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit binary PGM into a `[1, H, W]` tensor scaled to `[0, 1]`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    // header: magic, width, height, maxval, separated by whitespace; '#' comments allowed
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    i += 1; // single whitespace byte before the raster
    if fields[0] != "P5" {
        return Err(bad(format!("expected P5, found {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad header field {s:?}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad(format!("only maxval 255 is supported, found {maxval}")));
    }
    if w == 0 || h == 0 || bytes.len() < i || bytes.len() - i != w * h {
        return Err(bad(format!("raster size does not match {w}x{h}")));
    }
    let data = bytes[i..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::new(vec![1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.5]).unwrap();
        let b = rten_bytes(&t);
        assert_eq!(&b[..6], b"RTEN\x01\x02");
        assert_eq!(&b[6..14], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&b[14..22], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 30);
    }

    #[test]
    fn corrupt_payloads_are_rejected() {
        let t = Tensor::filled(&[3], 1.0);
        let mut b = rten_bytes(&t);
        b.pop();
        assert!(parse_rten(&b, Path::new("x")).is_err());
        assert!(parse_rten(b"NOPE\x01\x00", Path::new("x")).is_err());
    }

    #[test]
    fn pgm_white_is_all_ones_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        fs::write(&p, [b"P5\n# comment\n3 2\n255\n".as_slice(), &[255u8; 6]].concat()).unwrap();
        let m = read_pgm(&p).unwrap();
        assert_eq!(m.shape(), &[1, 2, 3]);
        assert!(m.data().iter().all(|&v| v == 1.0));

        let img = Tensor::from_fn(&[1, 4, 5], |i| (i as f64 * 0.37).fract());
        write_pgm(&p, &img).unwrap();
        let back = read_pgm(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = read_pgm("/nonexistent/mask.pgm").unwrap_err().to_string();
        assert!(err.contains("/nonexistent/mask.pgm"), "{err}");
    }

    proptest! {
        #[test]
        fn rten_round_trip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = parse_rten(&rten_bytes(&t), Path::new("mem")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
