//! Binary PGM (P5) encode/decode.
//!
//! Writes maxval-255 files with no comments; reads tolerate comments and
//! arbitrary header whitespace.

use std::fs;
use std::path::Path;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Pgm {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Parse(format!(
                "pgm pixel count {} does not match {width}x{height}",
                pixels.len()
            )));
        }
        Ok(Pgm {
            width,
            height,
            pixels,
        })
    }
}

pub fn encode(img: &Pgm) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode(bytes: &[u8]) -> Result<Pgm> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Parse("bad magic: expected binary PGM (P5)".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        *field = read_header_int(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse(format!("unsupported pgm maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Parse("pgm header not terminated by whitespace".into())),
    }
    let expected = width * height;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err(Error::Parse(format!(
            "pgm payload length mismatch: expected {expected} bytes, got {}",
            payload.len()
        )));
    }
    Pgm::new(width, height, payload[..expected].to_vec())
}

fn read_header_int(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    // Skip whitespace and '#' comments.
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(_) => break,
            None => return Err(Error::Parse("truncated pgm header".into())),
        }
    }
    let start = *pos;
    while let Some(b) = bytes.get(*pos) {
        if b.is_ascii_digit() {
            *pos += 1;
        } else {
            break;
        }
    }
    if *pos == start {
        return Err(Error::Parse(format!(
            "expected integer in pgm header at byte {start}"
        )));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse("invalid integer in pgm header".into()))
}

pub fn write_pgm(path: &Path, img: &Pgm) -> Result<()> {
    fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Quantize a `[1,h,w]` tensor in [0,1] to 8 bits.
pub fn tensor_to_pgm<T: Float>(t: &Tensor<T>) -> Result<Pgm> {
    if t.rank() != 3 || t.shape()[0] != 1 {
        return Err(Error::Dim(format!("expected [1,h,w] image, got {:?}", t.shape())));
    }
    let pixels = t
        .data()
        .iter()
        .map(|&v| {
            let v = v.to_f64().unwrap().clamp(0.0, 1.0);
            (v * 255.0).round() as u8
        })
        .collect();
    Pgm::new(t.shape()[2], t.shape()[1], pixels)
}

/// Decode to a `[1,h,w]` tensor scaled into [0,1].
pub fn pgm_to_tensor(p: &Pgm) -> Tensor<f32> {
    Tensor::from_vec(
        &[1, p.height, p.width],
        p.pixels.iter().map(|&b| b as f32 / 255.0).collect(),
    )
    .expect("pixel count matches shape by construction")
}

/// Decode to a `[1,h,w]` tensor of raw 0..255 values (mask inputs).
pub fn pgm_to_tensor_raw(p: &Pgm) -> Tensor<f32> {
    Tensor::from_vec(
        &[1, p.height, p.width],
        p.pixels.iter().map(|&b| b as f32).collect(),
    )
    .expect("pixel count matches shape by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_identity_on_bytes() {
        let img = Pgm::new(3, 2, vec![0, 10, 255, 7, 8, 9]).unwrap();
        let decoded = decode(&encode(&img)).unwrap();
        assert_eq!(decoded, img);
    }

    #[test]
    fn decode_tolerates_comments_and_whitespace() {
        let mut bytes = b"P5 # a comment\n# another\n 3\t2\n# before maxval\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        let img = decode(&bytes).unwrap();
        assert_eq!((img.width, img.height), (3, 2));
        assert_eq!(img.pixels, vec![1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn bad_magic_rejected() {
        let err = decode(b"P6\n1 1\n255\nx").unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }

    #[test]
    fn truncated_payload_rejected() {
        let img = Pgm::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        let mut bytes = encode(&img);
        bytes.truncate(bytes.len() - 1);
        let err = decode(&bytes).unwrap_err().to_string();
        assert!(err.contains("payload length mismatch"), "{err}");
    }

    #[test]
    fn quantization_error_bounded_by_one_level() {
        let t = Tensor::from_vec(&[1, 1, 4], vec![0.0f32, 0.3337, 0.5, 0.9999]).unwrap();
        let q = tensor_to_pgm(&t).unwrap();
        let back = pgm_to_tensor(&q);
        for (a, b) in t.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }
}
