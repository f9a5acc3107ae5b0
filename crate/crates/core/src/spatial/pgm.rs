//! Binary greyscale PGM (P5, maxval 255).

use std::fs;
use std::path::Path;

use super::{Raster, Result, SpatialError};

fn malformed(msg: impl Into<String>) -> SpatialError {
    SpatialError::MalformedImage(msg.into())
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(format!("bad {what}")))
    }
}

pub fn read_pgm_bytes(bytes: &[u8]) -> Result<Raster> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(malformed("expected P5 magic"));
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(malformed(format!("bad dimensions {width}x{height}")));
    }
    if maxval != 255 {
        return Err(malformed(format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the pixels
    match bytes.get(h.pos) {
        Some(b) if b.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(malformed("missing header terminator")),
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| malformed("dimensions overflow"))?;
    let pixels = bytes
        .get(h.pos..h.pos + n)
        .ok_or_else(|| malformed(format!("truncated: expected {n} pixel bytes")))?;
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Raster::from_parts_unchecked(width, height, data))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Raster> {
    read_pgm_bytes(&fs::read(path)?)
}

/// Intensity to byte, rounding half up.
pub(crate) fn quantize(v: f32) -> u8 {
    (v as f64 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn write_pgm_bytes(r: &Raster) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", r.width(), r.height()).into_bytes();
    out.extend(r.data().iter().map(|&v| quantize(v)));
    out
}

pub fn write_pgm(r: &Raster, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_pgm_bytes(r))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_hand_built_file() {
        let mut f = b"P5 2 2 255\n".to_vec();
        f.extend([0u8, 255, 51, 102]);
        let r = read_pgm_bytes(&f).unwrap();
        assert_eq!((r.width(), r.height()), (2, 2));
        assert_eq!(r.data(), &[0.0, 1.0, 0.2, 0.4]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut f = b"P5\n# made by hand\n1 1\n255\n".to_vec();
        f.push(128);
        assert_eq!(read_pgm_bytes(&f).unwrap().width(), 1);
    }

    #[test]
    fn rejects_malformed() {
        let mut color = b"P6 1 1 255\n".to_vec();
        color.extend([1, 2, 3]);
        assert!(matches!(read_pgm_bytes(&color), Err(SpatialError::MalformedImage(_))));
        let truncated = b"P5 4 4 255\n\x00\x01".to_vec();
        assert!(matches!(read_pgm_bytes(&truncated), Err(SpatialError::MalformedImage(_))));
        let zero = b"P5 0 4 255\n".to_vec();
        assert!(read_pgm_bytes(&zero).is_err());
        let deep = b"P5 1 1 65535\n\x00\x00".to_vec();
        assert!(read_pgm_bytes(&deep).is_err());
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
    }

    proptest! {
        #[test]
        fn write_read_within_quantization(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let data: Vec<f32> = (0..w * h)
                .map(|i| crate::hash::unit(crate::hash::mix(seed, &[i as u64])) as f32)
                .collect();
            let r = Raster::new(w, h, data).unwrap();
            let bytes = write_pgm_bytes(&r);
            let back = read_pgm_bytes(&bytes).unwrap();
            for (a, b) in r.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 255.0);
            }
            // and the written form is a fixed point
            prop_assert_eq!(write_pgm_bytes(&back), bytes);
        }
    }
}
