//! PNM image formats: P6/P3 color images, P5 grayscale maps, plain P1
//! binary masks. Pixel values map linearly between the model range [-1, 1]
//! and 8-bit bytes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

fn to_byte(v: f32) -> u8 {
    (((v + 1.0) / 2.0 * 255.0).round().clamp(0.0, 255.0)) as u8
}

fn from_byte(b: u8) -> f32 {
    b as f32 / 255.0 * 2.0 - 1.0
}

/// Write a square color image `[side*side, 3]` as binary PPM (P6).
pub fn write_ppm(path: &Path, side: usize, pixels: &Tensor<f32>) -> Result<()> {
    if pixels.shape() != [side * side, 3] {
        return Err(Error::Dimension {
            op: "write_ppm",
            lhs: pixels.shape().to_vec(),
            rhs: vec![side * side, 3],
        });
    }
    let mut bytes = format!("P6\n{side} {side}\n255\n").into_bytes();
    bytes.extend(pixels.data().iter().map(|&v| to_byte(v)));
    crate::blob::atomic_write(path, &bytes)
}

/// Tokenizer over PNM headers: whitespace-separated fields, `#` comments.
struct PnmReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> PnmReader<'a> {
    fn new(bytes: &'a [u8], path: &Path) -> Self {
        PnmReader {
            bytes,
            pos: 0,
            path: path.display().to_string(),
        }
    }

    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(self.path.clone(), "unexpected end of header"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                Error::format(
                    self.path.clone(),
                    format!("expected a number, got '{}'", String::from_utf8_lossy(tok)),
                )
            })
    }
}

/// Read a PPM image (P3 or P6). Returns (width, height, pixels in [-1, 1]).
pub fn read_ppm(path: &Path) -> Result<(usize, usize, Tensor<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = PnmReader::new(&bytes, path);
    let magic = r.token()?.to_vec();
    let w = r.number()?;
    let h = r.number()?;
    let maxval = r.number()?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(
            path.display().to_string(),
            format!("unsupported maxval {maxval}"),
        ));
    }
    let scale = 255.0 / maxval as f32;
    let count = w * h * 3;
    let data: Vec<f32> = match magic.as_slice() {
        b"P6" => {
            // exactly one whitespace byte after maxval, then raster
            let start = r.pos + 1;
            if bytes.len() < start + count {
                return Err(Error::format(
                    path.display().to_string(),
                    format!(
                        "raster needs {count} bytes, found {}",
                        bytes.len().saturating_sub(start)
                    ),
                ));
            }
            bytes[start..start + count]
                .iter()
                .map(|&b| from_byte((b as f32 * scale).round().clamp(0.0, 255.0) as u8))
                .collect()
        }
        b"P3" => {
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let v = r.number()?;
                out.push(from_byte((v as f32 * scale).round().clamp(0.0, 255.0) as u8));
            }
            out
        }
        other => {
            return Err(Error::format(
                path.display().to_string(),
                format!("unsupported magic '{}'", String::from_utf8_lossy(other)),
            ))
        }
    };
    Ok((w, h, Tensor::new(vec![w * h, 3], data)?))
}

/// Write a grayscale map `[rows, cols]` with values in [0, 1] as P5.
pub fn write_pgm(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let (rows, cols) = (map.rows(), map.cols());
    let mut bytes = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(
        map.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    crate::blob::atomic_write(path, &bytes)
}

/// Write a plain (P1) binary mask.
pub fn write_pbm(path: &Path, width: usize, height: usize, bits: &[u8]) -> Result<()> {
    if bits.len() != width * height {
        return Err(Error::Dimension {
            op: "write_pbm",
            lhs: vec![bits.len()],
            rhs: vec![width, height],
        });
    }
    let mut text = format!("P1\n{width} {height}\n");
    for row in bits.chunks(width) {
        let line: Vec<&str> = row.iter().map(|&b| if b == 1 { "1" } else { "0" }).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    crate::blob::atomic_write(path, text.as_bytes())
}

/// Parse a plain PBM (P1) mask, whitespace- and comment-tolerant. The
/// pixel count must equal `expected`; entries must be 0 or 1.
pub fn parse_mask(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = PnmReader::new(&bytes, path);
    let magic = r.token()?;
    if magic != b"P1" {
        return Err(Error::format(
            path.display().to_string(),
            format!("expected P1, got '{}'", String::from_utf8_lossy(magic)),
        ));
    }
    let w = r.number()?;
    let h = r.number()?;
    if w * h != expected {
        return Err(Error::format(
            path.display().to_string(),
            format!("mask is {w}x{h} = {} pixels, expected {expected}", w * h),
        ));
    }
    let mut bits = Vec::with_capacity(expected);
    // P1 allows digits to be packed without separators
    while bits.len() < expected {
        r.skip_separators();
        if r.pos >= r.bytes.len() {
            return Err(Error::format(
                path.display().to_string(),
                format!("mask ended after {} of {expected} entries", bits.len()),
            ));
        }
        match r.bytes[r.pos] {
            b'0' => bits.push(0),
            b'1' => bits.push(1),
            other => {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("mask entries must be 0 or 1, got '{}'", other as char),
                ))
            }
        }
        r.pos += 1;
    }
    Ok(bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact_on_byte_grid() {
        let side = 6usize;
        let data: Vec<f32> = (0..side * side * 3)
            .map(|k| from_byte((k * 7 % 256) as u8))
            .collect();
        let img = Tensor::new(vec![side * side, 3], data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        write_ppm(&path, side, &img).unwrap();
        let (w, h, back) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (side, side));
        assert!(back.bit_eq(&img));
    }

    #[test]
    fn plain_p3_reads_like_p6() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        std::fs::write(&path, "P3\n# comment\n2 1\n255\n0 128 255 10 20 30\n").unwrap();
        let (w, h, img) = read_ppm(&path).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(img.data()[0], from_byte(0));
        assert_eq!(img.data()[2], from_byte(255));
        assert_eq!(img.data()[5], from_byte(30));
    }

    #[test]
    fn mask_examples() {
        let dir = tempfile::tempdir().unwrap();

        // 4x4 all ones -> full mask for 16 tokens
        let p = dir.path().join("ones.pbm");
        std::fs::write(&p, "P1\n4 4\n1111\n1111\n1111\n1111\n").unwrap();
        let bits = parse_mask(&p, 16).unwrap();
        assert_eq!(bits, vec![1; 16]);

        // dimension mismatch
        assert!(parse_mask(&p, 20).is_err());

        // checkerboard has exactly half ones, whitespace-tolerant
        let p2 = dir.path().join("check.pbm");
        std::fs::write(&p2, "P1\n# checker\n4 4\n1 0 1 0\n0 1 0 1\n1 0 1 0\n0 1 0 1\n").unwrap();
        let bits = parse_mask(&p2, 16).unwrap();
        assert_eq!(bits.iter().map(|&b| b as usize).sum::<usize>(), 8);

        // invalid digit
        let p3 = dir.path().join("bad.pbm");
        std::fs::write(&p3, "P1\n2 1\n1 2\n").unwrap();
        assert!(parse_mask(&p3, 2).is_err());

        // write then parse round trip
        let p4 = dir.path().join("rt.pbm");
        let bits = vec![1u8, 0, 0, 1, 1, 0];
        write_pbm(&p4, 3, 2, &bits).unwrap();
        assert_eq!(parse_mask(&p4, 6).unwrap(), bits);
    }
}
