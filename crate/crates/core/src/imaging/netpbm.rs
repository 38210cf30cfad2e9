//! Binary PPM (P6) and PGM (P5) with 8-bit samples.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Interleaved RGB.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape("gray image", &[height, width], &[pixels.len()]));
        }
        Ok(Self { width, height, pixels })
    }
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::shape("rgb image", &[height, width, 3], &[pixels.len()]));
        }
        Ok(Self { width, height, pixels })
    }

    /// Planar `3×H×W` values scaled to [0, 1].
    pub fn to_planar(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (i, px) in self.pixels.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * n + i] = px[c] as f64 / 255.0;
            }
        }
        out
    }

    /// Inverse of [`RgbImage::to_planar`]; values are clamped and rounded.
    pub fn from_planar(width: usize, height: usize, planar: &[f64]) -> Result<Self> {
        let n = width * height;
        if planar.len() != 3 * n {
            return Err(Error::shape("planar image", &[3, height, width], &[planar.len()]));
        }
        let mut pixels = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                pixels.push(to_u8(planar[c * n + i]));
            }
        }
        Ok(Self { width, height, pixels })
    }
}

pub(crate) fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(magic: &str, width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::Format("netpbm file too short".into()));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(Error::Format("truncated netpbm header".into())),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed netpbm header field".into()))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format("netpbm header must end with whitespace".into())),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Format("netpbm image has zero size".into()));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        data_start: pos,
    })
}

fn decode(bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let h = parse_header(bytes)?;
    if &h.magic != magic {
        return Err(Error::Format(format!(
            "expected {} netpbm, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&h.magic)
        )));
    }
    if h.maxval != 255 {
        return Err(Error::Format(format!("unsupported maxval {}", h.maxval)));
    }
    let need = h.width * h.height * channels;
    let data = &bytes[h.data_start..];
    if data.len() < need {
        return Err(Error::Format(format!(
            "netpbm payload has {} bytes, expected {need}",
            data.len()
        )));
    }
    Ok((h.width, h.height, data[..need].to_vec()))
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    encode("P5", img.width, img.height, &img.pixels)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    encode("P6", img.width, img.height, &img.pixels)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let (width, height, pixels) = decode(bytes, b"P5", 1)?;
    GrayImage::new(width, height, pixels)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (width, height, pixels) = decode(bytes, b"P6", 3)?;
    RgbImage::new(width, height, pixels)
}

pub fn write_pgm(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|e| Error::file(path, e))
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::file(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    decode_pgm(&fs::read(path).map_err(|e| Error::file(path, e))?)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    decode_ppm(&fs::read(path).map_err(|e| Error::file(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_and_layout() {
        let img = GrayImage::new(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        let bytes = encode_pgm(&img);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(decode_pgm(&bytes).unwrap(), img);
    }

    #[test]
    fn ppm_round_trip() {
        let img = RgbImage::new(2, 1, vec![10, 20, 30, 40, 50, 60]).unwrap();
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x07\x08";
        let img = decode_pgm(bytes).unwrap();
        assert_eq!(img.pixels, vec![7, 8]);
    }

    #[test]
    fn wrong_magic_and_truncation_fail() {
        let img = GrayImage::new(2, 2, vec![1, 2, 3, 4]).unwrap();
        let bytes = encode_pgm(&img);
        assert!(decode_ppm(&bytes).is_err());
        assert!(decode_pgm(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn planar_conversion_round_trips() {
        let img = RgbImage::new(2, 2, (0..12).map(|v| v * 20).collect()).unwrap();
        let planar = img.to_planar();
        assert_eq!(RgbImage::from_planar(2, 2, &planar).unwrap(), img);
    }
}
