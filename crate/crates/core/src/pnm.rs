//! Binary portable graymap (P5) and pixmap (P6) encoding.

use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// 8-bit interleaved RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn put(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

/// Maps `[0, 1]` to `0..=255` with rounding; out-of-range values saturate.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::data(path, 1, "truncated netpbm header"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut line = 1;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and `#` comments may separate header tokens.
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => {
                    if *b == b'\n' {
                        line += 1;
                    }
                    pos += 1;
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::data(path, line, "malformed netpbm header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::data(path, line, "header value out of range"))?;
    }
    // Exactly one whitespace byte precedes the raster.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::data(path, line, "missing whitespace after maxval"));
    }
    Ok(Header {
        magic,
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        data_start: pos + 1,
    })
}

/// Decodes an 8-bit P5 graymap. `path` labels error messages.
pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<GrayImage> {
    let h = parse_header(bytes, path)?;
    if &h.magic != b"P5" {
        return Err(Error::data(path, 1, "not a binary graymap (P5)"));
    }
    if h.maxval == 0 || h.maxval > 255 {
        return Err(Error::data(path, 1, format!("unsupported maxval {}", h.maxval)));
    }
    let n = h.width * h.height;
    let raster = &bytes[h.data_start..];
    if raster.len() < n {
        return Err(Error::data(
            path,
            1,
            format!("raster holds {} bytes, expected {n}", raster.len()),
        ));
    }
    let pixels = if h.maxval == 255 {
        raster[..n].to_vec()
    } else {
        raster[..n]
            .iter()
            .map(|&v| ((v as usize * 255 + h.maxval / 2) / h.maxval) as u8)
            .collect()
    };
    Ok(GrayImage {
        width: h.width,
        height: h.height,
        pixels,
    })
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let h = parse_header(bytes, path)?;
    if &h.magic != b"P6" {
        return Err(Error::data(path, 1, "not a binary pixmap (P6)"));
    }
    if h.maxval != 255 {
        return Err(Error::data(path, 1, format!("unsupported maxval {}", h.maxval)));
    }
    let n = h.width * h.height * 3;
    let raster = &bytes[h.data_start..];
    if raster.len() < n {
        return Err(Error::data(path, 1, "truncated raster"));
    }
    Ok(RgbImage {
        width: h.width,
        height: h.height,
        pixels: raster[..n].to_vec(),
    })
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    std::fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes, path)
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

/// Blends a grayscale base with a heat map carried in the red channel.
/// Both inputs are `[0, 1]` row-major planes of equal size.
pub fn heat_overlay(base: &[f64], heat: &[f64], width: usize, height: usize) -> RgbImage {
    let mut img = RgbImage::new(width, height);
    for r in 0..height {
        for c in 0..width {
            let g = base[r * width + c].clamp(0.0, 1.0);
            let h = heat[r * width + c].clamp(0.0, 1.0);
            let red = 0.5 * g + 0.5 * h;
            let other = 0.5 * g * (1.0 - h);
            img.put(r, c, [quantize(red), quantize(other), quantize(other)]);
        }
    }
    img
}
