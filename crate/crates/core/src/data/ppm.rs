//! Binary PPM (P6) images as `3×H×W` tensors in `[0, 1]`.

use std::io::{Read, Write};

use crate::error::{DpaError, Result};
use crate::Tensor;

/// Writes a `3×H×W` tensor as an 8-bit P6 image; values are clamped to
/// `[0, 1]` and rounded to the nearest level.
pub fn write_ppm<W: Write>(out: &mut W, image: &Tensor) -> Result<()> {
    let (h, w) = check_rgb(image)?;
    write!(out, "P6\n{w} {h}\n255\n")?;
    let plane = h * w;
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push((d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out.write_all(&bytes)?;
    Ok(())
}

fn check_rgb(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        &[3, h, w] => Ok((h, w)),
        s => Err(DpaError::shape(format!("PPM images are 3×H×W, got {s:?}"))),
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
    name: &'a str,
}

impl Header<'_> {
    fn err(&self, msg: impl Into<String>) -> DpaError {
        DpaError::parse(self.name, format!("byte {}", self.pos), msg)
    }

    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, field: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {field}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| self.err(format!("{field} out of range")))
    }
}

/// Decodes a P6 image, dividing by the declared maxval. `name` labels errors.
pub fn read_ppm<R: Read>(input: &mut R, name: &str) -> Result<Tensor> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode_ppm(&bytes, name)
}

pub fn decode_ppm(bytes: &[u8], name: &str) -> Result<Tensor> {
    let mut hdr = Header { bytes, pos: 0, name };
    if !bytes.starts_with(b"P6") {
        return Err(hdr.err("missing P6 magic"));
    }
    hdr.pos = 2;
    let w = hdr.number("width")?;
    let h = hdr.number("height")?;
    let maxval = hdr.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(hdr.err("empty image"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(hdr.err(format!("maxval {maxval} outside 1..=65535")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if hdr.pos >= bytes.len() || !bytes[hdr.pos].is_ascii_whitespace() {
        return Err(hdr.err("expected whitespace before pixel data"));
    }
    hdr.pos += 1;
    let wide = maxval > 255;
    let sample = if wide { 2 } else { 1 };
    let plane = h * w;
    let need = 3 * plane * sample;
    let raster = &bytes[hdr.pos..];
    if raster.len() < need {
        return Err(hdr.err(format!("pixel data truncated: {} of {need} bytes", raster.len())));
    }
    let scale = maxval as f64;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            let j = (3 * i + c) * sample;
            let v = if wide {
                u16::from_be_bytes([raster[j], raster[j + 1]]) as usize
            } else {
                raster[j] as usize
            };
            if v > maxval {
                return Err(hdr.err(format!("sample {v} exceeds maxval {maxval}")));
            }
            data[c * plane + i] = v as f64 / scale;
        }
    }
    Tensor::new(&[3, h, w], data)
}
