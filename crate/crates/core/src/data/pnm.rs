//! Binary PGM masks and PPM images.
//!
//! Writers emit exactly `P5\n<W> <H>\n255\n` / `P6\n<W> <H>\n255\n`
//! followed by the raw payload. Readers accept any whitespace between
//! header fields but require maxval 255 and an exact payload length.

use super::write_atomic;
use crate::error::{Error, Result};
use crate::seg::BinaryMask;
use crate::vision::ImageTensor;
use std::path::Path;

pub fn encode_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&v| v * 255));
    out
}

pub fn encode_ppm(image: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.data.iter().map(|&v| (v * 255.0).round() as u8));
    out
}

/// Returns `(width, height, payload)`.
fn parse_header<'a>(bytes: &'a [u8], magic: &str, what: &str) -> Result<(usize, usize, &'a [u8])> {
    if !bytes.starts_with(magic.as_bytes()) {
        return Err(Error::BadMagic(format!("{what}: expected {magic}")));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for field in &mut fields {
        let ws_start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if ws_start == start || start == pos {
            return Err(Error::MalformedImage(format!("{what}: bad header")));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedImage(format!("{what}: bad header number")))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::MalformedImage(format!("{what}: header not terminated")));
    }
    let [w, h, maxval] = fields;
    if maxval != 255 || w == 0 || h == 0 {
        return Err(Error::MalformedImage(format!("{what}: {w}x{h} maxval {maxval}")));
    }
    Ok((w, h, &bytes[pos + 1..]))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<BinaryMask> {
    let (w, h, payload) = parse_header(bytes, "P5", "mask")?;
    if payload.len() != w * h {
        return Err(Error::MalformedImage(format!("mask payload {} bytes, expected {}", payload.len(), w * h)));
    }
    let mut data = Vec::with_capacity(w * h);
    for (offset, &value) in payload.iter().enumerate() {
        match value {
            0 => data.push(0),
            255 => data.push(1),
            _ => return Err(Error::NonBinaryMaskValue { value, offset }),
        }
    }
    BinaryMask::new(h, w, data)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor> {
    let (w, h, payload) = parse_header(bytes, "P6", "image")?;
    if payload.len() != w * h * 3 {
        return Err(Error::MalformedImage(format!("image payload {} bytes, expected {}", payload.len(), w * h * 3)));
    }
    ImageTensor::new(h, w, payload.iter().map(|&b| b as f64 / 255.0).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    write_atomic(path, &encode_pgm(mask))
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    decode_pgm(&read(path)?)
}

pub fn write_image(path: &Path, image: &ImageTensor) -> Result<()> {
    write_atomic(path, &encode_ppm(image))
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    decode_ppm(&read(path)?)
}
