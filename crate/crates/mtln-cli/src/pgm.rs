//! Binary PGM (P5, 8-bit) reading and writing. Grayscale images map
//! linearly between [0, 1] floats and [0, 255] bytes; masks use {0, 255}.

use std::fs;
use std::path::Path;

use mtln_core::ellipse::BinaryMask;

use crate::{CliError, Result};

/// Writes a [0, 1] grayscale image as 8-bit P5.
pub fn write_image(path: &Path, values: &[f32], h: usize, w: usize) -> Result<()> {
    assert_eq!(values.len(), h * w, "value count must match dims");
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        values
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    fs::write(path, bytes).map_err(CliError::io(path))
}

/// Writes a binary mask as P5 with foreground 255 and background 0.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    bytes.extend(mask.data().iter().map(|&v| if v == 1 { 255u8 } else { 0 }));
    fs::write(path, bytes).map_err(CliError::io(path))
}

/// Raw 8-bit pixels plus dims.
pub struct Pgm {
    pub pixels: Vec<u8>,
    pub h: usize,
    pub w: usize,
}

impl Pgm {
    pub fn to_f32(&self) -> Vec<f32> {
        self.pixels.iter().map(|&b| b as f32 / 255.0).collect()
    }

    /// Strict {0, 255} decode.
    pub fn to_mask(&self) -> Result<BinaryMask> {
        let mut data = Vec::with_capacity(self.pixels.len());
        for &b in &self.pixels {
            match b {
                0 => data.push(0u8),
                255 => data.push(1u8),
                other => {
                    return Err(CliError::Format(format!(
                        "mask pixel value {other}; masks must be 0 or 255"
                    )))
                }
            }
        }
        BinaryMask::from_data(self.h, self.w, data).map_err(CliError::from)
    }
}

/// Reads a binary 8-bit P5 file. `#` comment lines in the header are
/// accepted; the maxval must be 255.
pub fn read(path: &Path) -> Result<Pgm> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    let err = |msg: &str| CliError::Format(format!("{}: {msg}", path.display()));

    if bytes.len() < 2 || &bytes[0..2] != b"P5" {
        return Err(err("not a binary PGM (P5) file"));
    }
    // Header tokens: width, height, maxval, each separated by whitespace,
    // with optional #-comments; one whitespace byte ends the header.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(err("malformed header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("digits are ASCII")
            .parse()
            .map_err(|_| err("header value out of range"))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err("missing separator after maxval"));
    }
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(err("maxval must be 255"));
    }
    if w == 0 || h == 0 {
        return Err(err("zero dimension"));
    }
    let expected = h
        .checked_mul(w)
        .ok_or_else(|| err("dimensions overflow"))?;
    let pixels = &bytes[pos..];
    if pixels.len() != expected {
        return Err(err(&format!(
            "payload is {} bytes, header promises {expected}",
            pixels.len()
        )));
    }
    Ok(Pgm {
        pixels: pixels.to_vec(),
        h,
        w,
    })
}
