//! 8-bit PNG storage for images and masks, plus file hashing.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::TryOnMask;
use crate::tensor::ImageTensor;

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Png {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_raw(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

fn read_raw(path: &Path) -> Result<(usize, usize, png::ColorType, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(path, format!("expected 8-bit depth, got {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, info.color_type, buf))
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB or RGBA image; values are rounded to the 8-bit grid.
pub fn write_image(path: &Path, img: &ImageTensor) -> Result<()> {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let mut bytes = Vec::with_capacity(c * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                bytes.push(to_byte(img.get(ch, y, x)));
            }
        }
    }
    let color = if c == 4 { png::ColorType::Rgba } else { png::ColorType::Rgb };
    write_raw(path, w, h, color, &bytes)
}

pub fn read_image(path: &Path) -> Result<ImageTensor> {
    let (w, h, color, bytes) = read_raw(path)?;
    let c = match color {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(png_err(path, format!("expected RGB(A), got {other:?}"))),
    };
    let mut data = vec![0.0; c * h * w];
    for (i, px) in bytes.chunks(c).enumerate() {
        for ch in 0..c {
            data[ch * h * w + i] = px[ch] as f64 / 255.0;
        }
    }
    ImageTensor::new(c, h, w, data)
}

/// Grayscale PNG with values `{0, 255}`.
pub fn write_mask(path: &Path, mask: &TryOnMask) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_raw(path, mask.width(), mask.height(), png::ColorType::Grayscale, &bytes)
}

pub fn read_mask(path: &Path) -> Result<TryOnMask> {
    let (w, h, color, bytes) = read_raw(path)?;
    if color != png::ColorType::Grayscale {
        return Err(png_err(path, format!("mask must be grayscale, got {color:?}")));
    }
    let data = bytes
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            255 => Ok(true),
            other => Err(Error::MaskMismatch(format!("{}: mask value {other}", path.display()))),
        })
        .collect::<Result<Vec<_>>>()?;
    TryOnMask::new(h, w, data)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
