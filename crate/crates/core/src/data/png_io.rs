//! 8-bit PNG reading and writing: RGB images scaled to `[0,1]`, and
//! single-channel masks stored as 0 / 255.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use png::{BitDepth, ColorType, Transformations};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

struct Raw {
    width: usize,
    height: usize,
    channels: usize,
    bytes: Vec<u8>,
}

fn read_raw(path: &Path) -> Result<Raw> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(Transformations::EXPAND | Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut bytes = vec![0; size];
    let info = reader
        .next_frame(&mut bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let channels = match info.color_type {
        ColorType::Grayscale => 1,
        ColorType::GrayscaleAlpha => 2,
        ColorType::Rgb => 3,
        ColorType::Rgba => 4,
        ColorType::Indexed => return Err(Error::format(path, "palette was not expanded")),
    };
    if info.bit_depth != BitDepth::Eight {
        return Err(Error::format(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    bytes.truncate(info.line_size * info.height as usize);
    Ok(Raw {
        width: info.width as usize,
        height: info.height as usize,
        channels,
        bytes,
    })
}

/// `(1,3,H,W)` in `[0,1]`. Grayscale is replicated, alpha is dropped.
pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let raw = read_raw(path)?;
    let (h, w, ch) = (raw.height, raw.width, raw.channels);
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |[_, c, y, x]| {
        let src = if ch < 3 { 0 } else { c };
        raw.bytes[(y * w + x) * ch + src] as f32 / 255.0
    }))
}

/// `(1,1,H,W)` with values in `{0,1}`; a pixel is foreground when its first
/// channel is at least 128.
pub fn read_mask(path: &Path) -> Result<Tensor<f32>> {
    let raw = read_raw(path)?;
    let (h, w, ch) = (raw.height, raw.width, raw.channels);
    Ok(Tensor::from_fn(Shape::new(1, 1, h, w), |[_, _, y, x]| {
        f32::from(raw.bytes[(y * w + x) * ch] >= 128)
    }))
}

fn write_raw(path: &Path, width: usize, height: usize, color: ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write the first batch item of a `(B,3,H,W)` tensor in `[0,1]`.
pub fn write_rgb(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let s = image.shape();
    if s.c() != 3 {
        return Err(Error::shape("write_rgb", "C", format!("expected 3 channels, got {s}")));
    }
    let (h, w) = (s.h(), s.w());
    let mut bytes = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push(quantize(image.at(0, c, y, x)));
            }
        }
    }
    write_raw(path, w, h, ColorType::Rgb, &bytes)
}

/// Write the first plane of a binary tensor as 0 / 255 grayscale.
pub fn write_mask(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    let s = mask.shape();
    let bytes: Vec<u8> = mask.data()[..s.plane()]
        .iter()
        .map(|&v| if v >= 0.5 { 255 } else { 0 })
        .collect();
    write_raw(path, s.w(), s.h(), ColorType::Grayscale, &bytes)
}
