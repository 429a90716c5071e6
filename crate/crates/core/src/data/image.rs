//! 8-bit RGB images: decoding (PPM, PNG), encoding, and conversion to
//! float tensors.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a PPM (P6) or PNG file into RGB.
pub fn read_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::ingest(path, e.to_string()))?;
    decode(&bytes).map_err(|m| Error::ingest(path, m))
}

pub fn decode(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let format = match bytes {
        [b'P', b'6', ..] | [b'P', b'3', ..] => ImageFormat::Pnm,
        [0x89, b'P', b'N', b'G', ..] => ImageFormat::Png,
        _ => return Err("unrecognized image format (expected PPM or PNG)".into()),
    };
    image::load_from_memory_with_format(bytes, format)
        .map(|img| img.to_rgb8())
        .map_err(|e| e.to_string())
}

pub fn write_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .map_err(|e| Error::ingest(path, e.to_string()))?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::ingest(path, e.to_string()))
}

/// Writes values in `[0, 1]` as an 8-bit binary PGM (P5).
pub fn write_pgm(values: &Tensor<f64>, path: &Path) -> Result<()> {
    let (h, w) = (values.shape()[0], values.shape()[1]);
    let pixels: Vec<u8> = values
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&pixels, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| Error::ingest(path, e.to_string()))?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// `[H×W×3]` tensor of raw 0..255 values.
pub fn to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f32).collect();
    Tensor::new([h as usize, w as usize, 3], data).expect("rgb buffer matches its extents")
}

/// Rounds and clamps a `[H×W×3]` tensor back to 8-bit.
pub fn from_tensor(t: &Tensor<f32>) -> RgbImage {
    let (h, w) = (t.shape()[0] as u32, t.shape()[1] as u32);
    let data = t.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
    RgbImage::from_raw(w, h, data).expect("tensor matches its extents")
}
