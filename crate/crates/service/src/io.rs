//! PNG in and out. Other formats are rejected, not converted.

use std::path::Path;

use attnerase_core::tensor::{Image, PixelMask};
use image::{DynamicImage, ImageFormat, RgbImage};

use crate::error::{ServiceError, ServiceResult};

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

fn decode(bytes: &[u8], what: &str) -> ServiceResult<DynamicImage> {
    if !bytes.starts_with(&PNG_SIGNATURE) {
        return Err(ServiceError::Image(format!("{what} is not a PNG file")));
    }
    image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map_err(|e| ServiceError::Image(format!("{what}: {e}")))
}

/// Decodes an RGB(A) or grayscale PNG as RGB; alpha is dropped.
pub fn decode_png(bytes: &[u8]) -> ServiceResult<Image> {
    let rgb = decode(bytes, "image")?.into_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Image::from_rgb(w as usize, h as usize, rgb.into_raw())?)
}

/// Decodes a mask PNG: converted to 8-bit luma, then `>= 128` means remove.
pub fn decode_mask_png(bytes: &[u8]) -> ServiceResult<PixelMask> {
    let luma = decode(bytes, "mask")?.into_luma8();
    let (w, h) = luma.dimensions();
    Ok(PixelMask::from_luma(w as usize, h as usize, luma.as_raw())?)
}

pub fn encode_png(image: &Image) -> ServiceResult<Vec<u8>> {
    let buf = RgbImage::from_raw(image.width() as u32, image.height() as u32, image.pixels().to_vec())
        .ok_or_else(|| ServiceError::Image("pixel buffer does not match dimensions".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| ServiceError::Image(format!("encoding PNG: {e}")))?;
    Ok(out.into_inner())
}

/// Single-channel PNG, 255 for masked pixels and 0 elsewhere.
pub fn encode_mask_png(mask: &PixelMask) -> ServiceResult<Vec<u8>> {
    let buf = image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, mask.to_luma())
        .ok_or_else(|| ServiceError::Image("mask buffer does not match dimensions".into()))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| ServiceError::Image(format!("encoding PNG: {e}")))?;
    Ok(out.into_inner())
}

pub fn read_bytes(path: &Path) -> ServiceResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| ServiceError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> ServiceResult<()> {
    std::fs::write(path, bytes).map_err(|e| ServiceError::io(path, e))
}

pub fn read_png(path: &Path) -> ServiceResult<Image> {
    decode_png(&read_bytes(path)?).map_err(|e| ServiceError::Image(format!("{}: {e}", path.display())))
}

pub fn read_mask_png(path: &Path) -> ServiceResult<PixelMask> {
    decode_mask_png(&read_bytes(path)?)
        .map_err(|e| ServiceError::Image(format!("{}: {e}", path.display())))
}

pub fn write_png(path: &Path, image: &Image) -> ServiceResult<()> {
    write_bytes(path, &encode_png(image)?)
}
