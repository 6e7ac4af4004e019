//! Decoding JPEG/PNG files into [`ImageTensor`]s and staging them.

use std::path::Path;

use dermoscan_core::image::{presize, ImageTensor};

use crate::error::{read_error, Error, Result};

pub fn decode(bytes: &[u8]) -> Result<ImageTensor> {
    let img = image::load_from_memory(bytes).map_err(|e| Error::UndecodableImage(e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    ImageTensor::from_rgb8(h as usize, w as usize, rgb.as_raw()).map_err(|e| Error::UndecodableImage(e.to_string()))
}

pub fn load(path: &Path) -> Result<ImageTensor> {
    let bytes = std::fs::read(path).map_err(read_error(path))?;
    decode(&bytes).map_err(|e| match e {
        Error::UndecodableImage(msg) => Error::UndecodableImage(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Stage an image at `side x side`, quantized to 8 bits.
///
/// Quantizing makes the result identical whether it was just computed or
/// restored from the in-memory cache.
pub fn stage(image: &ImageTensor, side: usize) -> Result<Vec<u8>> {
    Ok(presize(image, side)?.to_rgb8())
}

pub fn unstage(rgb: &[u8], side: usize) -> ImageTensor {
    ImageTensor::from_rgb8(side, side, rgb).expect("staged buffers are never empty")
}

/// Decode and stage in one step.
pub fn decode_staged(bytes: &[u8], side: usize) -> Result<ImageTensor> {
    Ok(unstage(&stage(&decode(bytes)?, side)?, side))
}

/// Write an image as an 8-bit file; the format follows the extension.
pub fn save(image: &ImageTensor, path: &Path) -> Result<()> {
    let buf = image::RgbImage::from_raw(image.width() as u32, image.height() as u32, image.to_rgb8())
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|e| Error::OutputNotWritable {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}
