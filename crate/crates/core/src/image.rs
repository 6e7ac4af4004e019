//! Planar RGB image buffers and resampling.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// A 3-channel image stored channel-major (`[c][y][x]`).
///
/// Pixel intensities are in `[0, 1]` until [`normalize`] is applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::EmptyImage);
        }
        assert_eq!(data.len(), CHANNELS * height * width, "buffer length does not match 3x{height}x{width}");
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; CHANNELS * height * width],
        }
    }

    /// Build from interleaved 8-bit RGB (`[y][x][c]`), scaling to `[0, 1]`.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::EmptyImage);
        }
        assert_eq!(rgb.len(), CHANNELS * height * width);
        let plane = height * width;
        let mut data = vec![0.0f32; CHANNELS * plane];
        for (i, px) in rgb.chunks_exact(CHANNELS).enumerate() {
            for c in 0..CHANNELS {
                data[c * plane + i] = f32::from(px[c]) / 255.0;
            }
        }
        Ok(Self { height, width, data })
    }

    /// Interleaved 8-bit RGB, rounding and clamping each intensity.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = vec![0u8; CHANNELS * plane];
        for i in 0..plane {
            for c in 0..CHANNELS {
                let v = self.data[c * plane + i].clamp(0.0, 1.0) * 255.0;
                out[i * CHANNELS + c] = libm::roundf(v) as u8;
            }
        }
        out
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn is_square(&self, side: usize) -> bool {
        self.height == side && self.width == side
    }

    pub fn min_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize(&self, out_height: usize, out_width: usize) -> ImageTensor {
        let window = Window::full(self.height, self.width);
        resample(self, out_height, out_width, &window)
    }
}

/// An oriented rectangular region of a source image, in pixel units.
///
/// `center` is measured from the top-left corner of the image (so the centre
/// of an `h x w` image is `(h/2, w/2)`); `angle` is in radians and rotates
/// the window counter-clockwise around its centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub center_y: f64,
    pub center_x: f64,
    pub height: f64,
    pub width: f64,
    pub angle: f64,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

impl Window {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            center_y: height as f64 / 2.0,
            center_x: width as f64 / 2.0,
            height: height as f64,
            width: width as f64,
            angle: 0.0,
            flip_horizontal: false,
            flip_vertical: false,
        }
    }

    /// Largest centered square.
    pub fn center_square(height: usize, width: usize) -> Self {
        let side = height.min(width) as f64;
        Self {
            height: side,
            width: side,
            ..Self::full(height, width)
        }
    }

    /// Source position (continuous, top-left origin) of output pixel `(i, j)`
    /// of an `out_h x out_w` raster laid over this window.
    #[inline]
    pub fn source_point(&self, i: usize, j: usize, out_h: usize, out_w: usize) -> (f64, f64) {
        let mut dx = (j as f64 + 0.5 - out_w as f64 / 2.0) * (self.width / out_w as f64);
        let mut dy = (i as f64 + 0.5 - out_h as f64 / 2.0) * (self.height / out_h as f64);
        if self.flip_horizontal {
            dx = -dx;
        }
        if self.flip_vertical {
            dy = -dy;
        }
        if self.angle != 0.0 {
            let (s, c) = (libm::sin(self.angle), libm::cos(self.angle));
            let (rx, ry) = (dx * c - dy * s, dx * s + dy * c);
            dx = rx;
            dy = ry;
        }
        (self.center_y + dy, self.center_x + dx)
    }

    /// The four corners of the window in source coordinates.
    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = (libm::sin(self.angle), libm::cos(self.angle));
        let (hw, hh) = (self.width / 2.0, self.height / 2.0);
        [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)].map(|(dx, dy)| (self.center_y + dx * s + dy * c, self.center_x + dx * c - dy * s))
    }
}

/// Reflect a pixel-index coordinate into `[0, n - 1]`.
#[inline]
fn reflect(mut v: f64, n: usize) -> f64 {
    let max = (n - 1) as f64;
    if max == 0.0 {
        return 0.0;
    }
    let period = 2.0 * max;
    if v < 0.0 || v > max {
        v = libm::fmod(libm::fabs(v), period);
        if v > max {
            v = period - v;
        }
    }
    v
}

/// Sample `window` of `src` onto an `out_h x out_w` raster with bilinear
/// interpolation. Sample points falling outside the source are reflected
/// back inside, so no constant fill ever appears.
pub fn resample(src: &ImageTensor, out_h: usize, out_w: usize, window: &Window) -> ImageTensor {
    let (h, w) = (src.height, src.width);
    let plane_in = h * w;
    let plane_out = out_h * out_w;
    let mut data = vec![0.0f32; CHANNELS * plane_out];
    for i in 0..out_h {
        for j in 0..out_w {
            let (sy, sx) = window.source_point(i, j, out_h, out_w);
            let y = reflect(sy - 0.5, h);
            let x = reflect(sx - 0.5, w);
            let (y0, x0) = (libm::floor(y) as usize, libm::floor(x) as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
            let o = i * out_w + j;
            for c in 0..CHANNELS {
                let base = c * plane_in;
                let p00 = src.data[base + y0 * w + x0];
                let p01 = src.data[base + y0 * w + x1];
                let p10 = src.data[base + y1 * w + x0];
                let p11 = src.data[base + y1 * w + x1];
                let top = p00 + (p01 - p00) * fx;
                let bottom = p10 + (p11 - p10) * fx;
                data[c * plane_out + o] = top + (bottom - top) * fy;
            }
        }
    }
    ImageTensor {
        height: out_h,
        width: out_w,
        data,
    }
}

/// First stage of presizing: center-crop to a square and resample to
/// `target x target`.
pub fn presize(image: &ImageTensor, target: usize) -> Result<ImageTensor> {
    if image.height == 0 || image.width == 0 || target == 0 {
        return Err(Error::EmptyImage);
    }
    let window = Window::center_square(image.height, image.width);
    Ok(resample(image, target, target, &window))
}

/// `out[c] = (in[c] - mean[c]) / std[c]`.
pub fn normalize(image: &ImageTensor, mean: &[f32; CHANNELS], std: &[f32; CHANNELS]) -> Result<ImageTensor> {
    let mut out = image.clone();
    normalize_in_place(&mut out, mean, std)?;
    Ok(out)
}

pub fn normalize_in_place(image: &mut ImageTensor, mean: &[f32; CHANNELS], std: &[f32; CHANNELS]) -> Result<()> {
    if let Some(c) = std.iter().position(|s| *s == 0.0) {
        return Err(Error::ZeroStd(c));
    }
    let plane = image.height * image.width;
    for (c, chunk) in image.data.chunks_exact_mut(plane).enumerate() {
        let (m, s) = (mean[c], std[c]);
        chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
    }
    Ok(())
}

/// Inverse of [`normalize`].
pub fn denormalize(image: &ImageTensor, mean: &[f32; CHANNELS], std: &[f32; CHANNELS]) -> ImageTensor {
    let mut out = image.clone();
    let plane = out.height * out.width;
    for (c, chunk) in out.data.chunks_exact_mut(plane).enumerate() {
        chunk.iter_mut().for_each(|v| *v = *v * std[c] + mean[c]);
    }
    out
}
