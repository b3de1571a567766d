//! Planar raster images and the plane-level resampling helpers shared with
//! density maps.

use std::path::Path;

use image::{DynamicImage, RgbImage};

use crate::error::{Error, Result};

/// A planar (channel-major) image with `f32` samples nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_planar(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::arg(format!(
                "image dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::arg(format!(
                "image buffer holds {} samples, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Decode PNG/JPEG/BMP from disk into a 3-channel image.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Codec(other),
        })?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn from_dynamic(img: &DynamicImage) -> Self {
        Self::from_rgb8(&img.to_rgb8())
    }

    pub fn from_rgb8(rgb: &RgbImage) -> Self {
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut out = Self::new(w, h, 3);
        for (x, y, px) in rgb.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, px[c] as f32 / 255.0);
            }
        }
        out
    }

    /// Quantize to 8-bit RGB. Single-channel images are replicated to gray.
    pub fn to_rgb8(&self) -> RgbImage {
        let mut rgb = RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in rgb.enumerate_pixels_mut() {
            for c in 0..3 {
                let src = if self.channels >= 3 { c } else { 0 };
                let v = self.get(src, y as usize, x as usize);
                px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        rgb
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.to_rgb8().save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Codec(other),
        })
    }

    fn map_planes(&self, w: usize, h: usize, f: impl Fn(&[f32]) -> Vec<f32>) -> Self {
        let mut data = Vec::with_capacity(w * h * self.channels);
        for c in 0..self.channels {
            data.extend(f(self.plane(c)));
        }
        Self {
            width: w,
            height: h,
            channels: self.channels,
            data,
        }
    }

    pub fn resize_bilinear(&self, width: usize, height: usize) -> Self {
        self.map_planes(width, height, |p| {
            resize_plane(p, self.height, self.width, height, width)
        })
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Self {
        self.map_planes(width, height, |p| crop_plane(p, self.width, x0, y0, width, height))
    }

    /// Zero-pad on the bottom/right up to at least the requested size.
    pub fn pad_to(&self, width: usize, height: usize) -> Self {
        let (w, h) = (width.max(self.width), height.max(self.height));
        self.map_planes(w, h, |p| pad_plane(p, self.height, self.width, h, w))
    }

    pub fn flip_horizontal(&self) -> Self {
        self.map_planes(self.width, self.height, |p| flip_h_plane(p, self.height, self.width))
    }

    pub fn flip_vertical(&self) -> Self {
        self.map_planes(self.width, self.height, |p| flip_v_plane(p, self.height, self.width))
    }

    /// Rotate by `quarter_turns` × 90° counter-clockwise.
    pub fn rotate90(&self, quarter_turns: u32) -> Self {
        let (h, w) = rotated_dims(self.height, self.width, quarter_turns);
        self.map_planes(w, h, |p| rot90_plane(p, self.height, self.width, quarter_turns))
    }
}

/// Source taps for half-pixel-centred linear interpolation along one axis.
///
/// Each output index maps to `(i0, i1, frac)` with the sample
/// `(1 - frac) * src[i0] + frac * src[i1]`.
pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn resize_plane(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut out = vec![0.0f32; out_h * out_w];
    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
        let r0 = &src[y0 * w..(y0 + 1) * w];
        let r1 = &src[y1 * w..(y1 + 1) * w];
        let row = &mut out[oy * out_w..(oy + 1) * out_w];
        for (o, &(x0, x1, fx)) in row.iter_mut().zip(tx.iter()) {
            let top = r0[x0] as f64 * (1.0 - fx) + r0[x1] as f64 * fx;
            let bot = r1[x0] as f64 * (1.0 - fx) + r1[x1] as f64 * fx;
            *o = (top * (1.0 - fy) + bot * fy) as f32;
        }
    }
    out
}

pub fn crop_plane(src: &[f32], w: usize, x0: usize, y0: usize, cw: usize, ch: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(cw * ch);
    for y in y0..y0 + ch {
        out.extend_from_slice(&src[y * w + x0..y * w + x0 + cw]);
    }
    out
}

pub fn pad_plane(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; out_h * out_w];
    for y in 0..h {
        out[y * out_w..y * out_w + w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
    out
}

pub fn flip_h_plane(src: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        out.extend(src[y * w..(y + 1) * w].iter().rev());
    }
    out
}

pub fn flip_v_plane(src: &[f32], h: usize, w: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(h * w);
    for y in (0..h).rev() {
        out.extend_from_slice(&src[y * w..(y + 1) * w]);
    }
    out
}

pub fn rotated_dims(h: usize, w: usize, quarter_turns: u32) -> (usize, usize) {
    if quarter_turns % 2 == 1 {
        (w, h)
    } else {
        (h, w)
    }
}

/// Counter-clockwise quarter turns; one turn is transpose followed by row reversal.
pub fn rot90_plane(src: &[f32], h: usize, w: usize, quarter_turns: u32) -> Vec<f32> {
    match quarter_turns % 4 {
        0 => src.to_vec(),
        1 => {
            let mut out = vec![0.0f32; h * w];
            // out has shape (w, h): out[i][j] = src[j][w - 1 - i]
            for i in 0..w {
                for j in 0..h {
                    out[i * h + j] = src[j * w + (w - 1 - i)];
                }
            }
            out
        }
        2 => {
            let mut out = src.to_vec();
            out.reverse();
            out
        }
        _ => {
            let once = rot90_plane(src, h, w, 1);
            let (h1, w1) = rotated_dims(h, w, 1);
            rot90_plane(&once, h1, w1, 2)
        }
    }
}
