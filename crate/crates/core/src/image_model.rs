//! Image and gradient planes shared by every stage of the pipeline, plus PNG
//! I/O, bilinear resizing and the forward-difference gradient operator.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CrrnError, Result};
use crate::tensor::{Element, Tensor};

/// Smallest side length accepted by the networks.
pub const MIN_NETWORK_SIDE: usize = 8;
/// Network inputs must be multiples of this (five stride-2 stages).
pub const NETWORK_STRIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Resolution {
    pub height: usize,
    pub width: usize,
}

impl Resolution {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(CrrnError::Argument(format!(
                "resolution must be positive, got {height}x{width}"
            )));
        }
        Ok(Self { height, width })
    }

    pub fn is_network_compatible(&self) -> bool {
        self.height % NETWORK_STRIDE == 0 && self.width % NETWORK_STRIDE == 0
    }

    pub fn require_network_compatible(&self) -> Result<()> {
        if self.is_network_compatible() {
            Ok(())
        } else {
            Err(CrrnError::Dimension(format!(
                "resolution {self} is not divisible by {NETWORK_STRIDE}"
            )))
        }
    }

    /// Nearest network-compatible resolution (each side rounded to a multiple
    /// of 32, at least 32).
    pub fn nearest_network_compatible(&self) -> Self {
        let round = |v: usize| ((v + NETWORK_STRIDE / 2) / NETWORK_STRIDE).max(1) * NETWORK_STRIDE;
        Self {
            height: round(self.height),
            width: round(self.width),
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }
}

impl std::fmt::Display for Resolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

impl std::str::FromStr for Resolution {
    type Err = CrrnError;

    /// Parses `HxW`, e.g. `96x160`.
    fn from_str(s: &str) -> Result<Self> {
        let (h, w) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| CrrnError::Argument(format!("expected HxW, got {s:?}")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| CrrnError::Argument(format!("expected HxW, got {s:?}")))
        };
        Resolution::new(parse(h)?, parse(w)?)
    }
}

/// Planar (`C x H x W`) image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImagePlane {
    /// Values outside `[0, 1]` are clamped; non-finite values are rejected.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(CrrnError::Argument(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(CrrnError::Argument("image must not be empty".into()));
        }
        if data.len() != height * width * channels {
            return Err(CrrnError::Dimension(format!(
                "{} values for a {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CrrnError::Argument("image contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data: data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Build from interleaved `H x W x C` samples.
    pub fn from_interleaved(height: usize, width: usize, channels: usize, hwc: &[f32]) -> Result<Self> {
        if hwc.len() != height * width * channels {
            return Err(CrrnError::Dimension(format!(
                "{} values for a {height}x{width}x{channels} image",
                hwc.len()
            )));
        }
        let mut data = vec![0.0; hwc.len()];
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data[(c * height + y) * width + x] = hwc[(y * width + x) * channels + c];
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn to_interleaved(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.data.len()];
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out[(y * self.width + x) * self.channels + c] = self.get(c, y, x);
                }
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn resolution(&self) -> Resolution {
        Resolution {
            height: self.height,
            width: self.width,
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Rejects images too small to enter a network.
    pub fn require_network_size(&self) -> Result<()> {
        if self.height < MIN_NETWORK_SIDE || self.width < MIN_NETWORK_SIDE {
            return Err(CrrnError::Dimension(format!(
                "image {}x{} is smaller than the {MIN_NETWORK_SIDE}x{MIN_NETWORK_SIDE} network minimum",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &ImagePlane) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Per-pixel channel mean.
    pub fn luminance(&self) -> Vec<f32> {
        let n = self.height * self.width;
        let mut lum = vec![0.0f32; n];
        for c in 0..self.channels {
            for (l, &v) in lum.iter_mut().zip(self.plane(c)) {
                *l += v;
            }
        }
        let inv = 1.0 / self.channels as f32;
        lum.iter_mut().for_each(|l| *l *= inv);
        lum
    }

    /// Replicate a grayscale image into three channels; colour images are
    /// returned unchanged.
    pub fn to_rgb(&self) -> ImagePlane {
        if self.channels == 3 {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.data.len() * 3);
        for _ in 0..3 {
            data.extend_from_slice(&self.data);
        }
        ImagePlane {
            height: self.height,
            width: self.width,
            channels: 3,
            data,
        }
    }

    /// Round every value to the nearest 8-bit level.
    pub fn quantized(&self) -> ImagePlane {
        ImagePlane {
            data: self.data.iter().map(|&v| (v * 255.0).round() / 255.0).collect(),
            ..self.clone()
        }
    }

    /// `1 x C x H x W` tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
    }

    /// Batch item `n` of a `N x C x H x W` tensor, clamped into range.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        let data = t.item_slice(n).iter().map(|v| v.to_f64_lossy() as f32).collect();
        Self::new(h, w, c, data)
    }

    pub(crate) fn from_raw_unchecked(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        Self {
            height,
            width,
            channels,
            data,
        }
    }
}

/// Single-channel nonnegative gradient magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GradientMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CrrnError::Dimension(format!(
                "{} values for a {height}x{width} gradient map",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CrrnError::Argument(
                "gradient magnitudes must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn resolution(&self) -> Resolution {
        Resolution {
            height: self.height,
            width: self.width,
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(0.0, f32::max)
    }

    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, 1, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect(),
        )
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let [_, c, h, w] = t.shape();
        if c != 1 {
            return Err(CrrnError::Dimension(format!("gradient tensor has {c} channels")));
        }
        let data = t
            .item_slice(n)
            .iter()
            .map(|v| (v.to_f64_lossy() as f32).max(0.0))
            .collect();
        Self::new(h, w, data)
    }

    /// Scale into `[0, 1]` for display (divides by the maximum, if positive).
    pub fn to_display_image(&self) -> ImagePlane {
        let max = self.max();
        let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
        ImagePlane::from_raw_unchecked(
            self.height,
            self.width,
            1,
            self.data.iter().map(|&v| (v * scale).clamp(0.0, 1.0)).collect(),
        )
    }
}

/// Forward-difference gradient magnitude of the channel-mean luminance,
/// zero in the last row and column.
pub fn gradient_magnitude(img: &ImagePlane) -> GradientMap {
    let (h, w) = (img.height, img.width);
    let lum = img.luminance();
    let mut data = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let here = lum[y * w + x];
            let gx = if x + 1 < w { lum[y * w + x + 1] - here } else { 0.0 };
            let gy = if y + 1 < h { lum[(y + 1) * w + x] - here } else { 0.0 };
            data[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    GradientMap {
        height: h,
        width: w,
        data,
    }
}

/// Bilinear resampling with half-pixel centres, edge samples clamped.
pub fn resize(img: &ImagePlane, target: Resolution) -> ImagePlane {
    if img.resolution() == target {
        return img.clone();
    }
    let (ih, iw) = (img.height, img.width);
    let (oh, ow) = (target.height, target.width);
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, (src - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = taps(oh, ih);
    let xs = taps(ow, iw);
    let mut data = Vec::with_capacity(oh * ow * img.channels);
    for c in 0..img.channels {
        let plane = img.plane(c);
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * iw + x0] * (1.0 - fx) + plane[y0 * iw + x1] * fx;
                let bottom = plane[y1 * iw + x0] * (1.0 - fx) + plane[y1 * iw + x1] * fx;
                data.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    ImagePlane::from_raw_unchecked(oh, ow, img.channels, data)
}

/// Read an 8- or 16-bit PNG; grayscale stays 1 channel, colour becomes 3,
/// alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CrrnError::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    // Expand palettes and sub-byte grayscale, but keep 16-bit samples.
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder
        .read_info()
        .map_err(|e| CrrnError::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| CrrnError::Format(format!("{}: {e}", path.display())))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (in_channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(CrrnError::Format(format!("{}: unexpanded palette", path.display())))
        }
    };
    let samples: Vec<f32> = match info.bit_depth {
        png::BitDepth::Eight => buf[..info.buffer_size()].iter().map(|&v| v as f32 / 255.0).collect(),
        png::BitDepth::Sixteen => buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f32 / 65535.0)
            .collect(),
        other => {
            return Err(CrrnError::Format(format!(
                "{}: unsupported bit depth {other:?}",
                path.display()
            )))
        }
    };
    let mut data = vec![0.0f32; h * w * keep];
    for y in 0..h {
        for x in 0..w {
            for c in 0..keep {
                data[(c * h + y) * w + x] = samples[(y * w + x) * in_channels + c];
            }
        }
    }
    ImagePlane::new(h, w, keep, data)
}

/// Write an 8-bit grayscale or RGB PNG.
pub fn save_image(img: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CrrnError::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width as u32, img.height as u32);
    encoder.set_color(if img.channels == 1 {
        png::ColorType::Grayscale
    } else {
        png::ColorType::Rgb
    });
    encoder.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img
        .to_interleaved()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let png_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => CrrnError::io(path, io),
        other => CrrnError::Format(format!("{}: {other}", path.display())),
    };
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}
