//! Planar images and per-pixel maps, plus 8-bit PNG input/output.

use std::path::Path;

use crate::error::{precondition, M2ganError, Result};
use crate::tensor::{Shape, Tensor};

/// An `H×W×C` real-valued image stored channel-major (`C` planes of `H·W`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return precondition(format!("empty image {height}x{width}x{channels}"));
        }
        if data.len() != height * width * channels {
            return precondition(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return precondition("image contains non-finite values");
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    /// Build from a per-pixel function `f(channel, y, x)`.
    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { height, width, channels, data }
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &ImagePlane) -> bool {
        self.dims() == other.dims()
    }

    pub fn clamp01(&self) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(Shape::new(1, self.channels, self.height, self.width), self.data.clone()).expect("plane shape")
    }

    /// Batch element `n` of an NCHW tensor.
    pub fn from_tensor(t: &Tensor, n: usize) -> Result<Self> {
        let s = t.shape();
        if n >= s.n {
            return precondition(format!("batch index {n} out of range for {s}"));
        }
        Self::new(s.h, s.w, s.c, t.batch_item(n).into_data())
    }

    pub fn batch(images: &[ImagePlane]) -> Result<Tensor> {
        let items: Vec<Tensor> = images.iter().map(ImagePlane::to_tensor).collect();
        Tensor::stack(&items)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return precondition(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{}",
                self.height, self.width
            ));
        }
        Ok(Self::from_fn(height, width, self.channels, |c, y, x| self.get(c, top + y, left + x)))
    }

    /// Nearest-neighbour resampling to `height × width`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        Self::from_fn(height, width, self.channels, |c, y, x| {
            let sy = (y * self.height) / height;
            let sx = (x * self.width) / width;
            self.get(c, sy, sx)
        })
    }

    /// ITU-R BT.601 luma of an RGB image; single-channel images pass through.
    pub fn luma(&self) -> Self {
        if self.channels == 1 {
            return self.clone();
        }
        Self::from_fn(self.height, self.width, 1, |_, y, x| {
            0.299 * self.get(0, y, x) + 0.587 * self.get(1, y, x) + 0.114 * self.get(2, y, x)
        })
    }

    /// Load an 8-bit image as RGB in `[0, 1]`.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = ::image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let (w, h) = (w as usize, h as usize);
        let raw = img.into_raw();
        Ok(Self::from_fn(h, w, 3, |c, y, x| raw[(y * w + x) * 3 + c] as f64 / 255.0))
    }

    /// Quantise to 8 bits (round to nearest, clamped) and write as PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self.channels {
            1 => {
                let mut buf = Vec::with_capacity(self.height * self.width);
                for y in 0..self.height {
                    for x in 0..self.width {
                        buf.push(q(self.get(0, y, x)));
                    }
                }
                ::image::GrayImage::from_raw(self.width as u32, self.height as u32, buf)
                    .expect("gray buffer")
                    .save(path)?;
            }
            3 => {
                let mut buf = Vec::with_capacity(self.height * self.width * 3);
                for y in 0..self.height {
                    for x in 0..self.width {
                        for c in 0..3 {
                            buf.push(q(self.get(c, y, x)));
                        }
                    }
                }
                ::image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
                    .expect("rgb buffer")
                    .save(path)?;
            }
            c => return precondition(format!("cannot write a {c}-channel image")),
        }
        Ok(())
    }

    /// Round-trip through 8-bit quantisation without touching disk.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
        out
    }
}

/// Single-channel map in `[0, 1]` marking likely rain regions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRainMap(ImagePlane);

impl AttentionRainMap {
    pub fn new(plane: ImagePlane) -> Result<Self> {
        if plane.channels() != 1 {
            return precondition(format!("rain map must have 1 channel, got {}", plane.channels()));
        }
        if plane.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return precondition("rain map values must lie in [0, 1]");
        }
        Ok(Self(plane))
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self(ImagePlane::filled(height, width, 1, value.clamp(0.0, 1.0)))
    }

    pub fn plane(&self) -> &ImagePlane {
        &self.0
    }

    pub fn into_plane(self) -> ImagePlane {
        self.0
    }

    pub fn mean(&self) -> f64 {
        self.0.data().iter().sum::<f64>() / self.0.data().len() as f64
    }
}

/// Per-pixel category scores forming a probability simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMap(ImagePlane);

/// Allowed deviation of per-pixel score sums from one.
pub const SIMPLEX_TOLERANCE: f64 = 1e-5;

impl SegmentationMap {
    pub fn new(plane: ImagePlane) -> Result<Self> {
        if plane.channels() < 2 {
            return precondition("segmentation maps need at least two categories");
        }
        let (h, w, k) = plane.dims();
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                for c in 0..k {
                    let v = plane.get(c, y, x);
                    if v < 0.0 {
                        return precondition(format!("negative score at ({y},{x})"));
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
                    return precondition(format!("scores at ({y},{x}) sum to {sum}"));
                }
            }
        }
        Ok(Self(plane))
    }

    pub fn num_categories(&self) -> usize {
        self.0.channels()
    }

    pub fn plane(&self) -> &ImagePlane {
        &self.0
    }

    pub fn into_plane(self) -> ImagePlane {
        self.0
    }

    /// Index of the highest-scoring category at a pixel.
    pub fn argmax(&self, y: usize, x: usize) -> usize {
        (0..self.num_categories())
            .max_by(|&a, &b| self.0.get(a, y, x).total_cmp(&self.0.get(b, y, x)).then(b.cmp(&a)))
            .unwrap_or(0)
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        Self(self.0.resize_nearest(height, width))
    }
}

impl From<AttentionRainMap> for ImagePlane {
    fn from(m: AttentionRainMap) -> Self {
        m.0
    }
}

pub(crate) fn ingestion(path: &Path, reason: impl Into<String>) -> M2ganError {
    M2ganError::Ingestion { path: path.to_path_buf(), reason: reason.into() }
}
