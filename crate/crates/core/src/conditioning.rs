//! Conditioning priors for each stage: the attention rain map and the
//! segmentation map, with a pluggable segmenter.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, precondition, Result};
use crate::graph::soft_assign_values;
use crate::params::{derive_seed, seeded_rng};
use crate::plane::{ingestion, AttentionRainMap, ImagePlane, SegmentationMap};

/// Gain applied to the channel-mean absolute residual; a 0.2 residual saturates.
pub const RAIN_MAP_GAIN: f64 = 5.0;

/// Rain map of `observation` against the current background `estimate`:
/// `min(1, gain · mean_c |O − B̂|)` per pixel.
pub fn attention_rain_map(observation: &ImagePlane, estimate: &ImagePlane) -> Result<AttentionRainMap> {
    if !observation.same_shape(estimate) {
        return precondition(format!(
            "rain map inputs differ in shape: {:?} vs {:?}",
            observation.dims(),
            estimate.dims()
        ));
    }
    let (h, w, c) = observation.dims();
    let map = ImagePlane::from_fn(h, w, 1, |_, y, x| {
        let mean = (0..c).map(|ch| (observation.get(ch, y, x) - estimate.get(ch, y, x)).abs()).sum::<f64>() / c as f64;
        (RAIN_MAP_GAIN * mean).clamp(0.0, 1.0)
    });
    AttentionRainMap::new(map)
}

/// Colour k-means segmenter with soft assignment. Not semantic, but it is
/// deterministic, produces a valid simplex at every pixel and is
/// differentiable in the pixel values once the centroids are fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToySegmenter {
    pub num_categories: usize,
    pub seed: u64,
    /// Softmax temperature over squared colour distances.
    pub temperature: f64,
    pub iterations: usize,
}

impl Default for ToySegmenter {
    fn default() -> Self {
        Self { num_categories: 5, seed: 7, temperature: 0.05, iterations: 10 }
    }
}

const CUBE_CORNERS: [[f64; 3]; 8] = [
    [0.0, 0.0, 0.0],
    [1.0, 1.0, 1.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.0, 1.0],
];

impl ToySegmenter {
    pub fn validate(&self) -> Result<()> {
        if self.num_categories < 2 {
            return config("segmenters need at least two categories");
        }
        if self.temperature.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return config("segmenter temperature must be positive");
        }
        Ok(())
    }

    /// Seeded initial centroids: jittered cube corners, then random colours.
    pub fn palette(&self, channels: usize) -> Vec<Vec<f64>> {
        let mut rng = seeded_rng(derive_seed(self.seed, "palette"));
        (0..self.num_categories)
            .map(|k| {
                (0..channels)
                    .map(|c| {
                        let jitter = rng.gen_range(-0.05..0.05);
                        let base = if k < CUBE_CORNERS.len() && channels == 3 {
                            CUBE_CORNERS[k][c]
                        } else {
                            rng.gen_range(0.0..1.0)
                        };
                        f64::clamp(base + jitter, 0.0, 1.0)
                    })
                    .collect()
            })
            .collect()
    }

    /// Lloyd iterations from the seeded palette; empty clusters keep their
    /// previous centroid and ties go to the lower index.
    pub fn fit_centroids(&self, image: &ImagePlane) -> Vec<Vec<f64>> {
        let (h, w, ch) = image.dims();
        let mut cents = self.palette(ch);
        let k = cents.len();
        for _ in 0..self.iterations {
            let mut sums = vec![vec![0.0; ch]; k];
            let mut counts = vec![0usize; k];
            for y in 0..h {
                for x in 0..w {
                    let best = nearest(&cents, |c| image.get(c, y, x));
                    counts[best] += 1;
                    for (c, s) in sums[best].iter_mut().enumerate() {
                        *s += image.get(c, y, x);
                    }
                }
            }
            for j in 0..k {
                if counts[j] > 0 {
                    for c in 0..ch {
                        cents[j][c] = sums[j][c] / counts[j] as f64;
                    }
                }
            }
        }
        cents
    }

    /// Soft assignment of every pixel to fixed centroids.
    pub fn assign(&self, image: &ImagePlane, centroids: &[Vec<f64>]) -> Result<SegmentationMap> {
        if centroids.len() != self.num_categories || centroids.iter().any(|c| c.len() != image.channels()) {
            return precondition("centroids do not match the segmenter and image");
        }
        let probs = soft_assign_values(&image.to_tensor(), centroids, self.temperature);
        SegmentationMap::new(ImagePlane::from_tensor(&probs, 0)?)
    }

    pub fn segment(&self, image: &ImagePlane) -> Result<SegmentationMap> {
        self.validate()?;
        let cents = self.fit_centroids(image);
        self.assign(image, &cents)
    }
}

fn nearest(cents: &[Vec<f64>], pixel: impl Fn(usize) -> f64) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, cent) in cents.iter().enumerate() {
        let d: f64 = cent.iter().enumerate().map(|(c, &v)| (pixel(c) - v).powi(2)).sum();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmenterKind {
    Toy,
    ExternalImport,
}

/// Source of segmentation maps for the stages and the segmentation
/// discriminator.
#[derive(Clone, Debug, PartialEq)]
pub enum SegmenterHandle {
    Toy(ToySegmenter),
    /// A map produced elsewhere for one specific image; it is returned
    /// (resampled if needed) whatever image is passed in.
    External(SegmentationMap),
}

impl SegmenterHandle {
    pub fn kind(&self) -> SegmenterKind {
        match self {
            SegmenterHandle::Toy(_) => SegmenterKind::Toy,
            SegmenterHandle::External(_) => SegmenterKind::ExternalImport,
        }
    }

    pub fn num_categories(&self) -> usize {
        match self {
            SegmenterHandle::Toy(t) => t.num_categories,
            SegmenterHandle::External(m) => m.num_categories(),
        }
    }

    pub fn segment(&self, image: &ImagePlane) -> Result<SegmentationMap> {
        match self {
            SegmenterHandle::Toy(t) => t.segment(image),
            SegmenterHandle::External(m) => Ok(m.resize_nearest(image.height(), image.width())),
        }
    }
}

/// Decode a single-channel 8-bit label image into raw category indices.
pub fn read_label_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    if !path.exists() {
        return Err(ingestion(path, "label map file not found"));
    }
    let img = ::image::open(path).map_err(|e| ingestion(path, e.to_string()))?;
    if img.color().channel_count() != 1 {
        return Err(ingestion(path, "label maps must be single-channel 8-bit images"));
    }
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    Ok((h as usize, w as usize, luma.into_raw()))
}

/// One-hot segmentation map from a label image with categories in `[0, K)`.
/// When `expected` is given the label image must have exactly that
/// `(height, width)`.
pub fn import_label_map(
    path: &Path,
    num_categories: usize,
    expected: Option<(usize, usize)>,
) -> Result<SegmentationMap> {
    if num_categories < 2 {
        return config("label maps need at least two categories");
    }
    let (h, w, labels) = read_label_png(path)?;
    if let Some((eh, ew)) = expected {
        if (eh, ew) != (h, w) {
            return Err(ingestion(path, format!("label map is {h}x{w}, image is {eh}x{ew}")));
        }
    }
    let mut bad: Vec<u8> = labels.iter().copied().filter(|&l| l as usize >= num_categories).collect();
    if !bad.is_empty() {
        bad.sort_unstable();
        bad.dedup();
        let list: Vec<String> = bad.iter().map(u8::to_string).collect();
        return Err(ingestion(path, format!("labels out of range [0, {num_categories}): {}", list.join(", "))));
    }
    let plane = ImagePlane::from_fn(h, w, num_categories, |c, y, x| f64::from(labels[y * w + x] as usize == c));
    SegmentationMap::new(plane)
}

/// Write category indices as a single-channel label image.
pub fn write_label_png(path: &Path, height: usize, width: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != height * width {
        return precondition("label buffer does not match dimensions");
    }
    ::image::GrayImage::from_raw(width as u32, height as u32, labels.to_vec()).expect("label buffer").save(path)?;
    Ok(())
}
