//! PSNR, SSIM and FID, directory evaluation and report output.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::blocks::{Conv2d, Env, LEAKY_SLOPE};
use crate::data::{file_id, match_names, png_names};
use crate::error::{config, precondition, M2ganError, Result};
use crate::graph::Graph;
use crate::params::{derive_seed, seeded_rng, ParamStore};
use crate::plane::ImagePlane;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Eigenvalues of the FID matrix product below this are treated as zero.
pub const EIGEN_CLAMP: f64 = 1e-8;

fn same_dims(a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    if !a.same_shape(b) {
        return precondition(format!("image shapes {:?} and {:?} differ", a.dims(), b.dims()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio for unit dynamic range, capped at 100 dB.
pub fn psnr(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    same_dims(a, b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode filtering of a row-major `h × w` map.
fn filter_valid(src: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luma planes over all valid 11×11
/// Gaussian windows.
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w, _) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return precondition(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"));
    }
    let (la, lb) = (a.luma(), b.luma());
    let (x, y) = (la.data(), lb.data());
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |f: &dyn Fn(usize) -> f64| (0..h * w).map(f).collect::<Vec<f64>>();
    let mu_x = filter_valid(x, h, w, &taps);
    let mu_y = filter_valid(y, h, w, &taps);
    let xx = filter_valid(&prod(&|i| x[i] * x[i]), h, w, &taps);
    let yy = filter_valid(&prod(&|i| y[i] * y[i]), h, w, &taps);
    let xy = filter_valid(&prod(&|i| x[i] * y[i]), h, w, &taps);
    let total: f64 = (0..mu_x.len())
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = xx[i] - mx * mx;
            let vy = yy[i] - my * my;
            let cxy = xy[i] - mx * my;
            ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
        })
        .sum();
    Ok(total / mu_x.len() as f64)
}

/// Gaussian fit of an embedding set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    /// Sample covariance (divisor `n − 1`).
    pub cov: DMatrix<f64>,
}

impl FeatureStats {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 || cov.nrows() != d || cov.ncols() != d {
            return precondition(format!("stats of dimension {d} with a {}x{} covariance", cov.nrows(), cov.ncols()));
        }
        if (&cov - cov.transpose()).amax() > 1e-8 {
            return precondition("covariance is not symmetric");
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_embeddings(rows: &[Vec<f64>]) -> Result<Self> {
        let mut acc = FeatureAccumulator::default();
        for r in rows {
            acc.push(r)?;
        }
        acc.finish()
    }
}

/// Streaming sums for [`FeatureStats`]; shards may be merged in any order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureAccumulator {
    count: usize,
    sum: Vec<f64>,
    outer: Vec<f64>,
}

impl FeatureAccumulator {
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if self.count == 0 && self.sum.is_empty() {
            self.sum = vec![0.0; x.len()];
            self.outer = vec![0.0; x.len() * x.len()];
        }
        let d = self.sum.len();
        if x.len() != d || d == 0 {
            return precondition(format!("embedding of dimension {} pushed into {d}-d stats", x.len()));
        }
        for i in 0..d {
            self.sum[i] += x[i];
            for j in 0..d {
                self.outer[i * d + j] += x[i] * x[j];
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &FeatureAccumulator) -> Result<()> {
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        if self.sum.len() != other.sum.len() {
            return precondition("cannot merge statistics of different dimension");
        }
        self.count += other.count;
        self.sum.iter_mut().zip(&other.sum).for_each(|(a, b)| *a += b);
        self.outer.iter_mut().zip(&other.outer).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn finish(&self) -> Result<FeatureStats> {
        if self.count < 2 {
            return precondition(format!("feature statistics need at least 2 samples, got {}", self.count));
        }
        let d = self.sum.len();
        let n = self.count as f64;
        let mean = DVector::from_iterator(d, self.sum.iter().map(|s| s / n));
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] = (self.outer[i * d + j] - n * mean[i] * mean[j]) / (n - 1.0);
            }
        }
        let sym = (&cov + cov.transpose()) * 0.5;
        FeatureStats::new(mean, sym)
    }
}

/// Square root of a symmetric PSD matrix with small eigenvalues clamped.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| if l < EIGEN_CLAMP { 0.0 } else { l.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussian fits. `Tr((Σ₁Σ₂)^{1/2})` is
/// evaluated as `Tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2})`, which is symmetric.
pub fn fid(s1: &FeatureStats, s2: &FeatureStats) -> Result<f64> {
    if s1.dim() != s2.dim() {
        return precondition(format!("FID between {}-d and {}-d statistics", s1.dim(), s2.dim()));
    }
    let diff = (&s1.mean - &s2.mean).norm_squared();
    let r1 = sqrtm_psd(&s1.cov);
    let cross = sqrtm_psd(&(&r1 * &s2.cov * &r1));
    let value = diff + s1.cov.trace() + s2.cov.trace() - 2.0 * cross.trace();
    Ok(value.max(0.0))
}

/// Maps an image to a fixed-length feature vector.
pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, image: &ImagePlane) -> Result<Vec<f64>>;
}

/// Fixed-seed random CNN: nearest resize to 64×64, three conv stages with
/// pooling between them, then global average pooling.
#[derive(Clone, Debug)]
pub struct RandomCnnEmbedder {
    stages: Vec<Conv2d>,
    params: ParamStore,
}

pub const EMBED_SIZE: usize = 64;
pub const EMBED_DIM: usize = 64;

impl RandomCnnEmbedder {
    pub fn new(seed: u64) -> Self {
        let widths = [3, 16, 32, EMBED_DIM];
        let stages: Vec<Conv2d> =
            (0..3).map(|i| Conv2d::new(format!("embed.stage{i}"), widths[i], widths[i + 1], 3)).collect();
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(derive_seed(seed, "fid-embedder"));
        for s in &stages {
            s.init(&mut params, &mut rng).expect("fresh store");
        }
        Self { stages, params }
    }
}

impl Default for RandomCnnEmbedder {
    fn default() -> Self {
        Self::new(0)
    }
}

impl Embedder for RandomCnnEmbedder {
    fn dim(&self) -> usize {
        EMBED_DIM
    }

    fn embed(&self, image: &ImagePlane) -> Result<Vec<f64>> {
        if image.channels() != 3 {
            return config(format!("embedder expects RGB, got {} channels", image.channels()));
        }
        let x = image.resize_nearest(EMBED_SIZE, EMBED_SIZE).to_tensor();
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let mut h = g.constant(x);
        let mut env = Env::new(&mut g, &bound);
        for (i, conv) in self.stages.iter().enumerate() {
            if i > 0 {
                h = env.g.avg_pool2(h)?;
            }
            let y = conv.forward(&mut env, h)?;
            h = env.g.leaky_relu(y, LEAKY_SLOPE);
        }
        let pooled = g.global_avg_pool(h);
        Ok(g.value(pooled).data().to_vec())
    }
}

pub fn feature_stats(images: &[ImagePlane], embedder: &dyn Embedder) -> Result<FeatureStats> {
    if images.len() < 2 {
        return precondition(format!("feature statistics need at least 2 images, got {}", images.len()));
    }
    let mut acc = FeatureAccumulator::default();
    for img in images {
        acc.push(&embedder.embed(img)?)?;
    }
    acc.finish()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Absent when fewer than two images were evaluated.
    pub fid: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: Aggregate,
    pub config: serde_json::Value,
}

pub const REPORT_JSON: &str = "metrics.json";
pub const REPORT_TABLE: &str = "metrics.txt";

impl MetricReport {
    /// Metrics of prediction/reference pairs given in matching order.
    pub fn compute(
        ids: &[String],
        preds: &[ImagePlane],
        refs: &[ImagePlane],
        embedder: &dyn Embedder,
        config: serde_json::Value,
    ) -> Result<Self> {
        if ids.len() != preds.len() || preds.len() != refs.len() || ids.is_empty() {
            return precondition("evaluation needs equally many ids, predictions and references");
        }
        let per_image = ids
            .iter()
            .zip(preds.iter().zip(refs))
            .map(|(id, (p, r))| Ok(ImageMetrics { id: id.clone(), psnr: psnr(p, r)?, ssim: ssim(p, r)? }))
            .collect::<Result<Vec<_>>>()?;
        let n = per_image.len() as f64;
        let fid = if preds.len() >= 2 {
            Some(fid(&feature_stats(preds, embedder)?, &feature_stats(refs, embedder)?)?)
        } else {
            None
        };
        let aggregate = Aggregate {
            mean_psnr: per_image.iter().map(|m| m.psnr).sum::<f64>() / n,
            mean_ssim: per_image.iter().map(|m| m.ssim).sum::<f64>() / n,
            fid,
        };
        Ok(Self { per_image, aggregate, config })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let width = self.per_image.iter().map(|m| m.id.len()).chain([4]).max().unwrap_or(4);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>9}  {:>7}", "id", "PSNR(dB)", "SSIM");
        for m in &self.per_image {
            let _ = writeln!(s, "{:<width$}  {:>9.4}  {:>7.4}", m.id, m.psnr, m.ssim);
        }
        let a = &self.aggregate;
        let _ = writeln!(s, "{:<width$}  {:>9.4}  {:>7.4}", "mean", a.mean_psnr, a.mean_ssim);
        match a.fid {
            Some(f) => {
                let _ = writeln!(s, "FID {f:.4}");
            }
            None => {
                let _ = writeln!(s, "FID n/a (fewer than 2 images)");
            }
        }
        s
    }

    /// Write the JSON report and the table into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(REPORT_JSON), self.to_json()?)?;
        fs::write(dir.join(REPORT_TABLE), self.to_table())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Evaluate predictions against references matched by file name.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, embedder: &dyn Embedder) -> Result<MetricReport> {
    let names = match_names(&png_names(pred_dir)?, &png_names(gt_dir)?, "prediction/reference")?;
    if names.is_empty() {
        return Err(M2ganError::Validation { reason: "no images to evaluate".into(), ids: Vec::new() });
    }
    let mut preds = Vec::with_capacity(names.len());
    let mut refs = Vec::with_capacity(names.len());
    let mut mismatched = Vec::new();
    for n in &names {
        let p = ImagePlane::load_png(&pred_dir.join(n))?;
        let r = ImagePlane::load_png(&gt_dir.join(n))?;
        if !p.same_shape(&r) {
            mismatched.push(n.clone());
        }
        preds.push(p);
        refs.push(r);
    }
    if !mismatched.is_empty() {
        return Err(M2ganError::Validation { reason: "image sizes differ".into(), ids: mismatched });
    }
    let ids: Vec<String> = names.iter().map(|n| file_id(n)).collect();
    let cfg = serde_json::json!({
        "pred_dir": pred_dir.display().to_string(),
        "gt_dir": gt_dir.display().to_string(),
        "ssim": {"window": SSIM_WINDOW, "sigma": SSIM_SIGMA, "c1": SSIM_C1, "c2": SSIM_C2, "channel": "luma-bt601"},
        "psnr_cap_db": PSNR_CAP,
        "fid_embedder": {"kind": "random-cnn", "dim": embedder.dim()},
    });
    MetricReport::compute(&ids, &preds, &refs, embedder, cfg)
}
