//! Synthetic raindrop degradation, paired-dataset ingestion and cropping.
//!
//! Drops are filled ellipses whose interior samples the clean image through
//! a vertically flipped, magnified coordinate field, optionally blurred.
//! Some drops trail a flow streak whose pixels are a vertical box average.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, precondition, M2ganError, Result};
use crate::params::{derive_seed, seeded_rng};
use crate::plane::{ingestion, ImagePlane};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RainSynthesisConfig {
    /// Inclusive range of drops per image.
    pub drop_count: (usize, usize),
    /// Range of the horizontal semi-axis in pixels.
    pub drop_radius: (f64, f64),
    /// Probability that a drop trails a flow streak.
    pub flow_probability: f64,
    /// Extra magnification and downward shift of the refracted field, in pixels.
    pub displacement_gain: f64,
    pub blur_sigma: (f64, f64),
    pub seed: u64,
}

impl Default for RainSynthesisConfig {
    fn default() -> Self {
        Self {
            drop_count: (6, 14),
            drop_radius: (3.0, 9.0),
            flow_probability: 0.3,
            displacement_gain: 2.0,
            blur_sigma: (0.5, 1.5),
            seed: 0,
        }
    }
}

impl RainSynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("drop_radius", self.drop_radius),
            ("blur_sigma", self.blur_sigma),
            ("drop_count", (self.drop_count.0 as f64, self.drop_count.1 as f64)),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
                return config(format!("{name} range ({lo}, {hi}) must be nonempty and nonnegative"));
            }
        }
        if self.drop_count.1 > 0 && self.drop_radius.0 <= 0.0 {
            return config("drop radius must be positive when drops are drawn");
        }
        if !(0.0..=1.0).contains(&self.flow_probability) {
            return config(format!("flow probability {} outside [0, 1]", self.flow_probability));
        }
        if !(self.displacement_gain.is_finite() && self.displacement_gain >= 0.0) {
            return config("displacement gain must be a finite value >= 0");
        }
        Ok(())
    }
}

/// One drawn raindrop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Drop {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub blur_sigma: f64,
    /// `(half width, length)` of the trailing streak, if any.
    pub streak: Option<(f64, f64)>,
}

impl Drop {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let u = (x - self.cx) / self.rx;
        let v = (y - self.cy) / self.ry;
        u * u + v * v <= 1.0
    }

    /// Source coordinate sampled at `(x, y)` inside the drop.
    pub fn source(&self, x: f64, y: f64, gain: f64) -> (f64, f64) {
        let dx = x - self.cx;
        let dy = y - self.cy;
        (self.cx + dx * (1.0 + gain / self.rx), self.cy - dy * (1.0 + gain / self.ry) - gain)
    }

    pub fn in_streak(&self, x: f64, y: f64) -> bool {
        match self.streak {
            Some((half, len)) => (x - self.cx).abs() <= half && y > self.cy && y <= self.cy + self.ry + len,
            None => false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Synthesis {
    pub image: ImagePlane,
    /// Union of drop and streak masks, row-major `H·W`.
    pub mask: Vec<bool>,
    pub drops: Vec<Drop>,
}

/// Bilinear sample of channel `c` with border clamping.
pub fn bilinear_sample(img: &ImagePlane, c: usize, x: f64, y: f64) -> f64 {
    let (h, w, _) = img.dims();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
    let bot = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of a patch `[c][y][x]` with clamped borders.
fn blur_patch(patch: &mut [Vec<Vec<f64>>], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    for plane in patch.iter_mut() {
        let h = plane.len() as i64;
        let w = plane[0].len() as i64;
        let tmp: Vec<Vec<f64>> = (0..h)
            .map(|y| {
                (0..w)
                    .map(|x| {
                        k.iter()
                            .enumerate()
                            .map(|(i, kv)| kv * plane[y as usize][(x + i as i64 - r).clamp(0, w - 1) as usize])
                            .sum()
                    })
                    .collect()
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                plane[y as usize][x as usize] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[(y + i as i64 - r).clamp(0, h - 1) as usize][x as usize])
                    .sum();
            }
        }
    }
}

fn draw_drops(h: usize, w: usize, cfg: &RainSynthesisConfig) -> Vec<Drop> {
    let mut rng = seeded_rng(derive_seed(cfg.seed, "raindrops"));
    let count = rng.gen_range(cfg.drop_count.0..=cfg.drop_count.1);
    let uniform =
        |rng: &mut rand_chacha::ChaCha8Rng, (lo, hi): (f64, f64)| if hi > lo { rng.gen_range(lo..hi) } else { lo };
    (0..count)
        .map(|_| {
            let rx = uniform(&mut rng, cfg.drop_radius);
            let ry = rx * rng.gen_range(0.8..1.3);
            let cx = rng.gen_range(0.0..w as f64);
            let cy = rng.gen_range(0.0..h as f64);
            let blur_sigma = uniform(&mut rng, cfg.blur_sigma);
            let streak = if rng.gen_bool(cfg.flow_probability) {
                Some(((rx * 0.4).max(0.5), ry * rng.gen_range(2.0..5.0)))
            } else {
                None
            };
            Drop { cx, cy, rx, ry, blur_sigma, streak }
        })
        .collect()
}

/// Degrade `clean` and report the affected pixels.
pub fn synthesize(clean: &ImagePlane, cfg: &RainSynthesisConfig) -> Result<Synthesis> {
    cfg.validate()?;
    let (h, w, _) = clean.dims();
    if cfg.drop_count.1 > 0 && cfg.drop_radius.1 > h.min(w) as f64 {
        return config(format!("drop radius {} exceeds the {h}x{w} image", cfg.drop_radius.1));
    }
    let drops = draw_drops(h, w, cfg);
    Ok(render_drops(clean, drops, cfg.displacement_gain))
}

/// Composite explicit drops onto `clean`.
pub fn render_drops(clean: &ImagePlane, drops: Vec<Drop>, gain: f64) -> Synthesis {
    let (h, w, ch) = clean.dims();
    let mut image = clean.clone();
    let mut mask = vec![false; h * w];

    for d in &drops {
        // Streak first so that the drop body is drawn on top of it.
        if let Some((half, len)) = d.streak {
            let x0 = (d.cx - half).ceil().max(0.0) as usize;
            let x1 = ((d.cx + half).floor() as i64).min(w as i64 - 1);
            let y0 = (d.cy.floor() + 1.0).max(0.0) as usize;
            let y1 = ((d.cy + d.ry + len).floor() as i64).min(h as i64 - 1);
            let reach = (len / 4.0).ceil().max(1.0) as i64;
            let src = image.clone();
            for y in y0 as i64..=y1 {
                for x in x0 as i64..=x1 {
                    if !d.in_streak(x as f64, y as f64) {
                        continue;
                    }
                    for c in 0..ch {
                        let mut acc = 0.0;
                        for t in -reach..=reach {
                            acc += src.get(c, (y + t).clamp(0, h as i64 - 1) as usize, x as usize);
                        }
                        image.set(c, y as usize, x as usize, acc / (2 * reach + 1) as f64);
                    }
                    mask[y as usize * w + x as usize] = true;
                }
            }
        }

        let x0 = (d.cx - d.rx).floor().max(0.0) as usize;
        let x1 = ((d.cx + d.rx).ceil() as usize).min(w - 1);
        let y0 = (d.cy - d.ry).floor().max(0.0) as usize;
        let y1 = ((d.cy + d.ry).ceil() as usize).min(h - 1);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        let mut patch: Vec<Vec<Vec<f64>>> = (0..ch)
            .map(|c| {
                (y0..=y1)
                    .map(|y| {
                        (x0..=x1)
                            .map(|x| {
                                let (sx, sy) = d.source(x as f64, y as f64, gain);
                                bilinear_sample(clean, c, sx, sy)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        blur_patch(&mut patch, d.blur_sigma);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if !d.contains(x as f64, y as f64) {
                    continue;
                }
                for (c, plane) in patch.iter().enumerate() {
                    image.set(c, y, x, plane[y - y0][x - x0].clamp(0.0, 1.0));
                }
                mask[y * w + x] = true;
            }
        }
    }
    Synthesis { image, mask, drops }
}

pub fn synthesize_raindrops(clean: &ImagePlane, cfg: &RainSynthesisConfig) -> Result<ImagePlane> {
    Ok(synthesize(clean, cfg)?.image)
}

/// A rain/clean image pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPair {
    pub id: String,
    pub rain: ImagePlane,
    pub clean: ImagePlane,
}

impl DatasetPair {
    pub fn new(id: impl Into<String>, rain: ImagePlane, clean: ImagePlane) -> Result<Self> {
        let id = id.into();
        if !rain.same_shape(&clean) {
            return precondition(format!("pair {id}: rain {:?} and clean {:?} differ", rain.dims(), clean.dims()));
        }
        Ok(Self { id, rain, clean })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairEntry {
    pub id: String,
    /// Paths relative to the dataset root.
    pub rain: PathBuf,
    pub gt: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub n_tr: usize,
    pub pairs: Vec<PairEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RAIN_DIR: &str = "rain";
pub const GT_DIR: &str = "gt";

/// Image file names (`*.png`) in a directory, sorted.
pub fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    if !dir.is_dir() {
        return Err(ingestion(dir, "directory not found"));
    }
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string());
            }
        }
    }
    Ok(out)
}

/// Match `a` against `b` by file name; unmatched names on either side are
/// reported together.
pub fn match_names(a: &BTreeSet<String>, b: &BTreeSet<String>, what: &str) -> Result<Vec<String>> {
    let unmatched: Vec<String> = a.symmetric_difference(b).cloned().collect();
    if !unmatched.is_empty() {
        return Err(M2ganError::Validation { reason: format!("unmatched {what} files"), ids: unmatched });
    }
    Ok(a.iter().cloned().collect())
}

pub fn file_id(name: &str) -> String {
    name.rsplit_once('.').map_or(name, |(stem, _)| stem).to_string()
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, split: Split, pairs: Vec<PairEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let dups: Vec<String> = pairs.iter().filter(|p| !seen.insert(p.id.clone())).map(|p| p.id.clone()).collect();
        if !dups.is_empty() {
            return Err(M2ganError::Validation { reason: "duplicate pair ids".into(), ids: dups });
        }
        Ok(Self { split, n_tr: pairs.len(), pairs, root: root.into() })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.pairs.iter().map(|p| p.id.as_str()).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Read a manifest file; relative pair paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ingestion(path, e.to_string()))?;
        let mut m: Self = serde_json::from_str(&text)?;
        if m.n_tr != m.pairs.len() {
            return Err(ingestion(path, format!("n_tr {} but {} pairs listed", m.n_tr, m.pairs.len())));
        }
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(m.root, m.split, m.pairs)
    }

    pub fn load_pair(&self, index: usize) -> Result<DatasetPair> {
        let e = self
            .pairs
            .get(index)
            .ok_or_else(|| M2ganError::Precondition(format!("pair index {index} out of range")))?;
        let rain = ImagePlane::load_png(&self.root.join(&e.rain))?;
        let clean = ImagePlane::load_png(&self.root.join(&e.gt))?;
        DatasetPair::new(e.id.clone(), rain, clean)
    }

    pub fn load_pairs(&self) -> Result<Vec<DatasetPair>> {
        (0..self.len()).map(|i| self.load_pair(i)).collect()
    }
}

/// Scan `root/{rain,gt}/*.png` and pair files by name.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let rain = png_names(&root.join(RAIN_DIR))?;
    let gt = png_names(&root.join(GT_DIR))?;
    let names = match_names(&rain, &gt, "rain/gt")?;
    if names.is_empty() {
        return Err(ingestion(root, "no image pairs found"));
    }
    let pairs = names
        .iter()
        .map(|n| PairEntry { id: file_id(n), rain: Path::new(RAIN_DIR).join(n), gt: Path::new(GT_DIR).join(n) })
        .collect();
    DatasetManifest::new(root, Split::Train, pairs)
}

/// Top-left corner of a `size × size` window drawn from `seed`.
pub fn crop_window(height: usize, width: usize, size: usize, seed: u64) -> Result<(usize, usize)> {
    if size == 0 || size > height || size > width {
        return precondition(format!("crop {size} does not fit a {height}x{width} image"));
    }
    let mut rng = seeded_rng(derive_seed(seed, "crop"));
    Ok((rng.gen_range(0..=height - size), rng.gen_range(0..=width - size)))
}

/// Crop both images of a pair with one shared window.
pub fn random_crop_pair(pair: &DatasetPair, size: usize, seed: u64) -> Result<DatasetPair> {
    let (h, w, _) = pair.clean.dims();
    let (top, left) = crop_window(h, w, size, seed)?;
    Ok(DatasetPair {
        id: pair.id.clone(),
        rain: pair.rain.crop(top, left, size, size)?,
        clean: pair.clean.crop(top, left, size, size)?,
    })
}

/// A smooth, textured image for synthetic datasets.
pub fn procedural_scene(height: usize, width: usize, seed: u64) -> ImagePlane {
    let mut rng = seeded_rng(derive_seed(seed, "scene"));
    let waves: Vec<[f64; 4]> = (0..9)
        .map(|_| [rng.gen_range(0.5..4.0), rng.gen_range(0.5..4.0), rng.gen_range(0.0..6.3), rng.gen_range(0.05..0.2)])
        .collect();
    let base: Vec<f64> = (0..3).map(|_| rng.gen_range(0.25..0.75)).collect();
    ImagePlane::from_fn(height, width, 3, |c, y, x| {
        let u = x as f64 / width as f64 * std::f64::consts::TAU;
        let v = y as f64 / height as f64 * std::f64::consts::TAU;
        let s: f64 = waves[c * 3..c * 3 + 3].iter().map(|[a, b, p, amp]| amp * (a * u + b * v + p).sin()).sum();
        (base[c] + s).clamp(0.0, 1.0)
    })
}
