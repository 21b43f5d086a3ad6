#![allow(dead_code)]

pub mod oracle;

use m2gan::data::{procedural_scene, synthesize_raindrops, DatasetPair, RainSynthesisConfig};
use m2gan::params::seeded_rng;
use m2gan::plane::ImagePlane;
use m2gan::tensor::{Shape, Tensor};
use rand::Rng;

pub const FD_STEP: f64 = 1e-4;

pub fn random_tensor(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = seeded_rng(seed);
    let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

pub fn random_plane(h: usize, w: usize, c: usize, seed: u64) -> ImagePlane {
    let mut rng = seeded_rng(seed);
    let data = (0..h * w * c).map(|_| rng.gen_range(0.0..1.0)).collect();
    ImagePlane::new(h, w, c, data).unwrap()
}

/// Central differences of `f` at every element of `x`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vanish.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let norm = |t: &[f64]| t.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let scale = norm(a.data()).max(norm(b.data()));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Procedural clean scenes with synthetic raindrops.
pub fn toy_pairs(n: usize, size: usize) -> Vec<DatasetPair> {
    (0..n as u64)
        .map(|i| {
            let clean = procedural_scene(size, size, i);
            let cfg = RainSynthesisConfig { seed: i, ..Default::default() };
            let rain = synthesize_raindrops(&clean, &cfg).unwrap();
            DatasetPair::new(format!("pair{i}"), rain, clean).unwrap()
        })
        .collect()
}

pub fn mean_psnr<'a>(pairs: impl Iterator<Item = (&'a ImagePlane, &'a ImagePlane)>) -> f64 {
    let v: Vec<f64> = pairs.map(|(a, b)| m2gan::metrics::psnr(a, b).unwrap()).collect();
    v.iter().sum::<f64>() / v.len() as f64
}
