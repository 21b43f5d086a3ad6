//! Optimisers, learning-rate schedule, the alternating adversarial step,
//! checkpoints and the epoch loop.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{vector, Archive};
use crate::conditioning::{SegmenterHandle, ToySegmenter};
use crate::data::{random_crop_pair, DatasetPair};
use crate::discriminator::{Discriminator, DiscriminatorConfig, DiscriminatorRole};
use crate::error::{config, precondition, M2ganError, Result};
use crate::generator::{Generator, PipelineConfig};
use crate::graph::{soft_assign_values, Graph, Var};
use crate::losses::{self, AdvLossMode, LossWeights, PerceptualBackbone, DEFAULT_TAP};
use crate::params::{derive_seed, seeded_rng, Bound, ParamStore};
use crate::plane::ImagePlane;
use crate::tensor::Tensor;

/// Named arrays of one trainable component.
pub type ParameterSet = ParamStore;

fn zeros_like(like: &ParamStore) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in like.iter() {
        out.insert(name.clone(), Tensor::zeros(t.shape())).expect("unique names");
    }
    out
}

fn check_layout(a: &ParamStore, b: &ParamStore, what: &str) -> Result<()> {
    if !a.same_layout(b) {
        return Err(M2ganError::State(format!("{what}: parameter layouts differ")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl Adam {
    pub fn new(like: &ParamStore, cfg: AdamConfig) -> Self {
        Self { cfg, m: zeros_like(like), v: zeros_like(like), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        check_layout(params, grads, "adam gradients")?;
        check_layout(params, &self.m, "adam moments")?;
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads.require(name)?;
            let m = self.m.get_mut(name).expect("checked layout");
            let v = self.v.get_mut(name).expect("checked layout");
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i] + weight_decay * p[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LookaheadState {
    pub slow: ParamStore,
    pub k: usize,
    pub alpha: f64,
    pub counter: u64,
}

impl LookaheadState {
    pub fn new(fast: &ParamStore, k: usize, alpha: f64) -> Result<Self> {
        if k == 0 {
            return config("lookahead sync period must be at least 1");
        }
        if !(0.0..=1.0).contains(&alpha) {
            return config(format!("lookahead alpha {alpha} outside [0, 1]"));
        }
        Ok(Self { slow: fast.clone(), k, alpha, counter: 0 })
    }
}

/// Count one inner step already applied to `fast`; every `k` steps move the
/// slow weights towards `fast` and reset `fast` to them. Returns whether a
/// sync happened.
pub fn lookahead_step(fast: &mut ParamStore, state: &mut LookaheadState) -> Result<bool> {
    check_layout(fast, &state.slow, "lookahead")?;
    state.counter += 1;
    if state.counter % state.k as u64 != 0 {
        return Ok(false);
    }
    let a = state.alpha;
    for (name, f) in fast.iter_mut() {
        let s = state.slow.get_mut(name).expect("checked layout");
        for (sv, fv) in s.data_mut().iter_mut().zip(f.data_mut()) {
            *sv = (1.0 - a) * *sv + a * *fv;
            *fv = *sv;
        }
    }
    Ok(true)
}

/// Adam wrapped by Lookahead.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub adam: Adam,
    pub lookahead: LookaheadState,
}

impl Optimizer {
    pub fn new(params: &ParamStore, adam: AdamConfig, k: usize, alpha: f64) -> Result<Self> {
        Ok(Self { adam: Adam::new(params, adam), lookahead: LookaheadState::new(params, k, alpha)? })
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        self.adam.step(params, grads, lr)?;
        lookahead_step(params, &mut self.lookahead)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    Full,
    /// No segmentation discriminator and no segmentation adversarial term.
    NoSeg,
    /// No discriminators; the adversarial weight is treated as zero.
    NoDisc,
}

impl Ablation {
    pub fn uses_image_disc(self) -> bool {
        self != Ablation::NoDisc
    }

    pub fn uses_seg_disc(self) -> bool {
        self == Ablation::Full
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoSeg => "no-seg",
            Self::NoDisc => "no-disc",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "full" => Ok(Self::Full),
            "no-seg" => Ok(Self::NoSeg),
            "no-disc" => Ok(Self::NoDisc),
            other => Err(format!("unknown ablation {other:?} (expected full, no-seg or no-disc)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    pub ablation: Ablation,
    pub adv_mode: AdvLossMode,
    pub seed: u64,
    /// Square training crop; `None` trains on whole images.
    pub crop_size: Option<usize>,
    /// Defaults to one pass over the data.
    pub steps_per_epoch: Option<usize>,
    pub weights: LossWeights,
    pub adam: AdamConfig,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    pub power_iterations: usize,
    pub disc_features: usize,
    pub backbone_tap: usize,
    pub segmenter: ToySegmenter,
    /// Every path is single-threaded and seeded; the flag is recorded only.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr_start: 1e-3,
            lr_end: 1e-5,
            batch_size: 4,
            ablation: Ablation::Full,
            adv_mode: AdvLossMode::Standard,
            seed: 0,
            crop_size: Some(96),
            steps_per_epoch: None,
            weights: LossWeights::default(),
            adam: AdamConfig::default(),
            lookahead_k: 5,
            lookahead_alpha: 0.5,
            power_iterations: 1,
            disc_features: 16,
            backbone_tap: DEFAULT_TAP,
            segmenter: ToySegmenter::default(),
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return config("epochs must be at least 1");
        }
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return config(format!("need lr_start >= lr_end > 0, got {} and {}", self.lr_start, self.lr_end));
        }
        if self.batch_size == 0 {
            return config("batch size must be at least 1");
        }
        if self.steps_per_epoch == Some(0) {
            return config("steps per epoch must be at least 1");
        }
        if self.power_iterations == 0 {
            return config("spectral normalisation needs at least one power iteration");
        }
        self.weights.validate()?;
        self.segmenter.validate()?;
        LookaheadState::new(&ParamStore::new(), self.lookahead_k, self.lookahead_alpha)?;
        Ok(())
    }
}

/// Log-linear interpolation from `lr_start` at epoch 0 to `lr_end` at the
/// final epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return precondition(format!("epoch {epoch} outside 0..{}", cfg.epochs));
    }
    lr_at_progress(epoch as f64, cfg)
}

/// The same interpolation at a fractional epoch `t ∈ [0, epochs − 1]`.
pub fn lr_at_progress(t: f64, cfg: &TrainConfig) -> Result<f64> {
    let last = (cfg.epochs.max(1) - 1) as f64;
    if !(0.0..=last).contains(&t) {
        return precondition(format!("progress {t} outside [0, {last}]"));
    }
    if t == 0.0 {
        return Ok(cfg.lr_start);
    }
    if t == last {
        return Ok(cfg.lr_end);
    }
    let (a, b) = (cfg.lr_start.ln(), cfg.lr_end.ln());
    Ok((a + (b - a) * t / last).exp())
}

/// Every network touched by training.
#[derive(Clone, Debug)]
pub struct Models {
    pub generator: Generator,
    pub d_img: Option<Discriminator>,
    pub d_seg: Option<Discriminator>,
    pub backbone: PerceptualBackbone,
    pub segmenter: ToySegmenter,
}

impl Models {
    /// Fresh models; discriminators exist only where the ablation uses them.
    pub fn new(pipeline: PipelineConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if pipeline.seg_categories != cfg.segmenter.num_categories {
            return config(format!(
                "pipeline expects {} categories, segmenter yields {}",
                pipeline.seg_categories, cfg.segmenter.num_categories
            ));
        }
        let generator = Generator::new(pipeline.clone(), derive_seed(cfg.seed, "generator"))?;
        let disc_cfg = |c: DiscriminatorConfig| DiscriminatorConfig { power_iterations: cfg.power_iterations, ..c };
        let d_img = if cfg.ablation.uses_image_disc() {
            Some(Discriminator::new(
                DiscriminatorRole::Image,
                disc_cfg(DiscriminatorConfig::image(cfg.disc_features)),
                cfg.seed,
            )?)
        } else {
            None
        };
        let d_seg = if cfg.ablation.uses_seg_disc() {
            let c = DiscriminatorConfig::segmentation(pipeline.seg_categories, cfg.disc_features);
            Some(Discriminator::new(DiscriminatorRole::Segmentation, disc_cfg(c), cfg.seed)?)
        } else {
            None
        };
        let backbone = PerceptualBackbone::fixed_random(derive_seed(cfg.seed, "perceptual"), cfg.backbone_tap)?;
        Ok(Self { generator, d_img, d_seg, backbone, segmenter: cfg.segmenter.clone() })
    }

    pub fn segmenter_handle(&self) -> SegmenterHandle {
        SegmenterHandle::Toy(self.segmenter.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimStates {
    pub generator: Optimizer,
    pub d_img: Option<Optimizer>,
    pub d_seg: Option<Optimizer>,
}

impl OptimStates {
    pub fn new(models: &Models, cfg: &TrainConfig) -> Result<Self> {
        let make = |p: &ParamStore| Optimizer::new(p, cfg.adam, cfg.lookahead_k, cfg.lookahead_alpha);
        Ok(Self {
            generator: make(&models.generator.params)?,
            d_img: models.d_img.as_ref().map(|d| make(&d.params)).transpose()?,
            d_seg: models.d_seg.as_ref().map(|d| make(&d.params)).transpose()?,
        })
    }
}

/// Loss values of one step; skipped updates leave their cells empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub d_img: Option<f64>,
    pub d_seg: Option<f64>,
    pub g_mae: f64,
    pub g_perceptual: f64,
    pub g_adv: Option<f64>,
    pub g_total: f64,
}

/// A stacked training batch.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub rain: Tensor,
    pub clean: Tensor,
}

impl TrainBatch {
    pub fn from_pairs(pairs: &[DatasetPair]) -> Result<Self> {
        if pairs.is_empty() {
            return precondition("training batch is empty");
        }
        let rain: Vec<ImagePlane> = pairs.iter().map(|p| p.rain.clone()).collect();
        let clean: Vec<ImagePlane> = pairs.iter().map(|p| p.clean.clone()).collect();
        Ok(Self { rain: ImagePlane::batch(&rain)?, clean: ImagePlane::batch(&clean)? })
    }
}

/// Colour centroids fitted on the whole clean batch, shared by real and
/// fake segmentations.
pub fn batch_centroids(segmenter: &ToySegmenter, clean: &Tensor) -> Result<Vec<Vec<f64>>> {
    let s = clean.shape();
    let tall = ImagePlane::new(s.n * s.h, s.w, s.c, {
        let mut data = Vec::with_capacity(clean.len());
        for c in 0..s.c {
            for n in 0..s.n {
                let off = clean.offset(n, c, 0, 0);
                data.extend_from_slice(&clean.data()[off..off + s.plane()]);
            }
        }
        data
    })?;
    Ok(segmenter.fit_centroids(&tall))
}

fn finite(value: f64, component: &str, step: u64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(M2ganError::NonFiniteLoss { component: component.into(), step: step as usize })
    }
}

/// The generator objective under construction on one graph.
pub struct GeneratorPass {
    pub graph: Graph,
    pub bound: Bound,
    pub estimates: Vec<Var>,
    real: Var,
    mae: Var,
    perceptual: Var,
    centroids: Option<Vec<Vec<f64>>>,
}

impl GeneratorPass {
    /// Forward all stages and the stage-averaged MAE and perceptual terms.
    pub fn build(models: &Models, batch: &TrainBatch, stages: Option<usize>) -> Result<Self> {
        let mut g = Graph::new();
        let bound = models.generator.params.bind(&mut g, true);
        let obs = g.constant(batch.rain.clone());
        let real = g.constant(batch.clean.clone());
        let outs = models.generator.forward_graph(&mut g, &bound, obs, &models.segmenter_handle(), stages)?;
        let bb = models.backbone.params.bind(&mut g, false);
        let mut mae_terms = Vec::new();
        let mut perc_terms = Vec::new();
        for s in &outs {
            mae_terms.push(losses::mae(&mut g, s.estimate, real)?);
            perc_terms.push(losses::perceptual(&mut g, &models.backbone, &bb, s.estimate, real)?);
        }
        let mae = stage_mean(&mut g, &mae_terms)?;
        let perceptual = stage_mean(&mut g, &perc_terms)?;
        let centroids = match models.d_seg {
            Some(_) => Some(batch_centroids(&models.segmenter, &batch.clean)?),
            None => None,
        };
        Ok(Self {
            estimates: outs.iter().map(|s| s.estimate).collect(),
            graph: g,
            bound,
            real,
            mae,
            perceptual,
            centroids,
        })
    }

    pub fn estimate_values(&self) -> Vec<Tensor> {
        self.estimates.iter().map(|&e| self.graph.value(e).clone()).collect()
    }

    /// Real and per-stage fake segmentation maps.
    pub fn segmentation_values(&self, batch: &TrainBatch, temperature: f64) -> Option<(Tensor, Vec<Tensor>)> {
        let c = self.centroids.as_ref()?;
        let real = soft_assign_values(&batch.clean, c, temperature);
        let fakes = self.estimates.iter().map(|&e| soft_assign_values(self.graph.value(e), c, temperature)).collect();
        Some((real, fakes))
    }

    /// Append the adversarial term (current discriminators, frozen) and the
    /// weighted total; returns the root and the component values.
    pub fn finish(&mut self, models: &Models, cfg: &TrainConfig) -> Result<(Var, LossParts)> {
        let g = &mut self.graph;
        let mut adv_terms = Vec::new();
        if let Some(d) = &models.d_img {
            let db = d.params.bind(g, false);
            let real_logits = d.logits_graph(g, &db, self.real)?;
            for &e in &self.estimates {
                let fake_logits = d.logits_graph(g, &db, e)?;
                adv_terms.push(losses::gen_adversarial(g, real_logits, fake_logits, cfg.adv_mode)?);
            }
        }
        if let (Some(d), Some(c)) = (&models.d_seg, &self.centroids) {
            let db = d.params.bind(g, false);
            let z_real = g.soft_assign(self.real, c, models.segmenter.temperature)?;
            let real_logits = d.logits_graph(g, &db, z_real)?;
            for (k, &e) in self.estimates.iter().enumerate() {
                let z_fake = g.soft_assign(e, c, models.segmenter.temperature)?;
                let fake_logits = d.logits_graph(g, &db, z_fake)?;
                let term = losses::gen_adversarial(g, real_logits, fake_logits, cfg.adv_mode)?;
                match adv_terms.get(k).copied() {
                    Some(prev) => adv_terms[k] = g.add(prev, term)?,
                    None => adv_terms.push(term),
                }
            }
        }
        let w = cfg.weights;
        let a = g.scale(self.mae, w.mae);
        let b = g.scale(self.perceptual, w.perceptual);
        let mut total = g.add(a, b)?;
        let mut adv = None;
        if !adv_terms.is_empty() {
            let v = stage_mean(g, &adv_terms)?;
            let c = g.scale(v, w.adversarial);
            total = g.add(total, c)?;
            adv = Some(g.scalar(v));
        }
        let parts = LossParts {
            mae: g.scalar(self.mae),
            perceptual: g.scalar(self.perceptual),
            adversarial: adv,
            total: g.scalar(total),
        };
        Ok((total, parts))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub mae: f64,
    pub perceptual: f64,
    pub adversarial: Option<f64>,
    pub total: f64,
}

fn stage_mean(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

/// Generator objective and its gradients without updating anything.
pub fn generator_objective(models: &Models, batch: &TrainBatch, cfg: &TrainConfig) -> Result<(LossParts, ParamStore)> {
    let mut pass = GeneratorPass::build(models, batch, None)?;
    let (root, parts) = pass.finish(models, cfg)?;
    let grads = pass.graph.backward(root)?;
    Ok((parts, pass.bound.gradients(&grads, &models.generator.params)))
}

fn disc_objective(d: &Discriminator, real: &Tensor, fakes: &[Tensor], mode: AdvLossMode) -> Result<(f64, ParamStore)> {
    let mut g = Graph::new();
    let db = d.params.bind(&mut g, true);
    let r = g.constant(real.clone());
    let real_logits = d.logits_graph(&mut g, &db, r)?;
    let mut terms = Vec::with_capacity(fakes.len());
    for f in fakes {
        let fv = g.constant(f.clone());
        let fake_logits = d.logits_graph(&mut g, &db, fv)?;
        terms.push(losses::disc_adversarial(&mut g, real_logits, fake_logits, mode)?);
    }
    let loss = stage_mean(&mut g, &terms)?;
    let value = g.scalar(loss);
    let grads = g.backward(loss)?;
    Ok((value, db.gradients(&grads, &d.params)))
}

/// One discriminator update on detached fakes (averaged over stages).
/// Returns the loss before the update.
pub fn discriminator_update(
    d: &mut Discriminator,
    opt: &mut Optimizer,
    real: &Tensor,
    fakes: &[Tensor],
    mode: AdvLossMode,
    lr: f64,
    step: u64,
) -> Result<f64> {
    d.refresh_spectral(d.cfg.power_iterations)?;
    let (value, grads) = disc_objective(d, real, fakes, mode)?;
    finite(value, d.role.prefix(), step)?;
    opt.step(&mut d.params, &grads, lr)?;
    Ok(value)
}

/// One alternating step: D^d, then D^s, then G.
pub fn train_step(
    models: &mut Models,
    opts: &mut OptimStates,
    pairs: &[DatasetPair],
    cfg: &TrainConfig,
    lr: f64,
    step: u64,
    epoch: usize,
) -> Result<LossReport> {
    let batch = TrainBatch::from_pairs(pairs)?;
    let mut pass = GeneratorPass::build(models, &batch, None)?;

    let mut d_img_loss = None;
    if let (Some(d), Some(opt)) = (models.d_img.as_mut(), opts.d_img.as_mut()) {
        let fakes = pass.estimate_values();
        d_img_loss = Some(discriminator_update(d, opt, &batch.clean, &fakes, cfg.adv_mode, lr, step)?);
    }
    let mut d_seg_loss = None;
    if let (Some(d), Some(opt)) = (models.d_seg.as_mut(), opts.d_seg.as_mut()) {
        let (real, fakes) = pass
            .segmentation_values(&batch, models.segmenter.temperature)
            .ok_or_else(|| M2ganError::State("segmentation centroids missing".into()))?;
        d_seg_loss = Some(discriminator_update(d, opt, &real, &fakes, cfg.adv_mode, lr, step)?);
    }

    let (root, parts) = pass.finish(models, cfg)?;
    finite(parts.mae, "g_mae", step)?;
    finite(parts.perceptual, "g_perceptual", step)?;
    if let Some(a) = parts.adversarial {
        finite(a, "g_adv", step)?;
    }
    finite(parts.total, "generator", step)?;
    let grads = pass.graph.backward(root)?;
    let grads = pass.bound.gradients(&grads, &models.generator.params);
    opts.generator.step(&mut models.generator.params, &grads, lr)?;

    Ok(LossReport {
        step,
        epoch,
        lr,
        d_img: d_img_loss,
        d_seg: d_seg_loss,
        g_mae: parts.mae,
        g_perceptual: parts.perceptual,
        g_adv: parts.adversarial,
        g_total: parts.total,
    })
}

/// Run metadata stored with every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub epochs_completed: usize,
    pub global_step: u64,
}

#[derive(Serialize, Deserialize)]
struct StoredMeta {
    run: CheckpointMeta,
    /// Adam step count and Lookahead counter per component.
    counters: std::collections::BTreeMap<String, (u64, u64)>,
    spectral_iterations: std::collections::BTreeMap<String, usize>,
}

fn put_optimizer(
    a: &mut Archive,
    component: &str,
    o: &Optimizer,
    counters: &mut std::collections::BTreeMap<String, (u64, u64)>,
) {
    a.put_store(&format!("optim/{component}/m"), &o.adam.m);
    a.put_store(&format!("optim/{component}/v"), &o.adam.v);
    a.put_store(&format!("optim/{component}/slow"), &o.lookahead.slow);
    counters.insert(component.to_string(), (o.adam.t, o.lookahead.counter));
}

fn take_optimizer(
    a: &Archive,
    component: &str,
    cfg: &TrainConfig,
    counters: &std::collections::BTreeMap<String, (u64, u64)>,
) -> Result<Optimizer> {
    let (t, counter) =
        *counters.get(component).ok_or_else(|| M2ganError::Archive(format!("missing counters for {component}")))?;
    Ok(Optimizer {
        adam: Adam {
            cfg: cfg.adam,
            m: a.take_store(&format!("optim/{component}/m"))?,
            v: a.take_store(&format!("optim/{component}/v"))?,
            t,
        },
        lookahead: LookaheadState {
            slow: a.take_store(&format!("optim/{component}/slow"))?,
            k: cfg.lookahead_k,
            alpha: cfg.lookahead_alpha,
            counter,
        },
    })
}

pub fn save_checkpoint(path: &Path, models: &Models, opts: &OptimStates, meta: &CheckpointMeta) -> Result<()> {
    let mut counters = std::collections::BTreeMap::new();
    let mut spectral_iterations = std::collections::BTreeMap::new();
    let mut a = Archive::default();
    a.put_store("generator", &models.generator.params);
    put_optimizer(&mut a, "generator", &opts.generator, &mut counters);
    for (d, o) in [(&models.d_img, &opts.d_img), (&models.d_seg, &opts.d_seg)] {
        if let (Some(d), Some(o)) = (d, o) {
            let p = d.role.prefix();
            a.put_store(p, &d.params);
            put_optimizer(&mut a, p, o, &mut counters);
            for (name, s) in &d.spectral {
                a.arrays.insert(format!("spectral/{p}/{name}/u"), vector(&s.u));
                a.arrays.insert(format!("spectral/{p}/{name}/v"), vector(&s.v));
                spectral_iterations.insert(format!("{p}/{name}"), s.power_iterations);
            }
        }
    }
    a.meta = serde_json::to_value(StoredMeta { run: meta.clone(), counters, spectral_iterations })?;
    a.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(Models, OptimStates, CheckpointMeta)> {
    let a = Archive::load(path)?;
    let stored: StoredMeta = serde_json::from_value(a.meta.clone())?;
    let meta = stored.run;
    let mut models = Models::new(meta.pipeline.clone(), &meta.train)?;
    let gen_params = a.take_store("generator")?;
    models.generator = Generator::with_params(meta.pipeline.clone(), gen_params)?;
    let mut opts = OptimStates {
        generator: take_optimizer(&a, "generator", &meta.train, &stored.counters)?,
        d_img: None,
        d_seg: None,
    };
    for (d, o) in [(&mut models.d_img, &mut opts.d_img), (&mut models.d_seg, &mut opts.d_seg)] {
        if let Some(d) = d {
            let p = d.role.prefix();
            let params = a.take_store(p)?;
            if !params.same_layout(&d.params) {
                return Err(M2ganError::Archive(format!("{p} arrays do not match the configured discriminator")));
            }
            d.params = params;
            for (name, s) in d.spectral.iter_mut() {
                s.u = a.require(&format!("spectral/{p}/{name}/u"))?.data().to_vec();
                s.v = a.require(&format!("spectral/{p}/{name}/v"))?.data().to_vec();
                if let Some(&it) = stored.spectral_iterations.get(&format!("{p}/{name}")) {
                    s.power_iterations = it;
                }
            }
            *o = Some(take_optimizer(&a, p, &meta.train, &stored.counters)?);
        }
    }
    Ok((models, opts, meta))
}

/// Generator and run metadata only, for inference.
pub fn load_generator(path: &Path) -> Result<(Generator, CheckpointMeta)> {
    let a = Archive::load(path)?;
    let stored: StoredMeta = serde_json::from_value(a.meta.clone())?;
    let generator = Generator::with_params(stored.run.pipeline.clone(), a.take_store("generator")?)?;
    Ok((generator, stored.run))
}

pub const LOSS_LOG: &str = "losses.csv";
pub const RUN_CONFIG: &str = "run_config.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:04}.ckpt"))
}

/// Highest-numbered epoch checkpoint in a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<(usize, PathBuf)>> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(&dir)? {
        let path = entry?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_")?.strip_suffix(".ckpt")?.parse::<usize>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    Ok(best)
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossReport>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// The epoch loop with per-epoch checkpoints and a per-step loss log.
pub struct Trainer {
    pub run_dir: PathBuf,
    pub pipeline: PipelineConfig,
    pub cfg: TrainConfig,
    pub models: Models,
    pub opts: OptimStates,
    pub data: Vec<DatasetPair>,
    pub epochs_completed: usize,
    pub global_step: u64,
}

impl Trainer {
    /// Start a fresh run, replacing any previous log in `run_dir`.
    pub fn new(run_dir: &Path, pipeline: PipelineConfig, cfg: TrainConfig, data: Vec<DatasetPair>) -> Result<Self> {
        if data.is_empty() {
            return precondition("training needs at least one pair");
        }
        let models = Models::new(pipeline.clone(), &cfg)?;
        let opts = OptimStates::new(&models, &cfg)?;
        fs::create_dir_all(run_dir.join(CHECKPOINT_DIR))?;
        let meta =
            CheckpointMeta { pipeline: pipeline.clone(), train: cfg.clone(), epochs_completed: 0, global_step: 0 };
        fs::write(run_dir.join(RUN_CONFIG), serde_json::to_string_pretty(&meta)?)?;
        let mut w = csv::Writer::from_path(run_dir.join(LOSS_LOG))?;
        w.write_record(["step", "epoch", "lr", "d_img", "d_seg", "g_mae", "g_perceptual", "g_adv", "g_total"])?;
        w.flush()?;
        Ok(Self {
            run_dir: run_dir.to_path_buf(),
            pipeline,
            cfg,
            models,
            opts,
            data,
            epochs_completed: 0,
            global_step: 0,
        })
    }

    /// Continue from the latest checkpoint in `run_dir`; `epochs` may extend
    /// the configured run.
    pub fn resume(run_dir: &Path, data: Vec<DatasetPair>, epochs: Option<usize>) -> Result<Self> {
        let (_, path) = latest_checkpoint(run_dir)?
            .ok_or_else(|| M2ganError::State(format!("no checkpoint in {}", run_dir.display())))?;
        let (models, opts, meta) = load_checkpoint(&path)?;
        let mut cfg = meta.train;
        if let Some(e) = epochs {
            cfg.epochs = e;
        }
        cfg.validate()?;
        let log = run_dir.join(LOSS_LOG);
        let kept: Vec<LossReport> = read_loss_log(&log)?.into_iter().filter(|r| r.step < meta.global_step).collect();
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&log)?;
        w.write_record(["step", "epoch", "lr", "d_img", "d_seg", "g_mae", "g_perceptual", "g_adv", "g_total"])?;
        for r in &kept {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(Self {
            run_dir: run_dir.to_path_buf(),
            pipeline: meta.pipeline,
            cfg,
            models,
            opts,
            data,
            epochs_completed: meta.epochs_completed,
            global_step: meta.global_step,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg.steps_per_epoch.unwrap_or_else(|| self.data.len().div_ceil(self.cfg.batch_size))
    }

    /// Seeded batches for one epoch, cropped when configured.
    pub fn epoch_batches(&self, epoch: usize) -> Result<Vec<Vec<DatasetPair>>> {
        let n = self.data.len();
        let b = self.cfg.batch_size;
        let mut orders: Vec<Vec<usize>> = Vec::new();
        let mut batches = Vec::new();
        for s in 0..self.steps_per_epoch() {
            let mut batch = Vec::with_capacity(b);
            for j in 0..b {
                let i = s * b + j;
                let pass = i / n;
                while orders.len() <= pass {
                    let mut o: Vec<usize> = (0..n).collect();
                    let seed = derive_seed(self.cfg.seed, &format!("order/{epoch}/{}", orders.len()));
                    o.shuffle(&mut seeded_rng(seed));
                    orders.push(o);
                }
                let pair = &self.data[orders[pass][i % n]];
                let pair = match self.cfg.crop_size {
                    Some(c) => random_crop_pair(pair, c, derive_seed(self.cfg.seed, &format!("crop/{epoch}/{s}/{j}")))?,
                    None => pair.clone(),
                };
                batch.push(pair);
            }
            batches.push(batch);
        }
        Ok(batches)
    }

    pub fn run_epoch(&mut self) -> Result<Vec<LossReport>> {
        let epoch = self.epochs_completed;
        let lr = lr_schedule(epoch, &self.cfg)?;
        let log = fs::OpenOptions::new().append(true).open(self.run_dir.join(LOSS_LOG))?;
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(log);
        let mut reports = Vec::new();
        for batch in self.epoch_batches(epoch)? {
            let r = train_step(&mut self.models, &mut self.opts, &batch, &self.cfg, lr, self.global_step, epoch)?;
            w.serialize(&r)?;
            w.flush()?;
            self.global_step += 1;
            reports.push(r);
        }
        self.epochs_completed += 1;
        let meta = CheckpointMeta {
            pipeline: self.pipeline.clone(),
            train: self.cfg.clone(),
            epochs_completed: self.epochs_completed,
            global_step: self.global_step,
        };
        save_checkpoint(&checkpoint_path(&self.run_dir, epoch), &self.models, &self.opts, &meta)?;
        Ok(reports)
    }

    /// Run the remaining epochs.
    pub fn train(&mut self) -> Result<Vec<LossReport>> {
        let mut all = Vec::new();
        while self.epochs_completed < self.cfg.epochs {
            all.extend(self.run_epoch()?);
        }
        Ok(all)
    }

    /// Learning rate the next epoch will use.
    pub fn current_lr(&self) -> Result<f64> {
        lr_schedule(self.epochs_completed, &self.cfg)
    }
}
