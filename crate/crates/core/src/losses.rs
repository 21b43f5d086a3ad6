//! Generator and discriminator objectives: relativistic adversarial terms,
//! pixel MAE, the feature-space perceptual loss and their weighted total.
//!
//! Every loss has a graph form (returning a scalar [`Var`] that can be
//! differentiated) and a value form that evaluates it on plain tensors.

use serde::{Deserialize, Serialize};

use crate::blocks::{Conv2d, Env, LEAKY_SLOPE};
use crate::discriminator::Discriminator;
use crate::error::{config, precondition, Result};
use crate::graph::{Graph, Var};
use crate::params::{derive_seed, seeded_rng, Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub mae: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { mae: 0.1, perceptual: 1.0, adversarial: 0.001 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("mae", self.mae), ("perceptual", self.perceptual), ("adversarial", self.adversarial)] {
            if !(w >= 0.0 && w.is_finite()) {
                return config(format!("loss weight {name} must be a finite value >= 0, got {w}"));
            }
        }
        Ok(())
    }
}

/// Reading of the adversarial transfer functions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvLossMode {
    /// Negative log-sigmoid relativistic-average losses.
    #[default]
    Standard,
    /// `f₁ = f₂ = sigmoid`, `g₁ = g₂ = −sigmoid`, applied as written.
    Literal,
}

impl AdvLossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::Literal => "literal",
        }
    }
}

impl std::str::FromStr for AdvLossMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "standard" => Ok(Self::Standard),
            "literal" => Ok(Self::Literal),
            other => Err(format!("unknown adversarial mode {other:?} (expected standard or literal)")),
        }
    }
}

/// Real and fake samples of equal batch size and shape.
#[derive(Clone, Debug)]
pub struct BatchPair {
    pub real: Tensor,
    pub fake: Tensor,
}

impl BatchPair {
    pub fn new(real: Tensor, fake: Tensor) -> Result<Self> {
        if real.shape() != fake.shape() {
            return precondition(format!("real {} and fake {} batches differ", real.shape(), fake.shape()));
        }
        if real.shape().n == 0 {
            return precondition("batch pairs need at least one sample");
        }
        Ok(Self { real, fake })
    }
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return precondition(format!("{what}: shapes {} and {} differ", g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// Mean absolute error over batch, pixels and channels.
pub fn mae(g: &mut Graph, fake: Var, real: Var) -> Result<Var> {
    same_shape(g, fake, real, "MAE")?;
    let d = g.sub(real, fake)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Centre both logit batches on the other's mean:
/// `(C(x_r) − E C(x_f), C(x_f) − E C(x_r))`.
fn relativistic_diffs(g: &mut Graph, real: Var, fake: Var) -> Result<(Var, Var)> {
    let mean_fake = g.mean(fake);
    let mean_real = g.mean(real);
    let neg_mf = g.neg(mean_fake);
    let neg_mr = g.neg(mean_real);
    let real_rel = g.add_scalar_var(real, neg_mf)?;
    let fake_rel = g.add_scalar_var(fake, neg_mr)?;
    Ok((real_rel, fake_rel))
}

/// Discriminator objective from real and fake logits.
pub fn disc_adversarial(g: &mut Graph, real_logits: Var, fake_logits: Var, mode: AdvLossMode) -> Result<Var> {
    let (r, f) = relativistic_diffs(g, real_logits, fake_logits)?;
    let (a, b) = match mode {
        // −log σ(r) = softplus(−r);  −log(1 − σ(f)) = softplus(f)
        AdvLossMode::Standard => {
            let nr = g.neg(r);
            (g.softplus(nr), g.softplus(f))
        }
        AdvLossMode::Literal => (g.sigmoid(r), g.sigmoid(f)),
    };
    let ma = g.mean(a);
    let mb = g.mean(b);
    g.add(ma, mb)
}

/// Generator adversarial term for one discriminator.
pub fn gen_adversarial(g: &mut Graph, real_logits: Var, fake_logits: Var, mode: AdvLossMode) -> Result<Var> {
    let (r, f) = relativistic_diffs(g, real_logits, fake_logits)?;
    match mode {
        // −log σ(f) − log(1 − σ(r))
        AdvLossMode::Standard => {
            let nf = g.neg(f);
            let a = g.softplus(nf);
            let b = g.softplus(r);
            let ma = g.mean(a);
            let mb = g.mean(b);
            g.add(ma, mb)
        }
        AdvLossMode::Literal => {
            let a = g.sigmoid(r);
            let b = g.sigmoid(f);
            let ma = g.mean(a);
            let mb = g.mean(b);
            let s = g.add(ma, mb)?;
            Ok(g.neg(s))
        }
    }
}

/// Discriminator loss evaluated directly on logit values.
pub fn disc_adversarial_from_logits(real: &[f64], fake: &[f64], mode: AdvLossMode) -> Result<f64> {
    logit_loss(real, fake, |g, r, f| disc_adversarial(g, r, f, mode))
}

/// Generator adversarial term evaluated directly on logit values.
pub fn gen_adversarial_from_logits(real: &[f64], fake: &[f64], mode: AdvLossMode) -> Result<f64> {
    logit_loss(real, fake, |g, r, f| gen_adversarial(g, r, f, mode))
}

fn logit_loss(real: &[f64], fake: &[f64], f: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    if real.is_empty() || real.len() != fake.len() {
        return precondition(format!("logit batches of sizes {} and {}", real.len(), fake.len()));
    }
    let shape = crate::tensor::Shape::new(real.len(), 1, 1, 1);
    let mut g = Graph::new();
    let r = g.constant(Tensor::from_vec(shape, real.to_vec())?);
    let fk = g.constant(Tensor::from_vec(shape, fake.to_vec())?);
    let out = f(&mut g, r, fk)?;
    Ok(g.scalar(out))
}

fn pair_logits(pair: &BatchPair, disc: &Discriminator) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((disc.disc_logits(&pair.real)?, disc.disc_logits(&pair.fake)?))
}

/// Image-discriminator loss on a real/fake image batch.
pub fn loss_disc_image(pair: &BatchPair, disc: &Discriminator, mode: AdvLossMode) -> Result<f64> {
    let (r, f) = pair_logits(pair, disc)?;
    disc_adversarial_from_logits(&r, &f, mode)
}

/// Segmentation-discriminator loss on a real/fake segmentation batch.
pub fn loss_disc_seg(pair: &BatchPair, disc: &Discriminator, mode: AdvLossMode) -> Result<f64> {
    loss_disc_image(pair, disc, mode)
}

/// Generator adversarial loss summing the image and segmentation terms.
pub fn loss_gen_adv(
    img_pair: &BatchPair,
    seg_pair: &BatchPair,
    d_img: &Discriminator,
    d_seg: &Discriminator,
    mode: AdvLossMode,
) -> Result<f64> {
    let (ri, fi) = pair_logits(img_pair, d_img)?;
    let (rs, fs) = pair_logits(seg_pair, d_seg)?;
    Ok(gen_adversarial_from_logits(&ri, &fi, mode)? + gen_adversarial_from_logits(&rs, &fs, mode)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    FixedRandomCnn,
    ExternalWeights,
    /// `Ψ(x) = x`; reduces the perceptual loss to MSE.
    Identity,
}

/// Frozen feature extractor tapped at one stage for the perceptual loss.
#[derive(Clone, Debug)]
pub struct PerceptualBackbone {
    pub kind: BackboneKind,
    /// 1-based stage whose output is compared.
    pub tap_point: usize,
    stages: Vec<Conv2d>,
    pub params: ParamStore,
}

pub const BACKBONE_CHANNELS: [usize; 4] = [8, 16, 32, 64];
pub const DEFAULT_TAP: usize = 3;

impl PerceptualBackbone {
    fn layers(in_channels: usize) -> Vec<Conv2d> {
        let mut prev = in_channels;
        BACKBONE_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(format!("backbone.stage{i}"), prev, c, 3);
                prev = c;
                conv
            })
            .collect()
    }

    /// Four conv stages with 2×2 pooling between them and fixed seeded weights.
    pub fn fixed_random(seed: u64, tap_point: usize) -> Result<Self> {
        let stages = Self::layers(3);
        let mut params = ParamStore::new();
        let mut rng = seeded_rng(derive_seed(seed, "backbone"));
        for s in &stages {
            s.init(&mut params, &mut rng)?;
        }
        Self::checked(Self { kind: BackboneKind::FixedRandomCnn, tap_point, stages, params })
    }

    /// The same stage layout with imported weights.
    pub fn external(params: ParamStore, tap_point: usize) -> Result<Self> {
        let reference = Self::fixed_random(0, tap_point)?;
        if !reference.params.same_layout(&params) {
            return config("imported backbone weights do not match the backbone layout");
        }
        Self::checked(Self { kind: BackboneKind::ExternalWeights, tap_point, stages: reference.stages, params })
    }

    pub fn identity() -> Self {
        Self { kind: BackboneKind::Identity, tap_point: 0, stages: Vec::new(), params: ParamStore::new() }
    }

    fn checked(self) -> Result<Self> {
        if !(1..=self.stages.len()).contains(&self.tap_point) {
            return config(format!("tap point {} outside 1..={}", self.tap_point, self.stages.len()));
        }
        Ok(self)
    }

    /// Spatial dims must be divisible by this to reach the tap.
    pub fn divisor(&self) -> usize {
        if self.kind == BackboneKind::Identity {
            1
        } else {
            1 << (self.tap_point - 1)
        }
    }

    pub fn features_graph(&self, g: &mut Graph, params: &Bound, x: Var) -> Result<Var> {
        if self.kind == BackboneKind::Identity {
            return Ok(x);
        }
        let s = g.shape(x);
        let d = self.divisor();
        if s.h % d != 0 || s.w % d != 0 {
            return config(format!("backbone tap {} needs dims divisible by {d}, got {s}", self.tap_point));
        }
        let mut env = Env::new(g, params);
        let mut h = x;
        for (i, conv) in self.stages.iter().take(self.tap_point).enumerate() {
            if i > 0 {
                h = env.g.avg_pool2(h)?;
            }
            let y = conv.forward(&mut env, h)?;
            h = env.g.leaky_relu(y, LEAKY_SLOPE);
        }
        Ok(h)
    }

    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let f = self.features_graph(&mut g, &bound, xv)?;
        Ok(g.value(f).clone())
    }
}

/// `mean (Ψ(x_f) − Ψ(x_r))²` at the backbone tap; `backbone_params` must be
/// the backbone's store bound (frozen) on `g`.
pub fn perceptual(
    g: &mut Graph,
    backbone: &PerceptualBackbone,
    backbone_params: &Bound,
    fake: Var,
    real: Var,
) -> Result<Var> {
    same_shape(g, fake, real, "perceptual")?;
    let ff = backbone.features_graph(g, backbone_params, fake)?;
    let fr = backbone.features_graph(g, backbone_params, real)?;
    let d = g.sub(ff, fr)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

pub fn loss_mae(fake: &Tensor, real: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.constant(fake.clone());
    let r = g.constant(real.clone());
    let l = mae(&mut g, f, r)?;
    Ok(g.scalar(l))
}

pub fn loss_perceptual(fake: &Tensor, real: &Tensor, backbone: &PerceptualBackbone) -> Result<f64> {
    let mut g = Graph::new();
    let bound = backbone.params.bind(&mut g, false);
    let f = g.constant(fake.clone());
    let r = g.constant(real.clone());
    let l = perceptual(&mut g, backbone, &bound, f, r)?;
    Ok(g.scalar(l))
}

/// Component values of one generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub mae: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

/// `ω₁·MAE + ω₂·perceptual + ω₃·adv`.
pub fn weighted_total(c: LossComponents, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    Ok(w.mae * c.mae + w.perceptual * c.perceptual + w.adversarial * c.adversarial)
}

pub fn loss_total(
    fake: &Tensor,
    real: &Tensor,
    adv_value: f64,
    weights: &LossWeights,
    backbone: &PerceptualBackbone,
) -> Result<f64> {
    weights.validate()?;
    let c = LossComponents {
        mae: loss_mae(fake, real)?,
        perceptual: loss_perceptual(fake, real, backbone)?,
        adversarial: adv_value,
    };
    weighted_total(c, weights)
}
