//! RDB-based, spectrally normalised discriminators producing one raw logit
//! per input, and the relativistic pairing of logits.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::blocks::{spectral_normalize, Conv2d, Env, Rdb, RdbConfig, SpectralDiagnostics, SpectralState, LEAKY_SLOPE};
use crate::error::{config, precondition, Result};
use crate::graph::{sigmoid, Graph, Var};
use crate::params::{derive_seed, seeded_rng, Bound, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub in_channels: usize,
    pub features: usize,
    /// RDB stages, each followed by a stride-2 transition.
    pub num_stages: usize,
    pub rdb_layers: usize,
    pub growth_rate: usize,
    /// Power iterations per training step.
    pub power_iterations: usize,
}

impl DiscriminatorConfig {
    pub fn image(features: usize) -> Self {
        Self {
            in_channels: 3,
            features,
            num_stages: 3,
            rdb_layers: 2,
            growth_rate: (features / 2).max(1),
            power_iterations: 1,
        }
    }

    pub fn segmentation(categories: usize, features: usize) -> Self {
        Self { in_channels: categories, ..Self::image(features) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.features == 0 || self.num_stages == 0 {
            return config(format!("discriminator sizes must be positive: {self:?}"));
        }
        RdbConfig { num_layers: self.rdb_layers, growth_rate: self.growth_rate, in_channels: self.features }.validate()
    }
}

/// Which of the two discriminators; used as the parameter-path prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscriminatorRole {
    Image,
    Segmentation,
}

impl DiscriminatorRole {
    pub fn prefix(self) -> &'static str {
        match self {
            DiscriminatorRole::Image => "d_img",
            DiscriminatorRole::Segmentation => "d_seg",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub role: DiscriminatorRole,
    pub cfg: DiscriminatorConfig,
    input: Conv2d,
    rdbs: Vec<Rdb>,
    downs: Vec<Conv2d>,
    head: Conv2d,
    pub params: ParamStore,
    /// Power-iteration state for every convolution, keyed by conv name.
    pub spectral: BTreeMap<String, SpectralState>,
}

impl Discriminator {
    pub fn new(role: DiscriminatorRole, cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let p = role.prefix();
        let f = cfg.features;
        let input = Conv2d::new(format!("{p}.input"), cfg.in_channels, f, 3);
        let rdb_cfg = RdbConfig { num_layers: cfg.rdb_layers, growth_rate: cfg.growth_rate, in_channels: f };
        let rdbs = (0..cfg.num_stages).map(|i| Rdb::new(format!("{p}.rdb{i}"), rdb_cfg)).collect::<Result<Vec<_>>>()?;
        let downs = (0..cfg.num_stages).map(|i| Conv2d::new(format!("{p}.down{i}"), f, f, 3).strided(2)).collect();
        let head = Conv2d::new(format!("{p}.head"), f, 1, 1);
        let mut d = Self { role, cfg, input, rdbs, downs, head, params: ParamStore::new(), spectral: BTreeMap::new() };

        let mut rng = seeded_rng(derive_seed(seed, p));
        let convs: Vec<Conv2d> = d.convs().cloned().collect();
        for c in &convs {
            c.init(&mut d.params, &mut rng)?;
        }
        for c in &convs {
            let shape = d.params.require(&c.weight_key())?.shape();
            d.spectral.insert(c.name.clone(), SpectralState::for_kernel(shape, d.cfg.power_iterations, &mut rng));
        }
        Ok(d)
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        std::iter::once(&self.input)
            .chain(self.rdbs.iter().zip(&self.downs).flat_map(|(r, d)| r.convs().chain(std::iter::once(d))))
            .chain(std::iter::once(&self.head))
    }

    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    /// Advance every kernel's power iteration; returns σ̂ per conv.
    pub fn refresh_spectral(&mut self, iterations: usize) -> Result<BTreeMap<String, SpectralDiagnostics>> {
        let mut out = BTreeMap::new();
        for (name, state) in self.spectral.iter_mut() {
            let w = self.params.require(&format!("{name}.weight"))?;
            out.insert(name.clone(), state.iterate(w, iterations)?);
        }
        Ok(out)
    }

    /// Kernels divided by their current σ̂, as used in the forward pass.
    pub fn normalized_kernels(&self) -> Result<Vec<(String, Tensor)>> {
        self.spectral
            .iter()
            .map(|(name, state)| {
                let w = self.params.require(&format!("{name}.weight"))?;
                let frozen = SpectralState { power_iterations: 0, ..state.clone() };
                let (n, _, _) = spectral_normalize(w, &frozen)?;
                Ok((name.clone(), n))
            })
            .collect()
    }

    /// Logits `[n, 1, 1, 1]` for a batch `[n, C, h, w]` on an existing graph.
    pub fn logits_graph(&self, g: &mut Graph, params: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.c != self.cfg.in_channels {
            return config(format!(
                "{} expects {} input channels, got {}",
                self.role.prefix(),
                self.cfg.in_channels,
                s.c
            ));
        }
        if s.n == 0 {
            return precondition("discriminator batch is empty");
        }
        let mut env = Env::new(g, params).with_spectral(&self.spectral);
        let h = self.input.forward(&mut env, x)?;
        let mut h = env.g.leaky_relu(h, LEAKY_SLOPE);
        for (rdb, down) in self.rdbs.iter().zip(&self.downs) {
            h = rdb.forward(&mut env, h)?;
            let d = down.forward(&mut env, h)?;
            h = env.g.leaky_relu(d, LEAKY_SLOPE);
        }
        let pooled = env.g.global_avg_pool(h);
        self.head.forward(&mut env, pooled)
    }

    /// Raw logits for a batch with frozen parameters.
    pub fn disc_logits(&self, batch: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let y = self.logits_graph(&mut g, &bound, x)?;
        let out = g.value(y).data().to_vec();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(crate::error::M2ganError::Numeric {
                component: self.role.prefix().to_string(),
                layer: self.convs().count(),
            });
        }
        Ok(out)
    }
}

/// `sigmoid(a − b)`: probability that the sample with logit `a` is more
/// realistic than the reference with (mean) logit `b`.
pub fn relativistic_prob(logit_a: f64, mean_logit_b: f64) -> f64 {
    sigmoid(logit_a - mean_logit_b)
}
