//! Reusable network blocks: residual dense blocks, the U-shaped URDB,
//! ConvLSTM cells, atrous spatial pyramid pooling and spectral normalisation.
//!
//! Blocks are plain descriptions of a layer graph. Their parameters live in a
//! [`ParamStore`] under the block's name prefix and are read through an
//! [`Env`] at forward time, so one description can be run with trainable,
//! frozen or spectrally normalised weights.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, precondition, M2ganError, Result};
use crate::graph::{Graph, Var};
use crate::params::{bias_shape, init_kernel, Bound, ParamStore, LEAKY_GAIN};
use crate::tensor::{ConvGeom, PadMode, Shape, Tensor};

/// Negative slope of every leaky rectifier inside the blocks.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Initial gain of the fusion convolution closing each residual dense block.
pub const RESIDUAL_GAIN: f64 = 0.1;

/// Lower bound on the estimated spectral norm.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Forward-pass context: the graph, bound parameters and optional
/// spectral-normalisation state keyed by conv name.
pub struct Env<'a> {
    pub g: &'a mut Graph,
    pub params: &'a Bound,
    pub spectral: Option<&'a BTreeMap<String, SpectralState>>,
}

impl<'a> Env<'a> {
    pub fn new(g: &'a mut Graph, params: &'a Bound) -> Self {
        Self { g, params, spectral: None }
    }

    pub fn with_spectral(mut self, states: &'a BTreeMap<String, SpectralState>) -> Self {
        self.spectral = Some(states);
        self
    }
}

fn check_finite(g: &Graph, v: Var, component: &str, layer: usize) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(M2ganError::Numeric { component: component.to_string(), layer })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self { name: name.into(), in_ch, out_ch, kernel, stride: 1, dilation: 1 }
    }

    pub fn strided(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilated(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn weight_key(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_key(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn geom(&self) -> ConvGeom {
        ConvGeom {
            kernel: self.kernel,
            stride: self.stride,
            dilation: self.dilation,
            pad: self.dilation * (self.kernel - 1) / 2,
            mode: PadMode::Reflect,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.init_with_gain(store, rng, LEAKY_GAIN)
    }

    pub fn init_with_gain(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng, gain: f64) -> Result<()> {
        store.insert(self.weight_key(), init_kernel(rng, self.out_ch, self.in_ch, self.kernel, gain))?;
        store.insert(self.bias_key(), Tensor::zeros(bias_shape(self.out_ch)))
    }

    pub fn init_zero(&self, store: &mut ParamStore) -> Result<()> {
        store
            .insert(self.weight_key(), Tensor::zeros(Shape::new(self.out_ch, self.in_ch, self.kernel, self.kernel)))?;
        store.insert(self.bias_key(), Tensor::zeros(bias_shape(self.out_ch)))
    }

    pub fn forward(&self, env: &mut Env, x: Var) -> Result<Var> {
        let c = env.g.shape(x).c;
        if c != self.in_ch {
            return config(format!("{} expects {} channels, got {c}", self.name, self.in_ch));
        }
        let mut w = env.params.var(&self.weight_key())?;
        if let Some(state) = env.spectral.and_then(|s| s.get(&self.name)) {
            w = env.g.spectral_scale(w, &state.u, &state.v, SIGMA_FLOOR)?;
        }
        let b = env.params.var(&self.bias_key())?;
        env.g.conv2d(x, w, Some(b), self.geom())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RdbConfig {
    pub num_layers: usize,
    pub growth_rate: usize,
    pub in_channels: usize,
}

impl RdbConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.growth_rate == 0 || self.in_channels == 0 {
            return config(format!("RDB sizes must be positive: {self:?}"));
        }
        Ok(())
    }
}

/// Densely connected 3×3 layers, a 1×1 fusion back to the input width and a
/// local residual addition.
#[derive(Clone, Debug)]
pub struct Rdb {
    pub name: String,
    pub cfg: RdbConfig,
    dense: Vec<Conv2d>,
    fusion: Conv2d,
}

impl Rdb {
    pub fn new(name: impl Into<String>, cfg: RdbConfig) -> Result<Self> {
        cfg.validate()?;
        let name = name.into();
        let dense = (0..cfg.num_layers)
            .map(|i| Conv2d::new(format!("{name}.dense{i}"), cfg.in_channels + i * cfg.growth_rate, cfg.growth_rate, 3))
            .collect();
        let fusion = Conv2d::new(
            format!("{name}.fusion"),
            cfg.in_channels + cfg.num_layers * cfg.growth_rate,
            cfg.in_channels,
            1,
        );
        Ok(Self { name, cfg, dense, fusion })
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.dense.iter().chain(std::iter::once(&self.fusion))
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for c in &self.dense {
            c.init(store, rng)?;
        }
        self.fusion.init_with_gain(store, rng, RESIDUAL_GAIN)
    }

    pub fn forward(&self, env: &mut Env, x: Var) -> Result<Var> {
        let c = env.g.shape(x).c;
        if c != self.cfg.in_channels {
            return config(format!("{} expects {} channels, got {c}", self.name, self.cfg.in_channels));
        }
        let mut feats = vec![x];
        for (i, conv) in self.dense.iter().enumerate() {
            let input = if feats.len() == 1 { x } else { env.g.concat(&feats)? };
            let y = conv.forward(env, input)?;
            let y = env.g.leaky_relu(y, LEAKY_SLOPE);
            check_finite(env.g, y, &self.name, i)?;
            feats.push(y);
        }
        let all = env.g.concat(&feats)?;
        let fused = self.fusion.forward(env, all)?;
        check_finite(env.g, fused, &self.name, self.dense.len())?;
        env.g.add(x, fused)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UrdbConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub out_channels: usize,
    pub rdb_layers: usize,
    pub growth_rate: usize,
}

impl UrdbConfig {
    pub const CONTRACTION_BLOCKS: usize = 2;
    pub const EXPANSION_BLOCKS: usize = 2;

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_channels == 0 || self.out_channels == 0 {
            return config(format!("URDB channel counts must be positive: {self:?}"));
        }
        self.rdb(self.base_channels).validate()
    }

    /// Kernel counts of the contraction blocks, doubling at each level.
    pub fn encoder_channels(&self) -> [usize; 2] {
        [self.base_channels, 2 * self.base_channels]
    }

    /// Kernel counts of the expansion blocks, halving at each level.
    pub fn decoder_channels(&self) -> [usize; 2] {
        [2 * self.base_channels, self.base_channels]
    }

    /// Spatial dims must be divisible by this for the pooling to be exact.
    pub fn divisor(&self) -> usize {
        1 << Self::CONTRACTION_BLOCKS
    }

    fn rdb(&self, channels: usize) -> RdbConfig {
        RdbConfig { num_layers: self.rdb_layers, growth_rate: self.growth_rate, in_channels: channels }
    }
}

#[derive(Clone, Debug)]
struct Contraction {
    conv: Conv2d,
    rdb: Rdb,
}

#[derive(Clone, Debug)]
struct Expansion {
    up: Conv2d,
    merge: Conv2d,
    rdb: Rdb,
}

/// Spatial shapes seen inside one URDB pass.
#[derive(Clone, Debug, PartialEq)]
pub struct UrdbTrace {
    pub encoder: Vec<Shape>,
    pub bottleneck: Shape,
    pub decoder: Vec<Shape>,
}

/// Encoder–decoder of RDB contraction and expansion blocks with 2×2 average
/// pooling, nearest ×2 upsampling and concatenated skip connections.
#[derive(Clone, Debug)]
pub struct Urdb {
    pub name: String,
    pub cfg: UrdbConfig,
    enc: Vec<Contraction>,
    bottleneck: Conv2d,
    dec: Vec<Expansion>,
    out: Conv2d,
}

impl Urdb {
    pub fn new(name: impl Into<String>, cfg: UrdbConfig) -> Result<Self> {
        cfg.validate()?;
        let name = name.into();
        let [e0, e1] = cfg.encoder_channels();
        let [d0, d1] = cfg.decoder_channels();
        let enc = vec![
            Contraction {
                conv: Conv2d::new(format!("{name}.enc0.conv"), cfg.in_channels, e0, 3),
                rdb: Rdb::new(format!("{name}.enc0.rdb"), cfg.rdb(e0))?,
            },
            Contraction {
                conv: Conv2d::new(format!("{name}.enc1.conv"), e0, e1, 3),
                rdb: Rdb::new(format!("{name}.enc1.rdb"), cfg.rdb(e1))?,
            },
        ];
        let bottleneck = Conv2d::new(format!("{name}.bottleneck"), e1, e1, 3);
        let dec = vec![
            Expansion {
                up: Conv2d::new(format!("{name}.dec0.up"), e1, d0, 3),
                merge: Conv2d::new(format!("{name}.dec0.merge"), d0 + e1, d0, 3),
                rdb: Rdb::new(format!("{name}.dec0.rdb"), cfg.rdb(d0))?,
            },
            Expansion {
                up: Conv2d::new(format!("{name}.dec1.up"), d0, d1, 3),
                merge: Conv2d::new(format!("{name}.dec1.merge"), d1 + e0, d1, 3),
                rdb: Rdb::new(format!("{name}.dec1.rdb"), cfg.rdb(d1))?,
            },
        ];
        let out = Conv2d::new(format!("{name}.out"), d1, cfg.out_channels, 3);
        Ok(Self { name, cfg, enc, bottleneck, dec, out })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for e in &self.enc {
            e.conv.init(store, rng)?;
            e.rdb.init(store, rng)?;
        }
        self.bottleneck.init(store, rng)?;
        for d in &self.dec {
            d.up.init(store, rng)?;
            d.merge.init(store, rng)?;
            d.rdb.init(store, rng)?;
        }
        self.out.init(store, rng)
    }

    pub fn forward(&self, env: &mut Env, x: Var) -> Result<Var> {
        self.forward_traced(env, x).map(|(v, _)| v)
    }

    pub fn forward_traced(&self, env: &mut Env, x: Var) -> Result<(Var, UrdbTrace)> {
        let s = env.g.shape(x);
        let d = self.cfg.divisor();
        if s.h % d != 0 || s.w % d != 0 {
            return precondition(format!("{}: spatial dims {}x{} must be divisible by {d}", self.name, s.h, s.w));
        }
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut h = x;
        for (i, block) in self.enc.iter().enumerate() {
            if i > 0 {
                h = env.g.avg_pool2(h)?;
            }
            let y = block.conv.forward(env, h)?;
            let y = env.g.leaky_relu(y, LEAKY_SLOPE);
            h = block.rdb.forward(env, y)?;
            skips.push(h);
        }
        let pooled = env.g.avg_pool2(h)?;
        let m = self.bottleneck.forward(env, pooled)?;
        h = env.g.leaky_relu(m, LEAKY_SLOPE);
        let bottleneck = env.g.shape(h);

        let mut decoder = Vec::with_capacity(self.dec.len());
        for (block, &skip) in self.dec.iter().zip(skips.iter().rev()) {
            let up = env.g.upsample2(h);
            let up = block.up.forward(env, up)?;
            let up = env.g.leaky_relu(up, LEAKY_SLOPE);
            let cat = env.g.concat(&[up, skip])?;
            let merged = block.merge.forward(env, cat)?;
            let merged = env.g.leaky_relu(merged, LEAKY_SLOPE);
            h = block.rdb.forward(env, merged)?;
            decoder.push(env.g.shape(h));
        }
        let out = self.out.forward(env, h)?;
        let encoder = skips.iter().map(|&v| env.g.shape(v)).collect();
        Ok((out, UrdbTrace { encoder, bottleneck, decoder }))
    }
}

/// Standard gated ConvLSTM cell with a single 3×3 convolution producing the
/// input, forget, output and candidate pre-activations in that order.
#[derive(Clone, Debug)]
pub struct ConvLstm {
    pub name: String,
    pub in_channels: usize,
    pub hidden: usize,
    gates: Conv2d,
}

/// Hidden and cell maps carried between recurrent steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmVars {
    pub hidden: Var,
    pub cell: Var,
}

impl ConvLstm {
    pub fn new(name: impl Into<String>, in_channels: usize, hidden: usize) -> Result<Self> {
        if in_channels == 0 || hidden == 0 {
            return config("ConvLSTM channel counts must be positive");
        }
        let name = name.into();
        let gates = Conv2d::new(format!("{name}.gates"), in_channels + hidden, 4 * hidden, 3);
        Ok(Self { name, in_channels, hidden, gates })
    }

    pub fn gates(&self) -> &Conv2d {
        &self.gates
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.gates.init_with_gain(store, rng, 1.0)
    }

    /// Zero hidden and cell state matching `x`'s batch and spatial size.
    pub fn zero_state(&self, g: &mut Graph, x: Var) -> LstmVars {
        let s = g.shape(x);
        let shape = Shape::new(s.n, self.hidden, s.h, s.w);
        let hidden = g.constant(Tensor::zeros(shape));
        let cell = g.constant(Tensor::zeros(shape));
        LstmVars { hidden, cell }
    }

    pub fn step(&self, env: &mut Env, x: Var, state: LstmVars) -> Result<LstmVars> {
        let xs = env.g.shape(x);
        let hs = env.g.shape(state.hidden);
        let cs = env.g.shape(state.cell);
        if hs != cs {
            return config(format!("{}: hidden {hs} and cell {cs} differ", self.name));
        }
        if (xs.n, xs.h, xs.w) != (hs.n, hs.h, hs.w) || hs.c != self.hidden {
            return config(format!("{}: input {xs} not aligned with state {hs}", self.name));
        }
        let z = env.g.concat(&[x, state.hidden])?;
        let z = self.gates.forward(env, z)?;
        let h = self.hidden;
        let pre_i = env.g.slice_channels(z, 0, h)?;
        let pre_f = env.g.slice_channels(z, h, h)?;
        let pre_o = env.g.slice_channels(z, 2 * h, h)?;
        let pre_c = env.g.slice_channels(z, 3 * h, h)?;
        let i = env.g.sigmoid(pre_i);
        let f = env.g.sigmoid(pre_f);
        let o = env.g.sigmoid(pre_o);
        let cand = env.g.tanh(pre_c);
        let keep = env.g.mul(f, state.cell)?;
        let write = env.g.mul(i, cand)?;
        let cell = env.g.add(keep, write)?;
        let squashed = env.g.tanh(cell);
        let hidden = env.g.mul(o, squashed)?;
        check_finite(env.g, hidden, &self.name, 0)?;
        Ok(LstmVars { hidden, cell })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsppConfig {
    pub dilation_rates: Vec<usize>,
    pub out_channels: usize,
    pub include_global_pool: bool,
}

impl Default for AsppConfig {
    fn default() -> Self {
        Self { dilation_rates: vec![1, 2, 4], out_channels: 16, include_global_pool: true }
    }
}

impl AsppConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation_rates.is_empty() {
            return config("ASPP needs at least one dilation rate");
        }
        if self.dilation_rates[0] == 0 || self.dilation_rates.windows(2).any(|w| w[1] <= w[0]) {
            return config(format!(
                "ASPP dilation rates must be strictly increasing and >= 1: {:?}",
                self.dilation_rates
            ));
        }
        if self.out_channels == 0 {
            return config("ASPP output channels must be positive");
        }
        Ok(())
    }

    fn num_branches(&self) -> usize {
        self.dilation_rates.len() + usize::from(self.include_global_pool)
    }
}

/// Parallel dilated 3×3 branches plus an optional image-pooling branch,
/// concatenated and fused by a 1×1 convolution.
#[derive(Clone, Debug)]
pub struct Aspp {
    pub name: String,
    pub cfg: AsppConfig,
    pub in_channels: usize,
    branches: Vec<Conv2d>,
    pool: Option<Conv2d>,
    fuse: Conv2d,
}

impl Aspp {
    pub fn new(name: impl Into<String>, in_channels: usize, cfg: AsppConfig) -> Result<Self> {
        cfg.validate()?;
        let name = name.into();
        let oc = cfg.out_channels;
        let branches = cfg
            .dilation_rates
            .iter()
            .map(|&r| Conv2d::new(format!("{name}.rate{r}"), in_channels, oc, 3).dilated(r))
            .collect();
        let pool = cfg.include_global_pool.then(|| Conv2d::new(format!("{name}.pool"), in_channels, oc, 1));
        let fuse = Conv2d::new(format!("{name}.fuse"), oc * cfg.num_branches(), oc, 1);
        Ok(Self { name, cfg, in_channels, branches, pool, fuse })
    }

    pub fn fuse_conv(&self) -> &Conv2d {
        &self.fuse
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        for b in self.branches.iter().chain(self.pool.iter()) {
            b.init(store, rng)?;
        }
        self.fuse.init(store, rng)
    }

    pub fn forward(&self, env: &mut Env, x: Var) -> Result<Var> {
        let s = env.g.shape(x);
        let mut outs = Vec::with_capacity(self.cfg.num_branches());
        for b in &self.branches {
            let y = b.forward(env, x)?;
            outs.push(env.g.leaky_relu(y, LEAKY_SLOPE));
        }
        if let Some(pool) = &self.pool {
            let p = env.g.global_avg_pool(x);
            let p = pool.forward(env, p)?;
            let p = env.g.leaky_relu(p, LEAKY_SLOPE);
            outs.push(env.g.expand_spatial(p, s.h, s.w)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { env.g.concat(&outs)? };
        self.fuse.forward(env, cat)
    }
}

/// Power-iteration state for one kernel viewed as `out × (in·k·k)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub power_iterations: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralDiagnostics {
    pub sigma: f64,
    /// The estimate fell below [`SIGMA_FLOOR`] (e.g. an all-zero kernel).
    pub floored: bool,
}

fn normalize(v: &mut [f64]) -> bool {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-300 {
        v.iter_mut().for_each(|x| *x /= n);
        true
    } else {
        false
    }
}

impl SpectralState {
    pub fn new(rows: usize, cols: usize, power_iterations: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut u: Vec<f64> = (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut v: Vec<f64> = (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if !normalize(&mut u) {
            u = vec![1.0 / (rows as f64).sqrt(); rows];
        }
        if !normalize(&mut v) {
            v = vec![1.0 / (cols as f64).sqrt(); cols];
        }
        Self { u, v, power_iterations }
    }

    pub fn for_kernel(shape: Shape, power_iterations: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new(shape.n, shape.c * shape.plane(), power_iterations, rng)
    }

    /// Run `iterations` rounds of `v ← Wᵀu/‖·‖, u ← Wv/‖·‖` and return σ̂ = uᵀWv.
    pub fn iterate(&mut self, weight: &Tensor, iterations: usize) -> Result<SpectralDiagnostics> {
        let rows = weight.shape().n;
        let cols = weight.len() / rows.max(1);
        if self.u.len() != rows || self.v.len() != cols {
            return precondition(format!(
                "spectral state {}x{} does not match kernel {}",
                self.u.len(),
                self.v.len(),
                weight.shape()
            ));
        }
        let w = weight.data();
        let mut degenerate = false;
        for _ in 0..iterations {
            let mut v = vec![0.0; cols];
            for (r, &ur) in self.u.iter().enumerate() {
                for (c, vc) in v.iter_mut().enumerate() {
                    *vc += w[r * cols + c] * ur;
                }
            }
            if normalize(&mut v) {
                self.v = v;
            } else {
                degenerate = true;
            }
            let mut u: Vec<f64> =
                (0..rows).map(|r| w[r * cols..(r + 1) * cols].iter().zip(&self.v).map(|(a, b)| a * b).sum()).collect();
            if normalize(&mut u) {
                self.u = u;
            } else {
                degenerate = true;
            }
        }
        let raw = crate::graph::bilinear(w, &self.u, &self.v);
        let floored = degenerate || raw < SIGMA_FLOOR;
        Ok(SpectralDiagnostics { sigma: raw.max(SIGMA_FLOOR), floored })
    }
}

/// Divide a kernel by its estimated top singular value after running the
/// state's configured number of power iterations.
pub fn spectral_normalize(
    weight: &Tensor,
    state: &SpectralState,
) -> Result<(Tensor, SpectralState, SpectralDiagnostics)> {
    let mut next = state.clone();
    let diag = next.iterate(weight, state.power_iterations)?;
    Ok((weight.map(|x| x / diag.sigma), next, diag))
}
