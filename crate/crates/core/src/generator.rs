//! The per-stage generator and the recurrent multi-stage pipeline.
//!
//! Each stage concatenates the observation with the previous stage's rain
//! map and segmentation map, feeds that through a ConvLSTM step, three URDBs
//! and an ASPP head, and predicts a residual that is added to the
//! observation and clamped to `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::blocks::{Aspp, AsppConfig, Conv2d, ConvLstm, Env, LstmVars, Urdb, UrdbConfig};
use crate::conditioning::{attention_rain_map, SegmenterHandle};
use crate::error::{config, precondition, M2ganError, Result};
use crate::graph::{Graph, Var};
use crate::params::{derive_seed, seeded_rng, Bound, ParamStore};
use crate::plane::{AttentionRainMap, ImagePlane, SegmentationMap};
use crate::tensor::{Shape, Tensor};

/// Colour channels of observations and estimates.
pub const IMAGE_CHANNELS: usize = 3;
pub const URDBS_PER_STAGE: usize = 3;
pub const MAX_STAGES: usize = 4;
/// Rain map fed to the first stage: maximal uncertainty.
pub const INITIAL_RAIN_PRIOR: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub num_stages: usize,
    pub share_weights: bool,
    /// URDB sizes; `in_channels` doubles as the ConvLSTM hidden width.
    pub urdb: UrdbConfig,
    pub aspp: AsppConfig,
    pub seg_categories: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            num_stages: 3,
            share_weights: true,
            urdb: UrdbConfig { in_channels: 16, base_channels: 16, out_channels: 16, rdb_layers: 4, growth_rate: 16 },
            aspp: AsppConfig { dilation_rates: vec![1, 2, 4], out_channels: 16, include_global_pool: true },
            seg_categories: 5,
        }
    }
}

impl PipelineConfig {
    /// A small two-stage configuration for smoke runs and tests.
    pub fn tiny() -> Self {
        Self {
            num_stages: 2,
            share_weights: true,
            urdb: UrdbConfig { in_channels: 8, base_channels: 8, out_channels: 8, rdb_layers: 2, growth_rate: 8 },
            aspp: AsppConfig { dilation_rates: vec![1, 2, 4], out_channels: 8, include_global_pool: true },
            seg_categories: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_STAGES).contains(&self.num_stages) {
            return config(format!("num_stages must be in 1..={MAX_STAGES}, got {}", self.num_stages));
        }
        self.urdb.validate()?;
        self.aspp.validate()?;
        if self.urdb.out_channels != self.urdb.in_channels {
            return config("URDB output width must equal its input width to chain three blocks");
        }
        if self.seg_categories < 2 {
            return config("segmentation maps need at least two categories");
        }
        Ok(())
    }

    /// Channels entering the ConvLSTM: image, rain map, segmentation scores.
    pub fn lstm_input_channels(&self) -> usize {
        IMAGE_CHANNELS + 1 + self.seg_categories
    }

    pub fn hidden_channels(&self) -> usize {
        self.urdb.in_channels
    }

    pub fn parameter_sets(&self) -> usize {
        if self.share_weights {
            1
        } else {
            self.num_stages
        }
    }
}

/// Layer graph of one stage.
#[derive(Clone, Debug)]
pub struct StageNet {
    pub prefix: String,
    lstm: ConvLstm,
    urdbs: Vec<Urdb>,
    aspp: Aspp,
    head: Conv2d,
}

impl StageNet {
    fn new(prefix: String, cfg: &PipelineConfig) -> Result<Self> {
        let lstm = ConvLstm::new(format!("{prefix}.lstm"), cfg.lstm_input_channels(), cfg.hidden_channels())?;
        let urdbs =
            (0..URDBS_PER_STAGE).map(|i| Urdb::new(format!("{prefix}.urdb{i}"), cfg.urdb)).collect::<Result<_>>()?;
        let aspp = Aspp::new(format!("{prefix}.aspp"), cfg.urdb.out_channels, cfg.aspp.clone())?;
        let head = Conv2d::new(format!("{prefix}.head"), cfg.aspp.out_channels, IMAGE_CHANNELS, 3);
        Ok(Self { prefix, lstm, urdbs, aspp, head })
    }

    pub fn head(&self) -> &Conv2d {
        &self.head
    }

    pub fn lstm(&self) -> &ConvLstm {
        &self.lstm
    }

    fn init(&self, store: &mut ParamStore, seed: u64) -> Result<()> {
        let mut rng = seeded_rng(derive_seed(seed, &self.prefix));
        self.lstm.init(store, &mut rng)?;
        for u in &self.urdbs {
            u.init(store, &mut rng)?;
        }
        self.aspp.init(store, &mut rng)?;
        self.head.init_zero(store)
    }

    /// One stage on graph variables. `observation` is `[n, 3, h, w]`,
    /// `rain` `[n, 1, h, w]` and `seg` `[n, K, h, w]`.
    pub fn forward(
        &self,
        env: &mut Env,
        observation: Var,
        rain: Var,
        seg: Var,
        state: Option<LstmVars>,
    ) -> Result<(Var, LstmVars)> {
        let os = env.g.shape(observation);
        let rs = env.g.shape(rain);
        let ss = env.g.shape(seg);
        if os.c != IMAGE_CHANNELS {
            return precondition(format!("observation must have 3 channels, got {os}"));
        }
        if rs.c != 1 || (rs.n, rs.h, rs.w) != (os.n, os.h, os.w) {
            return precondition(format!("rain map {rs} is not aligned with observation {os}"));
        }
        if (ss.n, ss.h, ss.w) != (os.n, os.h, os.w) {
            return precondition(format!("segmentation map {ss} is not aligned with observation {os}"));
        }
        let input = env.g.concat(&[observation, rain, seg])?;
        let state = match state {
            Some(s) => s,
            None => self.lstm.zero_state(env.g, input),
        };
        let next = self.lstm.step(env, input, state)?;
        let mut h = next.hidden;
        for u in &self.urdbs {
            h = u.forward(env, h)?;
        }
        let h = self.aspp.forward(env, h)?;
        let residual = self.head.forward(env, h)?;
        let sum = env.g.add(observation, residual)?;
        Ok((env.g.clamp(sum, 0.0, 1.0), next))
    }
}

/// Hidden and cell maps carried between stages, as values.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmState {
    pub hidden: Tensor,
    pub cell: Tensor,
}

pub struct StageInput {
    pub observation: ImagePlane,
    pub rain_map: AttentionRainMap,
    pub seg_map: SegmentationMap,
    pub state: Option<ConvLstmState>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOutput {
    pub estimate: ImagePlane,
    pub next_state: ConvLstmState,
    /// Rain map of the observation against this stage's estimate.
    pub rain_map_out: AttentionRainMap,
}

/// One stage's result inside a batched graph.
#[derive(Clone, Debug)]
pub struct StageVars {
    pub estimate: Var,
    pub state: LstmVars,
    /// Conditioning this stage consumed, per batch item.
    pub rain_maps: Vec<AttentionRainMap>,
    pub seg_maps: Vec<SegmentationMap>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: PipelineConfig,
    stages: Vec<StageNet>,
    pub params: ParamStore,
}

impl Generator {
    pub fn new(cfg: PipelineConfig, seed: u64) -> Result<Self> {
        let mut g = Self::architecture(cfg)?;
        for s in &g.stages {
            s.init(&mut g.params, seed)?;
        }
        Ok(g)
    }

    /// The layer graph with an empty parameter store (for loading).
    pub fn architecture(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let stages = if cfg.share_weights {
            vec![StageNet::new("gen.stage".into(), &cfg)?]
        } else {
            (0..cfg.num_stages).map(|k| StageNet::new(format!("gen.stage{k}"), &cfg)).collect::<Result<_>>()?
        };
        Ok(Self { cfg, stages, params: ParamStore::new() })
    }

    pub fn with_params(cfg: PipelineConfig, params: ParamStore) -> Result<Self> {
        let mut g = Self::architecture(cfg.clone())?;
        let reference = Self::new(cfg, 0)?;
        if !reference.params.same_layout(&params) {
            return config("parameter arrays do not match the generator architecture");
        }
        g.params = params;
        Ok(g)
    }

    pub fn stage_nets(&self) -> &[StageNet] {
        &self.stages
    }

    /// Network used at stage `k` (0-based).
    pub fn stage_net(&self, k: usize) -> Result<&StageNet> {
        if self.cfg.share_weights {
            Ok(&self.stages[0])
        } else {
            self.stages.get(k).ok_or_else(|| {
                M2ganError::State(format!(
                    "stage {} requested but only {} unshared stages exist",
                    k + 1,
                    self.stages.len()
                ))
            })
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Zero every output head so that each stage is the identity on its input.
    pub fn zero_heads(&mut self) -> Result<()> {
        for s in &self.stages {
            for key in [s.head.weight_key(), s.head.bias_key()] {
                let shape = self.params.require(&key)?.shape();
                self.params.assign(&key, Tensor::zeros(shape))?;
            }
        }
        Ok(())
    }

    fn resolve_stages(&self, stages: Option<usize>) -> Result<usize> {
        let n = stages.unwrap_or(self.cfg.num_stages);
        if n == 0 || n > MAX_STAGES {
            return config(format!("stage count must be in 1..={MAX_STAGES}, got {n}"));
        }
        if !self.cfg.share_weights && n > self.stages.len() {
            return Err(M2ganError::State(format!(
                "{n} stages requested from a pipeline with {} unshared stages",
                self.stages.len()
            )));
        }
        Ok(n)
    }

    /// Run the recurrence over a batch `[n, 3, h, w]` on an existing graph.
    /// Conditioning maps are computed from values and enter as constants.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &Bound,
        observations: Var,
        segmenter: &SegmenterHandle,
        stages: Option<usize>,
    ) -> Result<Vec<StageVars>> {
        let num = self.resolve_stages(stages)?;
        if segmenter.num_categories() != self.cfg.seg_categories {
            return config(format!(
                "segmenter yields {} categories, pipeline expects {}",
                segmenter.num_categories(),
                self.cfg.seg_categories
            ));
        }
        let obs = g.value(observations).clone();
        let batch = obs.shape().n;
        let obs_planes: Vec<ImagePlane> =
            (0..batch).map(|n| ImagePlane::from_tensor(&obs, n)).collect::<Result<_>>()?;

        let mut outputs: Vec<StageVars> = Vec::with_capacity(num);
        let mut state: Option<LstmVars> = None;
        for k in 0..num {
            let (rain_maps, seg_maps) = match outputs.last() {
                None => {
                    let mut rains = Vec::with_capacity(batch);
                    let mut segs = Vec::with_capacity(batch);
                    for o in &obs_planes {
                        let (r, s) = init_priors(o, segmenter)
                            .map_err(|e| M2ganError::Segmenter { stage: 1, source: Box::new(e) })?;
                        rains.push(r);
                        segs.push(s);
                    }
                    (rains, segs)
                }
                Some(prev) => {
                    let est = g.value(prev.estimate).clone();
                    let mut rains = Vec::with_capacity(batch);
                    let mut segs = Vec::with_capacity(batch);
                    for (n, o) in obs_planes.iter().enumerate() {
                        let e = ImagePlane::from_tensor(&est, n)?;
                        rains.push(attention_rain_map(o, &e)?);
                        let s = segmenter
                            .segment(&e)
                            .map_err(|err| M2ganError::Segmenter { stage: k + 1, source: Box::new(err) })?;
                        segs.push(s);
                    }
                    (rains, segs)
                }
            };
            let (h, w) = (obs.shape().h, obs.shape().w);
            let rain_t = stack_maps(rain_maps.iter().map(|m| m.plane().resize_nearest(h, w)))?;
            let seg_t = stack_maps(seg_maps.iter().map(|m| m.plane().resize_nearest(h, w)))?;
            let rain = g.constant(rain_t);
            let seg = g.constant(seg_t);
            let net = self.stage_net(k)?;
            let mut env = Env::new(g, params);
            let (estimate, next) = net.forward(&mut env, observations, rain, seg, state)?;
            state = Some(next);
            outputs.push(StageVars { estimate, state: next, rain_maps, seg_maps });
        }
        Ok(outputs)
    }

    /// Inference over one image with frozen parameters.
    pub fn multistage_forward(
        &self,
        observation: &ImagePlane,
        segmenter: &SegmenterHandle,
        stages: Option<usize>,
    ) -> Result<Vec<StageOutput>> {
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let obs = g.constant(observation.to_tensor());
        let outs = self.forward_graph(&mut g, &bound, obs, segmenter, stages)?;
        outs.iter()
            .map(|s| {
                let estimate = ImagePlane::from_tensor(g.value(s.estimate), 0)?;
                let rain_map_out = attention_rain_map(observation, &estimate)?;
                Ok(StageOutput {
                    estimate,
                    next_state: ConvLstmState {
                        hidden: g.value(s.state.hidden).clone(),
                        cell: g.value(s.state.cell).clone(),
                    },
                    rain_map_out,
                })
            })
            .collect()
    }

    /// A single stage `k` (0-based) on explicit conditioning.
    pub fn stage_forward(&self, k: usize, input: &StageInput) -> Result<StageOutput> {
        let o = &input.observation;
        let (h, w, _) = o.dims();
        if input.seg_map.num_categories() != self.cfg.seg_categories {
            return precondition(format!(
                "segmentation map has {} categories, expected {}",
                input.seg_map.num_categories(),
                self.cfg.seg_categories
            ));
        }
        let net = self.stage_net(k)?;
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let obs = g.constant(o.to_tensor());
        let rain = g.constant(input.rain_map.plane().resize_nearest(h, w).to_tensor());
        let seg = g.constant(input.seg_map.plane().resize_nearest(h, w).to_tensor());
        let state = match &input.state {
            Some(s) => {
                let expect = Shape::new(1, self.cfg.hidden_channels(), h, w);
                if s.hidden.shape() != expect || s.cell.shape() != expect {
                    return Err(M2ganError::State(format!(
                        "carried state {} does not match {expect}",
                        s.hidden.shape()
                    )));
                }
                Some(LstmVars { hidden: g.constant(s.hidden.clone()), cell: g.constant(s.cell.clone()) })
            }
            None => None,
        };
        let mut env = Env::new(&mut g, &bound);
        let (est, next) = net.forward(&mut env, obs, rain, seg, state)?;
        let estimate = ImagePlane::from_tensor(g.value(est), 0)?;
        let rain_map_out = attention_rain_map(o, &estimate)?;
        Ok(StageOutput {
            estimate,
            next_state: ConvLstmState { hidden: g.value(next.hidden).clone(), cell: g.value(next.cell).clone() },
            rain_map_out,
        })
    }
}

fn stack_maps(planes: impl Iterator<Item = ImagePlane>) -> Result<Tensor> {
    let items: Vec<Tensor> = planes.map(|p| p.to_tensor()).collect();
    Tensor::stack(&items)
}

/// Conditioning for the first stage: a constant 0.5 rain map and the
/// segmentation of the observation itself.
pub fn init_priors(
    observation: &ImagePlane,
    segmenter: &SegmenterHandle,
) -> Result<(AttentionRainMap, SegmentationMap)> {
    let rain = AttentionRainMap::constant(observation.height(), observation.width(), INITIAL_RAIN_PRIOR);
    let seg = segmenter.segment(observation)?;
    Ok((rain, seg))
}
