mod common;

use common::oracle::{self, Map};
use common::*;
use m2gan::conditioning::{import_label_map, write_label_png, SegmenterHandle, ToySegmenter};
use m2gan::generator::{init_priors, ConvLstmState, Generator, PipelineConfig, StageInput};
use m2gan::graph::Graph;
use m2gan::plane::{AttentionRainMap, ImagePlane};
use m2gan::tensor::{Shape, Tensor};

fn toy() -> SegmenterHandle {
    SegmenterHandle::Toy(ToySegmenter::default())
}

/// Replace a stage's zero head with small random weights.
fn randomize_head(gen: &mut Generator, prefix: &str, seed: u64) {
    let key = format!("{prefix}.head.weight");
    let shape = gen.params.require(&key).unwrap().shape();
    gen.params.assign(&key, random_tensor(shape, seed, -0.05, 0.05)).unwrap();
}

fn oracle_stage(gen: &Generator, prefix: &str, input: &StageInput) -> (Map, Map, Map) {
    let cfg = &gen.cfg;
    let p = &gen.params;
    let obs = Map::from_tensor(&input.observation.to_tensor());
    let rain = Map::from_tensor(&input.rain_map.plane().to_tensor());
    let seg = Map::from_tensor(&input.seg_map.plane().to_tensor());
    let hidden = cfg.hidden_channels();
    let (h0, c0) = match &input.state {
        Some(s) => (Map::from_tensor(&s.hidden), Map::from_tensor(&s.cell)),
        None => (Map::new(hidden, obs.h, obs.w), Map::new(hidden, obs.h, obs.w)),
    };
    let x = oracle::concat(&[&obs, &rain, &seg]);
    let (h, c) = oracle::lstm(p, &format!("{prefix}.lstm"), &x, &h0, &c0);
    let mut f = h.clone();
    for i in 0..3 {
        f = oracle::urdb(p, &format!("{prefix}.urdb{i}"), cfg.urdb.rdb_layers, &f);
    }
    let a = oracle::aspp(p, &format!("{prefix}.aspp"), &cfg.aspp.dilation_rates, cfg.aspp.include_global_pool, &f);
    let residual = oracle::conv_named(p, &format!("{prefix}.head"), &a, 1);
    (obs.zip(&residual, |o, r| (o + r).clamp(0.0, 1.0)), h, c)
}

#[test]
fn stage_matches_reexecution() {
    let mut gen = Generator::new(PipelineConfig::tiny(), 3).unwrap();
    randomize_head(&mut gen, "gen.stage", 4);
    let o = procedural_scene_plane(8, 12, 5);
    let (rain_map, seg_map) = init_priors(&o, &toy()).unwrap();
    let hidden = gen.cfg.hidden_channels();
    for state in [
        None,
        Some(ConvLstmState {
            hidden: random_tensor(Shape::new(1, hidden, 8, 12), 6, -0.5, 0.5),
            cell: random_tensor(Shape::new(1, hidden, 8, 12), 7, -1.0, 1.0),
        }),
    ] {
        let input = StageInput { observation: o.clone(), rain_map: rain_map.clone(), seg_map: seg_map.clone(), state };
        let out = gen.stage_forward(0, &input).unwrap();
        let (est, h, c) = oracle_stage(&gen, "gen.stage", &input);
        let close = |a: &Map, b: &Tensor| a.v.iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12);
        assert!(close(&est, &out.estimate.to_tensor()));
        assert!(close(&h, &out.next_state.hidden));
        assert!(close(&c, &out.next_state.cell));
        assert!(out.estimate != o);
    }
}

fn procedural_scene_plane(h: usize, w: usize, seed: u64) -> ImagePlane {
    m2gan::data::procedural_scene(h, w, seed)
}

#[test]
fn gradient_reaches_the_first_stage_through_the_recurrence() {
    let cfg = PipelineConfig { share_weights: false, ..PipelineConfig::tiny() };
    let mut gen = Generator::new(cfg, 8).unwrap();
    // A zero first head keeps the second stage's conditioning fixed, so
    // the first stage reaches B̂₂ only through the carried LSTM state.
    randomize_head(&mut gen, "gen.stage1", 9);
    // Kept away from 0 and 1 so the output clamp stays inactive.
    let scene = procedural_scene_plane(4, 4, 10);
    let obs = ImagePlane::from_fn(4, 4, 3, |c, y, x| 0.25 + 0.5 * scene.get(c, y, x));
    let clean = procedural_scene_plane(4, 4, 11);
    let seg = toy();
    let objective = |params: &m2gan::params::ParamStore, trainable: bool| {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, trainable);
        let o = g.constant(obs.to_tensor());
        let outs = gen.forward_graph(&mut g, &bound, o, &seg, None).unwrap();
        let b = g.constant(clean.to_tensor());
        let d = g.sub(outs[1].estimate, b).unwrap();
        let a = g.abs(d);
        let l = g.sum(a);
        (g, bound, l)
    };
    let (g, bound, l) = objective(&gen.params, true);
    let grads = bound.gradients(&g.backward(l).unwrap(), &gen.params);
    let name = "gen.stage0.lstm.gates.bias";
    let analytic = grads.require(name).unwrap();
    assert!(analytic.data().iter().any(|&v| v.abs() > 1e-8), "{name} receives no gradient");
    // A fine step keeps the probe from crossing rectifier kinks.
    let numeric = numeric_grad(gen.params.require(name).unwrap(), 1e-6, |probe| {
        let mut p = gen.params.clone();
        p.assign(name, probe.clone()).unwrap();
        let (g, _, l) = objective(&p, false);
        g.scalar(l)
    });
    assert!(rel_err(analytic, &numeric) <= 1e-4, "{}", rel_err(analytic, &numeric));
    // The first stage's blocks after the LSTM only feed its zero head.
    assert!(grads.require("gen.stage0.urdb0.out.bias").unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn identity_model_sees_quiet_rain_maps_on_clean_input() {
    let cfg = PipelineConfig { num_stages: 3, ..PipelineConfig::tiny() };
    let mut gen = Generator::new(cfg, 12).unwrap();
    gen.zero_heads().unwrap();
    let clean = procedural_scene_plane(16, 16, 13);
    let mut g = Graph::new();
    let bound = gen.params.bind(&mut g, false);
    let o = g.constant(clean.to_tensor());
    let outs = gen.forward_graph(&mut g, &bound, o, &toy(), None).unwrap();
    assert_eq!(outs.len(), 3);
    assert_eq!(outs[0].rain_maps[0].mean(), 0.5);
    for s in &outs[1..] {
        assert!(s.rain_maps[0].mean() < 0.05);
    }
}

#[test]
fn carried_state_changes_between_stages() {
    let mut gen = Generator::new(PipelineConfig::tiny(), 14).unwrap();
    randomize_head(&mut gen, "gen.stage", 15);
    let outs = gen.multistage_forward(&procedural_scene_plane(8, 8, 16), &toy(), None).unwrap();
    assert_eq!(outs.len(), 2);
    let diff: f64 = outs[0]
        .next_state
        .hidden
        .data()
        .iter()
        .zip(outs[1].next_state.hidden.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    assert!(diff.sqrt() > 0.0);
}

#[test]
fn priors_match_full_resolution_frames() {
    let frame = ImagePlane::filled(480, 720, 3, 0.4);
    let (rain, seg) = init_priors(&frame, &toy()).unwrap();
    assert_eq!(rain.plane().dims(), (480, 720, 1));
    assert_eq!(seg.plane().dims(), (480, 720, 5));
    assert_eq!(rain, AttentionRainMap::constant(480, 720, 0.5));
}

/// Decode a label image with the image crate directly.
fn decode_labels(path: &std::path::Path) -> (usize, usize, Vec<u8>) {
    let img = image::open(path).unwrap().to_luma8();
    let (w, h) = img.dimensions();
    (h as usize, w as usize, img.into_raw())
}

fn check_import(labels: Vec<u8>, h: usize, w: usize, k: usize) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("labels.png");
    write_label_png(&path, h, w, &labels).unwrap();
    let map = import_label_map(&path, k, Some((h, w))).unwrap();
    let (dh, dw, decoded) = decode_labels(&path);
    assert_eq!((dh, dw), (h, w));
    for y in 0..h {
        for x in 0..w {
            for c in 0..k {
                let expected = f64::from(decoded[y * w + x] as usize == c);
                assert_eq!(map.plane().get(c, y, x), expected);
            }
        }
    }
}

#[test]
fn imported_labels_become_one_hot_scores() {
    let (h, w) = (6, 9);
    check_import((0..h * w).map(|i| ((i * 7) % 4) as u8).collect(), h, w, 4);
    // Checkerboard of two categories.
    check_import((0..h * w).map(|i| ((i / w + i % w) % 2) as u8).collect(), h, w, 2);
    check_import(vec![0; h * w], h, w, 5);
}
