mod common;

use common::oracle::{self, Map};
use common::*;
use m2gan::blocks::{
    spectral_normalize, Aspp, AsppConfig, ConvLstm, Env, LstmVars, Rdb, RdbConfig, SpectralState, Urdb, UrdbConfig,
};
use m2gan::graph::{Graph, Var};
use m2gan::params::{seeded_rng, ParamStore};
use m2gan::tensor::{Shape, Tensor};
use nalgebra::DMatrix;

const TOL: f64 = 1e-12;

fn max_diff(a: &Map, b: &Tensor) -> f64 {
    assert_eq!(a.v.len(), b.len());
    a.v.iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn run(params: &ParamStore, x: &Tensor, f: impl FnOnce(&mut Env, Var) -> Var) -> Tensor {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let y = f(&mut Env::new(&mut g, &bound), xv);
    g.value(y).clone()
}

#[test]
fn rdb_with_hand_set_kernels_matches_direct_convolution() {
    let cfg = RdbConfig { num_layers: 1, growth_rate: 1, in_channels: 2 };
    let rdb = Rdb::new("r", cfg).unwrap();
    let mut p = ParamStore::new();
    let dense: Vec<f64> = (0..18).map(|i| ((i * 7) % 5) as f64 * 0.1 - 0.2).collect();
    p.insert("r.dense0.weight", Tensor::from_vec(Shape::new(1, 2, 3, 3), dense).unwrap()).unwrap();
    p.insert("r.dense0.bias", Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![0.05]).unwrap()).unwrap();
    p.insert(
        "r.fusion.weight",
        Tensor::from_vec(Shape::new(2, 3, 1, 1), vec![0.5, -0.25, 1.0, 0.0, 0.75, -0.5]).unwrap(),
    )
    .unwrap();
    p.insert("r.fusion.bias", Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.1, -0.1]).unwrap()).unwrap();
    let x = random_tensor(Shape::new(1, 2, 4, 4), 1, -1.0, 1.0);
    let got = run(&p, &x, |env, v| rdb.forward(env, v).unwrap());

    // By hand: one dense layer, concatenation, 1×1 fusion, residual.
    let xm = Map::from_tensor(&x);
    let d = oracle::lrelu(&oracle::conv_named(&p, "r.dense0", &xm, 1));
    let fused = oracle::conv_named(&p, "r.fusion", &oracle::concat(&[&xm, &d]), 1);
    let expected = xm.zip(&fused, |a, b| a + b);
    assert!(max_diff(&expected, &got) < TOL);
}

#[test]
fn tiny_urdb_matches_reexecution() {
    let cfg = UrdbConfig { in_channels: 3, base_channels: 2, out_channels: 3, rdb_layers: 2, growth_rate: 2 };
    let urdb = Urdb::new("u", cfg).unwrap();
    let mut p = ParamStore::new();
    urdb.init(&mut p, &mut seeded_rng(4)).unwrap();
    let x = random_tensor(Shape::new(1, 3, 8, 8), 5, 0.0, 1.0);
    let got = run(&p, &x, |env, v| urdb.forward(env, v).unwrap());
    let expected = oracle::urdb(&p, "u", 2, &Map::from_tensor(&x));
    assert!(max_diff(&expected, &got) < TOL);
}

#[test]
fn scalar_conv_lstm_matches_hand_arithmetic() {
    let lstm = ConvLstm::new("l", 1, 1).unwrap();
    let mut p = ParamStore::new();
    // On a 1×1 map every reflected tap reads the centre, so each 3×3
    // kernel acts as the sum of its taps.
    let w: Vec<f64> = (0..4 * 2 * 9).map(|i| ((i * 13) % 11) as f64 / 30.0 - 0.15).collect();
    let b = vec![0.1, -0.2, 0.3, 0.05];
    p.insert("l.gates.weight", Tensor::from_vec(Shape::new(4, 2, 3, 3), w.clone()).unwrap()).unwrap();
    p.insert("l.gates.bias", Tensor::from_vec(Shape::new(1, 4, 1, 1), b.clone()).unwrap()).unwrap();
    let (x, h0, c0) = (0.7, -0.4, 0.9);

    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let one = |g: &mut Graph, v: f64| g.constant(Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![v]).unwrap());
    let xv = one(&mut g, x);
    let state = LstmVars { hidden: one(&mut g, h0), cell: one(&mut g, c0) };
    let next = lstm.step(&mut Env::new(&mut g, &bound), xv, state).unwrap();
    let (h1, c1) = (g.scalar(next.hidden), g.scalar(next.cell));

    let taps =
        |gate: usize, input: usize| -> f64 { w[(gate * 2 + input) * 9..(gate * 2 + input + 1) * 9].iter().sum() };
    let pre = |gate: usize| taps(gate, 0) * x + taps(gate, 1) * h0 + b[gate];
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let (i, f, o, cand) = (sig(pre(0)), sig(pre(1)), sig(pre(2)), pre(3).tanh());
    let c = f * c0 + i * cand;
    let h = o * c.tanh();
    assert!((c1 - c).abs() < TOL && (h1 - h).abs() < TOL, "{c1} {c} {h1} {h}");
}

#[test]
fn conv_lstm_matches_reexecution_on_maps() {
    let lstm = ConvLstm::new("l", 3, 2).unwrap();
    let mut p = ParamStore::new();
    lstm.init(&mut p, &mut seeded_rng(6)).unwrap();
    let x = random_tensor(Shape::new(1, 3, 5, 6), 7, -1.0, 1.0);
    let h0 = random_tensor(Shape::new(1, 2, 5, 6), 8, -1.0, 1.0);
    let c0 = random_tensor(Shape::new(1, 2, 5, 6), 9, -2.0, 2.0);
    let mut g = Graph::new();
    let bound = p.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let state = LstmVars { hidden: g.constant(h0.clone()), cell: g.constant(c0.clone()) };
    let next = lstm.step(&mut Env::new(&mut g, &bound), xv, state).unwrap();
    let (h, c) = oracle::lstm(&p, "l", &Map::from_tensor(&x), &Map::from_tensor(&h0), &Map::from_tensor(&c0));
    assert!(max_diff(&h, g.value(next.hidden)) < TOL);
    assert!(max_diff(&c, g.value(next.cell)) < TOL);
}

#[test]
fn aspp_on_constant_input_is_constant_and_matches_reexecution() {
    let cfg = AsppConfig { dilation_rates: vec![1, 2, 4], out_channels: 3, include_global_pool: true };
    let aspp = Aspp::new("a", 2, cfg.clone()).unwrap();
    let mut p = ParamStore::new();
    aspp.init(&mut p, &mut seeded_rng(10)).unwrap();
    let x =
        Tensor::from_vec(Shape::new(1, 2, 6, 6), [0.3; 36].iter().chain([-0.8; 36].iter()).copied().collect()).unwrap();
    let got = run(&p, &x, |env, v| aspp.forward(env, v).unwrap());
    let expected = oracle::aspp(&p, "a", &cfg.dilation_rates, true, &Map::from_tensor(&x));
    assert!(max_diff(&expected, &got) < TOL);
    for c in 0..3 {
        let plane = &got.data()[c * 36..(c + 1) * 36];
        assert!(plane.iter().all(|&v| (v - plane[0]).abs() < TOL));
    }

    let x = random_tensor(Shape::new(1, 2, 7, 5), 11, -1.0, 1.0);
    let got = run(&p, &x, |env, v| aspp.forward(env, v).unwrap());
    let expected = oracle::aspp(&p, "a", &cfg.dilation_rates, true, &Map::from_tensor(&x));
    assert!(max_diff(&expected, &got) < TOL);
}

fn top_singular(t: &Tensor) -> f64 {
    let s = t.shape();
    DMatrix::from_row_slice(s.n, t.len() / s.n, t.data()).singular_values().max()
}

#[test]
fn spectral_normalisation_of_diagonal_matrix() {
    let w = Tensor::from_vec(Shape::new(2, 2, 1, 1), vec![3.0, 0.0, 0.0, 1.0]).unwrap();
    let state = SpectralState::new(2, 2, 50, &mut seeded_rng(12));
    let (normalized, _, diag) = spectral_normalize(&w, &state).unwrap();
    assert!((diag.sigma - 3.0).abs() < 1e-6);
    assert!((top_singular(&normalized) - 1.0).abs() < 1e-6);
}

#[test]
fn spectral_normalisation_of_random_matrix() {
    let w = random_tensor(Shape::new(8, 20, 1, 1), 13, -1.0, 1.0);
    let state = SpectralState::new(8, 20, 50, &mut seeded_rng(14));
    let (normalized, _, _) = spectral_normalize(&w, &state).unwrap();
    assert!((top_singular(&normalized) - 1.0).abs() < 1e-3);
}

/// Analytic parameter gradients of `sum(outputs)` against central
/// differences, as one norm-wise relative error over all parameters.
fn block_gradient_error(params: &ParamStore, forward: impl Fn(&mut Env) -> Vec<Var>) -> f64 {
    let objective = |g: &mut Graph, outs: Vec<Var>| {
        let sums: Vec<Var> = outs.into_iter().map(|o| g.sum(o)).collect();
        sums.into_iter().reduce(|a, b| g.add(a, b).unwrap()).unwrap()
    };
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let outs = forward(&mut Env::new(&mut g, &bound));
    let root = objective(&mut g, outs);
    let analytic = bound.gradients(&g.backward(root).unwrap(), params);
    let (mut num, mut den_a, mut den_n) = (0.0, 0.0, 0.0);
    for (name, p) in params.iter() {
        let numeric = numeric_grad(p, FD_STEP, |probe| {
            let mut store = params.clone();
            store.assign(name, probe.clone()).unwrap();
            let mut g = Graph::new();
            let bound = store.bind(&mut g, false);
            let outs = forward(&mut Env::new(&mut g, &bound));
            let root = objective(&mut g, outs);
            g.scalar(root)
        });
        for (a, n) in analytic.require(name).unwrap().data().iter().zip(numeric.data()) {
            num += (a - n) * (a - n);
            den_a += a * a;
            den_n += n * n;
        }
    }
    num.sqrt() / den_a.max(den_n).sqrt()
}

#[test]
fn block_parameter_gradients_match_finite_differences() {
    let mut rng = seeded_rng(15);
    let x = random_tensor(Shape::new(1, 2, 4, 4), 16, -1.0, 1.0);

    let rdb = Rdb::new("r", RdbConfig { num_layers: 2, growth_rate: 2, in_channels: 2 }).unwrap();
    let mut p = ParamStore::new();
    rdb.init(&mut p, &mut rng).unwrap();
    assert!(p.num_scalars() <= 2000);
    let e = block_gradient_error(&p, |env| {
        let xv = env.g.constant(x.clone());
        vec![rdb.forward(env, xv).unwrap()]
    });
    assert!(e <= 1e-4, "rdb {e}");

    let urdb =
        Urdb::new("u", UrdbConfig { in_channels: 2, base_channels: 2, out_channels: 2, rdb_layers: 1, growth_rate: 1 })
            .unwrap();
    let mut p = ParamStore::new();
    urdb.init(&mut p, &mut rng).unwrap();
    assert!(p.num_scalars() <= 2000);
    let e = block_gradient_error(&p, |env| {
        let xv = env.g.constant(x.clone());
        vec![urdb.forward(env, xv).unwrap()]
    });
    assert!(e <= 1e-4, "urdb {e}");

    let lstm = ConvLstm::new("l", 2, 2).unwrap();
    let mut p = ParamStore::new();
    lstm.init(&mut p, &mut rng).unwrap();
    let c0 = random_tensor(Shape::new(1, 2, 4, 4), 17, -1.0, 1.0);
    let e = block_gradient_error(&p, |env| {
        let xv = env.g.constant(x.clone());
        let hidden = env.g.constant(x.map(|v| 0.5 * v));
        let cell = env.g.constant(c0.clone());
        let next = lstm.step(env, xv, LstmVars { hidden, cell }).unwrap();
        vec![next.hidden, next.cell]
    });
    assert!(e <= 1e-4, "lstm {e}");

    let aspp = Aspp::new("a", 2, AsppConfig { dilation_rates: vec![1, 2], out_channels: 2, include_global_pool: true })
        .unwrap();
    let mut p = ParamStore::new();
    aspp.init(&mut p, &mut rng).unwrap();
    let e = block_gradient_error(&p, |env| {
        let xv = env.g.constant(x.clone());
        vec![aspp.forward(env, xv).unwrap()]
    });
    assert!(e <= 1e-4, "aspp {e}");
}
