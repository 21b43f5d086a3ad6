//! Straight-line reference implementations of the network layers on a single
//! image, written with plain loops and no shared code with the engine.

use m2gan::params::ParamStore;
use m2gan::tensor::Tensor;

pub const SLOPE: f64 = 0.2;

/// A `c × h × w` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Map {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, v: vec![0.0; c * h * w] }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        let s = t.shape();
        assert_eq!(s.n, 1);
        Self { c: s.c, h: s.h, w: s.w, v: t.data().to_vec() }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.v[(c * self.h + y) * self.w + x]
    }

    pub fn put(&mut self, c: usize, y: usize, x: usize, val: f64) {
        let (h, w) = (self.h, self.w);
        self.v[(c * h + y) * w + x] = val;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { v: self.v.iter().map(|&x| f(x)).collect(), ..self.clone() }
    }

    pub fn zip(&self, o: &Map, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!((self.c, self.h, self.w), (o.c, o.h, o.w));
        Self { v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect(), ..self.clone() }
    }

    pub fn channels(&self, from: usize, count: usize) -> Self {
        let plane = self.h * self.w;
        Self { c: count, h: self.h, w: self.w, v: self.v[from * plane..(from + count) * plane].to_vec() }
    }
}

/// Mirror an out-of-range index back inside `0..n` without repeating the edge.
fn reflect(mut i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// "Same" convolution with reflect padding, stride 1.
pub fn conv(x: &Map, weight: &Tensor, bias: &Tensor, dilation: usize) -> Map {
    let s = weight.shape();
    assert_eq!(s.c, x.c);
    let k = s.h;
    let r = (dilation * (k - 1) / 2) as isize;
    let mut out = Map::new(s.n, x.h, x.w);
    for o in 0..s.n {
        for y in 0..x.h {
            for xx in 0..x.w {
                let mut acc = bias.data()[o];
                for i in 0..s.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = reflect(y as isize + (ky * dilation) as isize - r, x.h);
                            let sx = reflect(xx as isize + (kx * dilation) as isize - r, x.w);
                            acc += weight.data()[((o * s.c + i) * k + ky) * k + kx] * x.at(i, sy, sx);
                        }
                    }
                }
                out.put(o, y, xx, acc);
            }
        }
    }
    out
}

pub fn conv_named(p: &ParamStore, name: &str, x: &Map, dilation: usize) -> Map {
    conv(x, p.get(&format!("{name}.weight")).unwrap(), p.get(&format!("{name}.bias")).unwrap(), dilation)
}

pub fn lrelu(x: &Map) -> Map {
    x.map(|v| if v >= 0.0 { v } else { SLOPE * v })
}

pub fn concat(xs: &[&Map]) -> Map {
    let (h, w) = (xs[0].h, xs[0].w);
    let mut v = Vec::new();
    for x in xs {
        assert_eq!((x.h, x.w), (h, w));
        v.extend_from_slice(&x.v);
    }
    Map { c: v.len() / (h * w), h, w, v }
}

pub fn avg_pool2(x: &Map) -> Map {
    let mut out = Map::new(x.c, x.h / 2, x.w / 2);
    for c in 0..x.c {
        for y in 0..out.h {
            for xx in 0..out.w {
                let s = x.at(c, 2 * y, 2 * xx)
                    + x.at(c, 2 * y + 1, 2 * xx)
                    + x.at(c, 2 * y, 2 * xx + 1)
                    + x.at(c, 2 * y + 1, 2 * xx + 1);
                out.put(c, y, xx, s / 4.0);
            }
        }
    }
    out
}

pub fn upsample2(x: &Map) -> Map {
    let mut out = Map::new(x.c, x.h * 2, x.w * 2);
    for c in 0..x.c {
        for y in 0..out.h {
            for xx in 0..out.w {
                out.put(c, y, xx, x.at(c, y / 2, xx / 2));
            }
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn rdb(p: &ParamStore, name: &str, layers: usize, x: &Map) -> Map {
    let mut feats = vec![x.clone()];
    for i in 0..layers {
        let refs: Vec<&Map> = feats.iter().collect();
        let y = lrelu(&conv_named(p, &format!("{name}.dense{i}"), &concat(&refs), 1));
        feats.push(y);
    }
    let refs: Vec<&Map> = feats.iter().collect();
    let fused = conv_named(p, &format!("{name}.fusion"), &concat(&refs), 1);
    x.zip(&fused, |a, b| a + b)
}

pub fn urdb(p: &ParamStore, name: &str, layers: usize, x: &Map) -> Map {
    let e0 = rdb(p, &format!("{name}.enc0.rdb"), layers, &lrelu(&conv_named(p, &format!("{name}.enc0.conv"), x, 1)));
    let e1 = rdb(
        p,
        &format!("{name}.enc1.rdb"),
        layers,
        &lrelu(&conv_named(p, &format!("{name}.enc1.conv"), &avg_pool2(&e0), 1)),
    );
    let mut h = lrelu(&conv_named(p, &format!("{name}.bottleneck"), &avg_pool2(&e1), 1));
    for (i, skip) in [(0, &e1), (1, &e0)] {
        let up = lrelu(&conv_named(p, &format!("{name}.dec{i}.up"), &upsample2(&h), 1));
        let merged = lrelu(&conv_named(p, &format!("{name}.dec{i}.merge"), &concat(&[&up, skip]), 1));
        h = rdb(p, &format!("{name}.dec{i}.rdb"), layers, &merged);
    }
    conv_named(p, &format!("{name}.out"), &h, 1)
}

/// One ConvLSTM step; returns `(hidden, cell)`.
pub fn lstm(p: &ParamStore, name: &str, x: &Map, hidden: &Map, cell: &Map) -> (Map, Map) {
    let z = conv_named(p, &format!("{name}.gates"), &concat(&[x, hidden]), 1);
    let n = hidden.c;
    let i = z.channels(0, n).map(sigmoid);
    let f = z.channels(n, n).map(sigmoid);
    let o = z.channels(2 * n, n).map(sigmoid);
    let g = z.channels(3 * n, n).map(f64::tanh);
    let c = f.zip(cell, |a, b| a * b).zip(&i.zip(&g, |a, b| a * b), |a, b| a + b);
    let h = o.zip(&c.map(f64::tanh), |a, b| a * b);
    (h, c)
}

pub fn aspp(p: &ParamStore, name: &str, rates: &[usize], pool: bool, x: &Map) -> Map {
    let mut outs: Vec<Map> = rates.iter().map(|&r| lrelu(&conv_named(p, &format!("{name}.rate{r}"), x, r))).collect();
    if pool {
        let mut g = Map::new(x.c, 1, 1);
        for c in 0..x.c {
            let s: f64 = (0..x.h).flat_map(|y| (0..x.w).map(move |xx| (y, xx))).map(|(y, xx)| x.at(c, y, xx)).sum();
            g.put(c, 0, 0, s / (x.h * x.w) as f64);
        }
        let g = lrelu(&conv_named(p, &format!("{name}.pool"), &g, 1));
        let mut e = Map::new(g.c, x.h, x.w);
        for c in 0..g.c {
            for y in 0..x.h {
                for xx in 0..x.w {
                    e.put(c, y, xx, g.at(c, 0, 0));
                }
            }
        }
        outs.push(e);
    }
    let refs: Vec<&Map> = outs.iter().collect();
    conv_named(p, &format!("{name}.fuse"), &concat(&refs), 1)
}
