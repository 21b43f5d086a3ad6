//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! enough context to push gradients back to its inputs. Nodes created from
//! constants never receive gradients, and neither does anything computed
//! purely from constants.

use crate::error::{precondition, Result};
use crate::tensor::{conv2d_backward, conv2d_forward, ConvGeom, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalarVar(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    AvgPool2(Var),
    Upsample2(Var),
    ExpandSpatial(Var),
    GlobalAvgPool(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Softplus(Var),
    Mean(Var),
    Sum(Var),
    SpectralScale { w: Var, u: Vec<f64>, v: Vec<f64>, sigma: f64 },
    SoftAssign { x: Var, centroids: Vec<Vec<f64>>, temperature: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return precondition(format!("{what}: shape {} vs {}", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `x + s` where `s` is a one-element tensor broadcast over `x`.
    pub fn add_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return precondition(format!("broadcast operand has shape {}", self.shape(s)));
        }
        let sv = self.scalar(s);
        let out = self.value(x).map(|v| v + sv);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(out, Op::AddScalarVar(x, s), ng))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, k), ng)
    }

    pub fn offset(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v + k);
        let ng = self.ng(x);
        self.push(out, Op::Offset(x), ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Concatenate along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return precondition("concat of zero tensors");
        };
        let s0 = self.shape(first);
        let mut c = 0;
        for &x in xs {
            let s = self.shape(x);
            if (s.n, s.h, s.w) != (s0.n, s0.h, s0.w) {
                return precondition(format!("concat: shape {s} vs {s0}"));
            }
            c += s.c;
        }
        let shape = Shape::new(s0.n, c, s0.h, s0.w);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..s0.n {
            for &x in xs {
                let t = self.value(x);
                let per = t.shape().c * t.shape().plane();
                data.extend_from_slice(&t.data()[n * per..(n + 1) * per]);
            }
        }
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(Tensor::from_vec(shape, data)?, Op::Concat(xs.to_vec()), ng))
    }

    /// Channels `start..start + len`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if start + len > s.c || len == 0 {
            return precondition(format!("channel slice {start}..{} of {s}", start + len));
        }
        let plane = s.plane();
        let mut data = Vec::with_capacity(s.n * len * plane);
        let src = self.value(x).data();
        for n in 0..s.n {
            let base = (n * s.c + start) * plane;
            data.extend_from_slice(&src[base..base + len * plane]);
        }
        let out = Tensor::from_vec(Shape::new(s.n, len, s.h, s.w), data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Slice { x, start }, ng))
    }

    /// 2×2 average pooling with stride 2; spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return precondition(format!("2x2 pooling needs even spatial dims, got {s}"));
        }
        let t = self.value(x);
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, s.h / 2, s.w / 2));
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h / 2 {
                    for xx in 0..s.w / 2 {
                        let v = t.at(n, c, 2 * y, 2 * xx)
                            + t.at(n, c, 2 * y, 2 * xx + 1)
                            + t.at(n, c, 2 * y + 1, 2 * xx)
                            + t.at(n, c, 2 * y + 1, 2 * xx + 1);
                        out.set(n, c, y, xx, 0.25 * v);
                    }
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::AvgPool2(x), ng))
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let t = self.value(x);
        let mut out = Tensor::zeros(Shape::new(s.n, s.c, s.h * 2, s.w * 2));
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..s.h * 2 {
                    for xx in 0..s.w * 2 {
                        out.set(n, c, y, xx, t.at(n, c, y / 2, xx / 2));
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Upsample2(x), ng)
    }

    /// Broadcast a `[n, c, 1, 1]` tensor over an `h × w` plane.
    pub fn expand_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.h != 1 || s.w != 1 {
            return precondition(format!("expand_spatial needs a 1x1 map, got {s}"));
        }
        let mut data = Vec::with_capacity(s.n * s.c * h * w);
        for &v in self.value(x).data() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        let out = Tensor::from_vec(Shape::new(s.n, s.c, h, w), data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::ExpandSpatial(x), ng))
    }

    /// Spatial mean per channel: `[n, c, h, w] → [n, c, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let plane = s.plane();
        let data: Vec<f64> = self.value(x).data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
        let out = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data).expect("pool shape");
        let ng = self.ng(x);
        self.push(out, Op::GlobalAvgPool(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.ng(x);
        self.push(out, Op::LeakyRelu(x, slope), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        let ng = self.ng(x);
        self.push(out, Op::Abs(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let ng = self.ng(x);
        self.push(out, Op::Square(x), ng)
    }

    /// Clamp to `[lo, hi]`. The backward pass is a surrogate: clipped
    /// elements still receive gradients that point back into the range.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let ng = self.ng(x);
        self.push(out, Op::Clamp { x, lo, hi }, ng)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(softplus);
        let ng = self.ng(x);
        self.push(out, Op::Softplus(x), ng)
    }

    /// Mean of all elements as a scalar tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let ng = self.ng(x);
        self.push(out, Op::Mean(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng)
    }

    /// `w / σ` with `σ = uᵀ W v` for fixed singular-vector estimates `u`, `v`.
    /// `w` is viewed as a matrix of shape `out × (in·kh·kw)`.
    pub fn spectral_scale(&mut self, w: Var, u: &[f64], v: &[f64], sigma_floor: f64) -> Result<Var> {
        let s = self.shape(w);
        let cols = s.c * s.plane();
        if u.len() != s.n || v.len() != cols {
            return precondition(format!("spectral vectors {}x{} do not fit kernel {s}", u.len(), v.len()));
        }
        let wt = self.value(w);
        let sigma = bilinear(wt.data(), u, v).max(sigma_floor);
        let out = wt.map(|x| x / sigma);
        let ng = self.ng(w);
        Ok(self.push(out, Op::SpectralScale { w, u: u.to_vec(), v: v.to_vec(), sigma }, ng))
    }

    /// Per-pixel softmax over `-‖x − c_k‖² / T` for fixed colour centroids.
    pub fn soft_assign(&mut self, x: Var, centroids: &[Vec<f64>], temperature: f64) -> Result<Var> {
        let s = self.shape(x);
        if centroids.is_empty() || centroids.iter().any(|c| c.len() != s.c) {
            return precondition(format!("centroids do not match {} channels", s.c));
        }
        let out = soft_assign_values(self.value(x), centroids, temperature);
        let ng = self.ng(x);
        Ok(self.push(out, Op::SoftAssign { x, centroids: centroids.to_vec(), temperature }, ng))
    }

    /// Back-propagate from the scalar `root`, seeding its gradient with 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return precondition(format!("backward root must be scalar, got {}", self.shape(root)));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let need = (self.ng(*x), self.ng(*w), b.is_some_and(|b| self.ng(b)));
                let cg = conv2d_backward(self.value(*x), self.value(*w), g, geom, need);
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, dw);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    let db = db.reshape(self.shape(*b)).expect("bias shape");
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |gv, av| gv * av));
                }
            }
            Op::AddScalarVar(x, s) => {
                self.accumulate(grads, *x, g.clone());
                let shape = self.shape(*s);
                self.accumulate(grads, *s, Tensor::full(shape, g.sum()));
            }
            Op::Scale(x, k) => self.accumulate(grads, *x, g.map(|v| v * k)),
            Op::Offset(x) => self.accumulate(grads, *x, g.clone()),
            Op::Concat(xs) => {
                let s = y.shape();
                let mut c0 = 0;
                for &x in xs {
                    let xs_ = self.shape(x);
                    if self.ng(x) {
                        let plane = xs_.plane();
                        let mut data = Vec::with_capacity(xs_.numel());
                        for n in 0..s.n {
                            let base = (n * s.c + c0) * plane;
                            data.extend_from_slice(&g.data()[base..base + xs_.c * plane]);
                        }
                        self.accumulate(grads, x, Tensor::from_vec(xs_, data).expect("concat grad"));
                    }
                    c0 += xs_.c;
                }
            }
            Op::Slice { x, start } => {
                let xs_ = self.shape(*x);
                let plane = xs_.plane();
                let len = y.shape().c;
                let mut dx = Tensor::zeros(xs_);
                for n in 0..xs_.n {
                    let dst = (n * xs_.c + start) * plane;
                    let src = n * len * plane;
                    dx.data_mut()[dst..dst + len * plane].copy_from_slice(&g.data()[src..src + len * plane]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool2(x) => {
                let xs_ = self.shape(*x);
                let mut dx = Tensor::zeros(xs_);
                for n in 0..xs_.n {
                    for c in 0..xs_.c {
                        for yy in 0..xs_.h {
                            for xx in 0..xs_.w {
                                dx.set(n, c, yy, xx, 0.25 * g.at(n, c, yy / 2, xx / 2));
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2(x) => {
                let xs_ = self.shape(*x);
                let mut dx = Tensor::zeros(xs_);
                let gs = g.shape();
                for n in 0..gs.n {
                    for c in 0..gs.c {
                        for yy in 0..gs.h {
                            for xx in 0..gs.w {
                                let i = dx.offset(n, c, yy / 2, xx / 2);
                                dx.data_mut()[i] += g.at(n, c, yy, xx);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ExpandSpatial(x) => {
                let plane = y.shape().plane();
                let data = g.data().chunks(plane).map(|p| p.iter().sum()).collect();
                let dx = Tensor::from_vec(self.shape(*x), data).expect("expand grad");
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let xs_ = self.shape(*x);
                let plane = xs_.plane();
                let mut data = Vec::with_capacity(xs_.numel());
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv / plane as f64, plane));
                }
                self.accumulate(grads, *x, Tensor::from_vec(xs_, data).expect("gap grad"));
            }
            Op::LeakyRelu(x, slope) => {
                let dx = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { gv * slope });
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                self.accumulate(grads, *x, g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)));
            }
            Op::Tanh(x) => {
                self.accumulate(grads, *x, g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv)));
            }
            Op::Abs(x) => {
                let dx = g.zip_map(self.value(*x), |gv, xv| gv * xv.signum() * (xv != 0.0) as u8 as f64);
                self.accumulate(grads, *x, dx);
            }
            Op::Square(x) => {
                self.accumulate(grads, *x, g.zip_map(self.value(*x), |gv, xv| 2.0 * gv * xv));
            }
            Op::Clamp { x, lo, hi } => {
                // Outside the range, only gradients that pull back inside pass.
                let dx = g.zip_map(self.value(*x), |gv, xv| {
                    let inside = xv > *lo && xv < *hi;
                    let restoring = (xv >= *hi && gv > 0.0) || (xv <= *lo && gv < 0.0);
                    if inside || restoring {
                        gv
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, dx);
            }
            Op::Softplus(x) => {
                self.accumulate(grads, *x, g.zip_map(self.value(*x), |gv, xv| gv * sigmoid(xv)));
            }
            Op::Mean(x) => {
                let s = self.shape(*x);
                let gv = g.data()[0] / s.numel() as f64;
                self.accumulate(grads, *x, Tensor::full(s, gv));
            }
            Op::Sum(x) => {
                let s = self.shape(*x);
                self.accumulate(grads, *x, Tensor::full(s, g.data()[0]));
            }
            Op::SpectralScale { w, u, v, sigma } => {
                // d(W/σ) = dW/σ − W (uᵀ dW v)/σ²  ⇒  ∇W = G/σ − (⟨G, W⟩/σ²) u vᵀ
                let wt = self.value(*w);
                let inner: f64 = g.data().iter().zip(wt.data()).map(|(a, b)| a * b).sum();
                let k = inner / (sigma * sigma);
                let cols = v.len();
                let mut dw = g.map(|gv| gv / sigma);
                for (r, &ur) in u.iter().enumerate() {
                    for (c, &vc) in v.iter().enumerate() {
                        dw.data_mut()[r * cols + c] -= k * ur * vc;
                    }
                }
                self.accumulate(grads, *w, dw);
            }
            Op::SoftAssign { x, centroids, temperature } => {
                // p_k = softmax_k(−d_k/T), d_k = ‖x − c_k‖²
                // ∂L/∂x = Σ_k p_k (g_k − Σ_j p_j g_j) · (−2/T)(x − c_k)
                let xs_ = self.shape(*x);
                let xv = self.value(*x);
                let plane = xs_.plane();
                let kc = centroids.len();
                let mut dx = Tensor::zeros(xs_);
                for n in 0..xs_.n {
                    for pix in 0..plane {
                        let p = |k: usize| y.data()[(n * kc + k) * plane + pix];
                        let gk = |k: usize| g.data()[(n * kc + k) * plane + pix];
                        let gbar: f64 = (0..kc).map(|k| p(k) * gk(k)).sum();
                        for c in 0..xs_.c {
                            let xc = xv.data()[(n * xs_.c + c) * plane + pix];
                            let mut acc = 0.0;
                            for (k, ck) in centroids.iter().enumerate() {
                                acc += p(k) * (gk(k) - gbar) * (xc - ck[c]);
                            }
                            dx.data_mut()[(n * xs_.c + c) * plane + pix] = -2.0 / temperature * acc;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
        }
    }
}

/// `uᵀ W v` for `W` stored row-major with `u.len()` rows.
pub(crate) fn bilinear(w: &[f64], u: &[f64], v: &[f64]) -> f64 {
    let cols = v.len();
    u.iter()
        .enumerate()
        .map(|(r, &ur)| ur * w[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

pub(crate) fn soft_assign_values(x: &Tensor, centroids: &[Vec<f64>], temperature: f64) -> Tensor {
    let s = x.shape();
    let plane = s.plane();
    let kc = centroids.len();
    let mut out = Tensor::zeros(Shape::new(s.n, kc, s.h, s.w));
    let mut logits = vec![0.0; kc];
    for n in 0..s.n {
        for pix in 0..plane {
            for (k, ck) in centroids.iter().enumerate() {
                let d: f64 = (0..s.c)
                    .map(|c| {
                        let diff = x.data()[(n * s.c + c) * plane + pix] - ck[c];
                        diff * diff
                    })
                    .sum();
                logits[k] = -d / temperature;
            }
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for k in 0..kc {
                out.data_mut()[(n * kc + k) * plane + pix] = (logits[k] - m).exp() / z;
            }
        }
    }
    out
}
