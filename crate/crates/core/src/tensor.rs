//! Dense NCHW tensors in `f64` and the convolution kernels behind the
//! autograd graph.
//!
//! Every tensor is four dimensional. Scalars are `[1, 1, 1, 1]` and weight
//! kernels are stored as `[out, in, kh, kw]`.

use serde::{Deserialize, Serialize};

use crate::error::{precondition, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.n, self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self { shape, data: vec![0.0; shape.numel()] }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self { shape, data: vec![value; shape.numel()] }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return precondition(format!("tensor of shape {shape} needs {} values, got {}", shape.numel(), data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: f64) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// Reinterpret the same values under another shape with equal size.
    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return precondition(format!("cannot reshape {} into {shape}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self { shape: self.shape, data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copy of batch element `n` as a `[1, c, h, w]` tensor.
    pub fn batch_item(&self, n: usize) -> Tensor {
        let per = self.shape.c * self.shape.plane();
        Tensor {
            shape: Shape::new(1, self.shape.c, self.shape.h, self.shape.w),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stack `[1, c, h, w]` tensors (or batches) along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let Some(first) = items.first() else {
            return precondition("cannot stack an empty list of tensors");
        };
        let s = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(Tensor::len).sum());
        let mut n = 0;
        for t in items {
            if (t.shape.c, t.shape.h, t.shape.w) != (s.c, s.h, s.w) {
                return precondition(format!("cannot stack {} with {}", t.shape, s));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Ok(Tensor { shape: Shape::new(n, s.c, s.h, s.w), data })
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// How out-of-range taps of a padded convolution are resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PadMode {
    /// Mirror about the border pixel (excluding it), clamping when the
    /// extent is too small to mirror.
    Reflect,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl ConvGeom {
    /// Stride-1 convolution that keeps the spatial size.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self { kernel, stride: 1, dilation, pad: dilation * (kernel - 1) / 2, mode: PadMode::Reflect }
    }

    pub fn out_len(&self, len: usize) -> usize {
        let span = self.dilation * (self.kernel - 1) + 1;
        (len + 2 * self.pad - span) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source index along one axis for every (kernel tap, output index) pair.
    fn tap_map(&self, len: usize) -> Vec<Option<usize>> {
        let out = self.out_len(len);
        let mut map = Vec::with_capacity(self.kernel * out);
        for k in 0..self.kernel {
            for o in 0..out {
                let p = (o * self.stride + k * self.dilation) as isize - self.pad as isize;
                map.push(resolve_index(p, len, self.mode));
            }
        }
        map
    }
}

pub(crate) fn resolve_index(p: isize, len: usize, mode: PadMode) -> Option<usize> {
    let n = len as isize;
    if (0..n).contains(&p) {
        return Some(p as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => {
            let r = if p < 0 { -p } else { 2 * (n - 1) - p };
            Some(r.clamp(0, n - 1) as usize)
        }
    }
}

/// `c = a · b` (+ `c` when `accumulate`), all row-major contiguous.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked against the declared dimensions.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Im2Col {
    rows: Vec<Option<usize>>,
    cols: Vec<Option<usize>>,
    /// Per column tap: outputs `lo..hi` read source `ox + shift` contiguously.
    runs: Vec<(usize, usize, usize)>,
    out_h: usize,
    out_w: usize,
    kernel: usize,
}

impl Im2Col {
    fn new(geom: &ConvGeom, h: usize, w: usize) -> Self {
        let cols = geom.tap_map(w);
        let out_w = geom.out_len(w);
        let runs = (0..geom.kernel)
            .map(|kx| {
                let map = &cols[kx * out_w..(kx + 1) * out_w];
                let shift = (kx * geom.dilation) as isize - geom.pad as isize;
                let direct = |ox: usize| geom.stride == 1 && map[ox] == Some((ox as isize + shift) as usize);
                let lo = (0..out_w).find(|&ox| direct(ox)).unwrap_or(out_w);
                let hi = (lo..out_w).find(|&ox| !direct(ox)).unwrap_or(out_w);
                let src_lo = if lo < hi { (lo as isize + shift) as usize } else { 0 };
                (lo, hi, src_lo)
            })
            .collect();
        Self { rows: geom.tap_map(h), cols, runs, out_h: geom.out_len(h), out_w, kernel: geom.kernel }
    }

    /// Unfold one image `[c, h, w]` into `[c·k·k, out_h·out_w]`.
    fn unfold(&self, x: &[f64], c: usize, h: usize, w: usize, cols: &mut [f64]) {
        let k = self.kernel;
        let (oh, ow) = (self.out_h, self.out_w);
        let mut dst = 0;
        for ci in 0..c {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let cmap = &self.cols[kx * ow..(kx + 1) * ow];
                    let (lo, hi, src_lo) = self.runs[kx];
                    for oy in 0..oh {
                        let out = &mut cols[dst..dst + ow];
                        dst += ow;
                        let Some(r) = self.rows[ky * oh + oy] else {
                            out.fill(0.0);
                            continue;
                        };
                        let line = &plane[r * w..(r + 1) * w];
                        for ox in (0..lo).chain(hi..ow) {
                            out[ox] = cmap[ox].map_or(0.0, |cc| line[cc]);
                        }
                        out[lo..hi].copy_from_slice(&line[src_lo..src_lo + hi - lo]);
                    }
                }
            }
        }
    }

    /// Scatter-add `[c·k·k, out_h·out_w]` back onto `[c, h, w]`.
    fn fold(&self, cols: &[f64], c: usize, h: usize, w: usize, dx: &mut [f64]) {
        let k = self.kernel;
        let (oh, ow) = (self.out_h, self.out_w);
        let mut src = 0;
        for ci in 0..c {
            let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let cmap = &self.cols[kx * ow..(kx + 1) * ow];
                    let (lo, hi, src_lo) = self.runs[kx];
                    for oy in 0..oh {
                        let inp = &cols[src..src + ow];
                        src += ow;
                        let Some(r) = self.rows[ky * oh + oy] else { continue };
                        let line = &mut plane[r * w..(r + 1) * w];
                        for ox in (0..lo).chain(hi..ow) {
                            if let Some(cc) = cmap[ox] {
                                line[cc] += inp[ox];
                            }
                        }
                        for (d, v) in line[src_lo..src_lo + hi - lo].iter_mut().zip(&inp[lo..hi]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

fn check_conv(x: Shape, weight: Shape, bias: Option<&Tensor>, geom: &ConvGeom) -> Result<()> {
    if weight.c != x.c {
        return precondition(format!("conv expects {} input channels, got {}", weight.c, x.c));
    }
    if weight.h != geom.kernel || weight.w != geom.kernel {
        return precondition(format!("kernel {} does not match geometry k={}", weight, geom.kernel));
    }
    let span = geom.dilation * (geom.kernel - 1) + 1;
    if x.h + 2 * geom.pad < span || x.w + 2 * geom.pad < span {
        return precondition(format!("input {x} too small for kernel span {span}"));
    }
    if let Some(b) = bias {
        if b.len() != weight.n {
            return precondition(format!("bias has {} entries for {} filters", b.len(), weight.n));
        }
    }
    Ok(())
}

pub fn conv2d_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geom: &ConvGeom) -> Result<Tensor> {
    let xs = x.shape();
    let ws = weight.shape();
    check_conv(xs, ws, bias, geom)?;
    let unfold = Im2Col::new(geom, xs.h, xs.w);
    let (oh, ow) = (unfold.out_h, unfold.out_w);
    let kk = xs.c * geom.kernel * geom.kernel;
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
    let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; kk * oh * ow] };
    let in_per = xs.c * xs.plane();
    let out_per = ws.n * oh * ow;
    for n in 0..xs.n {
        let xn = &x.data[n * in_per..(n + 1) * in_per];
        let on = &mut out.data[n * out_per..(n + 1) * out_per];
        if let Some(b) = bias {
            for (co, chunk) in on.chunks_mut(oh * ow).enumerate() {
                chunk.fill(b.data[co]);
            }
        }
        let src: &[f64] = if geom.is_pointwise() {
            xn
        } else {
            unfold.unfold(xn, xs.c, xs.h, xs.w, &mut cols);
            &cols
        };
        gemm(ws.n, kk, oh * ow, &weight.data, false, src, false, on, bias.is_some());
    }
    Ok(out)
}

/// Gradients of a convolution with respect to its input, weight and bias.
pub struct ConvGrads {
    pub dx: Option<Tensor>,
    pub dw: Option<Tensor>,
    pub db: Option<Tensor>,
}

pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    geom: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads {
    let xs = x.shape();
    let ws = weight.shape();
    let unfold = Im2Col::new(geom, xs.h, xs.w);
    let (oh, ow) = (unfold.out_h, unfold.out_w);
    let kk = xs.c * geom.kernel * geom.kernel;
    let in_per = xs.c * xs.plane();
    let out_per = ws.n * oh * ow;
    let (need_x, need_w, need_b) = need;

    let mut dx = need_x.then(|| Tensor::zeros(xs));
    let mut dw = need_w.then(|| Tensor::zeros(ws));
    let mut db = need_b.then(|| Tensor::zeros(Shape::new(1, ws.n, 1, 1)));
    let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![0.0; kk * oh * ow] };
    let mut dcols = if geom.is_pointwise() || !need_x { Vec::new() } else { vec![0.0; kk * oh * ow] };

    for n in 0..xs.n {
        let g = &grad_out.data[n * out_per..(n + 1) * out_per];
        if let Some(db) = db.as_mut() {
            for (co, chunk) in g.chunks(oh * ow).enumerate() {
                db.data[co] += chunk.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xn = &x.data[n * in_per..(n + 1) * in_per];
            let src: &[f64] = if geom.is_pointwise() {
                xn
            } else {
                unfold.unfold(xn, xs.c, xs.h, xs.w, &mut cols);
                &cols
            };
            gemm(ws.n, oh * ow, kk, g, false, src, true, &mut dw.data, true);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx.data[n * in_per..(n + 1) * in_per];
            if geom.is_pointwise() {
                gemm(kk, ws.n, oh * ow, &weight.data, true, g, false, dxn, true);
            } else {
                gemm(kk, ws.n, oh * ow, &weight.data, true, g, false, &mut dcols, false);
                unfold.fold(&dcols, xs.c, xs.h, xs.w, dxn);
            }
        }
    }
    ConvGrads { dx, dw, db }
}
