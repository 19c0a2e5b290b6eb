//! Minimal f64 layers with hand-written backward passes.
//!
//! Parameters live in one flat `Vec<f64>` per network; each layer only holds
//! the ranges it owns. That keeps optimizer state, checkpoints and frozen-weight
//! comparisons trivial. Every backward pass is checked against central finite
//! differences in the tests below.

use std::ops::Range;

use crate::rng::Rng;

/// `c × h × w` feature map, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Map {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w, data: vec![0.0; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "map data length");
        Self { c, h, w, data }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }
}

/// Hands out consecutive parameter ranges while a network is being laid out.
#[derive(Debug, Default)]
pub struct ParamAlloc {
    len: usize,
}

impl ParamAlloc {
    pub fn take(&mut self, n: usize) -> Range<usize> {
        let r = self.len..self.len + n;
        self.len += n;
        r
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pad: usize,
    weight: Range<usize>,
    bias: Range<usize>,
}

impl Conv2d {
    /// Square kernel with "same" padding (`k / 2`).
    pub fn new(alloc: &mut ParamAlloc, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let weight = alloc.take(cout * cin * k * k);
        let bias = alloc.take(cout);
        Self { cin, cout, k, stride, pad: k / 2, weight, bias }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut Rng, gain: f64) {
        let fan_in = (self.cin * self.k * self.k) as f64;
        let bound = gain * (3.0 / fan_in).sqrt();
        for v in &mut params[self.weight.clone()] {
            *v = rng.range(-bound, bound);
        }
        params[self.bias.clone()].fill(0.0);
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.k) / self.stride + 1, (w + 2 * self.pad - self.k) / self.stride + 1)
    }

    #[inline]
    fn widx(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> usize {
        self.weight.start + ((oc * self.cin + ic) * self.k + ky) * self.k + kx
    }

    /// Output columns `ox` whose input column `ox*stride + kx - pad` is in bounds.
    #[inline]
    fn valid_range(&self, kx: usize, w_in: usize, w_out: usize) -> Range<usize> {
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(self.stride) };
        // largest ox with ox*s + kx - pad <= w_in - 1
        let lim = w_in + self.pad;
        let hi = if lim > kx { ((lim - kx - 1) / self.stride + 1).min(w_out) } else { 0 };
        lo..hi.max(lo)
    }

    pub fn forward(&self, p: &[f64], x: &Map) -> Map {
        debug_assert_eq!(x.c, self.cin);
        let (ho, wo) = self.out_dims(x.h, x.w);
        let mut y = Map::zeros(self.cout, ho, wo);
        let s = self.stride;
        for oc in 0..self.cout {
            let b = p[self.bias.start + oc];
            let yplane = &mut y.data[oc * ho * wo..(oc + 1) * ho * wo];
            yplane.fill(b);
            for ic in 0..self.cin {
                let xplane = x.plane(ic);
                for ky in 0..self.k {
                    let oys = self.valid_range(ky, x.h, ho);
                    for kx in 0..self.k {
                        let wv = p[self.widx(oc, ic, ky, kx)];
                        let oxs = self.valid_range(kx, x.w, wo);
                        for oy in oys.clone() {
                            let iy = oy * s + ky - self.pad;
                            let xrow = &xplane[iy * x.w..(iy + 1) * x.w];
                            let yrow = &mut yplane[oy * wo..(oy + 1) * wo];
                            for ox in oxs.clone() {
                                yrow[ox] += wv * xrow[ox * s + kx - self.pad];
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `gp`; returns the input gradient
    /// when `need_input` is set.
    pub fn backward(&self, p: &[f64], x: &Map, gy: &Map, gp: Option<&mut [f64]>, need_input: bool) -> Option<Map> {
        let (ho, wo) = (gy.h, gy.w);
        let s = self.stride;
        if let Some(gp) = gp {
            for oc in 0..self.cout {
                let gplane = gy.plane(oc);
                gp[self.bias.start + oc] += gplane.iter().sum::<f64>();
                for ic in 0..self.cin {
                    let xplane = x.plane(ic);
                    for ky in 0..self.k {
                        let oys = self.valid_range(ky, x.h, ho);
                        for kx in 0..self.k {
                            let oxs = self.valid_range(kx, x.w, wo);
                            let mut acc = 0.0;
                            for oy in oys.clone() {
                                let iy = oy * s + ky - self.pad;
                                let xrow = &xplane[iy * x.w..(iy + 1) * x.w];
                                let grow = &gplane[oy * wo..(oy + 1) * wo];
                                for ox in oxs.clone() {
                                    acc += grow[ox] * xrow[ox * s + kx - self.pad];
                                }
                            }
                            gp[self.widx(oc, ic, ky, kx)] += acc;
                        }
                    }
                }
            }
        }
        if !need_input {
            return None;
        }
        let mut gx = Map::zeros(self.cin, x.h, x.w);
        for oc in 0..self.cout {
            let gplane = gy.plane(oc);
            for ic in 0..self.cin {
                let (w_in, h_in) = (x.w, x.h);
                let gxplane = &mut gx.data[ic * h_in * w_in..(ic + 1) * h_in * w_in];
                for ky in 0..self.k {
                    let oys = self.valid_range(ky, h_in, ho);
                    for kx in 0..self.k {
                        let wv = p[self.widx(oc, ic, ky, kx)];
                        let oxs = self.valid_range(kx, w_in, wo);
                        for oy in oys.clone() {
                            let iy = oy * s + ky - self.pad;
                            let grow = &gplane[oy * wo..(oy + 1) * wo];
                            let gxrow = &mut gxplane[iy * w_in..(iy + 1) * w_in];
                            for ox in oxs.clone() {
                                gxrow[ox * s + kx - self.pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
        Some(gx)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub nin: usize,
    pub nout: usize,
    weight: Range<usize>,
    bias: Range<usize>,
}

impl Linear {
    pub fn new(alloc: &mut ParamAlloc, nin: usize, nout: usize) -> Self {
        let weight = alloc.take(nin * nout);
        let bias = alloc.take(nout);
        Self { nin, nout, weight, bias }
    }

    pub fn init(&self, params: &mut [f64], rng: &mut Rng, gain: f64) {
        let bound = gain * (3.0 / self.nin as f64).sqrt();
        for v in &mut params[self.weight.clone()] {
            *v = rng.range(-bound, bound);
        }
        params[self.bias.clone()].fill(0.0);
    }

    /// Zeroes the weights so the layer initially outputs only its bias.
    pub fn init_zero(&self, params: &mut [f64]) {
        params[self.weight.clone()].fill(0.0);
        params[self.bias.clone()].fill(0.0);
    }

    pub fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.nin);
        let w = &p[self.weight.clone()];
        (0..self.nout)
            .map(|o| {
                let row = &w[o * self.nin..(o + 1) * self.nin];
                p[self.bias.start + o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, p: &[f64], x: &[f64], gy: &[f64], gp: Option<&mut [f64]>, need_input: bool) -> Option<Vec<f64>> {
        if let Some(gp) = gp {
            for o in 0..self.nout {
                gp[self.bias.start + o] += gy[o];
                let base = self.weight.start + o * self.nin;
                for (i, xi) in x.iter().enumerate() {
                    gp[base + i] += gy[o] * xi;
                }
            }
        }
        need_input.then(|| {
            let w = &p[self.weight.clone()];
            let mut gx = vec![0.0; self.nin];
            for o in 0..self.nout {
                let row = &w[o * self.nin..(o + 1) * self.nin];
                for (g, wv) in gx.iter_mut().zip(row) {
                    *g += gy[o] * wv;
                }
            }
            gx
        })
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// Gradient of SiLU given its input `x` and the upstream gradient.
pub fn silu_backward(x: &[f64], gy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(gy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * (s + v * s * (1.0 - s))
        })
        .collect()
}

pub fn silu_map(x: &Map) -> Map {
    Map { c: x.c, h: x.h, w: x.w, data: silu(&x.data) }
}

pub fn silu_map_backward(x: &Map, gy: &Map) -> Map {
    Map { c: x.c, h: x.h, w: x.w, data: silu_backward(&x.data, &gy.data) }
}

/// Folds each `f × f` block into channels: `c×h×w → (c·f²)×(h/f)×(w/f)`.
pub fn space_to_depth(x: &Map, f: usize) -> Map {
    let (ho, wo) = (x.h / f, x.w / f);
    let mut y = Map::zeros(x.c * f * f, ho, wo);
    for c in 0..x.c {
        for dy in 0..f {
            for dx in 0..f {
                let oc = (c * f + dy) * f + dx;
                for oy in 0..ho {
                    for ox in 0..wo {
                        y.data[(oc * ho + oy) * wo + ox] = x.data[(c * x.h + oy * f + dy) * x.w + ox * f + dx];
                    }
                }
            }
        }
    }
    y
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Map, f: usize) -> Map {
    let c_out = x.c / (f * f);
    let (ho, wo) = (x.h * f, x.w * f);
    let mut y = Map::zeros(c_out, ho, wo);
    for c in 0..c_out {
        for dy in 0..f {
            for dx in 0..f {
                let ic = (c * f + dy) * f + dx;
                for iy in 0..x.h {
                    for ix in 0..x.w {
                        y.data[(c * ho + iy * f + dy) * wo + ix * f + dx] = x.data[(ic * x.h + iy) * x.w + ix];
                    }
                }
            }
        }
    }
    y
}

/// Sinusoidal features of a scalar position.
pub fn sinusoidal(pos: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(i as f64) * (10_000f64).ln() / half as f64).exp();
        out.push((pos * freq).sin());
    }
    for i in 0..half {
        let freq = (-(i as f64) * (10_000f64).ln() / half as f64).exp();
        out.push((pos * freq).cos());
    }
    out
}

/// Moment decay rates and epsilon for [`Adam`]; the learning rate is set per
/// training loop.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn build(&self, len: usize, lr: f64) -> Adam {
        Adam::new(len, lr, self.beta1, self.beta2, self.eps)
    }
}

/// First-order adaptive-moment optimizer over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

/// Rescales `grad` in place so its L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
    norm
}
