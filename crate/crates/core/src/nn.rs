//! Layer primitives with hand-written backward passes.
//!
//! Activations are flat row-major buffers with the batch as the outermost
//! axis. Every layer parallelizes across fixed-size sample chunks; parameter
//! gradients are reduced from per-chunk partials in chunk order.

use rand::Rng;

use crate::exec;
use crate::params::{ParamId, ParamStore};
use crate::scalar::{matmul, Scalar};

/// Samples per work unit. Fixed so reductions are independent of thread count.
const CHUNK: usize = 4;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LEAKY_SLOPE: f64 = 0.01;

/// How a forward pass treats batch-norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    /// Normalize with batch statistics instead of running statistics.
    pub batch_stats: bool,
    pub dropout: bool,
    /// Fold the batch statistics into the running averages.
    pub update_running: bool,
    /// Seed for dropout masks; combined with a layer tag and sample index.
    pub seed: u64,
}

impl Mode {
    pub fn train(seed: u64) -> Self {
        Self {
            batch_stats: true,
            dropout: true,
            update_running: true,
            seed,
        }
    }

    pub const EVAL: Mode = Mode {
        batch_stats: false,
        dropout: false,
        update_running: false,
        seed: 0,
    };

    /// Batch statistics without dropout or running-stat updates: a pure,
    /// differentiable function of the parameters.
    pub const BATCH_STATS_PURE: Mode = Mode {
        batch_stats: true,
        dropout: false,
        update_running: false,
        seed: 0,
    };
}

/// Sums per-chunk parameter-gradient partials into `grad`, in order.
fn reduce_into<S: Scalar>(grad: &mut [S], partials: &[Vec<S>]) {
    for p in partials {
        for (g, &v) in grad.iter_mut().zip(p) {
            *g += v;
        }
    }
}

fn chunk_count(batch: usize) -> usize {
    batch.div_ceil(CHUNK)
}

fn chunk_range(ci: usize, batch: usize) -> std::ops::Range<usize> {
    ci * CHUNK..((ci + 1) * CHUNK).min(batch)
}

/// Temporal convolution with "same" padding.
///
/// Per sample the input is `[in_maps, rows, len]` and the output is
/// `[out_maps, rows, len]`; the kernel spans all input maps and `k` time
/// steps and is shared across `rows`. Even `k` pads one extra step on the right.
#[derive(Debug, Clone)]
pub struct TemporalConv {
    pub weight: ParamId,
    pub in_maps: usize,
    pub out_maps: usize,
    pub k: usize,
}

impl TemporalConv {
    pub fn pad_left(&self) -> usize {
        (self.k - 1) / 2
    }

    fn im2col<S: Scalar>(&self, x: &[S], rows: usize, len: usize, col: &mut [S]) {
        let k = self.k;
        let pad = self.pad_left() as isize;
        let n = rows * len;
        for r in 0..self.in_maps {
            for j in 0..k {
                let dst = &mut col[(r * k + j) * n..(r * k + j + 1) * n];
                let shift = j as isize - pad;
                for c in 0..rows {
                    let src = &x[(r * rows + c) * len..(r * rows + c + 1) * len];
                    let out = &mut dst[c * len..(c + 1) * len];
                    fill_shifted(src, out, shift);
                }
            }
        }
    }

    fn col2im<S: Scalar>(&self, col: &[S], rows: usize, len: usize, dx: &mut [S]) {
        let k = self.k;
        let pad = self.pad_left() as isize;
        let n = rows * len;
        for r in 0..self.in_maps {
            for j in 0..k {
                let src = &col[(r * k + j) * n..(r * k + j + 1) * n];
                let shift = j as isize - pad;
                for c in 0..rows {
                    let g = &src[c * len..(c + 1) * len];
                    let d = &mut dx[(r * rows + c) * len..(r * rows + c + 1) * len];
                    add_unshifted(g, d, shift);
                }
            }
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        x: &[S],
        batch: usize,
        rows: usize,
        len: usize,
    ) -> Vec<S> {
        let in_sz = self.in_maps * rows * len;
        let out_sz = self.out_maps * rows * len;
        assert_eq!(x.len(), batch * in_sz);
        let w = params.get(self.weight);
        let ck = self.in_maps * self.k;
        let mut out = vec![S::zero(); batch * out_sz];
        exec::for_each_chunk_mut(&mut out, out_sz * CHUNK, |ci, out_chunk| {
            let mut col = vec![S::zero(); ck * rows * len];
            for (local, o) in out_chunk.chunks_mut(out_sz).enumerate() {
                let b = ci * CHUNK + local;
                self.im2col(&x[b * in_sz..(b + 1) * in_sz], rows, len, &mut col);
                matmul(self.out_maps, ck, rows * len, w, false, &col, false, o, false);
            }
        });
        out
    }

    /// Accumulates the weight gradient and returns the input gradient if requested.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        x: &[S],
        grad_out: &[S],
        batch: usize,
        rows: usize,
        len: usize,
        grads: &mut ParamStore<S>,
        need_input_grad: bool,
    ) -> Option<Vec<S>> {
        let in_sz = self.in_maps * rows * len;
        let out_sz = self.out_maps * rows * len;
        let w = params.get(self.weight);
        let ck = self.in_maps * self.k;
        let n = rows * len;
        let parts = exec::map_range(chunk_count(batch), |ci| {
            let mut col = vec![S::zero(); ck * n];
            let mut dw = vec![S::zero(); self.out_maps * ck];
            let range = chunk_range(ci, batch);
            let mut dx = if need_input_grad {
                vec![S::zero(); range.len() * in_sz]
            } else {
                Vec::new()
            };
            let mut dcol = if need_input_grad {
                vec![S::zero(); ck * n]
            } else {
                Vec::new()
            };
            for (local, b) in range.enumerate() {
                let g = &grad_out[b * out_sz..(b + 1) * out_sz];
                self.im2col(&x[b * in_sz..(b + 1) * in_sz], rows, len, &mut col);
                matmul(self.out_maps, n, ck, g, false, &col, true, &mut dw, true);
                if need_input_grad {
                    matmul(ck, self.out_maps, n, w, true, g, false, &mut dcol, false);
                    self.col2im(&dcol, rows, len, &mut dx[local * in_sz..(local + 1) * in_sz]);
                }
            }
            (dw, dx)
        });
        let (dws, dxs): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
        reduce_into(grads.get_mut(self.weight), &dws);
        need_input_grad.then(|| dxs.concat())
    }
}

/// `out[t] = src[t + shift]`, zero outside the source.
fn fill_shifted<S: Scalar>(src: &[S], out: &mut [S], shift: isize) {
    let len = src.len() as isize;
    let lo = (-shift).clamp(0, len) as usize;
    let hi = (len - shift).clamp(0, len) as usize;
    out[..lo].iter_mut().for_each(|v| *v = S::zero());
    out[hi.max(lo)..].iter_mut().for_each(|v| *v = S::zero());
    if hi > lo {
        let s0 = (lo as isize + shift) as usize;
        out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
    }
}

/// Adjoint of [`fill_shifted`]: `dst[t + shift] += g[t]`.
fn add_unshifted<S: Scalar>(g: &[S], dst: &mut [S], shift: isize) {
    let len = g.len() as isize;
    let lo = (-shift).clamp(0, len) as usize;
    let hi = (len - shift).clamp(0, len) as usize;
    if hi > lo {
        let s0 = (lo as isize + shift) as usize;
        for (d, &v) in dst[s0..s0 + (hi - lo)].iter_mut().zip(&g[lo..hi]) {
            *d += v;
        }
    }
}

/// Spatial collapse for one input map: `out[o, t] = Σ_c w[o, c] · x[m(o), c, t]`
/// with `o = m·multiplier + r`. No bias (a batch-norm follows).
#[derive(Debug, Clone)]
pub struct DepthwiseSpatial {
    pub weight: ParamId,
    pub in_maps: usize,
    pub multiplier: usize,
    pub channels: usize,
}

impl DepthwiseSpatial {
    pub fn out_maps(&self) -> usize {
        self.in_maps * self.multiplier
    }

    pub fn forward<S: Scalar>(&self, params: &ParamStore<S>, x: &[S], batch: usize, len: usize) -> Vec<S> {
        let in_sz = self.in_maps * self.channels * len;
        let out_sz = self.out_maps() * len;
        let w = params.get(self.weight);
        let c = self.channels;
        let mut out = vec![S::zero(); batch * out_sz];
        exec::for_each_chunk_mut(&mut out, out_sz * CHUNK, |ci, out_chunk| {
            for (local, o) in out_chunk.chunks_mut(out_sz).enumerate() {
                let b = ci * CHUNK + local;
                let xs = &x[b * in_sz..(b + 1) * in_sz];
                for m in 0..self.in_maps {
                    let wm = &w[m * self.multiplier * c..(m + 1) * self.multiplier * c];
                    let xm = &xs[m * c * len..(m + 1) * c * len];
                    let om = &mut o[m * self.multiplier * len..(m + 1) * self.multiplier * len];
                    matmul(self.multiplier, c, len, wm, false, xm, false, om, false);
                }
            }
        });
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        x: &[S],
        grad_out: &[S],
        batch: usize,
        len: usize,
        grads: &mut ParamStore<S>,
    ) -> Vec<S> {
        let in_sz = self.in_maps * self.channels * len;
        let out_sz = self.out_maps() * len;
        let w = params.get(self.weight);
        let c = self.channels;
        let mul = self.multiplier;
        let parts = exec::map_range(chunk_count(batch), |ci| {
            let range = chunk_range(ci, batch);
            let mut dw = vec![S::zero(); w.len()];
            let mut dx = vec![S::zero(); range.len() * in_sz];
            for (local, b) in range.enumerate() {
                let xs = &x[b * in_sz..(b + 1) * in_sz];
                let g = &grad_out[b * out_sz..(b + 1) * out_sz];
                let dxs = &mut dx[local * in_sz..(local + 1) * in_sz];
                for m in 0..self.in_maps {
                    let gm = &g[m * mul * len..(m + 1) * mul * len];
                    let xm = &xs[m * c * len..(m + 1) * c * len];
                    matmul(mul, len, c, gm, false, xm, true, &mut dw[m * mul * c..(m + 1) * mul * c], true);
                    let wm = &w[m * mul * c..(m + 1) * mul * c];
                    matmul(c, mul, len, wm, true, gm, false, &mut dxs[m * c * len..(m + 1) * c * len], false);
                }
            }
            (dw, dx)
        });
        let (dws, dxs): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
        reduce_into(grads.get_mut(self.weight), &dws);
        dxs.concat()
    }
}

/// 1×1 convolution mixing maps: `[in, len] -> [out, len]`, no bias.
#[derive(Debug, Clone)]
pub struct Pointwise {
    pub weight: ParamId,
    pub in_maps: usize,
    pub out_maps: usize,
}

impl Pointwise {
    pub fn forward<S: Scalar>(&self, params: &ParamStore<S>, x: &[S], batch: usize, len: usize) -> Vec<S> {
        let in_sz = self.in_maps * len;
        let out_sz = self.out_maps * len;
        let w = params.get(self.weight);
        let mut out = vec![S::zero(); batch * out_sz];
        exec::for_each_chunk_mut(&mut out, out_sz * CHUNK, |ci, out_chunk| {
            for (local, o) in out_chunk.chunks_mut(out_sz).enumerate() {
                let b = ci * CHUNK + local;
                matmul(self.out_maps, self.in_maps, len, w, false, &x[b * in_sz..(b + 1) * in_sz], false, o, false);
            }
        });
        out
    }

    pub fn backward<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        x: &[S],
        grad_out: &[S],
        batch: usize,
        len: usize,
        grads: &mut ParamStore<S>,
    ) -> Vec<S> {
        let in_sz = self.in_maps * len;
        let out_sz = self.out_maps * len;
        let w = params.get(self.weight);
        let parts = exec::map_range(chunk_count(batch), |ci| {
            let range = chunk_range(ci, batch);
            let mut dw = vec![S::zero(); w.len()];
            let mut dx = vec![S::zero(); range.len() * in_sz];
            for (local, b) in range.enumerate() {
                let g = &grad_out[b * out_sz..(b + 1) * out_sz];
                let xs = &x[b * in_sz..(b + 1) * in_sz];
                matmul(self.out_maps, len, self.in_maps, g, false, xs, true, &mut dw, true);
                matmul(self.in_maps, self.out_maps, len, w, true, g, false, &mut dx[local * in_sz..(local + 1) * in_sz], false);
            }
            (dw, dx)
        });
        let (dws, dxs): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
        reduce_into(grads.get_mut(self.weight), &dws);
        dxs.concat()
    }
}

/// Strided patch convolution used by the eye-movement branch:
/// `[channels, len] -> [out_maps, len / width]`, kernel `[channels × width]`, stride `width`.
#[derive(Debug, Clone)]
pub struct PatchConv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub width: usize,
    pub out_maps: usize,
}

impl PatchConv {
    pub fn steps(&self, len: usize) -> usize {
        len / self.width
    }

    fn im2col<S: Scalar>(&self, x: &[S], len: usize, col: &mut [S]) {
        let steps = self.steps(len);
        for ch in 0..self.channels {
            for u in 0..self.width {
                let row = &mut col[(ch * self.width + u) * steps..(ch * self.width + u + 1) * steps];
                for (j, v) in row.iter_mut().enumerate() {
                    *v = x[ch * len + j * self.width + u];
                }
            }
        }
    }

    pub fn forward<S: Scalar>(&self, params: &ParamStore<S>, x: &[S], batch: usize, len: usize) -> Vec<S> {
        let steps = self.steps(len);
        let in_sz = self.channels * len;
        let out_sz = self.out_maps * steps;
        let w = params.get(self.weight);
        let bias = params.get(self.bias);
        let ck = self.channels * self.width;
        let mut out = vec![S::zero(); batch * out_sz];
        exec::for_each_chunk_mut(&mut out, out_sz * CHUNK, |ci, out_chunk| {
            let mut col = vec![S::zero(); ck * steps];
            for (local, o) in out_chunk.chunks_mut(out_sz).enumerate() {
                let b = ci * CHUNK + local;
                self.im2col(&x[b * in_sz..(b + 1) * in_sz], len, &mut col);
                for (f, row) in o.chunks_mut(steps).enumerate() {
                    row.iter_mut().for_each(|v| *v = bias[f]);
                }
                matmul(self.out_maps, ck, steps, w, false, &col, false, o, true);
            }
        });
        out
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        x: &[S],
        grad_out: &[S],
        batch: usize,
        len: usize,
        grads: &mut ParamStore<S>,
        need_input_grad: bool,
    ) -> Option<Vec<S>> {
        let steps = self.steps(len);
        let in_sz = self.channels * len;
        let out_sz = self.out_maps * steps;
        let w = params.get(self.weight);
        let ck = self.channels * self.width;
        let parts = exec::map_range(chunk_count(batch), |ci| {
            let range = chunk_range(ci, batch);
            let mut col = vec![S::zero(); ck * steps];
            let mut dcol = vec![S::zero(); ck * steps];
            let mut dw = vec![S::zero(); w.len()];
            let mut db = vec![S::zero(); self.out_maps];
            let mut dx = if need_input_grad {
                vec![S::zero(); range.len() * in_sz]
            } else {
                Vec::new()
            };
            for (local, b) in range.enumerate() {
                let g = &grad_out[b * out_sz..(b + 1) * out_sz];
                self.im2col(&x[b * in_sz..(b + 1) * in_sz], len, &mut col);
                matmul(self.out_maps, steps, ck, g, false, &col, true, &mut dw, true);
                for (f, row) in g.chunks(steps).enumerate() {
                    db[f] += row.iter().copied().sum::<S>();
                }
                if need_input_grad {
                    matmul(ck, self.out_maps, steps, w, true, g, false, &mut dcol, false);
                    let dxs = &mut dx[local * in_sz..(local + 1) * in_sz];
                    for ch in 0..self.channels {
                        for u in 0..self.width {
                            let row = &dcol[(ch * self.width + u) * steps..(ch * self.width + u + 1) * steps];
                            for (j, &v) in row.iter().enumerate() {
                                dxs[ch * len + j * self.width + u] += v;
                            }
                        }
                    }
                }
            }
            (dw, db, dx)
        });
        let mut dws = Vec::with_capacity(parts.len());
        let mut dbs = Vec::with_capacity(parts.len());
        let mut dxs = Vec::with_capacity(parts.len());
        for (a, b, c) in parts {
            dws.push(a);
            dbs.push(b);
            dxs.push(c);
        }
        reduce_into(grads.get_mut(self.weight), &dws);
        reduce_into(grads.get_mut(self.bias), &dbs);
        need_input_grad.then(|| dxs.concat())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    LeakyRelu,
}

impl Activation {
    fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Elu => {
                if z > S::zero() {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Activation::LeakyRelu => {
                if z > S::zero() {
                    z
                } else {
                    z * S::lit(LEAKY_SLOPE)
                }
            }
        }
    }

    fn derivative<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Elu => {
                if z > S::zero() {
                    S::one()
                } else {
                    z.exp()
                }
            }
            Activation::LeakyRelu => {
                if z > S::zero() {
                    S::one()
                } else {
                    S::lit(LEAKY_SLOPE)
                }
            }
        }
    }
}

/// Deterministic dropout keep-mask for one sample of one layer.
fn dropout_mask(len: usize, p: f64, seed: u64, tag: u64, sample: usize) -> Vec<bool> {
    let mut state = exec::mix_seed(&[seed, tag, sample as u64]);
    let threshold = (p * 4_294_967_296.0).round() as u64;
    let mut out = Vec::with_capacity(len + 1);
    while out.len() < len {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        out.push(z & 0xFFFF_FFFF >= threshold);
        out.push(z >> 32 >= threshold);
    }
    out.truncate(len);
    out
}

/// `Σ f(x)` over eight fixed lanes, so the loop vectorizes while the
/// summation order stays deterministic.
fn lane_sum<S: Scalar>(x: &[S], f: impl Fn(S) -> S) -> S {
    let mut acc = [S::zero(); 8];
    let chunks = x.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..8 {
            acc[l] += f(c[l]);
        }
    }
    let mut total = acc.iter().copied().sum::<S>();
    for &v in tail {
        total += f(v);
    }
    total
}

/// Per-map `(a, c)` with `gamma·(z − mean)·inv_std + beta = a·z + c`.
fn affine_coeffs<S: Scalar>(gamma: &[S], beta: &[S], mean: &[S], inv_std: &[S]) -> Vec<(S, S)> {
    (0..gamma.len())
        .map(|f| {
            let a = gamma[f] * inv_std[f];
            (a, beta[f] - mean[f] * a)
        })
        .collect()
}

/// Optional batch-norm over `[batch, maps, n]`, then an activation, then dropout.
#[derive(Debug, Clone)]
pub struct NormActDrop {
    pub norm: Option<BatchNormIds>,
    pub act: Activation,
    pub p: f64,
    pub maps: usize,
    /// Distinguishes this layer's dropout stream from others in the same step.
    pub tag: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// What [`NormActDrop::backward`] needs from the forward pass.
#[derive(Debug, Clone)]
pub struct NadCache<S> {
    z: Vec<S>,
    mean: Vec<S>,
    inv_std: Vec<S>,
    mask: Option<Vec<bool>>,
    batch_stats: bool,
    batch: usize,
    n: usize,
}

impl NormActDrop {
    pub fn forward<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        buffers: &mut ParamStore<S>,
        z: Vec<S>,
        batch: usize,
        mode: Mode,
    ) -> (Vec<S>, NadCache<S>) {
        let n = z.len() / (batch * self.maps);
        assert_eq!(z.len(), batch * self.maps * n);
        let eps = S::lit(BN_EPS);
        let (mean, inv_std) = match self.norm {
            None => (vec![S::zero(); self.maps], vec![S::one(); self.maps]),
            Some(ids) if mode.batch_stats => {
                let count = S::lit((batch * n) as f64);
                let stats = exec::map_range(self.maps, |f| {
                    let row = |b: usize| &z[(b * self.maps + f) * n..(b * self.maps + f + 1) * n];
                    let sum: S = (0..batch).map(|b| lane_sum(row(b), |v| v)).sum();
                    let mean = sum / count;
                    let ss: S = (0..batch).map(|b| lane_sum(row(b), |v| (v - mean) * (v - mean))).sum();
                    (mean, ss / count)
                });
                if mode.update_running {
                    let m = S::lit(BN_MOMENTUM);
                    let unbias = if batch * n > 1 {
                        S::lit((batch * n) as f64 / (batch * n - 1) as f64)
                    } else {
                        S::one()
                    };
                    for (f, &(mu, var)) in stats.iter().enumerate() {
                        let rm = buffers.get_mut(ids.running_mean);
                        rm[f] = (S::one() - m) * rm[f] + m * mu;
                        let rv = buffers.get_mut(ids.running_var);
                        rv[f] = (S::one() - m) * rv[f] + m * var * unbias;
                    }
                }
                (
                    stats.iter().map(|s| s.0).collect(),
                    stats.iter().map(|s| S::one() / (s.1 + eps).sqrt()).collect(),
                )
            }
            Some(ids) => (
                buffers.get(ids.running_mean).to_vec(),
                buffers
                    .get(ids.running_var)
                    .iter()
                    .map(|&v| S::one() / (v + eps).sqrt())
                    .collect(),
            ),
        };
        let (gamma, beta): (Vec<S>, Vec<S>) = match self.norm {
            Some(ids) => (params.get(ids.gamma).to_vec(), params.get(ids.beta).to_vec()),
            None => (vec![S::one(); self.maps], vec![S::zero(); self.maps]),
        };
        let sample_sz = self.maps * n;
        let mask = mode.dropout && self.p > 0.0;
        let keep_scale = S::lit(1.0 / (1.0 - self.p));
        let affine = affine_coeffs(&gamma, &beta, &mean, &inv_std);
        let mut out = vec![S::zero(); z.len()];
        let mut masks: Vec<Vec<bool>> = vec![Vec::new(); if mask { batch } else { 0 }];
        let act = self.act;
        if mask {
            exec::for_each_chunk_pair_mut(&mut out, sample_sz, &mut masks, 1, |b, o, m| {
                let keep = dropout_mask(sample_sz, self.p, mode.seed, self.tag, b);
                let zb = &z[b * sample_sz..(b + 1) * sample_sz];
                for (f, &(a, c)) in affine.iter().enumerate() {
                    let r = f * n..(f + 1) * n;
                    for ((o, &zv), &k) in o[r.clone()].iter_mut().zip(&zb[r.clone()]).zip(&keep[r]) {
                        *o = if k { act.apply(zv * a + c) * keep_scale } else { S::zero() };
                    }
                }
                m[0] = keep;
            });
        } else {
            exec::for_each_chunk_mut(&mut out, sample_sz, |b, o| {
                let zb = &z[b * sample_sz..(b + 1) * sample_sz];
                for (f, &(a, c)) in affine.iter().enumerate() {
                    let r = f * n..(f + 1) * n;
                    for (o, &zv) in o[r.clone()].iter_mut().zip(&zb[r]) {
                        *o = act.apply(zv * a + c);
                    }
                }
            });
        }
        let cache = NadCache {
            z,
            mean,
            inv_std,
            mask: mask.then(|| masks.concat()),
            batch_stats: mode.batch_stats && self.norm.is_some(),
            batch,
            n,
        };
        (out, cache)
    }

    /// Rebuilds the forward output from the cache (bit-identical).
    pub fn recompute<S: Scalar>(&self, params: &ParamStore<S>, cache: &NadCache<S>) -> Vec<S> {
        let n = cache.n;
        let (gamma, beta): (Vec<S>, Vec<S>) = match self.norm {
            Some(ids) => (params.get(ids.gamma).to_vec(), params.get(ids.beta).to_vec()),
            None => (vec![S::one(); self.maps], vec![S::zero(); self.maps]),
        };
        let keep_scale = S::lit(1.0 / (1.0 - self.p));
        let sample_sz = self.maps * n;
        let affine = affine_coeffs(&gamma, &beta, &cache.mean, &cache.inv_std);
        let mut out = vec![S::zero(); cache.z.len()];
        exec::for_each_chunk_mut(&mut out, sample_sz, |b, o| {
            for (f, &(a, c)) in affine.iter().enumerate() {
                for i in 0..n {
                    let idx = f * n + i;
                    let v = self.act.apply(cache.z[b * sample_sz + idx] * a + c);
                    o[idx] = match &cache.mask {
                        Some(m) if m[b * sample_sz + idx] => v * keep_scale,
                        Some(_) => S::zero(),
                        None => v,
                    };
                }
            }
        });
        out
    }

    /// Returns `dL/dz` and accumulates gamma/beta gradients.
    pub fn backward<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        cache: &NadCache<S>,
        grad_out: &[S],
        grads: &mut ParamStore<S>,
    ) -> Vec<S> {
        let (batch, n) = (cache.batch, cache.n);
        let maps = self.maps;
        let (gamma, beta): (Vec<S>, Vec<S>) = match self.norm {
            Some(ids) => (params.get(ids.gamma).to_vec(), params.get(ids.beta).to_vec()),
            None => (vec![S::one(); maps], vec![S::zero(); maps]),
        };
        let keep_scale = S::lit(1.0 / (1.0 - self.p));
        // gradient w.r.t. the normalized-affine output (pre-activation)
        let mut g_pre = vec![S::zero(); cache.z.len()];
        let sample_sz = maps * n;
        let affine = affine_coeffs(&gamma, &beta, &cache.mean, &cache.inv_std);
        let act = self.act;
        exec::for_each_chunk_mut(&mut g_pre, sample_sz, |b, gp| {
            let base = b * sample_sz;
            for (f, &(a, c)) in affine.iter().enumerate() {
                let r = f * n..(f + 1) * n;
                let zr = &cache.z[base + r.start..base + r.end];
                let gr = &grad_out[base + r.start..base + r.end];
                match &cache.mask {
                    Some(mask) => {
                        let mr = &mask[base + r.start..base + r.end];
                        for (((o, &zv), &g), &k) in gp[r].iter_mut().zip(zr).zip(gr).zip(mr) {
                            *o = if k { g * keep_scale * act.derivative(zv * a + c) } else { S::zero() };
                        }
                    }
                    None => {
                        for ((o, &zv), &g) in gp[r].iter_mut().zip(zr).zip(gr) {
                            *o = g * act.derivative(zv * a + c);
                        }
                    }
                }
            }
        });
        let Some(ids) = self.norm else {
            return g_pre;
        };
        // per-map sums of g and g·x̂
        let sums = exec::map_range(maps, |f| {
            let mut sg = S::zero();
            let mut sgx = S::zero();
            for b in 0..batch {
                let base = (b * maps + f) * n;
                for i in 0..n {
                    let zn = (cache.z[base + i] - cache.mean[f]) * cache.inv_std[f];
                    sg += g_pre[base + i];
                    sgx += g_pre[base + i] * zn;
                }
            }
            (sg, sgx)
        });
        {
            let dgamma = grads.get_mut(ids.gamma);
            for f in 0..maps {
                dgamma[f] += sums[f].1;
            }
        }
        {
            let dbeta = grads.get_mut(ids.beta);
            for f in 0..maps {
                dbeta[f] += sums[f].0;
            }
        }
        let count = S::lit((batch * n) as f64);
        let mut dz = g_pre;
        exec::for_each_chunk_mut(&mut dz, sample_sz, |b, d| {
            for f in 0..maps {
                let scale = gamma[f] * cache.inv_std[f];
                let (mg, mgx) = (sums[f].0 / count, sums[f].1 / count);
                for i in 0..n {
                    let idx = f * n + i;
                    if cache.batch_stats {
                        let zn = (cache.z[b * sample_sz + idx] - cache.mean[f]) * cache.inv_std[f];
                        d[idx] = scale * (d[idx] - mg - zn * mgx);
                    } else {
                        d[idx] *= scale;
                    }
                }
            }
        });
        dz
    }
}

/// Registers gamma/beta parameters and running-stat buffers for a batch-norm.
pub fn register_batch_norm<S: Scalar>(
    params: &mut ParamStore<S>,
    buffers: &mut ParamStore<S>,
    prefix: &str,
    maps: usize,
) -> BatchNormIds {
    BatchNormIds {
        gamma: params.add_filled(format!("{prefix}.gamma"), &[maps], S::one()),
        beta: params.add_filled(format!("{prefix}.beta"), &[maps], S::zero()),
        running_mean: buffers.add_filled(format!("{prefix}.running_mean"), &[maps], S::zero()),
        running_var: buffers.add_filled(format!("{prefix}.running_var"), &[maps], S::one()),
    }
}

/// Average pooling along the last axis with window = stride = `factor`.
pub fn avg_pool<S: Scalar>(x: &[S], rows: usize, len: usize, factor: usize) -> Vec<S> {
    let out_len = len / factor;
    let inv = S::lit(1.0 / factor as f64);
    let mut out = vec![S::zero(); rows * out_len];
    for r in 0..rows {
        for t in 0..out_len {
            let s: S = x[r * len + t * factor..r * len + (t + 1) * factor].iter().copied().sum();
            out[r * out_len + t] = s * inv;
        }
    }
    out
}

pub fn avg_pool_backward<S: Scalar>(g: &[S], rows: usize, len: usize, factor: usize) -> Vec<S> {
    let out_len = len / factor;
    let inv = S::lit(1.0 / factor as f64);
    let mut dx = vec![S::zero(); rows * len];
    for r in 0..rows {
        for t in 0..out_len {
            let v = g[r * out_len + t] * inv;
            dx[r * len + t * factor..r * len + (t + 1) * factor]
                .iter_mut()
                .for_each(|d| *d = v);
        }
    }
    dx
}

/// Concatenates per-sample blocks `[maps_i, n]` into `[Σ maps_i, n]`.
pub fn concat_maps<S: Scalar>(parts: &[Vec<S>], maps: &[usize], batch: usize, n: usize) -> Vec<S> {
    let total: usize = maps.iter().sum();
    let mut out = Vec::with_capacity(batch * total * n);
    for b in 0..batch {
        for (p, &m) in parts.iter().zip(maps) {
            out.extend_from_slice(&p[b * m * n..(b + 1) * m * n]);
        }
    }
    out
}

pub fn split_maps<S: Scalar>(x: &[S], maps: &[usize], batch: usize, n: usize) -> Vec<Vec<S>> {
    let total: usize = maps.iter().sum();
    let mut parts: Vec<Vec<S>> = maps.iter().map(|&m| Vec::with_capacity(batch * m * n)).collect();
    for b in 0..batch {
        let mut off = b * total * n;
        for (p, &m) in parts.iter_mut().zip(maps) {
            p.extend_from_slice(&x[off..off + m * n]);
            off += m * n;
        }
    }
    parts
}

/// Fully connected layer: `y[b] = W x[b] + bias`, `W` is `[out × in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn register<S: Scalar, R: Rng>(
        params: &mut ParamStore<S>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let weight = params.add_fan_in_uniform(format!("{prefix}.weight"), &[out_dim, in_dim], in_dim, rng);
        let bias = params.add_fan_in_uniform(format!("{prefix}.bias"), &[out_dim], in_dim, rng);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<S: Scalar>(&self, params: &ParamStore<S>, x: &[S], batch: usize) -> Vec<S> {
        let mut y = vec![S::zero(); batch * self.out_dim];
        let bias = params.get(self.bias);
        for row in y.chunks_mut(self.out_dim) {
            row.copy_from_slice(bias);
        }
        matmul(batch, self.in_dim, self.out_dim, x, false, params.get(self.weight), true, &mut y, true);
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        x: &[S],
        grad_out: &[S],
        batch: usize,
        grads: &mut ParamStore<S>,
    ) -> Vec<S> {
        matmul(self.out_dim, batch, self.in_dim, grad_out, true, x, false, grads.get_mut(self.weight), true);
        {
            let db = grads.get_mut(self.bias);
            for row in grad_out.chunks(self.out_dim) {
                for (d, &g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
        }
        let mut dx = vec![S::zero(); batch * self.in_dim];
        matmul(batch, self.out_dim, self.in_dim, grad_out, false, params.get(self.weight), false, &mut dx, false);
        dx
    }
}
