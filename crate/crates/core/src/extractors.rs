//! Two-stream feature extractor.
//!
//! The EEG branch is three blocks of multi-scale convolutions (temporal,
//! depthwise-separable spatial, temporal again), each scale followed by
//! batch-norm, ELU and dropout. The EM branch is a single strided patch
//! convolution with leaky-ReLU and dropout. Both emit `[batch, maps, samples/8]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::nn::{
    avg_pool, avg_pool_backward, concat_maps, register_batch_norm, split_maps, Activation,
    DepthwiseSpatial, Mode, NadCache, NormActDrop, PatchConv, Pointwise, TemporalConv,
};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const DROPOUT_P: f64 = 0.2;
pub const SCALES: usize = 4;

/// Input and feature geometry. The published configuration is [`Dims::standard`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub eeg_channels: usize,
    pub em_channels: usize,
    /// Samples per trial (T).
    pub samples: usize,
    /// Feature maps per modality (c).
    pub maps: usize,
}

impl Dims {
    pub const fn standard() -> Self {
        Self {
            eeg_channels: 64,
            em_channels: 6,
            samples: 128,
            maps: 32,
        }
    }

    /// Feature width d = ⌊T/8⌋.
    pub fn features(&self) -> usize {
        self.samples / 8
    }

    /// Flattened per-modality feature length c·d.
    pub fn flat(&self) -> usize {
        self.maps * self.features()
    }

    /// Block 1 temporal kernel widths ⌊T/2^t⌋, t = 1..4 (at least 1).
    pub fn block1_kernels(&self) -> [usize; SCALES] {
        std::array::from_fn(|i| (self.samples >> (i + 1)).max(1))
    }

    /// Block 3 temporal kernel widths ⌊T/(2^t·4)⌋, t = 1..4 (at least 1).
    pub fn block3_kernels(&self) -> [usize; SCALES] {
        std::array::from_fn(|i| (self.samples >> (i + 3)).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.maps == 0 || !self.maps.is_multiple_of(SCALES) {
            return Err(Error::Config(format!("maps ({}) must be a positive multiple of 4", self.maps)));
        }
        if self.samples < 8 || !self.samples.is_multiple_of(8) {
            return Err(Error::Config(format!("samples ({}) must be a positive multiple of 8", self.samples)));
        }
        if self.eeg_channels == 0 || self.em_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Checks a `[batch, 1, channels, samples]` input against the expected geometry.
pub(crate) fn check_input(shape: [usize; 4], data_len: usize, channels: usize, samples: usize) -> Result<()> {
    check_dim("input maps", 1, shape[1])?;
    check_dim("channels", channels, shape[2])?;
    check_dim("samples", samples, shape[3])?;
    check_dim("batch", shape[0] * channels * samples, data_len).map_err(|_| Error::Shape {
        axis: "batch",
        expected: shape[0],
        got: data_len / (channels * samples).max(1),
    })
}

#[derive(Debug, Clone)]
struct TemporalScale {
    conv: TemporalConv,
    nad: NormActDrop,
}

#[derive(Debug, Clone)]
struct SpatialScale {
    depthwise: DepthwiseSpatial,
    pointwise: Pointwise,
    nad: NormActDrop,
}

#[derive(Debug, Clone)]
pub struct EegExtractor {
    dims: Dims,
    block1: Vec<TemporalScale>,
    block2: Vec<SpatialScale>,
    block3: Vec<TemporalScale>,
}

pub struct EegCache<S> {
    batch: usize,
    input: Vec<S>,
    b1: Vec<NadCache<S>>,
    b2_depthwise_out: Vec<Vec<S>>,
    b2: Vec<NadCache<S>>,
    pooled2: Vec<S>,
    b3: Vec<NadCache<S>>,
}

impl EegExtractor {
    pub fn new<S: Scalar, R: Rng>(
        dims: Dims,
        params: &mut ParamStore<S>,
        buffers: &mut ParamStore<S>,
        rng: &mut R,
    ) -> Self {
        let m1 = dims.maps / SCALES;
        let m2 = dims.maps / 2;
        let c = dims.eeg_channels;
        let mut block1 = Vec::new();
        let mut block2 = Vec::new();
        let mut block3 = Vec::new();
        for (s, &k) in dims.block1_kernels().iter().enumerate() {
            let p = format!("eeg.block1.scale{s}");
            let weight = params.add_fan_in_uniform(format!("{p}.conv.weight"), &[m1, 1, k], k, rng);
            block1.push(TemporalScale {
                conv: TemporalConv { weight, in_maps: 1, out_maps: m1, k },
                nad: NormActDrop {
                    norm: Some(register_batch_norm(params, buffers, &format!("{p}.bn"), m1)),
                    act: Activation::Elu,
                    p: DROPOUT_P,
                    maps: m1,
                    tag: 10 + s as u64,
                },
            });
        }
        for s in 0..SCALES {
            let p = format!("eeg.block2.scale{s}");
            let multiplier = m2 / m1;
            let dw = params.add_fan_in_uniform(format!("{p}.depthwise.weight"), &[m2, c], c, rng);
            let pw = params.add_fan_in_uniform(format!("{p}.pointwise.weight"), &[m2, m2], m2, rng);
            block2.push(SpatialScale {
                depthwise: DepthwiseSpatial { weight: dw, in_maps: m1, multiplier, channels: c },
                pointwise: Pointwise { weight: pw, in_maps: m2, out_maps: m2 },
                nad: NormActDrop {
                    norm: Some(register_batch_norm(params, buffers, &format!("{p}.bn"), m2)),
                    act: Activation::Elu,
                    p: DROPOUT_P,
                    maps: m2,
                    tag: 20 + s as u64,
                },
            });
        }
        let in3 = SCALES * m2;
        for (s, &k) in dims.block3_kernels().iter().enumerate() {
            let p = format!("eeg.block3.scale{s}");
            let weight = params.add_fan_in_uniform(format!("{p}.conv.weight"), &[m1, in3, k], in3 * k, rng);
            block3.push(TemporalScale {
                conv: TemporalConv { weight, in_maps: in3, out_maps: m1, k },
                nad: NormActDrop {
                    norm: Some(register_batch_norm(params, buffers, &format!("{p}.bn"), m1)),
                    act: Activation::Elu,
                    p: DROPOUT_P,
                    maps: m1,
                    tag: 30 + s as u64,
                },
            });
        }
        Self { dims, block1, block2, block3 }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    /// `[batch, 1, C_eeg, T]` → `[batch, maps, T/8]`.
    pub fn forward<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        buffers: &mut ParamStore<S>,
        input: &[S],
        shape: [usize; 4],
        mode: Mode,
    ) -> Result<(Vec<S>, EegCache<S>)> {
        let d = self.dims;
        check_input(shape, input.len(), d.eeg_channels, d.samples)?;
        let batch = shape[0];
        let (c, t) = (d.eeg_channels, d.samples);
        let m1 = d.maps / SCALES;
        let m2 = d.maps / 2;

        let mut b1 = Vec::with_capacity(SCALES);
        let mut b2 = Vec::with_capacity(SCALES);
        let mut b2_dw = Vec::with_capacity(SCALES);
        let mut a2 = Vec::with_capacity(SCALES);
        for (s1, s2) in self.block1.iter().zip(&self.block2) {
            let z = s1.conv.forward(params, input, batch, c, t);
            let (a1, cache1) = s1.nad.forward(params, buffers, z, batch, mode);
            b1.push(cache1);
            let u = s2.depthwise.forward(params, &a1, batch, t);
            drop(a1);
            let v = s2.pointwise.forward(params, &u, batch, t);
            b2_dw.push(u);
            let (out, cache2) = s2.nad.forward(params, buffers, v, batch, mode);
            b2.push(cache2);
            a2.push(out);
        }
        let cat2 = concat_maps(&a2, &[m2; SCALES], batch, t);
        drop(a2);
        let t4 = t / 4;
        let pooled2 = avg_pool(&cat2, batch * SCALES * m2, t, 4);

        let mut b3 = Vec::with_capacity(SCALES);
        let mut a3 = Vec::with_capacity(SCALES);
        for s3 in &self.block3 {
            let z = s3.conv.forward(params, &pooled2, batch, 1, t4);
            let (out, cache3) = s3.nad.forward(params, buffers, z, batch, mode);
            b3.push(cache3);
            a3.push(out);
        }
        let cat3 = concat_maps(&a3, &[m1; SCALES], batch, t4);
        let features = avg_pool(&cat3, batch * d.maps, t4, 2);
        let cache = EegCache {
            batch,
            input: input.to_vec(),
            b1,
            b2_depthwise_out: b2_dw,
            b2,
            pooled2,
            b3,
        };
        Ok((features, cache))
    }

    /// Backpropagates `dL/dfeatures`; returns `dL/dinput` when requested.
    pub fn backward<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        cache: &EegCache<S>,
        grad_features: &[S],
        grads: &mut ParamStore<S>,
        need_input_grad: bool,
    ) -> Option<Vec<S>> {
        let d = self.dims;
        let batch = cache.batch;
        let (c, t) = (d.eeg_channels, d.samples);
        let t4 = t / 4;
        let m1 = d.maps / SCALES;
        let m2 = d.maps / 2;

        let g_cat3 = avg_pool_backward(grad_features, batch * d.maps, t4, 2);
        let g3 = split_maps(&g_cat3, &[m1; SCALES], batch, t4);
        let mut g_pooled2 = vec![S::zero(); cache.pooled2.len()];
        for ((s3, c3), g) in self.block3.iter().zip(&cache.b3).zip(&g3) {
            let gz = s3.nad.backward(params, c3, g, grads);
            let gx = s3
                .conv
                .backward(params, &cache.pooled2, &gz, batch, 1, t4, grads, true)
                .expect("input gradient requested");
            for (a, b) in g_pooled2.iter_mut().zip(&gx) {
                *a += *b;
            }
        }
        let g_cat2 = avg_pool_backward(&g_pooled2, batch * SCALES * m2, t, 4);
        let g2 = split_maps(&g_cat2, &[m2; SCALES], batch, t);

        let mut g_input = need_input_grad.then(|| vec![S::zero(); cache.input.len()]);
        for (s, ((s1, s2), g)) in self.block1.iter().zip(&self.block2).zip(&g2).enumerate() {
            let gv = s2.nad.backward(params, &cache.b2[s], g, grads);
            let gu = s2
                .pointwise
                .backward(params, &cache.b2_depthwise_out[s], &gv, batch, t, grads);
            let a1 = s1.nad.recompute(params, &cache.b1[s]);
            let ga1 = s2.depthwise.backward(params, &a1, &gu, batch, t, grads);
            drop(a1);
            let gz1 = s1.nad.backward(params, &cache.b1[s], &ga1, grads);
            let gx = s1
                .conv
                .backward(params, &cache.input, &gz1, batch, c, t, grads, need_input_grad);
            if let (Some(acc), Some(gx)) = (g_input.as_mut(), gx) {
                for (a, b) in acc.iter_mut().zip(&gx) {
                    *a += *b;
                }
            }
        }
        g_input
    }
}

#[derive(Debug, Clone)]
pub struct EmExtractor {
    dims: Dims,
    conv: PatchConv,
    nad: NormActDrop,
}

pub struct EmCache<S> {
    batch: usize,
    input: Vec<S>,
    nad: NadCache<S>,
}

impl EmExtractor {
    pub fn new<S: Scalar, R: Rng>(dims: Dims, params: &mut ParamStore<S>, rng: &mut R) -> Self {
        let width = dims.samples / dims.features();
        let fan_in = dims.em_channels * width;
        let weight = params.add_fan_in_uniform("em.conv.weight", &[dims.maps, dims.em_channels, width], fan_in, rng);
        let bias = params.add_fan_in_uniform("em.conv.bias", &[dims.maps], fan_in, rng);
        Self {
            dims,
            conv: PatchConv {
                weight,
                bias,
                channels: dims.em_channels,
                width,
                out_maps: dims.maps,
            },
            nad: NormActDrop {
                norm: None,
                act: Activation::LeakyRelu,
                p: DROPOUT_P,
                maps: dims.maps,
                tag: 40,
            },
        }
    }

    /// `[batch, 1, C_em, T]` → `[batch, maps, T/8]`.
    pub fn forward<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        buffers: &mut ParamStore<S>,
        input: &[S],
        shape: [usize; 4],
        mode: Mode,
    ) -> Result<(Vec<S>, EmCache<S>)> {
        check_input(shape, input.len(), self.dims.em_channels, self.dims.samples)?;
        let batch = shape[0];
        let z = self.conv.forward(params, input, batch, self.dims.samples);
        let (out, nad) = self.nad.forward(params, buffers, z, batch, mode);
        Ok((out, EmCache { batch, input: input.to_vec(), nad }))
    }

    /// Pre-activation convolution output, for receptive-field inspection.
    pub fn pre_activation<S: Scalar>(&self, params: &ParamStore<S>, input: &[S], batch: usize) -> Vec<S> {
        self.conv.forward(params, input, batch, self.dims.samples)
    }

    pub fn backward<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        cache: &EmCache<S>,
        grad_features: &[S],
        grads: &mut ParamStore<S>,
        need_input_grad: bool,
    ) -> Option<Vec<S>> {
        let gz = self.nad.backward(params, &cache.nad, grad_features, grads);
        self.conv
            .backward(params, &cache.input, &gz, cache.batch, self.dims.samples, grads, need_input_grad)
    }
}
