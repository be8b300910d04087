//! The assembled network: extractors, cross-attention, reweighting and heads,
//! with a full backward pass to parameters and optionally to the inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::extractors::{Dims, EegCache, EegExtractor, EmCache, EmExtractor};
use crate::fusion::{
    concat_rows, contribution_loss, contribution_loss_grad, contribution_ratios, ContributionRecord, Dcm,
    DcmCache, Direction, ReweightCache, Reweighter,
};
use crate::heads::{distillation_grad, distillation_loss, final_probs, final_probs_backward, Heads};
use crate::nn::{Linear, Mode};
use crate::objective::{binary_labels, cross_entropy, cross_entropy_grad, Ablation, LossTerms, LossWeights, Terms};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{softmax, softmax_backward, softmax_into, Scalar};

/// EM channel order of every trial set.
pub const EM_CHANNEL_NAMES: [&str; 6] = [
    "pupil_left",
    "pupil_right",
    "gaze_x_left",
    "gaze_x_right",
    "gaze_y_left",
    "gaze_y_right",
];

/// Which eye-movement components feed the EM branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmComponents {
    pub pupil: bool,
    pub gaze_x: bool,
    pub gaze_y: bool,
}

impl Default for EmComponents {
    fn default() -> Self {
        Self::ALL
    }
}

impl EmComponents {
    pub const ALL: EmComponents = EmComponents {
        pupil: true,
        gaze_x: true,
        gaze_y: true,
    };

    /// Parses `all` or a `+`-separated list of `pupil`, `x`, `y`.
    pub fn parse(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            return Ok(Self::ALL);
        }
        let mut c = EmComponents {
            pupil: false,
            gaze_x: false,
            gaze_y: false,
        };
        for part in s.split('+').map(str::trim) {
            match part {
                "pupil" => c.pupil = true,
                "x" => c.gaze_x = true,
                "y" => c.gaze_y = true,
                other => return Err(Error::Config(format!("unknown EM component '{other}'"))),
            }
        }
        Ok(c)
    }

    /// Rows of the six-channel EM layout that are kept.
    pub fn rows(&self) -> Vec<usize> {
        let mut rows = Vec::new();
        for (on, pair) in [(self.pupil, [0, 1]), (self.gaze_x, [2, 3]), (self.gaze_y, [4, 5])] {
            if on {
                rows.extend(pair);
            }
        }
        rows
    }

    pub fn label(&self) -> String {
        if *self == Self::ALL {
            return "all".into();
        }
        let mut parts = Vec::new();
        if self.pupil {
            parts.push("pupil");
        }
        if self.gaze_x {
            parts.push("x");
        }
        if self.gaze_y {
            parts.push("y");
        }
        parts.join("+")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Two-stream fusion network.
    #[default]
    Fusion,
    /// EEG extractor and a single linear classifier.
    EegBaseline,
}

/// Everything that determines the parameter layout and the forward graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub dims: Dims,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub direction: Direction,
    #[serde(default)]
    pub em_components: EmComponents,
}

impl Architecture {
    pub fn standard() -> Self {
        Self {
            dims: Dims::standard(),
            variant: Variant::Fusion,
            ablation: Ablation::FULL,
            direction: Direction::Dual,
            em_components: EmComponents::ALL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let rows = self.em_components.rows();
        if rows.is_empty() {
            return Err(Error::Config("at least one EM component is required".into()));
        }
        if self.em_components != EmComponents::ALL && self.dims.em_channels != EM_CHANNEL_NAMES.len() {
            return Err(Error::Config("EM component selection requires the six-channel EM layout".into()));
        }
        Ok(())
    }

    /// Objective terms available under this architecture.
    pub fn terms(&self) -> Terms {
        match self.variant {
            Variant::Fusion => self.ablation.terms(),
            Variant::EegBaseline => Terms {
                ce: true,
                ..Terms::NONE
            },
        }
    }

    fn em_rows(&self) -> Vec<usize> {
        if self.em_components == EmComponents::ALL {
            (0..self.dims.em_channels).collect()
        } else {
            self.em_components.rows()
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct InputNorm {
    eeg_mean: ParamId,
    eeg_std: ParamId,
    em_mean: ParamId,
    em_std: ParamId,
}

#[derive(Debug, Clone)]
enum Branches {
    Fusion {
        em: EmExtractor,
        dcm: Option<Dcm>,
        reweight: Option<Reweighter>,
        heads: Heads,
    },
    Baseline {
        head: Linear,
    },
}

/// The network graph. Parameters and buffers live in separate stores.
#[derive(Debug, Clone)]
pub struct Network {
    arch: Architecture,
    em_rows: Vec<usize>,
    norm: InputNorm,
    eeg: EegExtractor,
    branches: Branches,
}

/// One forward pass worth of outputs. Absent heads leave their buffers empty.
#[derive(Debug, Clone)]
pub struct Outputs<S> {
    pub batch: usize,
    pub tri_logits: Vec<S>,
    pub bin_logits: Vec<S>,
    pub intra_eeg: Vec<S>,
    pub intra_em: Vec<S>,
    /// `[batch × 3]` probabilities used for prediction.
    pub final_probs: Vec<S>,
    /// Predicted fusion weights `[batch × 2]`.
    pub phi: Vec<S>,
}

impl<S: Scalar> Outputs<S> {
    pub fn predictions(&self) -> Vec<u8> {
        self.final_probs
            .chunks(3)
            .map(|p| {
                let mut best = 0;
                for k in 1..3 {
                    if p[k] > p[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect()
    }
}

pub struct ForwardCache<S> {
    batch: usize,
    eeg: EegCache<S>,
    em: Option<EmCache<S>>,
    dcm: Option<DcmCache<S>>,
    x_eeg: Vec<S>,
    x_em: Vec<S>,
    reweight: Option<ReweightCache<S>>,
    x_f: Vec<S>,
}

impl<S: Scalar> ForwardCache<S> {
    /// Flattened per-modality features after cross-attention, `[batch × c·d]`.
    pub fn modality_features(&self) -> (&[S], &[S]) {
        (&self.x_eeg, &self.x_em)
    }

    /// The classifier input `[batch × 2·c·d]` (EEG features alone for the baseline).
    pub fn fused(&self) -> &[S] {
        &self.x_f
    }

    pub fn dcm(&self) -> Option<&DcmCache<S>> {
        self.dcm.as_ref()
    }
}

/// Upstream gradients at the network outputs.
#[derive(Debug, Clone)]
pub struct OutputGrads<S> {
    pub tri: Vec<S>,
    pub bin: Vec<S>,
    pub intra_eeg: Vec<S>,
    pub intra_em: Vec<S>,
    pub phi: Vec<S>,
}

/// Loss values plus the contribution bookkeeping of one batch.
#[derive(Debug, Clone)]
pub struct StepOutcome<S> {
    pub terms: LossTerms,
    pub ratios: Option<ContributionRecord<S>>,
    pub outputs: Outputs<S>,
}

fn standardize<S: Scalar>(x: &[S], rows: usize, len: usize, mean: &[S], std: &[S]) -> Vec<S> {
    x.chunks(len)
        .enumerate()
        .flat_map(|(i, row)| {
            let r = i % rows;
            let (m, s) = (mean[r], std[r]);
            row.iter().map(move |&v| (v - m) / s)
        })
        .collect()
}

fn zeros<S: Scalar>(n: usize) -> Vec<S> {
    vec![S::zero(); n]
}

fn add_into<S: Scalar>(acc: &mut [S], v: &[S]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

impl Network {
    /// Builds the graph, registering parameters in a fixed order from `seed`.
    pub fn new<S: Scalar>(arch: Architecture, seed: u64) -> Result<(Self, ParamStore<S>, ParamStore<S>)> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let dims = arch.dims;
        let em_rows = arch.em_rows();
        let norm = InputNorm {
            eeg_mean: buffers.add_filled("input.eeg_mean", &[dims.eeg_channels], S::zero()),
            eeg_std: buffers.add_filled("input.eeg_std", &[dims.eeg_channels], S::one()),
            em_mean: buffers.add_filled("input.em_mean", &[dims.em_channels], S::zero()),
            em_std: buffers.add_filled("input.em_std", &[dims.em_channels], S::one()),
        };
        let eeg = EegExtractor::new(dims, &mut params, &mut buffers, &mut rng);
        let flat = dims.flat();
        let branches = match arch.variant {
            Variant::Fusion => {
                let em_dims = Dims {
                    em_channels: em_rows.len(),
                    ..dims
                };
                let em = EmExtractor::new(em_dims, &mut params, &mut rng);
                let dcm = (!arch.ablation.no_dcm).then(|| Dcm::new(dims.maps, dims.features(), &mut params, &mut rng));
                let reweight = (!arch.ablation.no_cgrm).then(|| Reweighter::new(flat, &mut params, &mut rng));
                let heads = Heads::new(flat, &mut params, &mut rng);
                Branches::Fusion {
                    em,
                    dcm,
                    reweight,
                    heads,
                }
            }
            Variant::EegBaseline => Branches::Baseline {
                head: Linear::register(&mut params, "baseline.head", flat, 3, &mut rng),
            },
        };
        Ok((
            Self {
                arch,
                em_rows,
                norm,
                eeg,
                branches,
            },
            params,
            buffers,
        ))
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn dims(&self) -> Dims {
        self.arch.dims
    }

    pub fn eeg_extractor(&self) -> &EegExtractor {
        &self.eeg
    }

    pub fn em_extractor(&self) -> Option<&EmExtractor> {
        match &self.branches {
            Branches::Fusion { em, .. } => Some(em),
            Branches::Baseline { .. } => None,
        }
    }

    pub fn heads(&self) -> Option<&Heads> {
        match &self.branches {
            Branches::Fusion { heads, .. } => Some(heads),
            Branches::Baseline { .. } => None,
        }
    }

    pub fn dcm(&self) -> Option<&Dcm> {
        match &self.branches {
            Branches::Fusion { dcm, .. } => dcm.as_ref(),
            Branches::Baseline { .. } => None,
        }
    }

    pub fn reweighter(&self) -> Option<&Reweighter> {
        match &self.branches {
            Branches::Fusion { reweight, .. } => reweight.as_ref(),
            Branches::Baseline { .. } => None,
        }
    }

    /// Stores per-channel standardization statistics; zero or non-finite
    /// deviations are replaced by 1.
    pub fn set_input_normalization<S: Scalar>(
        &self,
        buffers: &mut ParamStore<S>,
        eeg_mean: &[f64],
        eeg_std: &[f64],
        em_mean: &[f64],
        em_std: &[f64],
    ) -> Result<()> {
        let d = self.arch.dims;
        check_dim("eeg normalization", d.eeg_channels, eeg_mean.len())?;
        check_dim("eeg normalization", d.eeg_channels, eeg_std.len())?;
        check_dim("em normalization", d.em_channels, em_mean.len())?;
        check_dim("em normalization", d.em_channels, em_std.len())?;
        let fix = |s: f64| if s.is_finite() && s > 1e-12 { s } else { 1.0 };
        for (id, src, is_std) in [
            (self.norm.eeg_mean, eeg_mean, false),
            (self.norm.eeg_std, eeg_std, true),
            (self.norm.em_mean, em_mean, false),
            (self.norm.em_std, em_std, true),
        ] {
            for (dst, &v) in buffers.get_mut(id).iter_mut().zip(src) {
                *dst = S::lit(if is_std { fix(v) } else { v });
            }
        }
        Ok(())
    }

    /// Forward pass on raw `[batch, 1, C, T]` inputs.
    pub fn forward<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        buffers: &mut ParamStore<S>,
        eeg: &[S],
        em: &[S],
        batch: usize,
        mode: Mode,
    ) -> Result<(Outputs<S>, ForwardCache<S>)> {
        if batch == 0 {
            return Err(Error::Empty("batch"));
        }
        let d = self.arch.dims;
        let t = d.samples;
        check_dim("eeg input", batch * d.eeg_channels * t, eeg.len())?;
        let eeg_n = standardize(eeg, d.eeg_channels, t, buffers.get(self.norm.eeg_mean), buffers.get(self.norm.eeg_std));
        let (f_eeg, eeg_cache) = self
            .eeg
            .forward(params, buffers, &eeg_n, [batch, 1, d.eeg_channels, t], mode)?;
        drop(eeg_n);

        let (em_ext, dcm, reweight, heads) = match &self.branches {
            Branches::Baseline { head } => {
                let tri = head.forward(params, &f_eeg, batch);
                let mut probs = zeros(batch * 3);
                for (src, dst) in tri.chunks(3).zip(probs.chunks_mut(3)) {
                    softmax_into(src, dst);
                }
                let outputs = Outputs {
                    batch,
                    tri_logits: tri,
                    bin_logits: Vec::new(),
                    intra_eeg: Vec::new(),
                    intra_em: Vec::new(),
                    final_probs: probs,
                    phi: Vec::new(),
                };
                let cache = ForwardCache {
                    batch,
                    eeg: eeg_cache,
                    em: None,
                    dcm: None,
                    x_eeg: f_eeg.clone(),
                    x_em: Vec::new(),
                    reweight: None,
                    x_f: f_eeg,
                };
                return Ok((outputs, cache));
            }
            Branches::Fusion {
                em,
                dcm,
                reweight,
                heads,
            } => (em, dcm, reweight, heads),
        };

        check_dim("em input", batch * d.em_channels * t, em.len())?;
        let em_n = standardize(em, d.em_channels, t, buffers.get(self.norm.em_mean), buffers.get(self.norm.em_std));
        let em_sel = self.select_em_rows(&em_n, batch);
        drop(em_n);
        let (f_em, em_cache) = em_ext.forward(params, buffers, &em_sel, [batch, 1, self.em_rows.len(), t], mode)?;

        let (x_eeg, x_em, dcm_cache) = match dcm {
            Some(dcm) => {
                let (a, b, c) = dcm.forward(params, &f_eeg, &f_em, batch, self.arch.direction)?;
                (a, b, Some(c))
            }
            None => (f_eeg, f_em, None),
        };
        let flat = d.flat();
        let (x_f, phi, rw_cache) = match reweight {
            Some(rw) => {
                let (xf, w, c) = rw.forward(params, &x_eeg, &x_em, batch);
                (xf, w, Some(c))
            }
            None => (concat_rows(&x_eeg, &x_em, batch, flat), Vec::new(), None),
        };
        let tri = heads.tri.forward(params, &x_f, batch);
        let intra_eeg = heads.intra_eeg.forward(params, &x_eeg, batch);
        let intra_em = heads.intra_em.forward(params, &x_em, batch);
        let (bin, probs) = if self.arch.ablation.no_hsm {
            let mut probs = zeros(batch * 3);
            for (src, dst) in tri.chunks(3).zip(probs.chunks_mut(3)) {
                softmax_into(src, dst);
            }
            (Vec::new(), probs)
        } else {
            let bin = heads.bin.forward(params, &x_f, batch);
            let probs = tri
                .chunks(3)
                .zip(bin.chunks(2))
                .flat_map(|(t, b)| final_probs(t, b))
                .collect();
            (bin, probs)
        };
        let outputs = Outputs {
            batch,
            tri_logits: tri,
            bin_logits: bin,
            intra_eeg,
            intra_em,
            final_probs: probs,
            phi,
        };
        let cache = ForwardCache {
            batch,
            eeg: eeg_cache,
            em: Some(em_cache),
            dcm: dcm_cache,
            x_eeg,
            x_em,
            reweight: rw_cache,
            x_f,
        };
        Ok((outputs, cache))
    }

    fn select_em_rows<S: Scalar>(&self, em: &[S], batch: usize) -> Vec<S> {
        let d = self.arch.dims;
        if self.em_rows.len() == d.em_channels {
            return em.to_vec();
        }
        let t = d.samples;
        let mut out = Vec::with_capacity(batch * self.em_rows.len() * t);
        for b in 0..batch {
            for &r in &self.em_rows {
                let start = (b * d.em_channels + r) * t;
                out.extend_from_slice(&em[start..start + t]);
            }
        }
        out
    }

    /// Contribution ratios of a forward pass (fusion variant only).
    pub fn ratios<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        cache: &ForwardCache<S>,
        labels: &[u8],
    ) -> Result<Option<ContributionRecord<S>>> {
        match &self.branches {
            Branches::Fusion { heads, .. } => contribution_ratios(
                &cache.x_eeg,
                &cache.x_em,
                params.get(heads.tri.weight),
                params.get(heads.tri.bias),
                labels,
                self.arch.dims.flat(),
            )
            .map(Some),
            Branches::Baseline { .. } => Ok(None),
        }
    }

    /// Loss values for the given outputs. Terms outside `terms` report zero.
    /// `frozen_ratios` replaces the contribution targets computed from `cache`.
    pub fn loss<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        outputs: &Outputs<S>,
        cache: &ForwardCache<S>,
        labels: &[u8],
        terms: Terms,
        frozen_ratios: Option<&ContributionRecord<S>>,
    ) -> Result<(LossTerms, Option<ContributionRecord<S>>)> {
        check_dim("labels", outputs.batch, labels.len())?;
        let terms = terms.and(self.arch.terms());
        let f = |v: S| v.to_f64_lossy();
        let mut lt = LossTerms::default();
        if terms.ce {
            lt.ce = f(cross_entropy(&outputs.tri_logits, labels, 3)?);
        }
        if terms.bce {
            lt.bce = f(cross_entropy(&outputs.bin_logits, &binary_labels(labels), 2)?);
        }
        if terms.intra {
            lt.intra_eeg = f(cross_entropy(&outputs.intra_eeg, labels, 3)?);
            lt.intra_em = f(cross_entropy(&outputs.intra_em, labels, 3)?);
        }
        let ratios = match frozen_ratios {
            Some(r) => Some(r.clone()),
            None => self.ratios(params, cache, labels)?,
        };
        if terms.cg {
            if let Some(r) = &ratios {
                lt.cg = f(contribution_loss(&outputs.phi, &r.ratio_rows()));
            }
        }
        if terms.sd {
            lt.sd = f(distillation_loss(&outputs.tri_logits, &outputs.bin_logits));
        }
        Ok((lt, ratios))
    }

    /// Upstream gradients of the selected loss terms.
    pub fn loss_grads<S: Scalar>(
        &self,
        outputs: &Outputs<S>,
        ratios: Option<&ContributionRecord<S>>,
        labels: &[u8],
        terms: Terms,
        weights: LossWeights,
    ) -> OutputGrads<S> {
        let terms = terms.and(self.arch.terms());
        let n = outputs.batch;
        let mut g = OutputGrads {
            tri: zeros(n * 3),
            bin: zeros(outputs.bin_logits.len()),
            intra_eeg: zeros(outputs.intra_eeg.len()),
            intra_em: zeros(outputs.intra_em.len()),
            phi: zeros(outputs.phi.len()),
        };
        if terms.ce {
            add_into(&mut g.tri, &cross_entropy_grad(&outputs.tri_logits, labels, 3, S::one()));
        }
        if terms.bce {
            let bl = binary_labels(labels);
            add_into(&mut g.bin, &cross_entropy_grad(&outputs.bin_logits, &bl, 2, S::one()));
        }
        if terms.intra {
            let lam = S::lit(weights.lambda);
            add_into(&mut g.intra_eeg, &cross_entropy_grad(&outputs.intra_eeg, labels, 3, lam));
            add_into(&mut g.intra_em, &cross_entropy_grad(&outputs.intra_em, labels, 3, lam));
        }
        if terms.cg && !outputs.phi.is_empty() {
            if let Some(r) = ratios {
                add_into(&mut g.phi, &contribution_loss_grad(&outputs.phi, &r.ratio_rows()));
            }
        }
        if terms.sd {
            let (gt, gb) = distillation_grad(&outputs.tri_logits, &outputs.bin_logits);
            add_into(&mut g.tri, &gt);
            add_into(&mut g.bin, &gb);
        }
        g
    }

    /// Backpropagates output gradients. Parameter gradients accumulate into
    /// `grads`; with `need_input_grad` the raw-input gradients
    /// `(eeg, em)` are returned, `em` always in the full EM layout.
    pub fn backward<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        buffers: &ParamStore<S>,
        cache: &ForwardCache<S>,
        g: &OutputGrads<S>,
        grads: &mut ParamStore<S>,
        need_input_grad: bool,
    ) -> Option<(Vec<S>, Vec<S>)> {
        let d = self.arch.dims;
        let batch = cache.batch;
        let flat = d.flat();
        let t = d.samples;
        let scale_rows = |gx: &mut [S], std: &[S], rows: usize| {
            for (i, row) in gx.chunks_mut(t).enumerate() {
                let s = std[i % rows];
                row.iter_mut().for_each(|v| *v /= s);
            }
        };
        let (em_ext, dcm, reweight, heads) = match &self.branches {
            Branches::Baseline { head } => {
                let gf = head.backward(params, &cache.x_f, &g.tri, batch, grads);
                let gx = self.eeg.backward(params, &cache.eeg, &gf, grads, need_input_grad);
                return gx.map(|mut gx| {
                    scale_rows(&mut gx, buffers.get(self.norm.eeg_std), d.eeg_channels);
                    (gx, zeros(batch * d.em_channels * t))
                });
            }
            Branches::Fusion {
                em,
                dcm,
                reweight,
                heads,
            } => (em, dcm, reweight, heads),
        };

        let mut g_xf = heads.tri.backward(params, &cache.x_f, &g.tri, batch, grads);
        if !g.bin.is_empty() {
            add_into(&mut g_xf, &heads.bin.backward(params, &cache.x_f, &g.bin, batch, grads));
        }
        let mut g_eeg = heads.intra_eeg.backward(params, &cache.x_eeg, &g.intra_eeg, batch, grads);
        let mut g_em = heads.intra_em.backward(params, &cache.x_em, &g.intra_em, batch, grads);
        match (reweight, &cache.reweight) {
            (Some(rw), Some(rc)) => {
                let (a, b) = rw.backward(params, rc, &g_xf, &g.phi, batch, grads);
                add_into(&mut g_eeg, &a);
                add_into(&mut g_em, &b);
            }
            _ => {
                for b in 0..batch {
                    let row = &g_xf[b * 2 * flat..(b + 1) * 2 * flat];
                    add_into(&mut g_eeg[b * flat..(b + 1) * flat], &row[..flat]);
                    add_into(&mut g_em[b * flat..(b + 1) * flat], &row[flat..]);
                }
            }
        }
        if let (Some(dcm), Some(dc)) = (dcm, &cache.dcm) {
            let (a, b) = dcm.backward(params, dc, &g_eeg, &g_em, grads);
            g_eeg = a;
            g_em = b;
        }
        let gx_eeg = self.eeg.backward(params, &cache.eeg, &g_eeg, grads, need_input_grad);
        let em_cache = cache.em.as_ref().expect("fusion forward caches the EM branch");
        let gx_em = em_ext.backward(params, em_cache, &g_em, grads, need_input_grad);
        match (gx_eeg, gx_em) {
            (Some(mut ge), Some(gm)) => {
                scale_rows(&mut ge, buffers.get(self.norm.eeg_std), d.eeg_channels);
                let mut full = zeros(batch * d.em_channels * t);
                let k = self.em_rows.len();
                for b in 0..batch {
                    for (i, &r) in self.em_rows.iter().enumerate() {
                        let src = &gm[(b * k + i) * t..(b * k + i + 1) * t];
                        full[(b * d.em_channels + r) * t..(b * d.em_channels + r + 1) * t].copy_from_slice(src);
                    }
                }
                scale_rows(&mut full, buffers.get(self.norm.em_std), d.em_channels);
                Some((ge, full))
            }
            _ => None,
        }
    }

    /// Forward, loss and (optionally) backward for one labelled batch.
    #[allow(clippy::too_many_arguments)]
    pub fn step<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        buffers: &mut ParamStore<S>,
        eeg: &[S],
        em: &[S],
        labels: &[u8],
        mode: Mode,
        terms: Terms,
        weights: LossWeights,
        grads: Option<&mut ParamStore<S>>,
    ) -> Result<StepOutcome<S>> {
        self.step_with_targets(params, buffers, eeg, em, labels, mode, terms, weights, grads, None)
    }

    /// [`Network::step`] with externally fixed contribution targets.
    #[allow(clippy::too_many_arguments)]
    pub fn step_with_targets<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        buffers: &mut ParamStore<S>,
        eeg: &[S],
        em: &[S],
        labels: &[u8],
        mode: Mode,
        terms: Terms,
        weights: LossWeights,
        grads: Option<&mut ParamStore<S>>,
        frozen_ratios: Option<&ContributionRecord<S>>,
    ) -> Result<StepOutcome<S>> {
        let (outputs, cache) = self.forward(params, buffers, eeg, em, labels.len(), mode)?;
        let (lt, ratios) = self.loss(params, &outputs, &cache, labels, terms, frozen_ratios)?;
        if let Some(grads) = grads {
            let g = self.loss_grads(&outputs, ratios.as_ref(), labels, terms, weights);
            self.backward(params, buffers, &cache, &g, grads, false);
        }
        Ok(StepOutcome {
            terms: lt,
            ratios,
            outputs,
        })
    }

    /// Gradient of each sample's predicted-class probability w.r.t. the raw
    /// inputs, in evaluation mode. Returns `(eeg, em, predictions)`.
    pub fn input_gradients<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        buffers: &ParamStore<S>,
        eeg: &[S],
        em: &[S],
        batch: usize,
    ) -> Result<(Vec<S>, Vec<S>, Vec<u8>)> {
        let mut buf = buffers.clone();
        let (outputs, cache) = self.forward(params, &mut buf, eeg, em, batch, Mode::EVAL)?;
        let preds = outputs.predictions();
        let mut g = OutputGrads {
            tri: zeros(batch * 3),
            bin: zeros(outputs.bin_logits.len()),
            intra_eeg: zeros(outputs.intra_eeg.len()),
            intra_em: zeros(outputs.intra_em.len()),
            phi: zeros(outputs.phi.len()),
        };
        for (b, &k) in preds.iter().enumerate() {
            let mut onehot = [S::zero(); 3];
            onehot[k as usize] = S::one();
            let tri = &outputs.tri_logits[b * 3..b * 3 + 3];
            if outputs.bin_logits.is_empty() {
                let p = softmax(tri);
                softmax_backward(&p, &onehot, &mut g.tri[b * 3..b * 3 + 3]);
            } else {
                let (dt, db) = final_probs_backward(tri, &outputs.bin_logits[b * 2..b * 2 + 2], &onehot);
                g.tri[b * 3..b * 3 + 3].copy_from_slice(&dt);
                g.bin[b * 2..b * 2 + 2].copy_from_slice(&db);
            }
        }
        let mut scratch = params.zeros_like();
        let (ge, gm) = self
            .backward(params, buffers, &cache, &g, &mut scratch, true)
            .expect("input gradients requested");
        Ok((ge, gm, preds))
    }
}

/// A network together with its parameters and buffers.
#[derive(Debug, Clone)]
pub struct Model<S> {
    pub net: Network,
    pub params: ParamStore<S>,
    pub buffers: ParamStore<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let (net, params, buffers) = Network::new(arch, seed)?;
        Ok(Self { net, params, buffers })
    }

    /// Evaluation-mode forward pass; running statistics are left untouched.
    pub fn infer(&self, eeg: &[S], em: &[S], batch: usize) -> Result<Outputs<S>> {
        let mut buf = self.buffers.clone();
        self.net
            .forward(&self.params, &mut buf, eeg, em, batch, Mode::EVAL)
            .map(|(o, _)| o)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }
}
