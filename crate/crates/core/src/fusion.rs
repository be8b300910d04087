//! Cross-modal fusion: the dual-complementary cross-attention block and the
//! contribution-guided reweighting of the concatenated features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::exec;
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::scalar::{matmul, softmax_backward, softmax_into, Scalar};

pub const HEADS: usize = 2;

/// Which modalities receive cross-attended features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Both: EM enhances EEG and EEG enhances EM.
    #[default]
    Dual,
    /// Only EEG features are updated, attending over EM.
    EmToEeg,
    /// Only EM features are updated, attending over EEG.
    EegToEm,
}

impl Direction {
    pub fn updates_eeg(self) -> bool {
        matches!(self, Direction::Dual | Direction::EmToEeg)
    }

    pub fn updates_em(self) -> bool {
        matches!(self, Direction::Dual | Direction::EegToEm)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Projections {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

/// Projections for both directions; `em_to_eeg` produces the EEG update.
#[derive(Debug, Clone)]
pub struct Dcm {
    pub em_to_eeg: Projections,
    pub eeg_to_em: Projections,
    pub rows: usize,
    pub width: usize,
    pub heads: usize,
}

/// Per-sample attention cache for one direction.
#[derive(Debug, Clone)]
pub struct AttentionCache<S> {
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    /// `[heads, rows, rows]`, each row a softmax over keys.
    pub attn: Vec<S>,
}

#[derive(Debug)]
pub struct DcmCache<S> {
    batch: usize,
    direction: Direction,
    eeg_in: Vec<S>,
    em_in: Vec<S>,
    to_eeg: Vec<AttentionCache<S>>,
    to_em: Vec<AttentionCache<S>>,
}

impl<S: Scalar> DcmCache<S> {
    /// Attention maps of the EEG update for sample `b`, if computed.
    pub fn eeg_attention(&self, b: usize) -> Option<&[S]> {
        self.to_eeg.get(b).map(|c| c.attn.as_slice())
    }

    pub fn em_attention(&self, b: usize) -> Option<&[S]> {
        self.to_em.get(b).map(|c| c.attn.as_slice())
    }
}

/// `out = softmax(Xa Wq (Xb Wk)^T / sqrt(dk)) Xb Wv`, computed per head on
/// `dk`-wide column slices and concatenated back to `width`.
pub fn cross_attention<S: Scalar>(
    xa: &[S],
    xb: &[S],
    wq: &[S],
    wk: &[S],
    wv: &[S],
    rows: usize,
    width: usize,
    heads: usize,
) -> (Vec<S>, AttentionCache<S>) {
    let dk = width / heads;
    let mut q = vec![S::zero(); rows * width];
    let mut k = vec![S::zero(); rows * width];
    let mut v = vec![S::zero(); rows * width];
    matmul(rows, width, width, xa, false, wq, false, &mut q, false);
    matmul(rows, width, width, xb, false, wk, false, &mut k, false);
    matmul(rows, width, width, xb, false, wv, false, &mut v, false);
    let scale = S::one() / S::lit(dk as f64).sqrt();
    let mut attn = vec![S::zero(); heads * rows * rows];
    let mut out = vec![S::zero(); rows * width];
    let mut scores = vec![S::zero(); rows];
    for h in 0..heads {
        let a_h = &mut attn[h * rows * rows..(h + 1) * rows * rows];
        for i in 0..rows {
            for (j, s) in scores.iter_mut().enumerate() {
                let mut acc = S::zero();
                for l in 0..dk {
                    acc += q[i * width + h * dk + l] * k[j * width + h * dk + l];
                }
                *s = acc * scale;
            }
            softmax_into(&scores, &mut a_h[i * rows..(i + 1) * rows]);
        }
        for i in 0..rows {
            for l in 0..dk {
                let mut acc = S::zero();
                for j in 0..rows {
                    acc += a_h[i * rows + j] * v[j * width + h * dk + l];
                }
                out[i * width + h * dk + l] = acc;
            }
        }
    }
    (out, AttentionCache { q, k, v, attn })
}

/// Backward of [`cross_attention`]. Returns `(dXa, dXb)` and accumulates
/// projection gradients into `dwq`, `dwk`, `dwv`.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention_backward<S: Scalar>(
    xa: &[S],
    xb: &[S],
    wq: &[S],
    wk: &[S],
    wv: &[S],
    cache: &AttentionCache<S>,
    g_out: &[S],
    rows: usize,
    width: usize,
    heads: usize,
    dwq: &mut [S],
    dwk: &mut [S],
    dwv: &mut [S],
) -> (Vec<S>, Vec<S>) {
    let dk = width / heads;
    let scale = S::one() / S::lit(dk as f64).sqrt();
    let mut dq = vec![S::zero(); rows * width];
    let mut dkm = vec![S::zero(); rows * width];
    let mut dv = vec![S::zero(); rows * width];
    let mut da = vec![S::zero(); rows];
    let mut ds = vec![S::zero(); rows];
    for h in 0..heads {
        let a_h = &cache.attn[h * rows * rows..(h + 1) * rows * rows];
        for i in 0..rows {
            let arow = &a_h[i * rows..(i + 1) * rows];
            for (j, d) in da.iter_mut().enumerate() {
                let mut acc = S::zero();
                for l in 0..dk {
                    acc += g_out[i * width + h * dk + l] * cache.v[j * width + h * dk + l];
                }
                *d = acc;
            }
            for j in 0..rows {
                for l in 0..dk {
                    dv[j * width + h * dk + l] += arow[j] * g_out[i * width + h * dk + l];
                }
            }
            softmax_backward(arow, &da, &mut ds);
            for j in 0..rows {
                let s = ds[j] * scale;
                for l in 0..dk {
                    dq[i * width + h * dk + l] += s * cache.k[j * width + h * dk + l];
                    dkm[j * width + h * dk + l] += s * cache.q[i * width + h * dk + l];
                }
            }
        }
    }
    matmul(width, rows, width, xa, true, &dq, false, dwq, true);
    matmul(width, rows, width, xb, true, &dkm, false, dwk, true);
    matmul(width, rows, width, xb, true, &dv, false, dwv, true);
    let mut dxa = vec![S::zero(); rows * width];
    let mut dxb = vec![S::zero(); rows * width];
    matmul(rows, width, width, &dq, false, wq, true, &mut dxa, false);
    matmul(rows, width, width, &dkm, false, wk, true, &mut dxb, false);
    matmul(rows, width, width, &dv, false, wv, true, &mut dxb, true);
    (dxa, dxb)
}

impl Dcm {
    pub fn new<S: Scalar, R: Rng>(rows: usize, width: usize, params: &mut ParamStore<S>, rng: &mut R) -> Self {
        let mut proj = |name: &str| Projections {
            query: params.add_fan_in_uniform(format!("dcm.{name}.query"), &[width, width], width, rng),
            key: params.add_fan_in_uniform(format!("dcm.{name}.key"), &[width, width], width, rng),
            value: params.add_fan_in_uniform(format!("dcm.{name}.value"), &[width, width], width, rng),
        };
        let em_to_eeg = proj("em_to_eeg");
        let eeg_to_em = proj("eeg_to_em");
        Self {
            em_to_eeg,
            eeg_to_em,
            rows,
            width,
            heads: HEADS,
        }
    }

    /// Residual cross-attention on `[batch, rows, width]` features. Both
    /// directions read the un-updated inputs.
    pub fn forward<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        x_eeg: &[S],
        x_em: &[S],
        batch: usize,
        direction: Direction,
    ) -> Result<(Vec<S>, Vec<S>, DcmCache<S>)> {
        let sz = self.rows * self.width;
        check_dim("eeg features", batch * sz, x_eeg.len())?;
        check_dim("em features", batch * sz, x_em.len())?;
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "feature width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        let run = |proj: Projections, xa: &[S], xb: &[S]| {
            exec::map_range(batch, |b| {
                cross_attention(
                    &xa[b * sz..(b + 1) * sz],
                    &xb[b * sz..(b + 1) * sz],
                    params.get(proj.query),
                    params.get(proj.key),
                    params.get(proj.value),
                    self.rows,
                    self.width,
                    self.heads,
                )
            })
        };
        let mut out_eeg = x_eeg.to_vec();
        let mut out_em = x_em.to_vec();
        let mut to_eeg = Vec::new();
        let mut to_em = Vec::new();
        if direction.updates_eeg() {
            for (b, (o, c)) in run(self.em_to_eeg, x_eeg, x_em).into_iter().enumerate() {
                for (dst, v) in out_eeg[b * sz..(b + 1) * sz].iter_mut().zip(o) {
                    *dst += v;
                }
                to_eeg.push(c);
            }
        }
        if direction.updates_em() {
            for (b, (o, c)) in run(self.eeg_to_em, x_em, x_eeg).into_iter().enumerate() {
                for (dst, v) in out_em[b * sz..(b + 1) * sz].iter_mut().zip(o) {
                    *dst += v;
                }
                to_em.push(c);
            }
        }
        let cache = DcmCache {
            batch,
            direction,
            eeg_in: x_eeg.to_vec(),
            em_in: x_em.to_vec(),
            to_eeg,
            to_em,
        };
        Ok((out_eeg, out_em, cache))
    }

    /// Returns gradients w.r.t. the DCM inputs `(dX_eeg, dX_em)`.
    pub fn backward<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        cache: &DcmCache<S>,
        g_eeg: &[S],
        g_em: &[S],
        grads: &mut ParamStore<S>,
    ) -> (Vec<S>, Vec<S>) {
        let sz = self.rows * self.width;
        let batch = cache.batch;
        let mut dx_eeg = g_eeg.to_vec();
        let mut dx_em = g_em.to_vec();
        let mut pass = |proj: Projections, caches: &[AttentionCache<S>], xa: &[S], xb: &[S], g: &[S], a_is_eeg: bool| {
            let ww = self.width * self.width;
            let parts = exec::map_range(batch, |b| {
                let mut dwq = vec![S::zero(); ww];
                let mut dwk = vec![S::zero(); ww];
                let mut dwv = vec![S::zero(); ww];
                let (dxa, dxb) = cross_attention_backward(
                    &xa[b * sz..(b + 1) * sz],
                    &xb[b * sz..(b + 1) * sz],
                    params.get(proj.query),
                    params.get(proj.key),
                    params.get(proj.value),
                    &caches[b],
                    &g[b * sz..(b + 1) * sz],
                    self.rows,
                    self.width,
                    self.heads,
                    &mut dwq,
                    &mut dwk,
                    &mut dwv,
                );
                (dwq, dwk, dwv, dxa, dxb)
            });
            for (b, (dwq, dwk, dwv, dxa, dxb)) in parts.into_iter().enumerate() {
                for (id, part) in [(proj.query, dwq), (proj.key, dwk), (proj.value, dwv)] {
                    for (a, v) in grads.get_mut(id).iter_mut().zip(part) {
                        *a += v;
                    }
                }
                let (da, db) = if a_is_eeg {
                    (&mut dx_eeg, &mut dx_em)
                } else {
                    (&mut dx_em, &mut dx_eeg)
                };
                for (a, v) in da[b * sz..(b + 1) * sz].iter_mut().zip(dxa) {
                    *a += v;
                }
                for (a, v) in db[b * sz..(b + 1) * sz].iter_mut().zip(dxb) {
                    *a += v;
                }
            }
        };
        if cache.direction.updates_eeg() {
            pass(self.em_to_eeg, &cache.to_eeg, &cache.eeg_in, &cache.em_in, g_eeg, true);
        }
        if cache.direction.updates_em() {
            pass(self.eeg_to_em, &cache.to_em, &cache.em_in, &cache.eeg_in, g_em, false);
        }
        (dx_eeg, dx_em)
    }
}

/// Per-sample modality contributions and their normalized ratios.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContributionRecord<S> {
    pub c_eeg: Vec<S>,
    pub c_em: Vec<S>,
    pub r_eeg: Vec<S>,
    pub r_em: Vec<S>,
}

impl<S: Scalar> ContributionRecord<S> {
    /// `[batch, 2]` rows of `(r_eeg, r_em)`.
    pub fn ratio_rows(&self) -> Vec<S> {
        self.r_eeg
            .iter()
            .zip(&self.r_em)
            .flat_map(|(&a, &b)| [a, b])
            .collect()
    }
}

/// Splits the logits of a linear classifier over `[x_eeg, x_em]` into the
/// per-modality parts `W_eeg x_eeg + b/2` and `W_em x_em + b/2`.
///
/// `weight` is `[classes × 2·flat]`. Returns two `[batch × classes]` buffers.
/// `a·b + c` accumulated in f64 and rounded once.
pub fn wide_dot<S: Scalar>(a: &[S], b: &[S], c: S) -> S {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x.to_f64_lossy() * y.to_f64_lossy()).sum();
    S::lit(dot + c.to_f64_lossy())
}

pub fn modality_logits<S: Scalar>(
    x_eeg: &[S],
    x_em: &[S],
    weight: &[S],
    bias: &[S],
    batch: usize,
    flat: usize,
) -> (Vec<S>, Vec<S>) {
    let classes = bias.len();
    let half = S::lit(0.5);
    let mut f_eeg = vec![S::zero(); batch * classes];
    let mut f_em = vec![S::zero(); batch * classes];
    for b in 0..batch {
        for k in 0..classes {
            let w = &weight[k * 2 * flat..(k + 1) * 2 * flat];
            let xe = &x_eeg[b * flat..(b + 1) * flat];
            let xm = &x_em[b * flat..(b + 1) * flat];
            f_eeg[b * classes + k] = wide_dot(&w[..flat], xe, bias[k] * half);
            f_em[b * classes + k] = wide_dot(&w[flat..], xm, bias[k] * half);
        }
    }
    (f_eeg, f_em)
}

/// Contribution scores `c_m = softmax(f(x_m))[y]` and ratios `r_m = c_m / (c_eeg + c_em)`.
///
/// The result is a plain value: nothing here participates in backpropagation.
pub fn contribution_ratios<S: Scalar>(
    x_eeg: &[S],
    x_em: &[S],
    weight: &[S],
    bias: &[S],
    labels: &[u8],
    flat: usize,
) -> Result<ContributionRecord<S>> {
    let batch = labels.len();
    let classes = bias.len();
    check_dim("eeg flat features", batch * flat, x_eeg.len())?;
    check_dim("em flat features", batch * flat, x_em.len())?;
    check_dim("classifier weight", classes * 2 * flat, weight.len())?;
    let (f_eeg, f_em) = modality_logits(x_eeg, x_em, weight, bias, batch, flat);
    let mut rec = ContributionRecord::default();
    let mut p = vec![S::zero(); classes];
    for (b, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= classes {
            return Err(Error::InvalidLabel(y as u8));
        }
        softmax_into(&f_eeg[b * classes..(b + 1) * classes], &mut p);
        let ce = p[y];
        softmax_into(&f_em[b * classes..(b + 1) * classes], &mut p);
        let cm = p[y];
        let total = ce + cm;
        rec.c_eeg.push(ce);
        rec.c_em.push(cm);
        rec.r_eeg.push(ce / total);
        rec.r_em.push(cm / total);
    }
    Ok(rec)
}

/// Weight-prediction network φ: one linear map `[2·flat → 2]` and a softmax.
#[derive(Debug, Clone)]
pub struct Reweighter {
    pub linear: Linear,
    pub flat: usize,
}

#[derive(Debug)]
pub struct ReweightCache<S> {
    joint: Vec<S>,
    weights: Vec<S>,
    x_eeg: Vec<S>,
    x_em: Vec<S>,
}

impl Reweighter {
    pub fn new<S: Scalar, R: Rng>(flat: usize, params: &mut ParamStore<S>, rng: &mut R) -> Self {
        Self {
            linear: Linear::register(params, "reweight", 2 * flat, 2, rng),
            flat,
        }
    }

    /// Returns the fused feature `[x_eeg·w0, x_em·w1]` (`[batch × 2·flat]`) and the weights `[batch × 2]`.
    pub fn forward<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        x_eeg: &[S],
        x_em: &[S],
        batch: usize,
    ) -> (Vec<S>, Vec<S>, ReweightCache<S>) {
        let f = self.flat;
        let joint = concat_rows(x_eeg, x_em, batch, f);
        let logits = self.linear.forward(params, &joint, batch);
        let mut weights = vec![S::zero(); batch * 2];
        for b in 0..batch {
            softmax_into(&logits[b * 2..b * 2 + 2], &mut weights[b * 2..b * 2 + 2]);
        }
        let fused = reweighted_concat(x_eeg, x_em, &weights, batch, f);
        let cache = ReweightCache {
            joint,
            weights: weights.clone(),
            x_eeg: x_eeg.to_vec(),
            x_em: x_em.to_vec(),
        };
        (fused, weights, cache)
    }

    /// `g_fused` is `dL/dx_f`, `g_weights` an extra `dL/dφ` (from the
    /// contribution loss). Returns `(dx_eeg, dx_em)`.
    pub fn backward<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        cache: &ReweightCache<S>,
        g_fused: &[S],
        g_weights: &[S],
        batch: usize,
        grads: &mut ParamStore<S>,
    ) -> (Vec<S>, Vec<S>) {
        let f = self.flat;
        let mut dx_eeg = vec![S::zero(); batch * f];
        let mut dx_em = vec![S::zero(); batch * f];
        let mut dlogits = vec![S::zero(); batch * 2];
        for b in 0..batch {
            let w = &cache.weights[b * 2..b * 2 + 2];
            let ge = &g_fused[b * 2 * f..b * 2 * f + f];
            let gm = &g_fused[b * 2 * f + f..(b + 1) * 2 * f];
            let xe = &cache.x_eeg[b * f..(b + 1) * f];
            let xm = &cache.x_em[b * f..(b + 1) * f];
            for i in 0..f {
                dx_eeg[b * f + i] = ge[i] * w[0];
                dx_em[b * f + i] = gm[i] * w[1];
            }
            let dw = [
                ge.iter().zip(xe).map(|(&g, &x)| g * x).sum::<S>() + g_weights[b * 2],
                gm.iter().zip(xm).map(|(&g, &x)| g * x).sum::<S>() + g_weights[b * 2 + 1],
            ];
            softmax_backward(w, &dw, &mut dlogits[b * 2..b * 2 + 2]);
        }
        let djoint = self.linear.backward(params, &cache.joint, &dlogits, batch, grads);
        for b in 0..batch {
            for i in 0..f {
                dx_eeg[b * f + i] += djoint[b * 2 * f + i];
                dx_em[b * f + i] += djoint[b * 2 * f + f + i];
            }
        }
        (dx_eeg, dx_em)
    }
}

/// `[x_eeg, x_em]` per sample.
pub fn concat_rows<S: Scalar>(x_eeg: &[S], x_em: &[S], batch: usize, flat: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(batch * 2 * flat);
    for b in 0..batch {
        out.extend_from_slice(&x_eeg[b * flat..(b + 1) * flat]);
        out.extend_from_slice(&x_em[b * flat..(b + 1) * flat]);
    }
    out
}

/// `[x_eeg·w0, x_em·w1]` per sample with `weights` as `[batch × 2]`.
pub fn reweighted_concat<S: Scalar>(x_eeg: &[S], x_em: &[S], weights: &[S], batch: usize, flat: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(batch * 2 * flat);
    for b in 0..batch {
        let (w0, w1) = (weights[b * 2], weights[b * 2 + 1]);
        out.extend(x_eeg[b * flat..(b + 1) * flat].iter().map(|&v| v * w0));
        out.extend(x_em[b * flat..(b + 1) * flat].iter().map(|&v| v * w1));
    }
    out
}

/// Mean over the batch of `‖ratios − predicted‖₁`; both are `[batch × 2]`.
pub fn contribution_loss<S: Scalar>(predicted: &[S], ratios: &[S]) -> S {
    assert_eq!(predicted.len(), ratios.len());
    let batch = predicted.len() / 2;
    if batch == 0 {
        return S::zero();
    }
    let total: S = predicted.iter().zip(ratios).map(|(&p, &r)| (r - p).abs()).sum();
    total / S::lit(batch as f64)
}

/// `dL/dpredicted` for [`contribution_loss`]; the ratios are constants.
pub fn contribution_loss_grad<S: Scalar>(predicted: &[S], ratios: &[S]) -> Vec<S> {
    let batch = (predicted.len() / 2).max(1);
    let inv = S::one() / S::lit(batch as f64);
    predicted
        .iter()
        .zip(ratios)
        .map(|(&p, &r)| {
            let d = p - r;
            if d > S::zero() {
                inv
            } else if d < S::zero() {
                -inv
            } else {
                S::zero()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two_single_head_matches_hand_evaluation() {
        // Xa = [[1,0],[0,1]], Xb = [[1,1],[2,0]], Wq = Wk = I, Wv = [[1,2],[0,1]]
        let xa = [1.0, 0.0, 0.0, 1.0];
        let xb = [1.0, 1.0, 2.0, 0.0];
        let eye = [1.0, 0.0, 0.0, 1.0];
        let wv = [1.0, 2.0, 0.0, 1.0];
        let (out, cache) = cross_attention(&xa, &xb, &eye, &eye, &wv, 2, 2, 1);
        // scores = Xa Xb^T / sqrt(2) = [[1,2],[1,0]] / sqrt(2)
        let s = 1.0 / 2f64.sqrt();
        let row0 = [1.0 / (1.0 + (s).exp()), (s).exp() / (1.0 + (s).exp())];
        let row1 = [(s).exp() / ((s).exp() + 1.0), 1.0 / ((s).exp() + 1.0)];
        // V = Xb Wv = [[1,3],[2,4]]
        let want = [
            row0[0] * 1.0 + row0[1] * 2.0,
            row0[0] * 3.0 + row0[1] * 4.0,
            row1[0] * 1.0 + row1[1] * 2.0,
            row1[0] * 3.0 + row1[1] * 4.0,
        ];
        for (g, w) in out.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{out:?} vs {want:?}");
        }
        assert!((cache.attn[0] - row0[0]).abs() < 1e-12);
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamStore::<f64>::new();
        let dcm = Dcm::new(4, 4, &mut p, &mut rng);
        for proj in [dcm.em_to_eeg, dcm.eeg_to_em] {
            p.get_mut(proj.value).iter_mut().for_each(|v| *v = 0.0);
        }
        let xe: Vec<f64> = (0..32).map(|i| (i as f64).sin()).collect();
        let xm: Vec<f64> = (0..32).map(|i| (i as f64).cos()).collect();
        let (oe, om, cache) = dcm.forward(&p, &xe, &xm, 2, Direction::Dual).unwrap();
        assert_eq!(oe, xe);
        assert_eq!(om, xm);
        for b in 0..2 {
            for row in cache.eeg_attention(b).unwrap().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_direction_leaves_other_modality_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamStore::<f64>::new();
        let dcm = Dcm::new(4, 4, &mut p, &mut rng);
        let xe: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).sin()).collect();
        let xm: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).cos()).collect();
        let (oe, om, _) = dcm.forward(&p, &xe, &xm, 1, Direction::EmToEeg).unwrap();
        assert_eq!(om, xm);
        assert_ne!(oe, xe);
        let (oe, om, _) = dcm.forward(&p, &xe, &xm, 1, Direction::EegToEm).unwrap();
        assert_eq!(oe, xe);
        assert_ne!(om, xm);
    }

    #[test]
    fn mismatched_modalities_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamStore::<f64>::new();
        let dcm = Dcm::new(4, 4, &mut p, &mut rng);
        let err = dcm.forward(&p, &[0.0; 16], &[0.0; 12], 1, Direction::Dual).unwrap_err();
        assert!(matches!(err, Error::Shape { axis: "em features", .. }));
    }

    #[test]
    fn zero_em_half_gives_one_third_contribution() {
        let flat = 3;
        let x_eeg = [0.5, -1.0, 2.0, 1.0, 0.0, -0.5];
        let x_em = [3.0, 1.0, -2.0, 0.1, 0.2, 0.3];
        let mut weight = vec![0.0; 3 * 2 * flat];
        for k in 0..3 {
            for i in 0..flat {
                weight[k * 2 * flat + i] = (k * flat + i) as f64 * 0.25 - 1.0;
            }
        }
        let rec = contribution_ratios(&x_eeg, &x_em, &weight, &[0.0; 3], &[1, 2], flat).unwrap();
        for b in 0..2 {
            assert!((rec.c_em[b] - 1.0 / 3.0).abs() < 1e-15);
            let want = (1.0 / 3.0) / (rec.c_eeg[b] + 1.0 / 3.0);
            assert!((rec.r_em[b] - want).abs() < 1e-15);
            assert!((rec.r_eeg[b] + rec.r_em[b] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn contribution_loss_examples() {
        assert_eq!(contribution_loss(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        let l: f64 = contribution_loss(&[0.5, 0.5], &[0.7, 0.3]);
        assert!((l - 0.4).abs() < 1e-15);
        // swapping modality columns in both arguments
        let a = [0.2, 0.8, 0.6, 0.4];
        let r = [0.5, 0.5, 0.9, 0.1];
        let sa = [0.8, 0.2, 0.4, 0.6];
        let sr = [0.5, 0.5, 0.1, 0.9];
        assert_eq!(contribution_loss::<f64>(&a, &r), contribution_loss(&sa, &sr));
    }

    #[test]
    fn zero_phi_weights_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = ParamStore::<f64>::new();
        let rw = Reweighter::new(3, &mut p, &mut rng);
        p.get_mut(rw.linear.weight).iter_mut().for_each(|v| *v = 0.0);
        p.get_mut(rw.linear.bias).iter_mut().for_each(|v| *v = 0.0);
        let xe = [1.0, 2.0, 3.0];
        let xm = [4.0, 5.0, 6.0];
        let (fused, w, _) = rw.forward(&p, &xe, &xm, 1);
        assert_eq!(w, vec![0.5, 0.5]);
        assert_eq!(fused, vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
    }
}
