//! Hierarchical self-distillation heads: a triplet classifier, a binary
//! classifier, their folded/expanded views and the combined prediction.

use rand::Rng;

use crate::nn::Linear;
use crate::params::ParamStore;
use crate::scalar::{softmax, softmax_backward, softmax_into, Scalar};

pub const PROB_FLOOR: f64 = 1e-8;

/// Linear classifiers over the fused feature and the per-modality features.
#[derive(Debug, Clone)]
pub struct Heads {
    pub tri: Linear,
    pub bin: Linear,
    pub intra_eeg: Linear,
    pub intra_em: Linear,
}

impl Heads {
    pub fn new<S: Scalar, R: Rng>(flat: usize, params: &mut ParamStore<S>, rng: &mut R) -> Self {
        Self {
            tri: Linear::register(params, "heads.tri", 2 * flat, 3, rng),
            bin: Linear::register(params, "heads.bin", 2 * flat, 2, rng),
            intra_eeg: Linear::register(params, "heads.intra_eeg", flat, 3, rng),
            intra_em: Linear::register(params, "heads.intra_em", flat, 3, rng),
        }
    }
}

/// `[p0, p1 + p2]` with `p = softmax(tri_logits)`.
pub fn fold_triplet_to_binary<S: Scalar>(tri_logits: &[S]) -> [S; 2] {
    let p = softmax(tri_logits);
    [p[0], p[1] + p[2]]
}

/// `[q0, q1, q1]` with `q = softmax(bin_logits)`.
pub fn expand_binary<S: Scalar>(bin_logits: &[S]) -> [S; 3] {
    let q = softmax(bin_logits);
    [q[0], q[1], q[1]]
}

/// `softmax(mbin ⊙ tri_logits)` for one sample.
pub fn final_probs<S: Scalar>(tri_logits: &[S], bin_logits: &[S]) -> [S; 3] {
    let m = expand_binary(bin_logits);
    let z: [S; 3] = std::array::from_fn(|k| m[k] * tri_logits[k]);
    let mut out = [S::zero(); 3];
    softmax_into(&z, &mut out);
    out
}

/// Gradients of a scalar through [`final_probs`]: returns `(d tri_logits, d bin_logits)`.
pub fn final_probs_backward<S: Scalar>(tri_logits: &[S], bin_logits: &[S], grad: &[S]) -> ([S; 3], [S; 2]) {
    let q = softmax(bin_logits);
    let m = [q[0], q[1], q[1]];
    let probs = final_probs(tri_logits, bin_logits);
    let mut dz = [S::zero(); 3];
    softmax_backward(&probs, grad, &mut dz);
    let dtri = std::array::from_fn(|k| dz[k] * m[k]);
    let dq = [dz[0] * tri_logits[0], dz[1] * tri_logits[1] + dz[2] * tri_logits[2]];
    let mut dbin = [S::zero(); 2];
    softmax_backward(&q, &dq, &mut dbin);
    (dtri, dbin)
}

/// `½[KL(p‖q) + KL(q‖p)] = ½ Σ (p − q)(ln p − ln q)`, logs taken of
/// probabilities floored at [`PROB_FLOOR`].
pub fn symmetric_kl<S: Scalar>(p: &[S], q: &[S]) -> S {
    let floor = S::lit(PROB_FLOOR);
    let half = S::lit(0.5);
    p.iter()
        .zip(q)
        .map(|(&a, &b)| (a - b) * (a.max(floor).ln() - b.max(floor).ln()))
        .sum::<S>()
        * half
}

/// Partial derivatives of [`symmetric_kl`] w.r.t. `p` and `q`.
fn symmetric_kl_grad<S: Scalar>(p: &[S], q: &[S]) -> (Vec<S>, Vec<S>) {
    let floor = S::lit(PROB_FLOOR);
    let half = S::lit(0.5);
    let mut dp = Vec::with_capacity(p.len());
    let mut dq = Vec::with_capacity(q.len());
    for (&a, &b) in p.iter().zip(q) {
        let log_ratio = a.max(floor).ln() - b.max(floor).ln();
        let diff = a - b;
        let ga = if a > floor { diff / a } else { S::zero() };
        let gb = if b > floor { diff / b } else { S::zero() };
        dp.push(half * (log_ratio + ga));
        dq.push(half * (-log_ratio - gb));
    }
    (dp, dq)
}

/// Batch mean of the symmetric KL between the folded triplet distribution and
/// the binary distribution. Logits are `[batch × 3]` and `[batch × 2]`.
pub fn distillation_loss<S: Scalar>(tri_logits: &[S], bin_logits: &[S]) -> S {
    let batch = bin_logits.len() / 2;
    if batch == 0 {
        return S::zero();
    }
    let total: S = tri_logits
        .chunks(3)
        .zip(bin_logits.chunks(2))
        .map(|(t, b)| symmetric_kl(&fold_triplet_to_binary(t), &softmax(b)))
        .sum();
    total / S::lit(batch as f64)
}

/// Gradients of [`distillation_loss`] w.r.t. both logit buffers.
pub fn distillation_grad<S: Scalar>(tri_logits: &[S], bin_logits: &[S]) -> (Vec<S>, Vec<S>) {
    let batch = bin_logits.len() / 2;
    let inv = S::one() / S::lit(batch.max(1) as f64);
    let mut g_tri = vec![S::zero(); tri_logits.len()];
    let mut g_bin = vec![S::zero(); bin_logits.len()];
    for b in 0..batch {
        let t = &tri_logits[b * 3..b * 3 + 3];
        let p3 = softmax(t);
        let p = [p3[0], p3[1] + p3[2]];
        let q = softmax(&bin_logits[b * 2..b * 2 + 2]);
        let (dp, dq) = symmetric_kl_grad(&p, &q);
        let dp3 = [dp[0] * inv, dp[1] * inv, dp[1] * inv];
        softmax_backward(&p3, &dp3, &mut g_tri[b * 3..b * 3 + 3]);
        let dq: Vec<S> = dq.iter().map(|&v| v * inv).collect();
        softmax_backward(&q, &dq, &mut g_bin[b * 2..b * 2 + 2]);
    }
    (g_tri, g_bin)
}
