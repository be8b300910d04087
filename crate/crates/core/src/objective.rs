//! Training objective: classification terms, the contribution-guided term and
//! the self-distillation term, plus the ablation switches that remove them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{softmax, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Coefficient of the two intra-modal classification terms.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_lambda() -> f64 {
    0.2
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda: default_lambda() }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda >= 0.0 && self.lambda.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)))
        }
    }
}

/// Module/term removals. All false is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_dcm: bool,
    pub no_cgrm: bool,
    pub no_lcg: bool,
    pub no_hsm: bool,
    pub no_lsd: bool,
}

impl Ablation {
    pub const FULL: Ablation = Ablation {
        no_dcm: false,
        no_cgrm: false,
        no_lcg: false,
        no_hsm: false,
        no_lsd: false,
    };

    /// The full model followed by each single removal, with display names.
    pub fn sweep() -> [(&'static str, Ablation); 6] {
        let one = |f: fn(&mut Ablation)| {
            let mut a = Ablation::FULL;
            f(&mut a);
            a
        };
        [
            ("full", Ablation::FULL),
            ("w/o DCM", one(|a| a.no_dcm = true)),
            ("w/o CG-RM", one(|a| a.no_cgrm = true)),
            ("w/o L_cg", one(|a| a.no_lcg = true)),
            ("w/o HSM", one(|a| a.no_hsm = true)),
            ("w/o L_sd", one(|a| a.no_lsd = true)),
        ]
    }

    /// Terms present in the objective under this ablation.
    pub fn terms(&self) -> Terms {
        Terms {
            ce: true,
            bce: !self.no_hsm,
            intra: true,
            cg: !self.no_cgrm && !self.no_lcg,
            sd: !self.no_hsm && !self.no_lsd,
        }
    }
}

/// Selects which objective terms contribute to the loss and its gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub ce: bool,
    pub bce: bool,
    pub intra: bool,
    pub cg: bool,
    pub sd: bool,
}

impl Terms {
    pub const NONE: Terms = Terms {
        ce: false,
        bce: false,
        intra: false,
        cg: false,
        sd: false,
    };

    /// Restricts `self` to the terms also present in `other`.
    pub fn and(self, other: Terms) -> Terms {
        Terms {
            ce: self.ce && other.ce,
            bce: self.bce && other.bce,
            intra: self.intra && other.intra,
            cg: self.cg && other.cg,
            sd: self.sd && other.sd,
        }
    }
}

/// Batch-mean values of every objective term. Absent terms are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub bce: f64,
    pub intra_eeg: f64,
    pub intra_em: f64,
    pub cg: f64,
    pub sd: f64,
}

impl LossTerms {
    pub fn classification(&self, w: LossWeights) -> f64 {
        classification_total(self.ce, self.bce, self.intra_eeg, self.intra_em, w.lambda)
    }

    pub fn overall(&self, w: LossWeights) -> f64 {
        overall_loss(self.classification(w), self.cg, self.sd)
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.bce, self.intra_eeg, self.intra_em, self.cg, self.sd]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn classification_total(ce: f64, bce: f64, intra_eeg: f64, intra_em: f64, lambda: f64) -> f64 {
    ce + bce + lambda * (intra_eeg + intra_em)
}

pub fn overall_loss(cls: f64, cg: f64, sd: f64) -> f64 {
    cls + cg + sd
}

/// Batch-mean cross-entropy of `[batch × classes]` logits.
pub fn cross_entropy<S: Scalar>(logits: &[S], labels: &[u8], classes: usize) -> Result<S> {
    if labels.is_empty() {
        return Ok(S::zero());
    }
    let mut total = S::zero();
    for (row, &y) in logits.chunks(classes).zip(labels) {
        let y = y as usize;
        if y >= classes {
            return Err(Error::InvalidLabel(y as u8));
        }
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
        total += lse - row[y];
    }
    Ok(total / S::lit(labels.len() as f64))
}

/// `d/dlogits` of [`cross_entropy`] scaled by `weight`.
pub fn cross_entropy_grad<S: Scalar>(logits: &[S], labels: &[u8], classes: usize, weight: S) -> Vec<S> {
    let scale = weight / S::lit(labels.len().max(1) as f64);
    let mut g = Vec::with_capacity(logits.len());
    for (row, &y) in logits.chunks(classes).zip(labels) {
        let p = softmax(row);
        for (k, &pk) in p.iter().enumerate() {
            let t = if k == y as usize { S::one() } else { S::zero() };
            g.push((pk - t) * scale);
        }
    }
    g
}

/// Target (class 1 or 2) versus non-target labels.
pub fn binary_labels(labels: &[u8]) -> Vec<u8> {
    labels.iter().map(|&y| u8::from(y > 0)).collect()
}

/// `L_ce + L_bce + λ(L_intra-eeg + L_intra-em)` from raw logits.
pub fn classification_loss<S: Scalar>(
    tri_logits: &[S],
    bin_logits: &[S],
    eeg_tri_logits: &[S],
    em_tri_logits: &[S],
    labels: &[u8],
    lambda: f64,
) -> Result<f64> {
    let bin = binary_labels(labels);
    for &y in labels {
        if y > 2 {
            return Err(Error::InvalidLabel(y));
        }
    }
    Ok(classification_total(
        cross_entropy(tri_logits, labels, 3)?.to_f64_lossy(),
        cross_entropy(bin_logits, &bin, 2)?.to_f64_lossy(),
        cross_entropy(eeg_tri_logits, labels, 3)?.to_f64_lossy(),
        cross_entropy(em_tri_logits, labels, 3)?.to_f64_lossy(),
        lambda,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_class_count() {
        let ce: f64 = cross_entropy(&[0.0; 6], &[0, 2], 3).unwrap();
        assert!((ce - 3f64.ln()).abs() < 1e-15);
        let bce: f64 = cross_entropy(&[0.0; 4], &[0, 1], 2).unwrap();
        assert!((bce - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn reference_cross_entropy() {
        let ce: f64 = cross_entropy(&[2.0, 1.0, 0.0], &[0], 3).unwrap();
        assert!((ce - 0.407_605_964_444_380_46).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_drops_intra_terms() {
        let tri = [0.5, -0.2, 0.1];
        let bin = [0.3, 0.9];
        let intra = [4.0, -4.0, 0.0];
        let l = classification_loss(&tri, &bin, &intra, &intra, &[2], 0.0).unwrap();
        let want = cross_entropy(&tri, &[2], 3).unwrap() + cross_entropy(&bin, &[1], 2).unwrap();
        assert_eq!(l, want);
    }

    #[test]
    fn invalid_label_is_rejected() {
        assert!(matches!(cross_entropy(&[0.0f64; 3], &[3], 3), Err(Error::InvalidLabel(3))));
    }

    #[test]
    fn overall_is_plain_sum() {
        assert!((overall_loss(1.0, 0.2, 0.1) - 1.3).abs() < 1e-15);
        assert_eq!(overall_loss(0.7, 0.0, 0.0), 0.7);
    }

    #[test]
    fn sweep_has_full_plus_five_single_removals() {
        let s = Ablation::sweep();
        assert_eq!(s[0].1, Ablation::FULL);
        for (_, a) in &s[1..] {
            let on = [a.no_dcm, a.no_cgrm, a.no_lcg, a.no_hsm, a.no_lsd];
            assert_eq!(on.iter().filter(|&&b| b).count(), 1);
        }
        let t = s[5].1.terms();
        assert!(t.bce && !t.sd && t.cg);
    }
}
