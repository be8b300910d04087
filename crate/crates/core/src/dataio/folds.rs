//! Block-level outer folds with stratified inner splits, and majority-class
//! down-sampling of training sets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{class_counts, TrialSet};
use crate::error::{Error, Result};
use crate::exec::mix_seed;

pub const BLOCKS_PER_SUBJECT: usize = 5;
pub const INNER_FOLDS: usize = 5;

/// Trial indices (into the planned [`TrialSet`]) of one inner split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InnerSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OuterFold {
    pub test_block: u32,
    pub train_blocks: Vec<u32>,
    pub test: Vec<usize>,
    pub inner: Vec<InnerSplit>,
}

impl OuterFold {
    /// All training-block trials, ascending.
    pub fn train(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.inner[0].train.iter().chain(&self.inner[0].val).copied().collect();
        all.sort_unstable();
        all
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub subject: String,
    pub outer: Vec<OuterFold>,
}

/// Plans the nested folds of one subject. Outer folds follow ascending block
/// id; inner splits deal each class's shuffled trials round-robin into
/// [`INNER_FOLDS`] validation parts.
pub fn plan_folds(ts: &TrialSet, subject: &str, seed: u64) -> Result<FoldPlan> {
    let mine: Vec<usize> = (0..ts.len()).filter(|&i| ts.subject_of(i) == subject).collect();
    let mut blocks: Vec<u32> = mine.iter().map(|&i| ts.blocks[i]).collect();
    blocks.sort_unstable();
    blocks.dedup();
    if blocks.len() != BLOCKS_PER_SUBJECT {
        return Err(Error::FoldArity {
            subject: subject.to_string(),
            found: blocks.len(),
            expected: BLOCKS_PER_SUBJECT,
        });
    }
    // Order within a block by onset so the plan ignores input ordering.
    let mut mine = mine;
    mine.sort_by_key(|&i| (ts.blocks[i], ts.onsets[i], i));
    let subject_hash = subject.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64));

    let outer = blocks
        .iter()
        .enumerate()
        .map(|(fi, &test_block)| {
            let test: Vec<usize> = mine.iter().copied().filter(|&i| ts.blocks[i] == test_block).collect();
            let train: Vec<usize> = mine.iter().copied().filter(|&i| ts.blocks[i] != test_block).collect();
            let mut parts: Vec<Vec<usize>> = vec![Vec::new(); INNER_FOLDS];
            for class in 0..3u8 {
                let mut idx: Vec<usize> = train.iter().copied().filter(|&i| ts.labels[i] == class).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, subject_hash, fi as u64, class as u64]));
                idx.shuffle(&mut rng);
                for (k, i) in idx.into_iter().enumerate() {
                    parts[k % INNER_FOLDS].push(i);
                }
            }
            let inner = (0..INNER_FOLDS)
                .map(|k| {
                    let mut val = parts[k].clone();
                    val.sort_unstable();
                    let mut tr: Vec<usize> = parts
                        .iter()
                        .enumerate()
                        .filter(|&(j, _)| j != k)
                        .flat_map(|(_, p)| p.iter().copied())
                        .collect();
                    tr.sort_unstable();
                    InnerSplit { train: tr, val }
                })
                .collect();
            OuterFold {
                test_block,
                train_blocks: blocks.iter().copied().filter(|&b| b != test_block).collect(),
                test,
                inner,
            }
        })
        .collect();
    Ok(FoldPlan {
        subject: subject.to_string(),
        outer,
    })
}

/// Down-samples non-target trials among `indices` to the rounded mean of the
/// two target-class counts. Returned indices keep their input order.
pub fn rebalance(labels: &[u8], indices: &[usize], seed: u64) -> Result<Vec<usize>> {
    let sel: Vec<u8> = indices.iter().map(|&i| labels[i]).collect();
    let [nt, t1, t2] = class_counts(&sel);
    if t1 == 0 || t2 == 0 {
        return Err(Error::DegenerateClasses(format!(
            "training set has counts NT={nt}, T1={t1}, T2={t2}; both target classes are required"
        )));
    }
    let keep_nt = ((t1 + t2) as f64 / 2.0).round() as usize;
    if nt <= keep_nt {
        return Ok(indices.to_vec());
    }
    let nt_pos: Vec<usize> = (0..indices.len()).filter(|&k| sel[k] == 0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; indices.len()];
    for k in rand::seq::index::sample(&mut rng, nt_pos.len(), keep_nt) {
        keep[nt_pos[k]] = true;
    }
    Ok(indices
        .iter()
        .enumerate()
        .filter(|&(k, _)| sel[k] != 0 || keep[k])
        .map(|(_, &i)| i)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(nt: usize, t1: usize, t2: usize) -> Vec<u8> {
        let mut v = vec![0u8; nt];
        v.extend(vec![1u8; t1]);
        v.extend(vec![2u8; t2]);
        v
    }

    #[test]
    fn rebalance_examples() {
        let l = labels(4400, 300, 300);
        let idx: Vec<usize> = (0..l.len()).collect();
        let out = rebalance(&l, &idx, 1).unwrap();
        let sel: Vec<u8> = out.iter().map(|&i| l[i]).collect();
        assert_eq!(class_counts(&sel), [300, 300, 300]);

        let l = labels(100, 10, 14);
        let idx: Vec<usize> = (0..l.len()).collect();
        let out = rebalance(&l, &idx, 1).unwrap();
        let sel: Vec<u8> = out.iter().map(|&i| l[i]).collect();
        assert_eq!(class_counts(&sel), [12, 10, 14]);

        let l = labels(5, 5, 5);
        let idx: Vec<usize> = (0..l.len()).rev().collect();
        assert_eq!(rebalance(&l, &idx, 9).unwrap(), idx);
    }

    #[test]
    fn rebalance_requires_both_targets() {
        let l = labels(10, 3, 0);
        let idx: Vec<usize> = (0..l.len()).collect();
        assert!(matches!(rebalance(&l, &idx, 0), Err(Error::DegenerateClasses(_))));
    }
}
