//! Trial containers, the on-disk corpus layout, preprocessing of raw
//! recordings, fold planning and class rebalancing.

pub mod filter;
pub mod folds;
pub mod layout;
pub mod preprocess;

pub use folds::{plan_folds, rebalance, FoldPlan, InnerSplit, OuterFold, BLOCKS_PER_SUBJECT, INNER_FOLDS};
pub use layout::{load_dataset, read_raw_block, read_trials, write_raw, write_trials, Corpus, Event, RawRecording};
pub use preprocess::{preprocess, preprocess_all, PreprocessConfig};

use crate::error::{check_dim, Error, Result};

pub const CLASS_NAMES: [&str; 3] = ["non-target", "target-1", "target-2"];

/// Epoched trials stored as contiguous `[n, channels, samples]` arrays.
///
/// Trials may come from several subjects; `subjects[i]` indexes `subject_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    pub eeg_channels: usize,
    pub em_channels: usize,
    pub samples: usize,
    pub eeg: Vec<f32>,
    pub em: Vec<f32>,
    pub labels: Vec<u8>,
    pub blocks: Vec<u32>,
    pub onsets: Vec<u64>,
    pub subjects: Vec<u32>,
    pub subject_ids: Vec<String>,
}

impl TrialSet {
    pub fn new(eeg_channels: usize, em_channels: usize, samples: usize) -> Self {
        Self {
            eeg_channels,
            em_channels,
            samples,
            eeg: Vec::new(),
            em: Vec::new(),
            labels: Vec::new(),
            blocks: Vec::new(),
            onsets: Vec::new(),
            subjects: Vec::new(),
            subject_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn eeg_len(&self) -> usize {
        self.eeg_channels * self.samples
    }

    pub fn em_len(&self) -> usize {
        self.em_channels * self.samples
    }

    fn subject_index(&mut self, subject: &str) -> u32 {
        match self.subject_ids.iter().position(|s| s == subject) {
            Some(i) => i as u32,
            None => {
                self.subject_ids.push(subject.to_string());
                (self.subject_ids.len() - 1) as u32
            }
        }
    }

    pub fn push(&mut self, subject: &str, block: u32, onset: u64, label: u8, eeg: &[f32], em: &[f32]) -> Result<()> {
        if label > 2 {
            return Err(Error::InvalidLabel(label));
        }
        check_dim("trial eeg", self.eeg_len(), eeg.len())?;
        check_dim("trial em", self.em_len(), em.len())?;
        let s = self.subject_index(subject);
        self.eeg.extend_from_slice(eeg);
        self.em.extend_from_slice(em);
        self.labels.push(label);
        self.blocks.push(block);
        self.onsets.push(onset);
        self.subjects.push(s);
        Ok(())
    }

    pub fn eeg_trial(&self, i: usize) -> &[f32] {
        &self.eeg[i * self.eeg_len()..(i + 1) * self.eeg_len()]
    }

    pub fn em_trial(&self, i: usize) -> &[f32] {
        &self.em[i * self.em_len()..(i + 1) * self.em_len()]
    }

    pub fn subject_of(&self, i: usize) -> &str {
        &self.subject_ids[self.subjects[i] as usize]
    }

    /// Trials at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> TrialSet {
        let mut out = TrialSet::new(self.eeg_channels, self.em_channels, self.samples);
        out.eeg.reserve(indices.len() * self.eeg_len());
        out.em.reserve(indices.len() * self.em_len());
        for &i in indices {
            let s = out.subject_index(self.subject_of(i));
            out.eeg.extend_from_slice(self.eeg_trial(i));
            out.em.extend_from_slice(self.em_trial(i));
            out.labels.push(self.labels[i]);
            out.blocks.push(self.blocks[i]);
            out.onsets.push(self.onsets[i]);
            out.subjects.push(s);
        }
        out
    }

    pub fn append(&mut self, other: &TrialSet) -> Result<()> {
        check_dim("eeg channels", self.eeg_channels, other.eeg_channels)?;
        check_dim("em channels", self.em_channels, other.em_channels)?;
        check_dim("samples", self.samples, other.samples)?;
        for i in 0..other.len() {
            let s = self.subject_index(other.subject_of(i));
            self.subjects.push(s);
        }
        self.eeg.extend_from_slice(&other.eeg);
        self.em.extend_from_slice(&other.em);
        self.labels.extend_from_slice(&other.labels);
        self.blocks.extend_from_slice(&other.blocks);
        self.onsets.extend_from_slice(&other.onsets);
        Ok(())
    }

    /// Reorders trials by (subject id, block, onset).
    pub fn sort(&mut self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            (self.subject_of(a), self.blocks[a], self.onsets[a]).cmp(&(self.subject_of(b), self.blocks[b], self.onsets[b]))
        });
        let mut sorted = self.subset(&idx);
        let mut ids = sorted.subject_ids.clone();
        ids.sort();
        sorted.subjects = sorted
            .subjects
            .iter()
            .map(|&s| ids.iter().position(|x| *x == sorted.subject_ids[s as usize]).unwrap() as u32)
            .collect();
        sorted.subject_ids = ids;
        *self = sorted;
    }

    /// Trials of one subject, in stored order.
    pub fn for_subject(&self, subject: &str) -> TrialSet {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.subject_of(i) == subject).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> [usize; 3] {
        class_counts(&self.labels)
    }

    /// Distinct block ids, ascending.
    pub fn block_ids(&self) -> Vec<u32> {
        let mut b = self.blocks.clone();
        b.sort_unstable();
        b.dedup();
        b
    }

    /// Batch arrays for `indices`.
    pub fn gather(&self, indices: &[usize]) -> (Vec<f32>, Vec<f32>, Vec<u8>) {
        let mut eeg = Vec::with_capacity(indices.len() * self.eeg_len());
        let mut em = Vec::with_capacity(indices.len() * self.em_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            eeg.extend_from_slice(self.eeg_trial(i));
            em.extend_from_slice(self.em_trial(i));
            labels.push(self.labels[i]);
        }
        (eeg, em, labels)
    }

    /// Per-channel mean and standard deviation over all trials and samples.
    pub fn channel_stats(&self) -> ChannelStats {
        let stats = |data: &[f32], channels: usize| {
            let mut sum = vec![0.0f64; channels];
            let mut sq = vec![0.0f64; channels];
            for (i, row) in data.chunks(self.samples).enumerate() {
                let c = i % channels;
                for &v in row {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
            let n = (self.len() * self.samples).max(1) as f64;
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let std = sq
                .iter()
                .zip(&mean)
                .map(|(q, m)| (q / n - m * m).max(0.0).sqrt())
                .collect();
            (mean, std)
        };
        let (eeg_mean, eeg_std) = stats(&self.eeg, self.eeg_channels);
        let (em_mean, em_std) = stats(&self.em, self.em_channels);
        ChannelStats {
            eeg_mean,
            eeg_std,
            em_mean,
            em_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub eeg_mean: Vec<f64>,
    pub eeg_std: Vec<f64>,
    pub em_mean: Vec<f64>,
    pub em_std: Vec<f64>,
}

pub fn class_counts(labels: &[u8]) -> [usize; 3] {
    let mut c = [0; 3];
    for &y in labels {
        c[y as usize] += 1;
    }
    c
}

pub fn parse_label(s: &str) -> Option<u8> {
    match s.trim() {
        "non-target" | "0" => Some(0),
        "target-1" | "1" => Some(1),
        "target-2" | "2" => Some(2),
        _ => None,
    }
}
