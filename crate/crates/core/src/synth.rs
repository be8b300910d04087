//! Synthetic RSVP-style trials with class-dependent ERP, pupil and gaze
//! morphology, and a counting oracle for the decoding metrics.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::dataio::{Event, RawRecording, TrialSet};
use crate::error::{Error, Result};
use crate::exec::{self, mix_seed};
use crate::metrics::MetricsReport;
use crate::model::EM_CHANNEL_NAMES;

pub const AR_COEFF: f64 = 0.95;
pub const PUPIL_BASE: f64 = 3000.0;
pub const GAZE_X_BASE: f64 = 640.0;
pub const GAZE_Y_BASE: f64 = 512.0;
/// Samples of EM-constant padding placed before the first trial of a raw export.
pub const RAW_LEAD: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_blocks: usize,
    pub trials_per_block: usize,
    pub class_probs: [f64; 3],
    /// EEG template power of the strongest class relative to noise power.
    pub snr_db: f64,
    /// ERP template amplitude per class (µV).
    pub erp_amp: [f64; 3],
    /// Peak pupil-area increase per class (px²).
    pub pupil_amp: [f64; 3],
    /// Horizontal gaze drift reached at trial end by class-2 trials (px).
    pub gaze_drift: f64,
    pub pupil_noise: f64,
    pub gaze_noise: f64,
    pub eeg_channels: usize,
    /// The last `template_channels` EEG channels carry the ERP.
    pub template_channels: usize,
    pub samples: usize,
    pub rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 1,
            n_blocks: 5,
            trials_per_block: 500,
            class_probs: [0.88, 0.06, 0.06],
            snr_db: 10.0,
            erp_amp: [0.0, 1.0, 0.6],
            pupil_amp: [0.0, 300.0, 150.0],
            gaze_drift: 20.0,
            pupil_noise: 40.0,
            gaze_noise: 4.0,
            eeg_channels: 64,
            template_channels: 16,
            samples: 128,
            rate: 128.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        if self.n_subjects == 0 || self.n_blocks == 0 || self.trials_per_block == 0 {
            return bad("subject, block and trial counts must be positive".into());
        }
        let sum: f64 = self.class_probs.iter().sum();
        if self.class_probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return bad(format!("class_probs must be non-negative and sum to 1 (sum {sum})"));
        }
        if !self.snr_db.is_finite() {
            return bad("snr_db must be finite".into());
        }
        if self.template_channels == 0 || self.template_channels > self.eeg_channels {
            return bad("template_channels must be in 1..=eeg_channels".into());
        }
        if self.samples == 0 || !(self.rate > 0.0) {
            return bad("samples and rate must be positive".into());
        }
        if self.erp_amp.iter().all(|a| *a == 0.0) {
            return bad("at least one class needs a non-zero ERP amplitude".into());
        }
        Ok(())
    }

    pub fn subject_id(i: usize) -> String {
        format!("sub-{:02}", i + 1)
    }

    /// Unit-amplitude ERP waveform: negative bump at 340 ms, positive at 520 ms.
    pub fn erp_template(&self) -> Vec<f64> {
        (0..self.samples)
            .map(|i| {
                let t = i as f64 / self.rate * 1000.0;
                let g = |mu: f64, sd: f64| (-(t - mu).powi(2) / (2.0 * sd * sd)).exp();
                -0.5 * g(340.0, 60.0) + g(520.0, 120.0)
            })
            .collect()
    }

    fn channel_gain(&self, c: usize) -> Option<f64> {
        let first = self.eeg_channels - self.template_channels;
        (c >= first).then(|| {
            let k = (c - first) as f64 / (self.template_channels.max(2) - 1) as f64;
            0.7 + 0.3 * k
        })
    }

    /// Stationary EEG noise standard deviation implied by `snr_db`.
    pub fn noise_std(&self) -> f64 {
        let amp = self.erp_amp.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let tpl = self.erp_template();
        let mut power = 0.0;
        for c in 0..self.eeg_channels {
            if let Some(g) = self.channel_gain(c) {
                power += tpl.iter().map(|v| (amp * g * v).powi(2)).sum::<f64>();
            }
        }
        power /= (self.template_channels * self.samples) as f64;
        (power / 10f64.powf(self.snr_db / 10.0)).sqrt()
    }

    fn pupil_curve(&self) -> Vec<f64> {
        (0..self.samples)
            .map(|i| {
                let t = i as f64 / self.rate;
                1.0 / (1.0 + (-(t - 0.6) / 0.05).exp())
            })
            .collect()
    }

    fn drift_curve(&self) -> Vec<f64> {
        let span = (self.samples as f64 / self.rate - 0.6).max(1e-9);
        (0..self.samples)
            .map(|i| ((i as f64 / self.rate - 0.6) / span).clamp(0.0, 1.0))
            .collect()
    }
}

fn ar1<R: rand::Rng>(out: &mut [f64], std: f64, rng: &mut R) {
    if std == 0.0 {
        out.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let innov = Normal::new(0.0, std * (1.0 - AR_COEFF * AR_COEFF).sqrt()).expect("finite std");
    let mut x = Normal::new(0.0, std).expect("finite std").sample(rng);
    for v in out.iter_mut() {
        *v = x;
        x = AR_COEFF * x + innov.sample(rng);
    }
}

/// Trial onset within a raw export, in samples.
pub fn raw_onset(cfg: &SynthConfig, trial: usize) -> u64 {
    (RAW_LEAD + trial * cfg.samples) as u64
}

fn generate_block(cfg: &SynthConfig, subject: usize, block: usize) -> TrialSet {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, subject as u64, block as u64]));
    let classes = WeightedIndex::new(cfg.class_probs).expect("validated class probabilities");
    let t = cfg.samples;
    let tpl = cfg.erp_template();
    let pupil = cfg.pupil_curve();
    let drift = cfg.drift_curve();
    let sigma = cfg.noise_std();
    let sid = SynthConfig::subject_id(subject);
    let mut ts = TrialSet::new(cfg.eeg_channels, EM_CHANNEL_NAMES.len(), t);
    let mut eeg = vec![0f32; cfg.eeg_channels * t];
    let mut em = vec![0f32; EM_CHANNEL_NAMES.len() * t];
    let mut row = vec![0f64; t];
    for k in 0..cfg.trials_per_block {
        let y = classes.sample(&mut rng);
        for c in 0..cfg.eeg_channels {
            ar1(&mut row, sigma, &mut rng);
            let g = cfg.channel_gain(c).unwrap_or(0.0) * cfg.erp_amp[y];
            for i in 0..t {
                eeg[c * t + i] = (row[i] + g * tpl[i]) as f32;
            }
        }
        for (c, name) in EM_CHANNEL_NAMES.iter().enumerate() {
            let (base, noise, signal): (f64, f64, Box<dyn Fn(usize) -> f64>) = if name.starts_with("pupil") {
                (PUPIL_BASE, cfg.pupil_noise, Box::new(|i| cfg.pupil_amp[y] * pupil[i]))
            } else if name.starts_with("gaze_x") {
                let d = if y == 2 { cfg.gaze_drift } else { 0.0 };
                let drift = &drift;
                (GAZE_X_BASE, cfg.gaze_noise, Box::new(move |i| d * drift[i]))
            } else {
                (GAZE_Y_BASE, cfg.gaze_noise, Box::new(|_| 0.0))
            };
            ar1(&mut row, noise, &mut rng);
            for i in 0..t {
                em[c * t + i] = (base + signal(i) + row[i]) as f32;
            }
        }
        ts.push(&sid, (block + 1) as u32, raw_onset(cfg, k), y as u8, &eeg, &em)
            .expect("generator shapes are consistent");
    }
    ts
}

/// Generates every subject and block, ordered by (subject, block, onset).
pub fn generate(cfg: &SynthConfig) -> Result<TrialSet> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.n_subjects)
        .flat_map(|s| (0..cfg.n_blocks).map(move |b| (s, b)))
        .collect();
    let parts = exec::map_range(jobs.len(), |j| generate_block(cfg, jobs[j].0, jobs[j].1));
    let mut all = TrialSet::new(cfg.eeg_channels, EM_CHANNEL_NAMES.len(), cfg.samples);
    for p in &parts {
        all.append(p)?;
    }
    all.sort();
    Ok(all)
}

/// Lays out one subject-block of generated trials as a continuous recording
/// at the generator rate with events at each trial start.
pub fn to_raw(cfg: &SynthConfig, ts: &TrialSet, subject: &str, block: u32, task: &str) -> RawRecording {
    let idx: Vec<usize> = (0..ts.len())
        .filter(|&i| ts.subject_of(i) == subject && ts.blocks[i] == block)
        .collect();
    let t = ts.samples;
    let n = RAW_LEAD + idx.len() * t;
    let mut eeg = vec![0f32; ts.eeg_channels * n];
    let mut em = vec![0f32; ts.em_channels * n];
    let mut events = Vec::with_capacity(idx.len());
    for (k, &i) in idx.iter().enumerate() {
        let start = ts.onsets[i] as usize;
        for c in 0..ts.eeg_channels {
            eeg[c * n + start..c * n + start + t].copy_from_slice(&ts.eeg_trial(i)[c * t..(c + 1) * t]);
        }
        for c in 0..ts.em_channels {
            let src = &ts.em_trial(i)[c * t..(c + 1) * t];
            em[c * n + start..c * n + start + t].copy_from_slice(src);
            if k == 0 {
                em[c * n..c * n + start].iter_mut().for_each(|v| *v = src[0]);
            }
        }
        events.push(Event {
            onset: ts.onsets[i],
            label: ts.labels[i],
        });
    }
    RawRecording {
        subject: subject.to_string(),
        task: task.to_string(),
        block,
        rate: cfg.rate,
        samples: n,
        eeg_channels: (0..ts.eeg_channels).map(|c| format!("E{:02}", c + 1)).collect(),
        eeg,
        em_channels: EM_CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        em,
        events,
    }
}

/// Metrics by exhaustive enumeration of (true, predicted) class pairs.
pub fn oracle_metrics(y_true: &[u8], y_pred: &[u8]) -> Result<MetricsReport> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(Error::Empty("label lists must be non-empty and of equal length"));
    }
    if let Some(&bad) = y_true.iter().chain(y_pred).find(|&&v| v > 2) {
        return Err(Error::InvalidLabel(bad));
    }
    let mut confusion = [[0u64; 3]; 3];
    for (i, row) in confusion.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = y_true
                .iter()
                .zip(y_pred)
                .filter(|&(&a, &b)| a as usize == i && b as usize == j)
                .count() as u64;
        }
    }
    let mut tpr = [0.0; 3];
    let mut precision = [0.0; 3];
    let mut f1 = [0.0; 3];
    for k in 0..3 {
        let tp = confusion[k][k] as f64;
        let fneg: f64 = (0..3).filter(|&j| j != k).map(|j| confusion[k][j] as f64).sum();
        let fpos: f64 = (0..3).filter(|&i| i != k).map(|i| confusion[i][k] as f64).sum();
        tpr[k] = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
        precision[k] = if tp + fpos > 0.0 { tp / (tp + fpos) } else { 0.0 };
        f1[k] = if tpr[k] + precision[k] > 0.0 {
            2.0 * precision[k] * tpr[k] / (precision[k] + tpr[k])
        } else {
            0.0
        };
    }
    Ok(MetricsReport {
        confusion,
        tpr,
        precision,
        f1,
        ba: (tpr[0] + tpr[1] + tpr[2]) / 3.0,
        recall: (tpr[1] + tpr[2]) / 2.0,
        f1_macro: (f1[0] + f1[1] + f1[2]) / 3.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_examples() {
        let y = [0, 1, 2, 0, 1, 2];
        let m = oracle_metrics(&y, &y).unwrap();
        assert_eq!(m.ba, 1.0);
        assert_eq!(m.f1_macro, 1.0);
        let m = oracle_metrics(&y, &[0; 6]).unwrap();
        assert!((m.ba - 1.0 / 3.0).abs() < 1e-15);
        assert!(matches!(oracle_metrics(&[0], &[3]), Err(Error::InvalidLabel(3))));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            SynthConfig {
                trials_per_block: 0,
                ..Default::default()
            },
            SynthConfig {
                class_probs: [0.5, 0.3, 0.3],
                ..Default::default()
            },
            SynthConfig {
                snr_db: f64::NAN,
                ..Default::default()
            },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn template_peaks_follow_morphology() {
        let cfg = SynthConfig::default();
        let tpl = cfg.erp_template();
        let argmax = (0..tpl.len()).max_by(|&a, &b| tpl[a].total_cmp(&tpl[b])).unwrap();
        let ms = argmax as f64 / cfg.rate * 1000.0;
        assert!((500.0..540.0).contains(&ms), "{ms}");
        assert!(tpl[(0.34 * cfg.rate) as usize] < 0.0);
    }
}
