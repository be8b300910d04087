//! Continuous recordings to epoched trials: band-pass (EEG only), dropout
//! repair (EM only), rate conversion, epoching and baseline correction.

use serde::{Deserialize, Serialize};

use super::filter::{butter_bandpass, filtfilt, resample_poly};
use super::{RawRecording, TrialSet};
use crate::error::{Error, Result};
use crate::exec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub target_rate: f64,
    pub band: [f64; 2],
    pub filter_order: usize,
    pub baseline_ms: [f64; 2],
    pub epoch_ms: [f64; 2],
    /// Permit polyphase resampling when the source rate is not an integer
    /// multiple of the target rate.
    pub resample: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_rate: 128.0,
            band: [0.5, 15.0],
            filter_order: 3,
            baseline_ms: [-200.0, 0.0],
            epoch_ms: [0.0, 1000.0],
            resample: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("preprocess: {m}")));
        if !(self.target_rate > 0.0) {
            return bad("target_rate must be positive");
        }
        if !(0.0 < self.band[0] && self.band[0] < self.band[1] && self.band[1] < self.target_rate / 2.0) {
            return bad("band must satisfy 0 < low < high < target_rate / 2");
        }
        if self.filter_order == 0 {
            return bad("filter_order must be positive");
        }
        if !(self.baseline_ms[0] < self.baseline_ms[1]) || !(self.epoch_ms[0] < self.epoch_ms[1]) {
            return bad("windows must have start < end");
        }
        Ok(())
    }

    fn to_samples(&self, ms: f64) -> i64 {
        (ms * self.target_rate / 1000.0).round() as i64
    }

    /// Samples per trial at the target rate.
    pub fn epoch_samples(&self) -> usize {
        (self.to_samples(self.epoch_ms[1]) - self.to_samples(self.epoch_ms[0])) as usize
    }
}

/// Marks pupil ≤ 0 or non-finite values as invalid for the whole eye, and
/// non-finite values in channels without an eye suffix as invalid for that
/// channel; invalid runs are linearly interpolated, edge runs held.
pub fn repair_dropouts(em: &mut [f64], channels: &[String], samples: usize) {
    let eye_of = |name: &str| {
        if name.ends_with("_left") {
            Some(0)
        } else if name.ends_with("_right") {
            Some(1)
        } else {
            None
        }
    };
    let mut eye_invalid = [vec![false; samples], vec![false; samples]];
    for (c, name) in channels.iter().enumerate() {
        if let Some(eye) = eye_of(name) {
            let row = &em[c * samples..(c + 1) * samples];
            let pupil = name.starts_with("pupil");
            for (t, &v) in row.iter().enumerate() {
                if !v.is_finite() || (pupil && v <= 0.0) {
                    eye_invalid[eye][t] = true;
                }
            }
        }
    }
    for (c, name) in channels.iter().enumerate() {
        let row = &mut em[c * samples..(c + 1) * samples];
        let invalid: Vec<bool> = match eye_of(name) {
            Some(eye) => eye_invalid[eye].clone(),
            None => row.iter().map(|v| !v.is_finite()).collect(),
        };
        interpolate_gaps(row, &invalid);
    }
}

fn interpolate_gaps(row: &mut [f64], invalid: &[bool]) {
    let n = row.len();
    let valid: Vec<usize> = (0..n).filter(|&t| !invalid[t]).collect();
    if valid.is_empty() {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut t = 0;
    while t < n {
        if !invalid[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < n && invalid[t] {
            t += 1;
        }
        let left = start.checked_sub(1);
        let right = (t < n).then_some(t);
        match (left, right) {
            (Some(l), Some(r)) => {
                let (a, b) = (row[l], row[r]);
                for i in start..t {
                    let w = (i - l) as f64 / (r - l) as f64;
                    row[i] = a + (b - a) * w;
                }
            }
            (Some(l), None) => {
                let a = row[l];
                row[start..t].iter_mut().for_each(|v| *v = a);
            }
            (None, Some(r)) => {
                let b = row[r];
                row[start..t].iter_mut().for_each(|v| *v = b);
            }
            (None, None) => unreachable!("at least one valid sample"),
        }
    }
}

fn convert_rate(row: &[f64], from: f64, to: f64, allow_resample: bool) -> Result<Vec<f64>> {
    let ratio = from / to;
    if (ratio - ratio.round()).abs() < 1e-9 && ratio.round() >= 1.0 {
        let q = ratio.round() as usize;
        return Ok(row.iter().step_by(q).copied().collect());
    }
    if !allow_resample {
        return Err(Error::Config(format!(
            "source rate {from} Hz is not an integer multiple of {to} Hz and resampling is disabled"
        )));
    }
    let up = (to * 1000.0).round() as usize;
    let down = (from * 1000.0).round() as usize;
    Ok(resample_poly(row, up, down))
}

/// Epochs one recording. Returns the trials and the number of events whose
/// baseline or epoch window fell outside the recording.
pub fn preprocess(rec: &RawRecording, cfg: &PreprocessConfig) -> Result<(TrialSet, usize)> {
    cfg.validate()?;
    let n = rec.samples;
    let (ce, cm) = (rec.eeg_channels.len(), rec.em_channels.len());
    if rec.eeg.len() != ce * n || rec.em.len() != cm * n {
        return Err(Error::Shape {
            axis: "recording",
            expected: (ce + cm) * n,
            got: rec.eeg.len() + rec.em.len(),
        });
    }
    if cfg.band[1] >= rec.rate / 2.0 {
        return Err(Error::Config(format!("band exceeds Nyquist of {} Hz", rec.rate)));
    }
    let sos = butter_bandpass(cfg.filter_order, cfg.band[0], cfg.band[1], rec.rate);
    let mut eeg_rows = Vec::with_capacity(ce);
    for c in 0..ce {
        let row: Vec<f64> = rec.eeg[c * n..(c + 1) * n].iter().map(|&v| v as f64).collect();
        eeg_rows.push(convert_rate(&filtfilt(&sos, &row), rec.rate, cfg.target_rate, cfg.resample)?);
    }
    let mut em: Vec<f64> = rec.em.iter().map(|&v| v as f64).collect();
    repair_dropouts(&mut em, &rec.em_channels, n);
    let mut em_rows = Vec::with_capacity(cm);
    for c in 0..cm {
        em_rows.push(convert_rate(&em[c * n..(c + 1) * n], rec.rate, cfg.target_rate, cfg.resample)?);
    }
    let len = eeg_rows.first().or(em_rows.first()).map_or(0, Vec::len) as i64;

    let t = cfg.epoch_samples();
    let (e0, b0, b1) = (
        cfg.to_samples(cfg.epoch_ms[0]),
        cfg.to_samples(cfg.baseline_ms[0]),
        cfg.to_samples(cfg.baseline_ms[1]),
    );
    let mut ts = TrialSet::new(ce, cm, t);
    let mut skipped = 0;
    let mut eeg_trial = vec![0f32; ce * t];
    let mut em_trial = vec![0f32; cm * t];
    for ev in &rec.events {
        let onset = (ev.onset as f64 * cfg.target_rate / rec.rate).round() as i64;
        let start = onset + e0;
        let (bs, be) = (onset + b0, onset + b1);
        if bs < 0 || start < 0 || start + t as i64 > len || be > len {
            skipped += 1;
            continue;
        }
        let (start, bs, be) = (start as usize, bs as usize, be as usize);
        for (c, row) in eeg_rows.iter().enumerate() {
            let base = if be > bs {
                row[bs..be].iter().sum::<f64>() / (be - bs) as f64
            } else {
                0.0
            };
            for (dst, &v) in eeg_trial[c * t..(c + 1) * t].iter_mut().zip(&row[start..start + t]) {
                *dst = (v - base) as f32;
            }
        }
        for (c, row) in em_rows.iter().enumerate() {
            for (dst, &v) in em_trial[c * t..(c + 1) * t].iter_mut().zip(&row[start..start + t]) {
                *dst = v as f32;
            }
        }
        ts.push(&rec.subject, rec.block, ev.onset, ev.label, &eeg_trial, &em_trial)?;
    }
    if skipped > 0 {
        log::warn!(
            "{} block {}: skipped {skipped} event(s) too close to the recording edges",
            rec.subject,
            rec.block
        );
    }
    Ok((ts, skipped))
}

/// Preprocesses recordings in parallel and merges them in (subject, block, onset) order.
pub fn preprocess_all(recs: &[RawRecording], cfg: &PreprocessConfig) -> Result<(TrialSet, usize)> {
    let parts = exec::map_range(recs.len(), |i| preprocess(&recs[i], cfg));
    let mut out: Option<TrialSet> = None;
    let mut skipped = 0;
    for part in parts {
        let (ts, s) = part?;
        skipped += s;
        match out.as_mut() {
            None => out = Some(ts),
            Some(acc) => acc.append(&ts)?,
        }
    }
    let mut out = out.ok_or(Error::Empty("recordings"))?;
    out.sort();
    Ok((out, skipped))
}

#[cfg(test)]
mod tests {
    use super::super::Event;
    use super::*;

    fn recording(rate: f64, samples: usize, eeg_fn: impl Fn(usize, f64) -> f32) -> RawRecording {
        let ce = 2;
        RawRecording {
            subject: "s".into(),
            task: "A".into(),
            block: 1,
            rate,
            samples,
            eeg_channels: vec!["a".into(), "b".into()],
            eeg: (0..ce * samples).map(|i| eeg_fn(i / samples, (i % samples) as f64 / rate)).collect(),
            em_channels: vec!["pupil_left".into(), "gaze_x_left".into()],
            em: (0..2 * samples).map(|i| (i % samples) as f32).collect(),
            events: vec![Event { onset: 5000, label: 1 }, Event { onset: 100, label: 0 }],
        }
    }

    #[test]
    fn thousand_hz_event_yields_one_trial() {
        let rec = recording(1000.0, 8000, |_, t| (t * 3.0).sin() as f32);
        let (ts, skipped) = preprocess(&rec, &PreprocessConfig::default()).unwrap();
        assert_eq!(ts.len(), 1);
        assert_eq!(skipped, 1);
        assert_eq!(ts.eeg_trial(0).len(), 2 * 128);
        assert_eq!(ts.labels, vec![1]);
    }

    #[test]
    fn constant_eeg_becomes_zero() {
        let rec = recording(1024.0, 8000, |c, _| 40.0 + c as f32);
        let (ts, _) = preprocess(&rec, &PreprocessConfig::default()).unwrap();
        assert!(ts.eeg.iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn em_is_decimated_without_filtering() {
        let rec = recording(1024.0, 8000, |_, _| 0.0);
        let (ts, _) = preprocess(&rec, &PreprocessConfig::default()).unwrap();
        // onset 5000 at 1024 Hz → sample 625 at 128 Hz → source sample 5000
        let em = ts.em_trial(0);
        assert_eq!(em[0], 5000.0);
        assert_eq!(em[1], 5008.0);
    }

    #[test]
    fn dropouts_are_interpolated_per_eye() {
        let names: Vec<String> = ["pupil_left", "gaze_x_left", "gaze_y_right"].iter().map(|s| s.to_string()).collect();
        let mut em = vec![
            1.0, 0.0, 0.0, 4.0, 5.0, //
            10.0, 99.0, 99.0, 13.0, 14.0, //
            f64::NAN, 2.0, f64::NAN, 4.0, f64::NAN,
        ];
        repair_dropouts(&mut em, &names, 5);
        assert_eq!(&em[..5], &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(&em[5..10], &[10.0, 11.0, 12.0, 13.0, 14.0]);
        assert_eq!(&em[10..], &[2.0, 2.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn non_integer_ratio_requires_resampling() {
        let rec = recording(1000.0, 4000, |_, _| 0.0);
        let cfg = PreprocessConfig {
            resample: false,
            ..PreprocessConfig::default()
        };
        assert!(matches!(preprocess(&rec, &cfg), Err(Error::Config(_))));
    }
}
