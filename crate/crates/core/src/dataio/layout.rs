//! Directory layout of raw and preprocessed corpora.
//!
//! ```text
//! <root>/<subject>/<task>/<block>/eeg.bin + eeg.meta.json
//!                                 em.bin  + em.meta.json
//!                                 events.tsv
//! <root>/<subject>/<task>/trials.bin + trials.meta.json
//! ```
//!
//! Binary arrays are little-endian `f32`, row-major `[channels, samples]`.
//! `trials.bin` holds every trial's EEG `[n, C_eeg, T]` followed by every
//! trial's EM `[n, C_em, T]`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{parse_label, TrialSet, CLASS_NAMES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    /// Onset in source-rate samples.
    pub onset: u64,
    pub label: u8,
}

/// One block of continuous recording at the source rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub subject: String,
    pub task: String,
    pub block: u32,
    pub rate: f64,
    pub samples: usize,
    pub eeg_channels: Vec<String>,
    /// `[C_eeg, samples]`.
    pub eeg: Vec<f32>,
    pub em_channels: Vec<String>,
    /// `[C_em, samples]`.
    pub em: Vec<f32>,
    pub events: Vec<Event>,
}

pub enum Corpus {
    Trials(TrialSet),
    Raw(Vec<RawRecording>),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayMeta {
    shape: [usize; 2],
    rate: f64,
    channels: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrialsMeta {
    subject: String,
    task: String,
    n_trials: usize,
    eeg_channels: usize,
    em_channels: usize,
    samples: usize,
    rate: f64,
    labels: Vec<u8>,
    blocks: Vec<u32>,
    onsets: Vec<u64>,
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::schema(
            path,
            format!("expected {expected} f32 values, found {} bytes", bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    write_file(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::schema(path, e.to_string()))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::CorpusIncomplete(format!("missing {}", path.display())))
    }
}

/// Writes a recording under `<root>/<subject>/<task>/<block>/`.
pub fn write_raw(root: &Path, rec: &RawRecording) -> Result<PathBuf> {
    let dir = root.join(&rec.subject).join(&rec.task).join(rec.block.to_string());
    for (name, channels, data) in [("eeg", &rec.eeg_channels, &rec.eeg), ("em", &rec.em_channels, &rec.em)] {
        let meta = ArrayMeta {
            shape: [channels.len(), rec.samples],
            rate: rec.rate,
            channels: channels.clone(),
        };
        write_json(&dir.join(format!("{name}.meta.json")), &meta)?;
        write_file(&dir.join(format!("{name}.bin")), &f32_bytes(data))?;
    }
    let mut tsv = String::new();
    for e in &rec.events {
        tsv.push_str(&format!("{}\t{}\n", e.onset, CLASS_NAMES[e.label as usize]));
    }
    write_file(&dir.join("events.tsv"), tsv.as_bytes())?;
    Ok(dir)
}

/// Reads one block directory written by [`write_raw`].
pub fn read_raw_block(dir: &Path, subject: &str, task: &str, block: u32) -> Result<RawRecording> {
    let mut arrays = Vec::new();
    for name in ["eeg", "em"] {
        let meta_path = dir.join(format!("{name}.meta.json"));
        let bin_path = dir.join(format!("{name}.bin"));
        require(&meta_path)?;
        require(&bin_path)?;
        let meta: ArrayMeta = read_json(&meta_path)?;
        if meta.channels.len() != meta.shape[0] {
            return Err(Error::schema(&meta_path, "channel names do not match shape"));
        }
        if !(meta.rate > 0.0) {
            return Err(Error::schema(&meta_path, "rate must be positive"));
        }
        let data = read_f32(&bin_path, meta.shape[0] * meta.shape[1])?;
        arrays.push((meta, data));
    }
    let (em_meta, em) = arrays.pop().unwrap();
    let (eeg_meta, eeg) = arrays.pop().unwrap();
    if eeg_meta.shape[1] != em_meta.shape[1] || eeg_meta.rate != em_meta.rate {
        return Err(Error::schema(dir, "EEG and EM differ in length or rate"));
    }
    let events_path = dir.join("events.tsv");
    require(&events_path)?;
    let text = fs::read_to_string(&events_path).map_err(|e| Error::io(&events_path, e))?;
    let mut events = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let onset = parts.next().and_then(|s| s.trim().parse::<u64>().ok());
        let label = parts.next().and_then(parse_label);
        match (onset, label, parts.next()) {
            (Some(onset), Some(label), None) => events.push(Event { onset, label }),
            _ => return Err(Error::schema(&events_path, format!("malformed line {}", n + 1))),
        }
    }
    events.sort_by_key(|e| e.onset);
    Ok(RawRecording {
        subject: subject.to_string(),
        task: task.to_string(),
        block,
        rate: eeg_meta.rate,
        samples: eeg_meta.shape[1],
        eeg_channels: eeg_meta.channels,
        eeg,
        em_channels: em_meta.channels,
        em,
        events,
    })
}

/// Writes each subject of `ts` to `<root>/<subject>/<task>/trials.bin`.
pub fn write_trials(root: &Path, task: &str, ts: &TrialSet, rate: f64) -> Result<()> {
    for subject in ts.subject_ids.clone() {
        let sub = ts.for_subject(&subject);
        let dir = root.join(&subject).join(task);
        let meta = TrialsMeta {
            subject: subject.clone(),
            task: task.to_string(),
            n_trials: sub.len(),
            eeg_channels: sub.eeg_channels,
            em_channels: sub.em_channels,
            samples: sub.samples,
            rate,
            labels: sub.labels.clone(),
            blocks: sub.blocks.clone(),
            onsets: sub.onsets.clone(),
        };
        write_json(&dir.join("trials.meta.json"), &meta)?;
        let mut bytes = f32_bytes(&sub.eeg);
        bytes.extend(f32_bytes(&sub.em));
        write_file(&dir.join("trials.bin"), &bytes)?;
    }
    Ok(())
}

/// Reads `<dir>/trials.bin` with its sidecar.
pub fn read_trials(dir: &Path) -> Result<TrialSet> {
    let meta_path = dir.join("trials.meta.json");
    let bin_path = dir.join("trials.bin");
    require(&meta_path)?;
    require(&bin_path)?;
    let meta: TrialsMeta = read_json(&meta_path)?;
    let n = meta.n_trials;
    if meta.labels.len() != n || meta.blocks.len() != n || meta.onsets.len() != n {
        return Err(Error::schema(&meta_path, "per-trial arrays disagree with n_trials"));
    }
    if let Some(&bad) = meta.labels.iter().find(|&&y| y > 2) {
        return Err(Error::schema(&meta_path, format!("label {bad} out of range")));
    }
    let eeg_len = n * meta.eeg_channels * meta.samples;
    let em_len = n * meta.em_channels * meta.samples;
    let mut data = read_f32(&bin_path, eeg_len + em_len)?;
    let em = data.split_off(eeg_len);
    let mut ts = TrialSet::new(meta.eeg_channels, meta.em_channels, meta.samples);
    ts.eeg = data;
    ts.em = em;
    ts.labels = meta.labels;
    ts.blocks = meta.blocks;
    ts.onsets = meta.onsets;
    ts.subjects = vec![0; n];
    ts.subject_ids = vec![meta.subject];
    Ok(ts)
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Loads every subject's `task` directory under `root`. Preprocessed trials
/// are used when all subjects have them; otherwise raw blocks are read.
pub fn load_dataset(root: &Path, task: &str) -> Result<Corpus> {
    if !root.is_dir() {
        return Err(Error::CorpusIncomplete(format!("data root {} does not exist", root.display())));
    }
    let subjects = sorted_subdirs(root)?;
    if subjects.is_empty() {
        return Err(Error::CorpusIncomplete(format!("no subject directories under {}", root.display())));
    }
    let task_dirs: Vec<PathBuf> = subjects.iter().map(|s| root.join(s).join(task)).collect();
    for d in &task_dirs {
        if !d.is_dir() {
            return Err(Error::CorpusIncomplete(format!("missing task directory {}", d.display())));
        }
    }
    if task_dirs.iter().all(|d| d.join("trials.bin").exists()) {
        let mut all: Option<TrialSet> = None;
        for d in &task_dirs {
            let ts = read_trials(d)?;
            match all.as_mut() {
                None => all = Some(ts),
                Some(acc) => acc.append(&ts)?,
            }
        }
        let mut all = all.expect("at least one subject");
        all.sort();
        return Ok(Corpus::Trials(all));
    }
    let mut recs = Vec::new();
    for (subject, d) in subjects.iter().zip(&task_dirs) {
        let mut blocks: Vec<u32> = sorted_subdirs(d)?.iter().filter_map(|b| b.parse().ok()).collect();
        blocks.sort_unstable();
        if blocks.is_empty() {
            return Err(Error::CorpusIncomplete(format!(
                "{} has neither trials.bin nor block directories",
                d.display()
            )));
        }
        for b in blocks {
            recs.push(read_raw_block(&d.join(b.to_string()), subject, task, b)?);
        }
    }
    Ok(Corpus::Raw(recs))
}
