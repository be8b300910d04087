//! Nested block-wise cross-validation, ablation sweeps and the JSON report.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{evaluate, train_fold, History, TrainConfig, TrainedModel};
use crate::dataio::{plan_folds, rebalance, TrialSet};
use crate::error::{Error, Result};
use crate::exec::{self, mix_seed};
use crate::metrics::{mean_std, MetricsReport};
use crate::objective::Ablation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub subject: String,
    /// Zero-based outer fold index.
    pub fold: usize,
    pub test_block: u32,
    /// Class counts of each trained model's rebalanced training set.
    pub train_counts: Vec<[usize; 3]>,
    pub val_counts: Vec<[usize; 3]>,
    pub test_counts: [usize; 3],
    pub best_epochs: Vec<usize>,
    /// One entry per trained inner model.
    pub inner: Vec<MetricsReport>,
    pub ba: f64,
    pub recall: f64,
    pub f1_macro: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub subject: String,
    pub ba: f64,
    pub recall: f64,
    pub f1_macro: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub ba_mean: f64,
    pub ba_std: f64,
    pub recall_mean: f64,
    pub recall_std: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub name: String,
    pub fingerprint: String,
    pub config: TrainConfig,
    pub folds: Vec<FoldReport>,
    pub subjects: Vec<SubjectSummary>,
    pub aggregate: Aggregate,
}

/// Everything written by a run: one or more configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub task: String,
    pub configurations: Vec<CvReport>,
}

impl Report {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
    }
}

/// Models and histories of one outer fold, in inner-split order.
#[derive(Debug, Clone)]
pub struct FoldArtifacts {
    pub models: Vec<TrainedModel>,
    pub histories: Vec<History>,
}

#[derive(Debug, Clone)]
pub struct CvRun {
    pub report: CvReport,
    pub artifacts: Vec<FoldArtifacts>,
}

fn run_fold(
    ts: &TrialSet,
    subject: &str,
    fold: usize,
    cfg: &TrainConfig,
    subject_hash: u64,
) -> Result<(FoldReport, FoldArtifacts)> {
    let plan = plan_folds(ts, subject, cfg.seed)?;
    let of = &plan.outer[fold];
    let test = ts.subset(&of.test);
    let inner_used = if cfg.full_inner { of.inner.len() } else { 1 };
    let mut rep = FoldReport {
        subject: subject.to_string(),
        fold,
        test_block: of.test_block,
        train_counts: Vec::new(),
        val_counts: Vec::new(),
        test_counts: test.class_counts(),
        best_epochs: Vec::new(),
        inner: Vec::new(),
        ba: 0.0,
        recall: 0.0,
        f1_macro: 0.0,
    };
    let mut art = FoldArtifacts {
        models: Vec::new(),
        histories: Vec::new(),
    };
    for (k, split) in of.inner.iter().take(inner_used).enumerate() {
        let seed = mix_seed(&[cfg.seed, subject_hash, fold as u64, k as u64]);
        let train_idx = rebalance(&ts.labels, &split.train, mix_seed(&[seed, 1]))?;
        let train = ts.subset(&train_idx);
        let val = ts.subset(&split.val);
        let fold_cfg = TrainConfig { seed, ..cfg.clone() };
        let (model, history) = train_fold(&train, &val, &fold_cfg)?;
        let m = evaluate(&model, &test)?;
        rep.train_counts.push(train.class_counts());
        rep.val_counts.push(val.class_counts());
        rep.best_epochs.push(model.best_epoch);
        rep.inner.push(m);
        art.models.push(model);
        art.histories.push(history);
    }
    let n = rep.inner.len() as f64;
    rep.ba = rep.inner.iter().map(|m| m.ba).sum::<f64>() / n;
    rep.recall = rep.inner.iter().map(|m| m.recall).sum::<f64>() / n;
    rep.f1_macro = rep.inner.iter().map(|m| m.f1_macro).sum::<f64>() / n;
    Ok((rep, art))
}

fn subject_hash(subject: &str) -> u64 {
    subject.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64))
}

/// Runs every outer fold of every subject. Folds run in parallel; each has
/// its own derived seed, so results do not depend on scheduling.
pub fn cross_validate(ts: &TrialSet, cfg: &TrainConfig, name: &str) -> Result<CvRun> {
    cfg.validate()?;
    if ts.is_empty() {
        return Err(Error::Empty("trial set"));
    }
    let mut ts = ts.clone();
    ts.sort();
    let mut jobs = Vec::new();
    for s in &ts.subject_ids {
        let plan = plan_folds(&ts, s, cfg.seed)?;
        jobs.extend((0..plan.outer.len()).map(|f| (s.clone(), f)));
    }
    let results = exec::map_range(jobs.len(), |j| {
        let (s, f) = &jobs[j];
        run_fold(&ts, s, *f, cfg, subject_hash(s)).map_err(|e| Error::Fold {
            subject: s.clone(),
            fold: *f,
            source: Box::new(e),
        })
    });
    let mut folds = Vec::new();
    let mut artifacts = Vec::new();
    for r in results {
        let (rep, art) = r?;
        folds.push(rep);
        artifacts.push(art);
    }
    let subjects: Vec<SubjectSummary> = ts
        .subject_ids
        .iter()
        .map(|s| {
            let mine: Vec<&FoldReport> = folds.iter().filter(|f| &f.subject == s).collect();
            let n = mine.len() as f64;
            SubjectSummary {
                subject: s.clone(),
                ba: mine.iter().map(|f| f.ba).sum::<f64>() / n,
                recall: mine.iter().map(|f| f.recall).sum::<f64>() / n,
                f1_macro: mine.iter().map(|f| f.f1_macro).sum::<f64>() / n,
            }
        })
        .collect();
    let stat = |f: fn(&SubjectSummary) -> f64| mean_std(&subjects.iter().map(f).collect::<Vec<_>>());
    let (ba_mean, ba_std) = stat(|s| s.ba);
    let (recall_mean, recall_std) = stat(|s| s.recall);
    let (f1_mean, f1_std) = stat(|s| s.f1_macro);
    Ok(CvRun {
        report: CvReport {
            name: name.to_string(),
            fingerprint: cfg.fingerprint(),
            config: cfg.clone(),
            folds,
            subjects,
            aggregate: Aggregate {
                ba_mean,
                ba_std,
                recall_mean,
                recall_std,
                f1_mean,
                f1_std,
            },
        },
        artifacts,
    })
}

/// The full model plus each single-component ablation, in a fixed order.
pub fn ablation_sweep(ts: &TrialSet, cfg: &TrainConfig) -> Result<Vec<CvRun>> {
    let arms = Ablation::sweep();
    exec::map_range(arms.len(), |i| {
        let (name, ablation) = arms[i];
        cross_validate(ts, &TrainConfig { ablation, ..cfg.clone() }, name)
    })
    .into_iter()
    .collect()
}
