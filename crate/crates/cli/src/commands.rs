//! Subcommand workflows.

use std::path::{Path, PathBuf};

use log::info;
use mtree_core::dataio::{load_dataset, plan_folds, preprocess_all, write_raw, write_trials, Corpus, TrialSet};
use mtree_core::engine::{
    ablation_sweep, checkpoint, cross_validate, evaluate as evaluate_model, saliency as saliency_maps, CvRun, Report,
    SaliencyMaps,
};
use mtree_core::metrics::MetricsReport;
use mtree_core::synth::{generate, to_raw};
use serde::Serialize;

use crate::config::RunConfig;
use crate::render::{self, render_report};
use crate::CliError;

pub const REPORT_FILE: &str = "report.json";
pub const SALIENCY_FILE: &str = "saliency.json";
pub const EVALUATION_FILE: &str = "evaluation.json";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Other(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| CliError::Other(format!("cannot write {}: {e}", path.display())))
}

pub fn model_path(run: &Path, config: &str, subject: &str, fold: usize, inner: usize) -> PathBuf {
    run.join("models")
        .join(render::slug(config))
        .join(subject)
        .join(format!("fold{fold}_inner{inner}.ckpt"))
}

fn history_path(run: &Path, config: &str, subject: &str, fold: usize, inner: usize) -> PathBuf {
    run.join("histories")
        .join(render::slug(config))
        .join(subject)
        .join(format!("fold{fold}_inner{inner}.csv"))
}

/// Loads trials for the configured task, preprocessing raw blocks if needed.
pub fn load_trials(cfg: &RunConfig) -> Result<TrialSet, CliError> {
    let root = cfg.data_root()?;
    match load_dataset(root, &cfg.task)? {
        Corpus::Trials(ts) => {
            info!("loaded {} preprocessed trials from {}", ts.len(), root.display());
            Ok(ts)
        }
        Corpus::Raw(recs) => {
            let (ts, skipped) = preprocess_all(&recs, &cfg.preprocess)?;
            info!(
                "preprocessed {} blocks into {} trials ({skipped} events outside the recording skipped)",
                recs.len(),
                ts.len()
            );
            Ok(ts)
        }
    }
}

pub fn synth(cfg: &RunConfig, with_trials: bool) -> Result<(), CliError> {
    let ts = generate(&cfg.synth)?;
    create_dir(&cfg.out)?;
    let mut n = 0;
    for subject in &ts.subject_ids {
        for block in ts.for_subject(subject).block_ids() {
            write_raw(&cfg.out, &to_raw(&cfg.synth, &ts, subject, block, &cfg.task))?;
            n += 1;
        }
    }
    if with_trials {
        write_trials(&cfg.out, &cfg.task, &ts, cfg.synth.rate)?;
    }
    info!("wrote {n} raw blocks ({} trials) to {}", ts.len(), cfg.out.display());
    Ok(())
}

pub fn preprocess(cfg: &RunConfig) -> Result<(), CliError> {
    let root = cfg.data_root()?;
    let Corpus::Raw(recs) = load_dataset(root, &cfg.task)? else {
        return Err(CliError::MissingData(format!(
            "{} holds preprocessed trials only; raw blocks are required",
            root.display()
        )));
    };
    let (ts, skipped) = preprocess_all(&recs, &cfg.preprocess)?;
    write_trials(&cfg.out, &cfg.task, &ts, cfg.preprocess.target_rate)?;
    info!("wrote {} trials to {} ({skipped} events skipped)", ts.len(), cfg.out.display());
    Ok(())
}

fn save_runs(cfg: &RunConfig, runs: &[CvRun]) -> Result<Report, CliError> {
    create_dir(&cfg.out)?;
    for run in runs {
        let name = &run.report.name;
        for (fold, art) in run.report.folds.iter().zip(&run.artifacts) {
            for (k, (model, history)) in art.models.iter().zip(&art.histories).enumerate() {
                let mp = model_path(&cfg.out, name, &fold.subject, fold.fold, k);
                create_dir(mp.parent().expect("model path has a parent"))?;
                checkpoint::save(model, &mp)?;
                let hp = history_path(&cfg.out, name, &fold.subject, fold.fold, k);
                create_dir(hp.parent().expect("history path has a parent"))?;
                history.write_csv(&hp)?;
            }
        }
    }
    let report = Report {
        task: cfg.task.clone(),
        configurations: runs.iter().map(|r| r.report.clone()).collect(),
    };
    report.write(&cfg.out.join(REPORT_FILE))?;
    write_json(&cfg.out.join("config.json"), cfg)?;
    print!("{}", render::summary_text(&report));
    Ok(report)
}

pub fn train(cfg: &RunConfig) -> Result<Report, CliError> {
    let ts = load_trials(cfg)?;
    let run = cross_validate(&ts, &cfg.train, "full")?;
    save_runs(cfg, &[run])
}

pub fn ablate(cfg: &RunConfig) -> Result<Report, CliError> {
    let ts = load_trials(cfg)?;
    let runs = ablation_sweep(&ts, &cfg.train)?;
    save_runs(cfg, &runs)
}

pub fn read_report(path: &Path) -> Result<Report, CliError> {
    if !path.is_file() {
        return Err(CliError::MissingData(format!("report {} not found", path.display())));
    }
    Ok(Report::read(path)?)
}

#[derive(Debug, Serialize)]
pub struct Reevaluation {
    pub config: String,
    pub subject: String,
    pub fold: usize,
    pub inner: usize,
    pub metrics: MetricsReport,
    pub matches_report: bool,
}

/// Re-evaluates every saved checkpoint of a run on its outer test block.
pub fn evaluate(cfg: &RunConfig, run: &Path) -> Result<Vec<Reevaluation>, CliError> {
    let report = read_report(&run.join(REPORT_FILE))?;
    let ts = load_trials(cfg)?;
    let mut out = Vec::new();
    for c in &report.configurations {
        for f in &c.folds {
            let plan = plan_folds(&ts, &f.subject, c.config.seed)?;
            let test = ts.subset(&plan.outer[f.fold].test);
            for (k, recorded) in f.inner.iter().enumerate() {
                let path = model_path(run, &c.name, &f.subject, f.fold, k);
                if !path.is_file() {
                    return Err(CliError::MissingData(format!("checkpoint {} not found", path.display())));
                }
                let model = checkpoint::load(&path)?;
                let metrics = evaluate_model(&model, &test)?;
                out.push(Reevaluation {
                    config: c.name.clone(),
                    subject: f.subject.clone(),
                    fold: f.fold,
                    inner: k,
                    matches_report: &metrics == recorded,
                    metrics,
                });
            }
        }
    }
    write_json(&cfg.out.join(EVALUATION_FILE), &out)?;
    let mismatched: Vec<String> = out
        .iter()
        .filter(|r| !r.matches_report)
        .map(|r| format!("{}/{} fold {} inner {}", r.config, r.subject, r.fold, r.inner))
        .collect();
    for r in &out {
        println!(
            "{} {} fold {} inner {}: BA {:.2}  Recall {:.2}  F1 {:.2}",
            r.config,
            r.subject,
            r.fold,
            r.inner,
            100.0 * r.metrics.ba,
            100.0 * r.metrics.recall,
            100.0 * r.metrics.f1_macro
        );
    }
    if !mismatched.is_empty() {
        return Err(CliError::Other(format!("metrics differ from the training report: {}", mismatched.join(", "))));
    }
    Ok(out)
}

fn mean_maps(maps: &[SaliencyMaps]) -> SaliencyMaps {
    let avg = |get: fn(&SaliencyMaps) -> &Vec<f64>| {
        let mut acc = vec![0.0; get(&maps[0]).len()];
        for m in maps {
            acc.iter_mut().zip(get(m)).for_each(|(a, v)| *a += v);
        }
        let max = acc.iter().fold(0.0f64, |m, &v| m.max(v));
        if max > 0.0 {
            acc.iter_mut().for_each(|v| *v /= max);
        }
        acc
    };
    SaliencyMaps {
        trials: maps.iter().map(|m| m.trials).sum(),
        eeg_channel: avg(|m| &m.eeg_channel),
        eeg_time: avg(|m| &m.eeg_time),
        em_component: avg(|m| &m.em_component),
        em_time: avg(|m| &m.em_time),
    }
}

/// Saliency of each fold's first model on its test block, averaged over folds.
pub fn saliency(cfg: &RunConfig, run: &Path) -> Result<SaliencyMaps, CliError> {
    let report = read_report(&run.join(REPORT_FILE))?;
    let c = report
        .configurations
        .first()
        .ok_or_else(|| CliError::Other("report has no configurations".into()))?;
    let ts = load_trials(cfg)?;
    let mut maps = Vec::new();
    for f in &c.folds {
        let plan = plan_folds(&ts, &f.subject, c.config.seed)?;
        let test = ts.subset(&plan.outer[f.fold].test);
        let model = checkpoint::load(&model_path(run, &c.name, &f.subject, f.fold, 0))?;
        maps.push(saliency_maps(&model, &test)?);
    }
    if maps.is_empty() {
        return Err(CliError::Other("report has no folds".into()));
    }
    let mean = mean_maps(&maps);
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join(SALIENCY_FILE), &mean)?;
    info!("saliency over {} target trials written to {}", mean.trials, cfg.out.display());
    Ok(mean)
}

pub fn report(report_path: &Path, saliency_path: Option<&Path>, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let report = read_report(report_path)?;
    let maps = match saliency_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::MissingData(format!("{}: {e}", p.display())))?;
            Some(serde_json::from_str::<SaliencyMaps>(&text).map_err(|e| CliError::Other(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let written = render_report(&report, maps.as_ref(), out)?;
    info!("rendered {} files into {}", written.len(), out.display());
    Ok(written)
}
