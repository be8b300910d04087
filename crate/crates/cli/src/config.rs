//! The run configuration file and its merge with command-line overrides.

use std::path::{Path, PathBuf};

use mtree_core::dataio::PreprocessConfig;
use mtree_core::engine::TrainConfig;
use mtree_core::synth::SynthConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const TASKS: [&str; 3] = ["A", "B", "C"];
pub const DATA_ROOT_ENV: &str = "MTREE_DATA_ROOT";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

/// Contents of a `--config` file. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    /// Overrides the seeds of `[synth]` and `[train]` when present.
    pub seed: Option<u64>,
    pub task: Option<String>,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
}

/// Flags that override file values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub task: Option<String>,
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
}

/// Merged, validated view used by every subcommand.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub task: String,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
}

impl FileConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))
    }
}

impl RunConfig {
    pub fn resolve(file: FileConfig, o: Overrides, default_out: &str) -> Result<Self, CliError> {
        let task = o.task.or(file.task).unwrap_or_else(|| "A".to_string());
        if !TASKS.contains(&task.as_str()) {
            return Err(CliError::Config(format!("task must be one of A, B, C; got {task:?}")));
        }
        let mut synth = file.synth;
        let mut train = file.train;
        if let Some(seed) = o.seed.or(file.seed) {
            synth.seed = seed;
            train.seed = seed;
        }
        if let Some(epochs) = o.epochs {
            train.max_epochs = epochs;
        }
        let data = o
            .data
            .or(file.paths.data)
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from));
        let out = o.out.or(file.paths.out).unwrap_or_else(|| PathBuf::from(default_out));
        let cfg = Self {
            task,
            data,
            out,
            synth,
            preprocess: file.preprocess,
            train,
        };
        cfg.synth.validate()?;
        cfg.preprocess.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn data_root(&self) -> Result<&Path, CliError> {
        self.data.as_deref().ok_or_else(|| {
            CliError::MissingData(format!("no data directory: pass --data, set [paths] data or {DATA_ROOT_ENV}"))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(FileConfig::parse("bogus = 1"), Err(CliError::Config(_))));
        assert!(matches!(FileConfig::parse("[train]\nlearning_rate = 0.1"), Err(CliError::Config(_))));
        assert!(matches!(FileConfig::parse("[paths]\ndat = 'x'"), Err(CliError::Config(_))));
    }

    #[test]
    fn seed_and_flags_override_sections() {
        let file = FileConfig::parse("seed = 7\ntask = 'B'\n[train]\nseed = 3\nmax_epochs = 9\n[synth]\nsnr_db = 5.0").unwrap();
        let o = Overrides {
            task: Some("C".into()),
            epochs: Some(2),
            out: Some("o".into()),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(file, o, "runs").unwrap();
        assert_eq!(cfg.task, "C");
        assert_eq!((cfg.train.seed, cfg.synth.seed), (7, 7));
        assert_eq!(cfg.train.max_epochs, 2);
        assert_eq!(cfg.synth.snr_db, 5.0);
        assert_eq!(cfg.out, PathBuf::from("o"));
    }

    #[test]
    fn invalid_values_fail_validation() {
        let bad = |text: &str| RunConfig::resolve(FileConfig::parse(text).unwrap(), Overrides::default(), "o");
        assert!(matches!(bad("task = 'D'"), Err(CliError::Config(_))));
        assert!(matches!(bad("[train]\nlr = -1.0"), Err(CliError::Config(_))));
        assert!(matches!(bad("[preprocess]\nband = [20.0, 10.0]"), Err(CliError::Config(_))));
    }
}
