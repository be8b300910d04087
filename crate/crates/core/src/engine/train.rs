//! Single-fold training with plateau scheduling and best-epoch selection.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{Adam, AdamConfig, ReduceOnPlateau};
use crate::dataio::TrialSet;
use crate::error::{Error, Result};
use crate::exec::mix_seed;
use crate::extractors::Dims;
use crate::fusion::Direction;
use crate::metrics::MetricsReport;
use crate::model::{Architecture, EmComponents, Model, Variant};
use crate::nn::Mode;
use crate::objective::{Ablation, LossWeights};

/// Trials per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam: AdamConfig,
    pub plateau_factor: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub lambda: f64,
    pub maps: usize,
    pub variant: Variant,
    pub ablation: Ablation,
    pub direction: Direction,
    /// `all` or a `+`-joined subset of `pupil`, `x`, `y`.
    pub em_components: String,
    /// Train one model per inner split and average their test metrics.
    pub full_inner: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            adam: AdamConfig::default(),
            plateau_factor: 0.5,
            patience: 5,
            batch_size: 128,
            max_epochs: 120,
            seed: 0,
            lambda: 0.2,
            maps: 32,
            variant: Variant::Fusion,
            ablation: Ablation::FULL,
            direction: Direction::Dual,
            em_components: "all".into(),
            full_inner: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if self.patience == 0 || self.batch_size < 2 || self.max_epochs == 0 || self.maps == 0 {
            return bad("patience, max_epochs and maps must be positive and batch_size at least 2");
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps be positive");
        }
        LossWeights { lambda: self.lambda }.validate()?;
        EmComponents::parse(&self.em_components)?;
        Ok(())
    }

    pub fn architecture(&self, eeg_channels: usize, em_channels: usize, samples: usize) -> Result<Architecture> {
        let arch = Architecture {
            dims: Dims {
                eeg_channels,
                em_channels,
                samples,
                maps: self.maps,
            },
            variant: self.variant,
            ablation: self.ablation,
            direction: self.direction,
            em_components: EmComponents::parse(&self.em_components)?,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        format!("{:x}", Sha256::digest(json))
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda: self.lambda }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_ce")]
    pub ce: f64,
    #[serde(rename = "L_bce")]
    pub bce: f64,
    #[serde(rename = "L_intra_eeg")]
    pub intra_eeg: f64,
    #[serde(rename = "L_intra_em")]
    pub intra_em: f64,
    #[serde(rename = "L_cg")]
    pub cg: f64,
    #[serde(rename = "L_sd")]
    pub sd: f64,
    #[serde(rename = "L_overall")]
    pub overall: f64,
    #[serde(rename = "val_BA")]
    pub val_ba: f64,
    /// Mean EEG contribution ratio over the epoch, NaN without reweighting.
    pub mean_r_eeg: f64,
    /// Mean EEG fusion weight over the epoch, NaN without reweighting.
    pub mean_phi0: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(path).map_err(io)?;
        for r in &self.epochs {
            w.serialize(r).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.epochs {
            w.serialize(r).expect("in-memory csv");
        }
        let mut bytes = w.into_inner().expect("in-memory csv");
        if self.epochs.is_empty() {
            writeln!(bytes, "{}", HISTORY_HEADER).expect("in-memory write");
        }
        String::from_utf8(bytes).expect("utf8 csv")
    }
}

pub const HISTORY_HEADER: &str =
    "epoch,lr,L_ce,L_bce,L_intra_eeg,L_intra_em,L_cg,L_sd,L_overall,val_BA,mean_r_eeg,mean_phi0";

/// A trained network with the configuration that produced it.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub best_epoch: usize,
}

impl TrainedModel {
    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub fn predict(&self, ts: &TrialSet) -> Result<Vec<u8>> {
        predict(&self.model, ts, &(0..ts.len()).collect::<Vec<_>>())
    }
}

pub(crate) fn predict(model: &Model<f32>, ts: &TrialSet, indices: &[usize]) -> Result<Vec<u8>> {
    let mut preds = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (eeg, em, _) = ts.gather(chunk);
        preds.extend(model.infer(&eeg, &em, chunk.len())?.predictions());
    }
    Ok(preds)
}

fn check_layout(arch: &Architecture, ts: &TrialSet) -> Result<()> {
    crate::error::check_dim("eeg channels", arch.dims.eeg_channels, ts.eeg_channels)?;
    crate::error::check_dim("em channels", arch.dims.em_channels, ts.em_channels)?;
    crate::error::check_dim("samples", arch.dims.samples, ts.samples)
}

/// Trains on `train` and selects the epoch with the best balanced accuracy
/// on `val`. The returned model holds that epoch's parameters.
pub fn train_fold(train: &TrialSet, val: &TrialSet, cfg: &TrainConfig) -> Result<(TrainedModel, History)> {
    cfg.validate()?;
    if train.len() < 2 {
        return Err(Error::Empty("training set needs at least two trials"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let arch = cfg.architecture(train.eeg_channels, train.em_channels, train.samples)?;
    check_layout(&arch, val)?;
    let mut model = Model::<f32>::new(arch, cfg.seed)?;
    let st = train.channel_stats();
    model
        .net
        .set_input_normalization(&mut model.buffers, &st.eeg_mean, &st.eeg_std, &st.em_mean, &st.em_std)?;

    let terms = arch.terms();
    let weights = cfg.weights();
    let mut grads = model.params.zeros_like();
    let mut adam = Adam::new(&model.params, cfg.adam);
    let mut sched = ReduceOnPlateau::new(cfg.lr, cfg.plateau_factor, cfg.patience);
    let mut best = (model.params.clone(), model.buffers.clone(), 0usize);
    let mut history = History::default();
    let val_idx: Vec<usize> = (0..val.len()).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        let lr = sched.lr();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x5348_5546, epoch as u64]));
        order.shuffle(&mut rng);
        let mut acc = [0.0f64; 7];
        let (mut r_sum, mut phi_sum, mut seen) = (0.0f64, 0.0f64, 0usize);
        let mut have_ratios = false;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            // A single trial gives degenerate batch statistics.
            if batch.len() < 2 {
                continue;
            }
            let (eeg, em, labels) = train.gather(batch);
            grads.fill_zero();
            let mode = Mode::train(mix_seed(&[cfg.seed, epoch as u64, bi as u64]));
            let out = model.net.step(
                &model.params,
                &mut model.buffers,
                &eeg,
                &em,
                &labels,
                mode,
                terms,
                weights,
                Some(&mut grads),
            )?;
            let t = out.terms;
            let overall = t.overall(weights);
            if !t.is_finite() || !overall.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    what: "loss".into(),
                });
            }
            if !grads.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    what: "gradient".into(),
                });
            }
            let n = batch.len() as f64;
            for (a, v) in acc.iter_mut().zip([t.ce, t.bce, t.intra_eeg, t.intra_em, t.cg, t.sd, overall]) {
                *a += v * n;
            }
            if let Some(r) = &out.ratios {
                have_ratios = true;
                r_sum += r.r_eeg.iter().map(|&v| v as f64).sum::<f64>();
            }
            if !out.outputs.phi.is_empty() {
                phi_sum += out.outputs.phi.chunks(2).map(|p| p[0] as f64).sum::<f64>();
            }
            seen += batch.len();
            adam.update(&mut model.params, &grads, lr);
        }
        if seen == 0 {
            return Err(Error::Empty("no training batch has two or more trials"));
        }
        if !model.params.all_finite() {
            return Err(Error::Divergence {
                epoch,
                what: "parameters".into(),
            });
        }
        let preds = predict(&model, val, &val_idx)?;
        let val_ba = MetricsReport::from_predictions(&val.labels, &preds)?.ba;
        let n = seen as f64;
        let has_phi = model.net.reweighter().is_some();
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            ce: acc[0] / n,
            bce: acc[1] / n,
            intra_eeg: acc[2] / n,
            intra_em: acc[3] / n,
            cg: acc[4] / n,
            sd: acc[5] / n,
            overall: acc[6] / n,
            val_ba,
            mean_r_eeg: if have_ratios { r_sum / n } else { f64::NAN },
            mean_phi0: if has_phi { phi_sum / n } else { f64::NAN },
        });
        log::debug!("epoch {epoch}: lr {lr:.2e} loss {:.4} val BA {val_ba:.4}", acc[6] / n);
        if sched.observe(val_ba) {
            best = (model.params.clone(), model.buffers.clone(), epoch);
        }
    }
    model.params = best.0;
    model.buffers = best.1;
    Ok((
        TrainedModel {
            model,
            config: cfg.clone(),
            best_epoch: best.2,
        },
        history,
    ))
}

/// Metrics of `model` on every trial of `test`.
pub fn evaluate(model: &TrainedModel, test: &TrialSet) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    check_layout(model.model.net.architecture(), test)?;
    let preds = model.predict(test)?;
    MetricsReport::from_predictions(&test.labels, &preds)
}
