#![allow(dead_code)]

use mtree_core::extractors::Dims;
use mtree_core::fusion::ContributionRecord;
use mtree_core::fusion::Direction;
use mtree_core::model::{Architecture, EmComponents, Model, Variant};
use mtree_core::nn::Mode;
use mtree_core::objective::{Ablation, LossWeights, Terms};
use mtree_core::params::ParamStore;

pub const ALL_TERMS: Terms = Terms {
    ce: true,
    bce: true,
    intra: true,
    cg: true,
    sd: true,
};

pub fn tiny_arch(ablation: Ablation) -> Architecture {
    Architecture {
        dims: Dims {
            eeg_channels: 4,
            em_channels: 6,
            samples: 32,
            maps: 4,
        },
        variant: Variant::Fusion,
        ablation,
        direction: Direction::Dual,
        em_components: EmComponents::ALL,
    }
}

pub fn tiny_batch(arch: &Architecture, batch: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<u8>) {
    let d = arch.dims;
    let h = |i: usize, s: f64| ((i as f64 + 1.0) * s + seed as f64 * 0.71).sin();
    let eeg = (0..batch * d.eeg_channels * d.samples).map(|i| h(i, 0.37) * 1.5).collect();
    let em = (0..batch * d.em_channels * d.samples).map(|i| h(i, 0.113)).collect();
    let labels = (0..batch).map(|b| ((b + seed as usize) % 3) as u8).collect();
    (eeg, em, labels)
}

/// Overall loss of the selected terms with fixed inputs.
pub fn objective(
    model: &Model<f64>,
    params: &ParamStore<f64>,
    data: &(Vec<f64>, Vec<f64>, Vec<u8>),
    mode: Mode,
    terms: Terms,
    ratios: Option<&ContributionRecord<f64>>,
) -> f64 {
    let mut buffers = model.buffers.clone();
    let out = model
        .net
        .step_with_targets(
            params,
            &mut buffers,
            &data.0,
            &data.1,
            &data.2,
            mode,
            terms,
            LossWeights::default(),
            None,
            ratios,
        )
        .unwrap();
    out.terms.overall(LossWeights::default())
}

/// Per-tensor relative error `‖a − n‖ / ‖max(|a|, |n|)‖` between analytic
/// and central-difference gradients. Contribution targets stay fixed at their
/// unperturbed values, matching their treatment as constants.
pub fn gradient_errors(
    model: &Model<f64>,
    data: &(Vec<f64>, Vec<f64>, Vec<u8>),
    mode: Mode,
    terms: Terms,
) -> Vec<(String, f64, f64)> {
    let mut grads = model.params.zeros_like();
    let mut buffers = model.buffers.clone();
    let base = model
        .net
        .step(
            &model.params,
            &mut buffers,
            &data.0,
            &data.1,
            &data.2,
            mode,
            terms,
            LossWeights::default(),
            Some(&mut grads),
        )
        .unwrap();
    let h = 1e-6;
    let mut params = model.params.clone();
    let mut out = Vec::new();
    for id in model.params.ids() {
        let n = model.params.get(id).len();
        let mut diff = 0.0;
        let mut norm = 0.0;
        for i in 0..n {
            let orig = params.get(id)[i];
            params.get_mut(id)[i] = orig + h;
            let up = objective(model, &params, data, mode, terms, base.ratios.as_ref());
            params.get_mut(id)[i] = orig - h;
            let down = objective(model, &params, data, mode, terms, base.ratios.as_ref());
            params.get_mut(id)[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grads.get(id)[i];
            diff += (an - fd).powi(2);
            norm += an.abs().max(fd.abs()).powi(2);
        }
        let gnorm: f64 = grads.get(id).iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = diff.sqrt() / norm.sqrt().max(1e-12);
        out.push((model.params.tensor(id).name.clone(), rel, gnorm));
    }
    out
}

/// Sets running statistics to non-trivial values so frozen-statistics
/// checks exercise the affine path.
pub fn perturb_running_stats(model: &mut Model<f64>) {
    let ids: Vec<_> = model.buffers.ids().collect();
    for id in ids {
        let name = model.buffers.tensor(id).name.clone();
        let data = model.buffers.get_mut(id);
        for (i, v) in data.iter_mut().enumerate() {
            if name.ends_with("running_mean") {
                *v = 0.1 * ((i as f64) * 0.9).sin();
            } else if name.ends_with("running_var") {
                *v = 1.0 + 0.3 * ((i as f64) * 1.3).cos();
            }
        }
    }
}

/// A downsized generator: 8 EEG channels (last 4 carry the ERP), 32 samples
/// per one-second trial, enriched target classes.
pub fn small_synth(trials_per_block: usize, seed: u64) -> mtree_core::synth::SynthConfig {
    mtree_core::synth::SynthConfig {
        trials_per_block,
        class_probs: [0.6, 0.2, 0.2],
        eeg_channels: 8,
        template_channels: 4,
        samples: 32,
        rate: 32.0,
        seed,
        ..Default::default()
    }
}

pub fn small_train(epochs: usize) -> mtree_core::engine::TrainConfig {
    mtree_core::engine::TrainConfig {
        max_epochs: epochs,
        batch_size: 16,
        maps: 8,
        lr: 3e-3,
        ..Default::default()
    }
}
