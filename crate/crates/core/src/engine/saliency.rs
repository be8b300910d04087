//! Input-gradient saliency over target-class trials.

use serde::{Deserialize, Serialize};

use super::train::{TrainedModel, EVAL_CHUNK};
use crate::dataio::TrialSet;
use crate::error::Result;
use crate::exec;

/// Mean absolute gradients with respect to the standardized inputs, reduced
/// along each axis and scaled so each map peaks at 1 (all-zero maps stay zero).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMaps {
    pub trials: usize,
    pub eeg_channel: Vec<f64>,
    pub eeg_time: Vec<f64>,
    pub em_component: Vec<f64>,
    pub em_time: Vec<f64>,
}

fn normalize(v: &mut [f64]) {
    let max = v.iter().fold(0.0f64, |m, &x| m.max(x));
    if max > 0.0 {
        v.iter_mut().for_each(|x| *x /= max);
    }
}

fn reduce(sum: &[f64], rows: usize, len: usize, trials: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / trials.max(1) as f64;
    let mut by_row = vec![0.0; rows];
    let mut by_time = vec![0.0; len];
    for r in 0..rows {
        for t in 0..len {
            let v = sum[r * len + t] * scale;
            by_row[r] += v / len as f64;
            by_time[t] += v / rows as f64;
        }
    }
    normalize(&mut by_row);
    normalize(&mut by_time);
    (by_row, by_time)
}

/// Gradient of each target trial's predicted-class probability with respect
/// to both inputs. Non-target trials are ignored.
pub fn saliency(model: &TrainedModel, trials: &TrialSet) -> Result<SaliencyMaps> {
    let idx: Vec<usize> = (0..trials.len()).filter(|&i| trials.labels[i] != 0).collect();
    let (ne, nm) = (trials.eeg_len(), trials.em_len());
    let chunks: Vec<&[usize]> = idx.chunks(EVAL_CHUNK).collect();
    let m = &model.model;
    let std_of = |name: &str| -> Vec<f64> {
        m.buffers
            .find(name)
            .map(|id| m.buffers.get(id).iter().map(|&v| v as f64).collect())
            .unwrap_or_default()
    };
    let (eeg_std, em_std) = (std_of("input.eeg_std"), std_of("input.em_std"));
    let t = trials.samples;
    let parts = exec::map_range(chunks.len(), |c| -> Result<(Vec<f64>, Vec<f64>)> {
        let chunk = chunks[c];
        let (eeg, em, _) = trials.gather(chunk);
        let (ge, gm, _) = m.net.input_gradients(&m.params, &m.buffers, &eeg, &em, chunk.len())?;
        let mut se = vec![0.0f64; ne];
        let mut sm = vec![0.0f64; nm];
        // d/dz = d/dx · std for z = (x − mean) / std
        for g in ge.chunks(ne) {
            for (i, (s, &v)) in se.iter_mut().zip(g).enumerate() {
                *s += (v as f64 * eeg_std[i / t]).abs();
            }
        }
        for g in gm.chunks(nm) {
            for (i, (s, &v)) in sm.iter_mut().zip(g).enumerate() {
                *s += (v as f64 * em_std[i / t]).abs();
            }
        }
        Ok((se, sm))
    });
    let mut se = vec![0.0f64; ne];
    let mut sm = vec![0.0f64; nm];
    for p in parts {
        let (a, b) = p?;
        se.iter_mut().zip(&a).for_each(|(s, v)| *s += v);
        sm.iter_mut().zip(&b).for_each(|(s, v)| *s += v);
    }
    let (eeg_channel, eeg_time) = reduce(&se, trials.eeg_channels, trials.samples, idx.len());
    let (em_component, em_time) = reduce(&sm, trials.em_channels, trials.samples, idx.len());
    Ok(SaliencyMaps {
        trials: idx.len(),
        eeg_channel,
        eeg_time,
        em_component,
        em_time,
    })
}
