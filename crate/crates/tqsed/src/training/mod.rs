//! Optimization loops and schedules for both stages: separator pretraining
//! on sampled stem mixtures (waveform L1, fixed learning rate) and detector
//! training on frame labels (MSE, reduce-on-plateau schedule with early
//! stop), plus mixture construction and cross-validation splitting.

mod adam;
mod lass;
mod scheduler;
mod sed_train;

pub use adam::Adam;
pub use lass::{train_lass, LassTrainConfig, LassTrainOutput};
pub use scheduler::{scheduler_step, LrSchedulerState, PlateauConfig};
pub use sed_train::{
    precompute_features, train_sed, train_sed_with_features, Framework, SedDataset,
    SedTrainConfig, SedTrainOutput, TrainedDetector,
};

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::audio::Waveform;
use crate::{Error, Result};

/// One loss-log row; serialized as `step,split,loss,lr` CSV lines.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub split: &'static str,
    pub loss: f64,
    pub lr: f64,
}

pub fn loss_log_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("step,split,loss,lr\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.split, r.loss, r.lr));
    }
    out
}

/// Scales the interference so the target/interference energy ratio hits
/// `snr_db`, sums, and peak-normalizes the mixture to at most 0.9 with the
/// same gain applied to the returned target. `f64::INFINITY` mutes the
/// interference entirely.
pub fn make_mixture(
    source: &Waveform,
    interference: &Waveform,
    snr_db: f64,
) -> Result<(Waveform, Waveform)> {
    if source.len() != interference.len() {
        return Err(Error::Shape(format!(
            "source has {} samples, interference {}",
            source.len(),
            interference.len()
        )));
    }
    if source.sample_rate() != interference.sample_rate() {
        return Err(Error::InvalidInput("sample rates differ".into()));
    }
    let source_energy = source.energy();
    if source_energy == 0.0 {
        return Err(Error::InvalidInput("source has zero energy".into()));
    }
    let interference_energy = interference.energy();
    let gain = if snr_db.is_infinite() || interference_energy == 0.0 {
        0.0
    } else {
        (source_energy / (interference_energy * 10f64.powf(snr_db / 10.0))).sqrt()
    };
    let mut mixture: Vec<f64> = source
        .samples()
        .iter()
        .zip(interference.samples())
        .map(|(s, i)| s + gain * i)
        .collect();
    let mut target = source.samples().to_vec();
    let peak = mixture.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak > 0.9 {
        let g = 0.9 / peak;
        for v in &mut mixture {
            *v *= g;
        }
        for v in &mut target {
            *v *= g;
        }
    }
    Ok((
        Waveform::new(mixture, source.sample_rate())?,
        Waveform::new(target, source.sample_rate())?,
    ))
}

/// Per-clip fold indices in {0..k-1}; a balanced, seeded partition.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldAssignment {
    pub fold_of: Vec<usize>,
    pub k: usize,
    pub seed: u64,
}

impl FoldAssignment {
    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        self.fold_of
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == fold)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Shuffles clip ids with the seed and deals them round-robin, so fold
/// sizes differ by at most one.
pub fn kfold_split(clip_ids: &[String], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    if clip_ids.len() < k {
        return Err(Error::InvalidInput(format!(
            "{} clips cannot fill {k} folds",
            clip_ids.len()
        )));
    }
    let mut order: Vec<usize> = (0..clip_ids.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut fold_of = vec![0usize; clip_ids.len()];
    for (pos, &idx) in order.iter().enumerate() {
        fold_of[idx] = pos % k;
    }
    Ok(FoldAssignment {
        fold_of,
        k,
        seed,
    })
}
