//! Detector training: per-fold Adam on frame-level MSE with the
//! reduce-on-plateau schedule, early stop when the halving budget is spent,
//! and a frozen separation front-end for the query-driven framework.
//!
//! Input features are precomputed once per dataset: the query-driven
//! framework separates each mixture per class through the frozen model and
//! extracts log-mel features from each track; the baselines use mixture
//! features directly. The best-validation parameters are kept.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use super::{loss_log_csv, scheduler_step, Adam, FoldAssignment, LossRow, LrSchedulerState,
    PlateauConfig};
use crate::audio::{logmel, wav, LogMelFeature, LogMelParams};
use crate::checkpoint::{self, SedCheckpoint};
use crate::datagen::SedClip;
use crate::nn::{Binding, Buffers, Params};
use crate::sed::model::{crnn_forward, features_to_batch};
use crate::sed::{Base1Model, CrnnParams, EventVocabulary, TsedBranch, TsedBranchConfig};
use crate::separation::FrozenSeparator;
use crate::tensor::{Graph, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    /// Frozen separator per class, one binary branch per track.
    TqSed,
    /// Single CRNN on the mixture with a K-way head.
    Base1,
    /// Per-class branches fed the raw mixture (separator ablation).
    Base2,
}

impl Framework {
    pub fn as_str(&self) -> &'static str {
        match self {
            Framework::TqSed => "tq_sed",
            Framework::Base1 => "base1",
            Framework::Base2 => "base2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tq_sed" => Ok(Framework::TqSed),
            "base1" => Ok(Framework::Base1),
            "base2" => Ok(Framework::Base2),
            other => Err(Error::Config(format!(
                "unknown framework '{other}' (expected tq_sed, base1 or base2)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SedTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub plateau_patience_epochs: usize,
    pub max_halvings: usize,
    pub seed: u64,
    /// Hard epoch cap guarding against schedules that never exhaust.
    pub max_epochs: usize,
}

impl Default for SedTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            dropout: 0.2,
            plateau_patience_epochs: 10,
            max_halvings: 10,
            seed: 0,
            max_epochs: 500,
        }
    }
}

/// Frame-labelled clips plus the feature geometry they were labelled on.
pub struct SedDataset {
    pub vocabulary: EventVocabulary,
    pub mel: LogMelParams,
    pub clips: Vec<SedClip>,
}

/// A trained detector ready for evaluation.
pub enum TrainedDetector {
    /// Per-class branches (query-driven or separator-ablated).
    Branches(Vec<TsedBranch>),
    Base1(Base1Model),
}

pub struct FoldResult {
    pub fold: usize,
    pub detector: TrainedDetector,
    pub rows: Vec<LossRow>,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub checkpoint: Option<PathBuf>,
}

pub struct SedTrainOutput {
    pub framework: Framework,
    pub folds: Vec<FoldResult>,
    pub separator_checksum_before: Option<u64>,
    pub separator_checksum_after: Option<u64>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Per-clip input features: one entry per class for the query-driven
/// framework, a single shared entry otherwise.
pub fn precompute_features(
    framework: Framework,
    dataset: &SedDataset,
    separator: Option<&FrozenSeparator>,
) -> Result<Vec<Vec<LogMelFeature>>> {
    let mut out = Vec::with_capacity(dataset.clips.len());
    for clip in &dataset.clips {
        let feats = match framework {
            Framework::TqSed => {
                let sep = separator.ok_or_else(|| {
                    Error::Config("tq_sed needs a separator checkpoint".into())
                })?;
                let mixture = wav::read_wav_at_rate(
                    &clip.audio_path,
                    sep.model.config.sample_rate,
                    false,
                )?;
                let mut per_class = Vec::with_capacity(dataset.vocabulary.len());
                for label in dataset.vocabulary.labels() {
                    let q = crate::separation::TextQuery::new(label)?;
                    let track = sep.model.separate(&mixture, &q, sep.encoder.as_ref())?;
                    per_class.push(logmel(&track, &dataset.mel)?);
                }
                per_class
            }
            Framework::Base1 | Framework::Base2 => {
                let mixture = wav::read_wav(&clip.audio_path)?;
                vec![logmel(&mixture, &dataset.mel)?]
            }
        };
        for f in &feats {
            if f.frames() != clip.labels.frames() {
                return Err(Error::InvalidInput(format!(
                    "{}: {} feature frames vs {} label frames",
                    clip.audio_path.display(),
                    f.frames(),
                    clip.labels.frames()
                )));
            }
        }
        out.push(feats);
    }
    Ok(out)
}

/// Groups clip indices by frame count (batches must share T), preserving
/// the shuffled order inside each group.
fn batch_indices(
    order: &[usize],
    frames_of: impl Fn(usize) -> usize,
    batch_size: usize,
) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in order {
        groups.entry(frames_of(i)).or_default().push(i);
    }
    let mut batches = Vec::new();
    for (_, list) in groups {
        for chunk in list.chunks(batch_size.max(1)) {
            batches.push(chunk.to_vec());
        }
    }
    batches
}

struct NetSet {
    /// Flat store with `net{k}.` prefixes.
    work: Params,
    buffers: Vec<Buffers>,
    nets: usize,
    out_dim: usize,
}

impl NetSet {
    fn init(framework: Framework, k: usize, cfg: &TsedBranchConfig, seed: u64) -> Self {
        let (nets, out_dim) = match framework {
            Framework::Base1 => (1, k),
            _ => (k, 1),
        };
        let mut work = Params::new();
        let mut buffers = Vec::with_capacity(nets);
        for n in 0..nets {
            let init = CrnnParams::init(cfg, out_dim, splitmix64(seed ^ (n as u64 + 1)));
            for (name, value) in init.params.iter() {
                work.insert(&format!("net{n}.{name}"), value.clone());
            }
            buffers.push(init.buffers);
        }
        Self {
            work,
            buffers,
            nets,
            out_dim,
        }
    }

    fn into_detector(
        self,
        framework: Framework,
        dataset: &SedDataset,
        cfg: TsedBranchConfig,
    ) -> TrainedDetector {
        let mut per_net: Vec<CrnnParams> = Vec::with_capacity(self.nets);
        for n in 0..self.nets {
            let prefix = format!("net{n}.");
            let mut params = Params::new();
            for (name, value) in self.work.iter() {
                if let Some(short) = name.strip_prefix(&prefix) {
                    params.insert(short, value.clone());
                }
            }
            per_net.push(CrnnParams {
                params,
                buffers: self.buffers[n].clone(),
            });
        }
        match framework {
            Framework::Base1 => {
                let mut model = Base1Model::new(
                    dataset.vocabulary.clone(),
                    cfg,
                    dataset.mel,
                    0,
                )
                .expect("validated config");
                model.net = per_net.pop().expect("one net");
                TrainedDetector::Base1(model)
            }
            _ => TrainedDetector::Branches(
                per_net
                    .into_iter()
                    .map(|net| {
                        let mut b = TsedBranch::new(cfg, 0).expect("validated config");
                        b.net = net;
                        b
                    })
                    .collect(),
            ),
        }
    }
}

/// Builds the framework's prediction node (B, T, K) for one batch. Returns
/// the per-net bindings so the caller can read gradients back by name.
#[allow(clippy::too_many_arguments)]
fn forward_batch(
    g: &mut Graph,
    nets: &mut NetSet,
    framework: Framework,
    cfg: &TsedBranchConfig,
    feats: &[Vec<LogMelFeature>],
    batch: &[usize],
    train: bool,
    rng: Option<&mut ChaCha12Rng>,
) -> Result<(Var, Vec<Binding>)> {
    let mut rng = rng;
    let bindings: Vec<Binding> = (0..nets.nets)
        .map(|n| Binding::bind_prefixed(g, &nets.work, &format!("net{n}.")))
        .collect();
    let pred = match framework {
        Framework::Base1 => {
            let rows: Vec<&LogMelFeature> = batch.iter().map(|&i| &feats[i][0]).collect();
            let x = g.leaf(features_to_batch(&rows)?);
            crnn_forward(
                g,
                &bindings[0],
                &mut nets.buffers[0],
                cfg,
                x,
                nets.out_dim,
                train,
                rng.as_deref_mut(),
            )
        }
        Framework::TqSed | Framework::Base2 => {
            let mut combined: Option<Var> = None;
            for n in 0..nets.nets {
                let rows: Vec<&LogMelFeature> = batch
                    .iter()
                    .map(|&i| {
                        if framework == Framework::TqSed {
                            &feats[i][n]
                        } else {
                            &feats[i][0]
                        }
                    })
                    .collect();
                let x = g.leaf(features_to_batch(&rows)?);
                let scores = crnn_forward(
                    g,
                    &bindings[n],
                    &mut nets.buffers[n],
                    cfg,
                    x,
                    1,
                    train,
                    rng.as_deref_mut(),
                );
                combined = Some(match combined {
                    None => scores,
                    Some(prev) => g.concat_last(prev, scores),
                });
            }
            combined.expect("at least one class")
        }
    };
    Ok((pred, bindings))
}

fn label_batch(dataset: &SedDataset, batch: &[usize]) -> ArrayD<f64> {
    let t = dataset.clips[batch[0]].labels.frames();
    let k = dataset.vocabulary.len();
    let mut arr = ArrayD::zeros(IxDyn(&[batch.len(), t, k]));
    for (bi, &i) in batch.iter().enumerate() {
        for ti in 0..t {
            for ki in 0..k {
                arr[[bi, ti, ki]] = dataset.clips[i].labels.values[[ti, ki]];
            }
        }
    }
    arr
}

/// Trains one detector per requested fold (training on the other folds,
/// validating on the fold). Early-stops per the plateau schedule; keeps the
/// best-validation snapshot. The frozen-separator invariant is audited with
/// checksums taken before feature precomputation and after training.
#[allow(clippy::too_many_arguments)]
pub fn train_sed(
    framework: Framework,
    dataset: &SedDataset,
    folds: &FoldAssignment,
    folds_to_run: Option<&[usize]>,
    branch_config: TsedBranchConfig,
    cfg: &SedTrainConfig,
    separator: Option<&FrozenSeparator>,
    out_dir: Option<&Path>,
) -> Result<SedTrainOutput> {
    train_sed_with_features(
        framework,
        dataset,
        folds,
        folds_to_run,
        branch_config,
        cfg,
        separator,
        out_dir,
        None,
    )
}

/// As [`train_sed`], but callers may hand in features precomputed with
/// [`precompute_features`] (useful when several runs share one frozen
/// separator).
#[allow(clippy::too_many_arguments)]
pub fn train_sed_with_features(
    framework: Framework,
    dataset: &SedDataset,
    folds: &FoldAssignment,
    folds_to_run: Option<&[usize]>,
    branch_config: TsedBranchConfig,
    cfg: &SedTrainConfig,
    separator: Option<&FrozenSeparator>,
    out_dir: Option<&Path>,
    precomputed: Option<&[Vec<LogMelFeature>]>,
) -> Result<SedTrainOutput> {
    let mut branch_config = branch_config;
    branch_config.dropout_rate = cfg.dropout;
    branch_config.validate()?;
    if branch_config.n_mels != dataset.mel.n_mels {
        return Err(Error::Config(
            "branch n_mels does not match the dataset mel geometry".into(),
        ));
    }
    if dataset.clips.len() != folds.fold_of.len() {
        return Err(Error::Shape("fold assignment length mismatch".into()));
    }

    let checksum_before = separator.map(|s| s.checksum());
    let owned_feats;
    let feats: &[Vec<LogMelFeature>] = match precomputed {
        Some(f) => {
            if f.len() != dataset.clips.len() {
                return Err(Error::Shape(
                    "precomputed feature count differs from the dataset".into(),
                ));
            }
            f
        }
        None => {
            owned_feats = precompute_features(framework, dataset, separator)?;
            &owned_feats
        }
    };
    let k = dataset.vocabulary.len();

    let run_folds: Vec<usize> = match folds_to_run {
        Some(f) => f.to_vec(),
        None => (0..folds.k).collect(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    let mut results = Vec::new();
    for &fold in &run_folds {
        if fold >= folds.k {
            return Err(Error::Config(format!(
                "fold {fold} out of range (k = {})",
                folds.k
            )));
        }
        let val_idx = folds.fold_indices(fold);
        let train_idx: Vec<usize> = (0..dataset.clips.len())
            .filter(|i| folds.fold_of[*i] != fold)
            .collect();
        if train_idx.is_empty() || val_idx.is_empty() {
            return Err(Error::InvalidInput(format!(
                "fold {fold} leaves an empty train or validation split"
            )));
        }

        let mut nets = NetSet::init(
            framework,
            k,
            &branch_config,
            splitmix64(cfg.seed ^ ((fold as u64) << 32)),
        );
        let mut adam = Adam::new(cfg.learning_rate);
        let mut sched = LrSchedulerState::new(cfg.learning_rate);
        let plateau = PlateauConfig {
            patience: cfg.plateau_patience_epochs,
            max_halvings: cfg.max_halvings,
        };
        let mut dropout_rng =
            ChaCha12Rng::seed_from_u64(splitmix64(cfg.seed ^ 0xD09F ^ (fold as u64)));
        let mut rows = Vec::new();
        let mut best: Option<(f64, Params, Vec<Buffers>)> = None;
        let mut epochs_run = 0;

        for epoch in 1..=cfg.max_epochs {
            epochs_run = epoch;
            // ---- train ----
            let mut order = train_idx.clone();
            let mut epoch_rng =
                ChaCha12Rng::seed_from_u64(splitmix64(cfg.seed ^ (epoch as u64) ^ 0xE70C));
            order.shuffle(&mut epoch_rng);
            let batches = batch_indices(
                &order,
                |i| dataset.clips[i].labels.frames(),
                cfg.batch_size,
            );
            let mut train_loss_sum = 0.0;
            let mut train_batches = 0.0;
            for batch in &batches {
                let labels = label_batch(dataset, batch);
                let mut g = Graph::new();
                let (pred, bindings) = forward_batch(
                    &mut g,
                    &mut nets,
                    framework,
                    &branch_config,
                    feats,
                    batch,
                    true,
                    Some(&mut dropout_rng),
                )?;
                let diff = g.sub_const(pred, &labels);
                let sq = g.square(diff);
                let loss = g.mean_all(sq);
                train_loss_sum += g.scalar_value(loss);
                train_batches += 1.0;
                g.backward(loss);

                let mut grads = BTreeMap::new();
                for (n, bind) in bindings.iter().enumerate() {
                    for (name, var) in bind.iter() {
                        if let Some(grad) = g.take_grad(*var) {
                            grads.insert(format!("net{n}.{name}"), grad);
                        }
                    }
                }
                adam.step(&mut nets.work, &grads);
            }

            // ---- validate ----
            let val_batches = batch_indices(
                &val_idx,
                |i| dataset.clips[i].labels.frames(),
                cfg.batch_size,
            );
            let mut sq_sum = 0.0;
            let mut count = 0.0;
            for batch in &val_batches {
                let labels = label_batch(dataset, batch);
                let mut g = Graph::new();
                let (pred, _bindings) = forward_batch(
                    &mut g,
                    &mut nets,
                    framework,
                    &branch_config,
                    feats,
                    batch,
                    false,
                    None,
                )?;
                let pv = g.value(pred);
                for (p, l) in pv.iter().zip(labels.iter()) {
                    sq_sum += (p - l) * (p - l);
                    count += 1.0;
                }
            }
            let val_loss = sq_sum / count;
            rows.push(LossRow {
                step: epoch,
                split: "train",
                loss: train_loss_sum / train_batches,
                lr: sched.current_lr,
            });
            rows.push(LossRow {
                step: epoch,
                split: "val",
                loss: val_loss,
                lr: sched.current_lr,
            });

            let improved = sched.best_metric.is_none_or(|b| val_loss < b);
            if improved {
                best = Some((val_loss, nets.work.clone(), nets.buffers.clone()));
            }
            let stop = scheduler_step(&mut sched, &plateau, val_loss)?;
            adam.set_lr(sched.current_lr);
            if stop {
                break;
            }
        }

        let (best_val_loss, best_work, best_buffers) =
            best.expect("at least one epoch ran");
        nets.work = best_work;
        nets.buffers = best_buffers;

        let mut checkpoint_path = None;
        if let Some(dir) = out_dir {
            let path = dir.join(format!("fold{fold}.tqck"));
            let per_net = nets_to_crnn(&nets);
            let mut refs = BTreeMap::new();
            if let Some(c) = checksum_before {
                refs.insert("separator_checksum".to_string(), format!("{c:016x}"));
            }
            refs.insert("fold".to_string(), fold.to_string());
            refs.insert("cv_k".to_string(), folds.k.to_string());
            refs.insert("split_seed".to_string(), folds.seed.to_string());
            checkpoint::save_sed(
                &path,
                &SedCheckpoint {
                    framework: framework.as_str().to_string(),
                    vocabulary: dataset.vocabulary.clone(),
                    branch_config,
                    mel: dataset.mel,
                    nets: per_net,
                    refs,
                },
            )?;
            std::fs::write(
                dir.join(format!("fold{fold}_loss_log.csv")),
                loss_log_csv(&rows),
            )?;
            checkpoint_path = Some(path);
        }

        results.push(FoldResult {
            fold,
            detector: nets.into_detector(framework, dataset, branch_config),
            rows,
            best_val_loss,
            epochs_run,
            checkpoint: checkpoint_path,
        });
    }

    let checksum_after = separator.map(|s| s.checksum());
    if checksum_before != checksum_after {
        return Err(Error::InvalidInput(
            "separator parameters changed during detector training".into(),
        ));
    }
    Ok(SedTrainOutput {
        framework,
        folds: results,
        separator_checksum_before: checksum_before,
        separator_checksum_after: checksum_after,
    })
}

fn nets_to_crnn(nets: &NetSet) -> Vec<CrnnParams> {
    (0..nets.nets)
        .map(|n| {
            let prefix = format!("net{n}.");
            let mut params = Params::new();
            for (name, value) in nets.work.iter() {
                if let Some(short) = name.strip_prefix(&prefix) {
                    params.insert(short, value.clone());
                }
            }
            CrnnParams {
                params,
                buffers: nets.buffers[n].clone(),
            }
        })
        .collect()
}
