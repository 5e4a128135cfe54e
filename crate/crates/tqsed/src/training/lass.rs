//! Separator pretraining: Adam at a fixed learning rate on waveform L1
//! loss, each step mixing a sampled target stem with an interfering stem
//! from a different caption at a random SNR. The query embedding table
//! trains jointly with the network.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use super::{loss_log_csv, make_mixture, Adam, LossRow};
use crate::audio::{stft, wav, Waveform};
use crate::checkpoint;
use crate::datagen::CaptionManifestEntry;
use crate::nn::{Binding, Params};
use crate::separation::{LookupTextEncoder, SeparationModel, TextQuery};
use crate::tensor::SpecGeometry;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LassTrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Emit a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Uniform SNR range (dB) for target-vs-interference mixing.
    pub snr_range_db: (f64, f64),
    /// Train on random crops of this length; `None` uses whole clips
    /// (which must then share one duration).
    pub crop_seconds: Option<f64>,
    /// Unreadable audio files are skipped with a warning until this many
    /// have failed, then the run aborts.
    pub max_skipped_files: usize,
}

impl Default for LassTrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 24,
            max_steps: 1000,
            seed: 0,
            checkpoint_every: 0,
            snr_range_db: (-5.0, 5.0),
            crop_seconds: None,
            max_skipped_files: 16,
        }
    }
}

pub struct LassTrainOutput {
    pub rows: Vec<LossRow>,
    pub skipped_files: usize,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: Option<PathBuf>,
}

fn split_work(work: &Params) -> (Params, Params) {
    let mut model = Params::new();
    let mut encoder = Params::new();
    for (name, value) in work.iter() {
        if name.starts_with("encoder.") {
            encoder.insert(name, value.clone());
        } else {
            model.insert(name, value.clone());
        }
    }
    (model, encoder)
}

struct AudioPool<'a> {
    entries: &'a [CaptionManifestEntry],
    sample_rate: u32,
    cache: BTreeMap<usize, Vec<f32>>,
    bad: BTreeSet<usize>,
    skipped: usize,
    max_skipped: usize,
}

impl<'a> AudioPool<'a> {
    fn get(&mut self, idx: usize) -> Result<Option<&[f32]>> {
        if self.bad.contains(&idx) {
            return Ok(None);
        }
        if !self.cache.contains_key(&idx) {
            match wav::read_wav_at_rate(&self.entries[idx].audio_path, self.sample_rate, false) {
                Ok(w) => {
                    let v: Vec<f32> = w.samples().iter().map(|&s| s as f32).collect();
                    self.cache.insert(idx, v);
                }
                Err(e) => {
                    eprintln!(
                        "warning: skipping {}: {e}",
                        self.entries[idx].audio_path.display()
                    );
                    self.bad.insert(idx);
                    self.skipped += 1;
                    if self.skipped > self.max_skipped {
                        return Err(Error::InvalidInput(format!(
                            "aborting after {} unreadable audio files",
                            self.skipped
                        )));
                    }
                    return Ok(None);
                }
            }
        }
        Ok(self.cache.get(&idx).map(|v| v.as_slice()))
    }
}

fn crop(samples: &[f32], start: usize, len: usize, sample_rate: u32) -> Waveform {
    let out: Vec<f64> = samples[start..start + len].iter().map(|&v| v as f64).collect();
    Waveform::new(out, sample_rate).expect("finite cached audio")
}

/// Trains the separator (and its lookup encoder, jointly) on caption-manifest
/// stems. Deterministic for a fixed seed on a single thread. Returns the
/// per-step loss log; artifacts (loss CSV, checkpoint series, `final.tqck`)
/// land in `out_dir` when given.
pub fn train_lass(
    manifest: &[CaptionManifestEntry],
    model: &mut SeparationModel,
    encoder: &mut LookupTextEncoder,
    cfg: &LassTrainConfig,
    out_dir: Option<&Path>,
) -> Result<LassTrainOutput> {
    if manifest.is_empty() {
        return Err(Error::InvalidInput("empty training manifest".into()));
    }
    let captions: BTreeSet<&str> = manifest.iter().map(|e| e.caption.as_str()).collect();
    if captions.len() < 2 {
        return Err(Error::InvalidInput(
            "need at least two distinct captions to build interference pairs".into(),
        ));
    }
    let sr = model.config.sample_rate;
    let resolved = model.config.stft.resolve(sr)?;
    let crop_len = cfg
        .crop_seconds
        .map(|s| (s * sr as f64).round() as usize);
    if let Some(c) = crop_len {
        if c < resolved.window + 1 {
            return Err(Error::Config("crop shorter than the stft window".into()));
        }
    }

    let mut work = Params::new();
    for (n, v) in model.params.iter() {
        work.insert(n, v.clone());
    }
    for (n, v) in encoder.params.iter() {
        work.insert(n, v.clone());
    }

    let mut pool = AudioPool {
        entries: manifest,
        sample_rate: sr,
        cache: BTreeMap::new(),
        bad: BTreeSet::new(),
        skipped: 0,
        max_skipped: cfg.max_skipped_files,
    };
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rows = Vec::with_capacity(cfg.max_steps);
    let mut checkpoints = Vec::new();

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    for step in 1..=cfg.max_steps {
        // ---- assemble a batch ----
        let mut mixtures: Vec<Waveform> = Vec::with_capacity(cfg.batch_size);
        let mut targets: Vec<Waveform> = Vec::with_capacity(cfg.batch_size);
        let mut queries: Vec<TextQuery> = Vec::with_capacity(cfg.batch_size);
        let mut guard = 0usize;
        while mixtures.len() < cfg.batch_size {
            guard += 1;
            if guard > cfg.batch_size * 200 {
                return Err(Error::InvalidInput(
                    "could not assemble a batch (too many silent or unreadable stems)".into(),
                ));
            }
            let t_idx = rng.random_range(0..manifest.len());
            let Some(t_audio) = pool.get(t_idx)? else {
                continue;
            };
            let t_len = t_audio.len();
            let this_len = crop_len.unwrap_or(t_len);
            if t_len < this_len || this_len == 0 {
                continue;
            }
            let t_start = if t_len == this_len {
                0
            } else {
                rng.random_range(0..=t_len - this_len)
            };
            let target = crop(pool.get(t_idx)?.expect("cached"), t_start, this_len, sr);
            if target.energy() == 0.0 {
                continue; // silent crop: resample
            }

            let caption = manifest[t_idx].caption.as_str();
            let mut i_idx = rng.random_range(0..manifest.len());
            let mut tries = 0;
            let interference = loop {
                tries += 1;
                if tries > manifest.len() * 4 {
                    break None;
                }
                if manifest[i_idx].caption != caption {
                    if let Some(i_audio) = pool.get(i_idx)? {
                        if i_audio.len() >= this_len {
                            let i_start = if i_audio.len() == this_len {
                                0
                            } else {
                                rng.random_range(0..=i_audio.len() - this_len)
                            };
                            break Some(crop(
                                pool.get(i_idx)?.expect("cached"),
                                i_start,
                                this_len,
                                sr,
                            ));
                        }
                    }
                }
                i_idx = rng.random_range(0..manifest.len());
            };
            let Some(interference) = interference else {
                continue;
            };
            let snr = rng.random_range(cfg.snr_range_db.0..=cfg.snr_range_db.1);
            let (mixture, target) = make_mixture(&target, &interference, snr)?;
            mixtures.push(mixture);
            targets.push(target);
            queries.push(TextQuery::new(caption)?);
        }

        let n = mixtures[0].len();
        if mixtures.iter().any(|m| m.len() != n) {
            return Err(Error::InvalidInput(
                "clips of unequal length; set crop_seconds to batch them".into(),
            ));
        }
        let geom = SpecGeometry {
            stft: resolved,
            source_length: n,
        };
        let (t_frames, bins) = (geom.frames(), geom.bins());
        let b = mixtures.len();
        let mut mags = ArrayD::zeros(IxDyn(&[b, t_frames, bins]));
        let mut re = ArrayD::zeros(IxDyn(&[b, t_frames, bins]));
        let mut im = ArrayD::zeros(IxDyn(&[b, t_frames, bins]));
        let mut target_arr = ArrayD::zeros(IxDyn(&[b, n]));
        for (bi, (mixture, target)) in mixtures.iter().zip(&targets).enumerate() {
            let spec = stft(mixture, &model.config.stft)?;
            for ti in 0..t_frames {
                for fi in 0..bins {
                    let c = spec.values[[ti, fi]];
                    mags[[bi, ti, fi]] = c.norm();
                    re[[bi, ti, fi]] = c.re;
                    im[[bi, ti, fi]] = c.im;
                }
            }
            for (si, &s) in target.samples().iter().enumerate() {
                target_arr[[bi, si]] = s;
            }
        }

        // ---- forward/backward ----
        let mut g = crate::tensor::Graph::new();
        let bind = Binding::bind(&mut g, &work);
        let emb = encoder.embed_batch(&mut g, &bind, &queries)?;
        let mask = model.build_mask(&mut g, &bind, &mags, emb);
        let masked_re = g.mul_const(mask, &re);
        let masked_im = g.mul_const(mask, &im);
        let wave = g.istft_batch(masked_re, masked_im, &geom);
        let diff = g.sub_const(wave, &target_arr);
        let absdiff = g.abs(diff);
        let loss = g.mean_all(absdiff);
        let loss_value = g.scalar_value(loss);
        g.backward(loss);

        let mut grads = BTreeMap::new();
        for (name, var) in bind.iter() {
            if let Some(grad) = g.take_grad(*var) {
                grads.insert(name.clone(), grad);
            }
        }
        adam.step(&mut work, &grads);

        rows.push(LossRow {
            step,
            split: "train",
            loss: loss_value,
            lr: cfg.learning_rate,
        });

        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            if let Some(dir) = out_dir {
                let path = dir.join(format!("ckpt_step{step:07}.tqck"));
                let (mp, ep) = split_work(&work);
                let view = SeparationModel {
                    config: model.config.clone(),
                    params: mp,
                };
                let enc_view =
                    LookupTextEncoder::from_parts(encoder.labels().to_vec(), encoder_dim(encoder), ep)?;
                checkpoint::save_separation(&path, &view, &enc_view)?;
                checkpoints.push(path);
            }
        }
    }

    let (mp, ep) = split_work(&work);
    model.params = mp;
    *encoder = LookupTextEncoder::from_parts(encoder.labels().to_vec(), encoder_dim(encoder), ep)?;

    let mut final_checkpoint = None;
    if let Some(dir) = out_dir {
        let path = dir.join("final.tqck");
        checkpoint::save_separation(&path, model, encoder)?;
        std::fs::write(dir.join("loss_log.csv"), loss_log_csv(&rows))?;
        final_checkpoint = Some(path);
    }
    Ok(LassTrainOutput {
        rows,
        skipped_files: pool.skipped,
        checkpoints,
        final_checkpoint,
    })
}

fn encoder_dim(enc: &LookupTextEncoder) -> usize {
    use crate::separation::TextEncoder as _;
    enc.embedding_dim()
}
