//! End-to-end command implementations behind the CLI: data synthesis, both
//! training stages, separation inference, evaluation and report rendering.
//! Each command returns a one-line JSON summary for the caller to print.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::{json, Value};

use crate::audio::wav;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::datagen::{self, SedClip};
use crate::metrics::{
    error_rate, optimal_threshold_f1, overlap_statistics, per_class_csv, overlap_csv,
    segment_counts, ClassReport, ClipSeparation, FoldMetrics, FoldReport, MetricsReport,
    SegmentCounts, SeparationSummary, ThresholdVector,
};
use crate::sed::{EventVocabulary, SoftLabelMatrix, TsedBranch};
use crate::separation::{FrozenSeparator, LookupTextEncoder, SeparationModel, TextQuery};
use crate::training::{
    kfold_split, train_lass, train_sed, FoldAssignment, Framework, SedDataset, TrainedDetector,
};
use crate::{Error, Result};

/// Generates a synthetic dataset per the `[synth]` section.
pub fn cmd_synth(cfg: &RunConfig, clips: usize, out_dir: &Path) -> Result<Value> {
    let mut synth = cfg.synth.clone();
    if synth.seed == 0 {
        synth.seed = cfg.seed;
    }
    let out = datagen::synth_generate(&synth, clips, out_dir)?;
    Ok(json!({
        "command": "synth",
        "clips": out.clips,
        "out_dir": out_dir.display().to_string(),
        "warnings": out.warnings,
    }))
}

/// Pretrains the separator on a caption manifest. The lookup encoder's
/// vocabulary is the sorted set of captions found in the manifest.
pub fn cmd_train_lass(
    cfg: &RunConfig,
    manifest_path: &Path,
    out_dir: &Path,
    use_dprnn: Option<bool>,
) -> Result<Value> {
    let manifest = datagen::load_caption_manifest(manifest_path)?;
    if manifest.is_empty() {
        return Err(Error::InvalidInput("empty manifest".into()));
    }
    let mut sep_cfg = cfg.separation.clone();
    if let Some(flag) = use_dprnn {
        if !flag {
            sep_cfg.dprnn = None;
        } else if sep_cfg.dprnn.is_none() {
            return Err(Error::Config(
                "dprnn requested but the separation config does not define one".into(),
            ));
        }
    }
    let captions: std::collections::BTreeSet<String> =
        manifest.iter().map(|e| e.caption.clone()).collect();
    let queries: Vec<String> = captions.into_iter().collect();
    let mut encoder = LookupTextEncoder::new(&queries, sep_cfg.embedding_dim, cfg.seed ^ 0xE)?;
    let mut model = SeparationModel::new(sep_cfg, cfg.seed)?;
    let mut train_cfg = cfg.lass_train.clone();
    if train_cfg.seed == 0 {
        train_cfg.seed = cfg.seed;
    }
    let out = train_lass(&manifest, &mut model, &mut encoder, &train_cfg, Some(out_dir))?;
    let final_loss = out.rows.last().map(|r| r.loss);
    Ok(json!({
        "command": "train-lass",
        "steps": out.rows.len(),
        "final_loss": final_loss,
        "skipped_files": out.skipped_files,
        "checkpoint": out.final_checkpoint.as_ref().map(|p| p.display().to_string()),
        "separator_checksum": format!("{:016x}", model.params.checksum()),
    }))
}

/// Loads the dataset layout produced by `synth` (or hand-assembled to the
/// same shape).
pub fn load_dataset(dataset_dir: &Path, cfg: &RunConfig) -> Result<SedDataset> {
    let vocab_path = dataset_dir.join("vocabulary.json");
    let labels: Vec<String> = serde_json::from_str(&std::fs::read_to_string(&vocab_path)?)?;
    let vocabulary = EventVocabulary::new(labels.clone())?;
    let clips = datagen::load_sed_manifest(
        &dataset_dir.join("manifest_sed.jsonl"),
        &labels,
        cfg.mel.hop_seconds,
    )?;
    Ok(SedDataset {
        vocabulary,
        mel: cfg.mel,
        clips,
    })
}

fn clip_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Evaluates separation quality over a dataset: every (clip, class) pair
/// whose reference stem exists with nonzero energy. With `oracle_stems` the
/// reference itself is used as the estimate, exercising the metric path and
/// pinning the +100 dB cap.
pub fn cmd_eval_lass(
    cfg: &RunConfig,
    checkpoint_path: Option<&Path>,
    dataset_dir: &Path,
    out_dir: &Path,
    oracle_stems: bool,
    deterministic: bool,
) -> Result<Value> {
    let dataset = load_dataset(dataset_dir, cfg)?;
    let loaded = match checkpoint_path {
        Some(p) => Some(checkpoint::load_separation(p)?),
        None if oracle_stems => None,
        None => {
            return Err(Error::Config(
                "eval-lass needs --checkpoint unless --oracle-stems is set".into(),
            ))
        }
    };
    std::fs::create_dir_all(out_dir)?;

    let mut rows: Vec<ClipSeparation> = Vec::new();
    for clip in &dataset.clips {
        let name = clip_stem(&clip.audio_path);
        let sample_rate = loaded
            .as_ref()
            .map(|(m, _)| m.config.sample_rate)
            .unwrap_or(cfg.separation.sample_rate);
        let mixture = wav::read_wav_at_rate(&clip.audio_path, sample_rate, false)?;
        for label in dataset.vocabulary.labels() {
            let stem_path = dataset_dir.join("stems").join(label).join(format!("{name}.wav"));
            if !stem_path.exists() {
                continue;
            }
            let reference = wav::read_wav_at_rate(&stem_path, sample_rate, false)?;
            if reference.energy() == 0.0 {
                continue;
            }
            let estimate = if oracle_stems {
                reference.clone()
            } else {
                let (model, encoder) = loaded.as_ref().expect("checkpoint required");
                model.separate(&mixture, &TextQuery::new(label)?, encoder)?
            };
            rows.push(ClipSeparation {
                clip: name.clone(),
                class: label.clone(),
                sdr: crate::metrics::sdr(&estimate, &reference)?,
                sdri: crate::metrics::sdri(&estimate, &reference, &mixture)?,
                si_sdr: crate::metrics::si_sdr(&estimate, &reference)?,
                mixture_sdr: crate::metrics::sdr(&mixture, &reference)?,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::UndefinedMetric(
            "no (clip, class) pair with a non-silent reference stem".into(),
        ));
    }

    let mut csv = String::from("clip,class,sdr,sdri,si_sdr,mixture_sdr\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.clip, r.class, r.sdr, r.sdri, r.si_sdr, r.mixture_sdr
        ));
    }
    std::fs::write(out_dir.join("per_clip.csv"), csv)?;

    let summary = SeparationSummary::from_clips(&rows).expect("non-empty rows");
    let report = MetricsReport {
        separation: Some(summary.clone()),
        er: None,
        macro_f1: None,
        per_class: vec![],
        overlap: vec![],
        threshold_fit: cfg.metrics.threshold_fit.clone(),
        config_hash: cfg.hash(),
        separator_checksum: loaded
            .as_ref()
            .map(|(m, _)| format!("{:016x}", m.params.checksum())),
        folds: None,
        framework: None,
        conv_filters: None,
        learnable_params: None,
        deterministic,
    };
    std::fs::write(out_dir.join("metrics.json"), report.to_json()?)?;
    Ok(json!({
        "command": "eval-lass",
        "pairs": rows.len(),
        "sdr": summary.sdr,
        "sdri": summary.sdri,
        "si_sdr": summary.si_sdr,
        "report": out_dir.join("metrics.json").display().to_string(),
    }))
}

/// Separates one WAV for one query with a trained checkpoint.
pub fn cmd_separate(
    checkpoint_path: &Path,
    input: &Path,
    query: &str,
    output: &Path,
    resample: bool,
) -> Result<Value> {
    let (model, encoder) = checkpoint::load_separation(checkpoint_path)?;
    let x = wav::read_wav_at_rate(input, model.config.sample_rate, resample)?;
    let q = TextQuery::new(query)?;
    let separated = model.separate(&x, &q, &encoder)?;
    if let Some(parent) = output.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    wav::write_wav(output, &separated)?;
    Ok(json!({
        "command": "separate",
        "query": query,
        "input_samples": x.len(),
        "output_samples": separated.len(),
        "output": output.display().to_string(),
    }))
}

/// Trains a detector with cross-validation folds.
#[allow(clippy::too_many_arguments)]
pub fn cmd_train_sed(
    cfg: &RunConfig,
    framework: Framework,
    dataset_dir: &Path,
    separator_ckpt: Option<&Path>,
    out_dir: &Path,
    folds_to_run: Option<&[usize]>,
) -> Result<Value> {
    let dataset = load_dataset(dataset_dir, cfg)?;
    let clip_ids: Vec<String> = dataset
        .clips
        .iter()
        .map(|c| clip_stem(&c.audio_path))
        .collect();
    let folds = kfold_split(&clip_ids, cfg.cv_folds, cfg.seed)?;

    let separator = match (framework, separator_ckpt) {
        (Framework::TqSed, Some(p)) => {
            let (model, encoder) = checkpoint::load_separation(p)?;
            Some(FrozenSeparator {
                model: Arc::new(model),
                encoder: Arc::new(encoder),
            })
        }
        (Framework::TqSed, None) => {
            return Err(Error::Config(
                "tq_sed training needs --separator-checkpoint".into(),
            ))
        }
        _ => None,
    };

    let mut branch_cfg = cfg.branch;
    branch_cfg.n_mels = cfg.mel.n_mels;
    let mut sed_cfg = cfg.sed_train.clone();
    if sed_cfg.seed == 0 {
        sed_cfg.seed = cfg.seed;
    }
    let out = train_sed(
        framework,
        &dataset,
        &folds,
        folds_to_run,
        branch_cfg,
        &sed_cfg,
        separator.as_ref(),
        Some(out_dir),
    )?;
    let fold_summaries: Vec<Value> = out
        .folds
        .iter()
        .map(|f| {
            json!({
                "fold": f.fold,
                "best_val_loss": f.best_val_loss,
                "epochs": f.epochs_run,
                "checkpoint": f.checkpoint.as_ref().map(|p| p.display().to_string()),
            })
        })
        .collect();
    Ok(json!({
        "command": "train-sed",
        "framework": framework.as_str(),
        "folds": fold_summaries,
        "separator_checksum_unchanged":
            out.separator_checksum_before == out.separator_checksum_after,
    }))
}

/// Scores from one detector over a clip set.
fn score_clips(
    detector: &TrainedDetector,
    dataset: &SedDataset,
    indices: &[usize],
    separator: Option<&FrozenSeparator>,
) -> Result<Vec<SoftLabelMatrix>> {
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let clip = &dataset.clips[i];
        let scores = match detector {
            TrainedDetector::Base1(model) => {
                let mixture = wav::read_wav(&clip.audio_path)?;
                model.base1_forward(&mixture)?
            }
            TrainedDetector::Branches(branches) => {
                score_branches(branches, dataset, clip, separator)?
            }
        };
        if scores.frames() != clip.labels.frames() {
            return Err(Error::Shape(format!(
                "{}: {} score frames vs {} label frames",
                clip.audio_path.display(),
                scores.frames(),
                clip.labels.frames()
            )));
        }
        out.push(scores);
    }
    Ok(out)
}

fn score_branches(
    branches: &[TsedBranch],
    dataset: &SedDataset,
    clip: &SedClip,
    separator: Option<&FrozenSeparator>,
) -> Result<SoftLabelMatrix> {
    use crate::audio::logmel;
    let k = dataset.vocabulary.len();
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(k);
    for (label, branch) in dataset.vocabulary.labels().iter().zip(branches) {
        let track = match separator {
            Some(sep) => {
                let mixture =
                    wav::read_wav_at_rate(&clip.audio_path, sep.model.config.sample_rate, false)?;
                sep.model
                    .separate(&mixture, &TextQuery::new(label)?, sep.encoder.as_ref())?
            }
            None => wav::read_wav(&clip.audio_path)?,
        };
        let feat = logmel(&track, &dataset.mel)?;
        columns.push(branch.branch_forward(&feat)?);
    }
    let t = columns[0].len();
    let mut values = ndarray::Array2::zeros((t, k));
    for (ki, col) in columns.iter().enumerate() {
        for (ti, &v) in col.iter().enumerate() {
            values[[ti, ki]] = v;
        }
    }
    SoftLabelMatrix::new(values, dataset.mel.hop_seconds, dataset.vocabulary.labels().to_vec())
}

/// Per-class F1 at fixed thresholds over summed segment counts.
fn f1_at_thresholds(
    scores: &[SoftLabelMatrix],
    refs: &[SoftLabelMatrix],
    thresholds: &ThresholdVector,
    segment_seconds: f64,
    binarize: f64,
) -> Result<(SegmentCounts, Vec<Option<f64>>, f64)> {
    let k = thresholds.0.len();
    let mut total = SegmentCounts::zeros(k);
    for (s, r) in scores.iter().zip(refs) {
        let c = segment_counts(s, r, thresholds, segment_seconds, binarize)?;
        total.merge(&c);
    }
    let mut per_class = vec![None; k];
    let mut active = 0.0;
    let mut sum = 0.0;
    for class in 0..k {
        if total.ref_pos[class] > 0 {
            let f1 = total.f1(class);
            per_class[class] = Some(f1);
            sum += f1;
            active += 1.0;
        }
    }
    if active == 0.0 {
        return Err(Error::UndefinedMetric(
            "no class has a positive reference segment".into(),
        ));
    }
    Ok((total, per_class, sum / active))
}

/// Evaluates trained detector folds: each fold's model scores its held-out
/// clips; metrics are reported per fold, averaged over folds, and pooled.
#[allow(clippy::too_many_arguments)]
pub fn cmd_eval_sed(
    cfg: &RunConfig,
    framework: Framework,
    ckpt_dir: &Path,
    dataset_dir: &Path,
    separator_ckpt: Option<&Path>,
    out_dir: &Path,
    deterministic: bool,
) -> Result<Value> {
    let dataset = load_dataset(dataset_dir, cfg)?;
    std::fs::create_dir_all(out_dir.join("predictions"))?;

    // Discover fold checkpoints.
    let mut fold_files: Vec<PathBuf> = std::fs::read_dir(ckpt_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("fold") && n.ends_with(".tqck"))
                .unwrap_or(false)
        })
        .collect();
    fold_files.sort();
    if fold_files.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no fold*.tqck checkpoints in {}",
            ckpt_dir.display()
        )));
    }

    let separator = match (framework, separator_ckpt) {
        (Framework::TqSed, Some(p)) => {
            let (model, encoder) = checkpoint::load_separation(p)?;
            Some(FrozenSeparator {
                model: Arc::new(model),
                encoder: Arc::new(encoder),
            })
        }
        (Framework::TqSed, None) => {
            return Err(Error::Config(
                "tq_sed evaluation needs --separator-checkpoint".into(),
            ))
        }
        _ => None,
    };

    let clip_ids: Vec<String> = dataset
        .clips
        .iter()
        .map(|c| clip_stem(&c.audio_path))
        .collect();

    let seg = cfg.metrics.segment_seconds;
    let binarize = cfg.metrics.label_binarize_threshold;
    let fit_on_eval = cfg.metrics.threshold_fit == "eval";

    let mut per_fold_metrics: Vec<FoldMetrics> = Vec::new();
    let mut pooled_scores: Vec<SoftLabelMatrix> = Vec::new();
    let mut pooled_refs: Vec<SoftLabelMatrix> = Vec::new();
    let mut pooled_counts: Option<SegmentCounts> = None;
    let mut last_thresholds: Option<ThresholdVector> = None;
    let mut total_params = None;
    let mut conv_filters = None;

    for path in &fold_files {
        let ckpt = checkpoint::load_sed(path)?;
        if ckpt.framework != framework.as_str() {
            return Err(Error::Config(format!(
                "{}: checkpoint framework '{}' does not match requested '{}'",
                path.display(),
                ckpt.framework,
                framework.as_str()
            )));
        }
        if let (Some(sep), Some(expected)) =
            (separator.as_ref(), ckpt.refs.get("separator_checksum"))
        {
            let got = format!("{:016x}", sep.checksum());
            if &got != expected {
                return Err(Error::Checkpoint(format!(
                    "{}: separator checksum {got} differs from training-time {expected}",
                    path.display()
                )));
            }
        }
        let fold: usize = ckpt
            .refs
            .get("fold")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("checkpoint missing fold reference".into()))?;
        let k_folds: usize = ckpt
            .refs
            .get("cv_k")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("checkpoint missing cv_k reference".into()))?;
        let split_seed: u64 = ckpt
            .refs
            .get("split_seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("checkpoint missing split_seed".into()))?;
        let folds = kfold_split(&clip_ids, k_folds, split_seed)?;
        let eval_idx = folds.fold_indices(fold);
        let train_idx: Vec<usize> = (0..dataset.clips.len())
            .filter(|i| folds.fold_of[*i] != fold)
            .collect();

        let detector = match framework {
            Framework::Base1 => TrainedDetector::Base1(checkpoint::base1_from_checkpoint(&ckpt)?),
            _ => TrainedDetector::Branches(checkpoint::branches_from_checkpoint(&ckpt)?),
        };
        conv_filters = Some(ckpt.branch_config.conv_filters);
        total_params = Some(match &detector {
            TrainedDetector::Base1(m) => m.count_parameters(),
            TrainedDetector::Branches(b) => b.iter().map(|x| x.count_parameters()).sum(),
        });

        let eval_scores = score_clips(&detector, &dataset, &eval_idx, separator.as_ref())?;
        let eval_refs: Vec<SoftLabelMatrix> = eval_idx
            .iter()
            .map(|&i| dataset.clips[i].labels.clone())
            .collect();

        for (local, &i) in eval_idx.iter().enumerate() {
            let name = clip_stem(&dataset.clips[i].audio_path);
            let mut csv = String::from("frame_index,");
            csv.push_str(&dataset.vocabulary.labels().join(","));
            csv.push('\n');
            let m = &eval_scores[local];
            for t in 0..m.frames() {
                csv.push_str(&format!("{t}"));
                for c in 0..m.classes() {
                    csv.push_str(&format!(",{}", m.values[[t, c]]));
                }
                csv.push('\n');
            }
            std::fs::write(out_dir.join("predictions").join(format!("{name}.csv")), csv)?;
        }

        let (thresholds, fold_macro_f1) = if fit_on_eval {
            let opt = optimal_threshold_f1(&eval_scores, &eval_refs, seg, binarize)?;
            (opt.thresholds, opt.macro_f1)
        } else {
            let train_scores = score_clips(&detector, &dataset, &train_idx, separator.as_ref())?;
            let train_refs: Vec<SoftLabelMatrix> = train_idx
                .iter()
                .map(|&i| dataset.clips[i].labels.clone())
                .collect();
            let opt = optimal_threshold_f1(&train_scores, &train_refs, seg, binarize)?;
            let (_, _, macro_f1) =
                f1_at_thresholds(&eval_scores, &eval_refs, &opt.thresholds, seg, binarize)?;
            (opt.thresholds, macro_f1)
        };
        let (counts, _, _) =
            f1_at_thresholds(&eval_scores, &eval_refs, &thresholds, seg, binarize)?;
        let fold_er = error_rate(&counts)?;
        per_fold_metrics.push(FoldMetrics {
            fold,
            er: fold_er,
            macro_f1: fold_macro_f1,
        });
        match &mut pooled_counts {
            Some(c) => c.merge(&counts),
            none => *none = Some(counts),
        }
        pooled_scores.extend(eval_scores);
        pooled_refs.extend(eval_refs);
        last_thresholds = Some(thresholds);
    }

    // Pooled metrics over every fold's held-out scores.
    let (pooled_er, pooled_macro_f1, per_class_report) = if fit_on_eval {
        let opt = optimal_threshold_f1(&pooled_scores, &pooled_refs, seg, binarize)?;
        let (counts, _, _) =
            f1_at_thresholds(&pooled_scores, &pooled_refs, &opt.thresholds, seg, binarize)?;
        let per_class = dataset
            .vocabulary
            .labels()
            .iter()
            .enumerate()
            .map(|(i, label)| ClassReport {
                label: label.clone(),
                f1: opt.per_class_f1[i],
                threshold: opt.thresholds.0[i],
            })
            .collect::<Vec<_>>();
        (error_rate(&counts)?, opt.macro_f1, per_class)
    } else {
        let counts = pooled_counts.expect("at least one fold");
        let thresholds = last_thresholds.expect("at least one fold");
        let mut per_class = Vec::new();
        let mut sum = 0.0;
        let mut n = 0.0_f64;
        for (i, label) in dataset.vocabulary.labels().iter().enumerate() {
            let f1 = (counts.ref_pos[i] > 0).then(|| counts.f1(i));
            if let Some(v) = f1 {
                sum += v;
                n += 1.0;
            }
            per_class.push(ClassReport {
                label: label.clone(),
                f1,
                threshold: thresholds.0[i],
            });
        }
        (error_rate(&counts)?, sum / n.max(1.0), per_class)
    };

    let all_refs: Vec<SoftLabelMatrix> =
        dataset.clips.iter().map(|c| c.labels.clone()).collect();
    let overlap = overlap_statistics(&all_refs, binarize)?;

    let averaged_er =
        per_fold_metrics.iter().map(|f| f.er).sum::<f64>() / per_fold_metrics.len() as f64;
    let averaged_f1 = per_fold_metrics.iter().map(|f| f.macro_f1).sum::<f64>()
        / per_fold_metrics.len() as f64;

    let report = MetricsReport {
        separation: None,
        er: Some(pooled_er),
        macro_f1: Some(pooled_macro_f1),
        per_class: per_class_report,
        overlap,
        threshold_fit: cfg.metrics.threshold_fit.clone(),
        config_hash: cfg.hash(),
        separator_checksum: separator
            .as_ref()
            .map(|s| format!("{:016x}", s.checksum())),
        folds: Some(FoldReport {
            per_fold: per_fold_metrics,
            averaged_er,
            averaged_macro_f1: averaged_f1,
            pooled_er,
            pooled_macro_f1,
        }),
        framework: Some(framework.as_str().to_string()),
        conv_filters,
        learnable_params: total_params,
        deterministic,
    };
    std::fs::write(out_dir.join("metrics.json"), report.to_json()?)?;
    Ok(json!({
        "command": "eval-sed",
        "framework": framework.as_str(),
        "er": pooled_er,
        "macro_f1": pooled_macro_f1,
        "report": out_dir.join("metrics.json").display().to_string(),
    }))
}

/// Renders a metrics report into CSV tables and an optional SVG bar chart.
pub fn cmd_report(metrics_json: &Path, out_dir: &Path, plots: bool) -> Result<Value> {
    let report: MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(metrics_json)?)?;
    std::fs::create_dir_all(out_dir)?;
    let mut written: Vec<String> = Vec::new();

    if let Some(sep) = &report.separation {
        let mut csv = String::from("system,sdr_db,sdri_db,si_sdr_db,mixture_sdr_db,clips\n");
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            report.framework.as_deref().unwrap_or("separator"),
            sep.sdr,
            sep.sdri,
            sep.si_sdr,
            sep.mixture_sdr,
            sep.clips
        ));
        std::fs::write(out_dir.join("separation_table.csv"), csv)?;
        written.push("separation_table.csv".into());
    }
    if let (Some(er), Some(f1)) = (report.er, report.macro_f1) {
        let mut csv = String::from("framework,conv_filters,params,er,macro_f1\n");
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            report.framework.as_deref().unwrap_or(""),
            report
                .conv_filters
                .map(|v| v.to_string())
                .unwrap_or_default(),
            report
                .learnable_params
                .map(|v| v.to_string())
                .unwrap_or_default(),
            er,
            f1
        ));
        std::fs::write(out_dir.join("sed_table.csv"), csv)?;
        written.push("sed_table.csv".into());
    }
    if !report.per_class.is_empty() {
        std::fs::write(out_dir.join("per_class.csv"), per_class_csv(&report))?;
        written.push("per_class.csv".into());
    }
    if !report.overlap.is_empty() {
        std::fs::write(out_dir.join("overlap_table.csv"), overlap_csv(&report.overlap))?;
        written.push("overlap_table.csv".into());
    }
    if plots && !report.per_class.is_empty() {
        std::fs::write(out_dir.join("f1_per_class.svg"), f1_bars_svg(&report))?;
        written.push("f1_per_class.svg".into());
    }
    Ok(json!({
        "command": "report",
        "out_dir": out_dir.display().to_string(),
        "written": written,
    }))
}

/// Deterministic SVG bar chart of per-class F1.
fn f1_bars_svg(report: &MetricsReport) -> String {
    let bar_w = 46.0;
    let gap = 14.0;
    let height = 240.0;
    let base = 200.0;
    let n = report.per_class.len();
    let width = 40.0 + n as f64 * (bar_w + gap);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\">\n"
    );
    svg.push_str(&format!(
        "<line x1=\"30\" y1=\"{base}\" x2=\"{width}\" y2=\"{base}\" stroke=\"black\"/>\n"
    ));
    for (i, row) in report.per_class.iter().enumerate() {
        let f1 = row.f1.unwrap_or(0.0);
        let h = f1 * 160.0;
        let x = 40.0 + i as f64 * (bar_w + gap);
        let y = base - h;
        svg.push_str(&format!(
            "<rect x=\"{x}\" y=\"{y}\" width=\"{bar_w}\" height=\"{h}\" fill=\"#4878a8\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            x + bar_w / 2.0,
            base + 12.0,
            row.label
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{:.1}%</text>\n",
            x + bar_w / 2.0,
            y - 4.0,
            f1 * 100.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes a failure marker so partially written artifact directories are
/// recognizable.
pub fn mark_failed(out_dir: &Path, err: &Error) {
    if out_dir.exists() {
        let _ = std::fs::write(
            out_dir.join("_FAILED"),
            format!("{}: {err}\n", err.kind()),
        );
    }
}

/// Convenience bundle used by tests: separator references for detector
/// training.
pub fn frozen_from_checkpoint(path: &Path) -> Result<FrozenSeparator> {
    let (model, encoder) = checkpoint::load_separation(path)?;
    Ok(FrozenSeparator {
        model: Arc::new(model),
        encoder: Arc::new(encoder),
    })
}

/// Fold-id ordering helper shared by tests.
pub fn fold_assignment_for(dataset: &SedDataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    let ids: Vec<String> = dataset
        .clips
        .iter()
        .map(|c| clip_stem(&c.audio_path))
        .collect();
    kfold_split(&ids, k, seed)
}

/// Re-exported for the CLI's error JSON.
pub fn error_json(err: &Error) -> Value {
    json!({ "error": err.kind(), "message": err.to_string() })
}
