//! Evaluation mathematics: separation quality (SDR, SDRI, SI-SDR),
//! segment-based detection metrics (micro error rate, optimal-threshold
//! macro-F1) and per-class overlap statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::sed::SoftLabelMatrix;
use crate::{Error, Result};

/// Caps for degenerate ratios: identical signals clip to +100 dB, vanishing
/// targets to -100 dB.
pub const DB_CAP: f64 = 100.0;

fn capped_db(num: f64, den: f64) -> f64 {
    if num <= 0.0 {
        return -DB_CAP;
    }
    if den <= 0.0 {
        return DB_CAP;
    }
    (10.0 * (num / den).log10()).clamp(-DB_CAP, DB_CAP)
}

fn check_pair(est: &Waveform, reference: &Waveform) -> Result<()> {
    if est.len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, reference {}",
            est.len(),
            reference.len()
        )));
    }
    if reference.energy() == 0.0 {
        return Err(Error::InvalidInput("reference signal has zero energy".into()));
    }
    Ok(())
}

/// Signal-to-distortion ratio `10 log10(||s||^2 / ||s - s_hat||^2)` in dB.
pub fn sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    check_pair(est, reference)?;
    let num = reference.energy();
    let den: f64 = est
        .samples()
        .iter()
        .zip(reference.samples())
        .map(|(e, r)| (r - e) * (r - e))
        .sum();
    Ok(capped_db(num, den))
}

/// Scale-invariant SDR: project the estimate onto the reference and compare
/// the projection with the residual.
pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    check_pair(est, reference)?;
    let dot: f64 = est
        .samples()
        .iter()
        .zip(reference.samples())
        .map(|(e, r)| e * r)
        .sum();
    let alpha = dot / reference.energy();
    let mut target_energy = 0.0;
    let mut noise_energy = 0.0;
    for (e, r) in est.samples().iter().zip(reference.samples()) {
        let t = alpha * r;
        target_energy += t * t;
        let n = e - t;
        noise_energy += n * n;
    }
    Ok(capped_db(target_energy, noise_energy))
}

/// SDR improvement over the unprocessed mixture.
pub fn sdri(est: &Waveform, reference: &Waveform, mixture: &Waveform) -> Result<f64> {
    Ok(sdr(est, reference)? - sdr(mixture, reference)?)
}

/// Per-class decision thresholds, aligned with a vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdVector(pub Vec<f64>);

impl ThresholdVector {
    pub fn uniform(k: usize, value: f64) -> Self {
        Self(vec![value; k])
    }
}

/// Segment-level tallies. Substitutions pair up same-segment deletions and
/// insertions: per segment S = min(sum FN, sum FP), D = sum FN - S,
/// I = sum FP - S, N = number of active reference classes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    /// Reference-positive segments per class.
    pub ref_pos: Vec<u64>,
    pub substitutions: u64,
    pub deletions: u64,
    pub insertions: u64,
    pub actives: u64,
}

impl SegmentCounts {
    pub fn zeros(k: usize) -> Self {
        Self {
            tp: vec![0; k],
            fp: vec![0; k],
            fn_: vec![0; k],
            ref_pos: vec![0; k],
            ..Default::default()
        }
    }

    pub fn merge(&mut self, other: &SegmentCounts) {
        for (a, b) in self.tp.iter_mut().zip(&other.tp) {
            *a += b;
        }
        for (a, b) in self.fp.iter_mut().zip(&other.fp) {
            *a += b;
        }
        for (a, b) in self.fn_.iter_mut().zip(&other.fn_) {
            *a += b;
        }
        for (a, b) in self.ref_pos.iter_mut().zip(&other.ref_pos) {
            *a += b;
        }
        self.substitutions += other.substitutions;
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.actives += other.actives;
    }

    pub fn f1(&self, class: usize) -> f64 {
        let tp = self.tp[class] as f64;
        let denom = 2.0 * tp + self.fp[class] as f64 + self.fn_[class] as f64;
        if denom == 0.0 {
            0.0
        } else {
            2.0 * tp / denom
        }
    }
}

/// Frames per evaluation segment for a given frame hop.
pub fn frames_per_segment(segment_seconds: f64, frame_hop_seconds: f64) -> Result<usize> {
    if segment_seconds < frame_hop_seconds {
        return Err(Error::Config(format!(
            "segment length {segment_seconds}s below frame hop {frame_hop_seconds}s"
        )));
    }
    Ok(((segment_seconds / frame_hop_seconds).round() as usize).max(1))
}

/// Binarizes scores and references frame-wise (active iff value >= threshold)
/// and tallies segment-level counts. A class is active in a segment iff any
/// of its frames is active; the trailing partial segment counts.
pub fn segment_counts(
    pred_scores: &SoftLabelMatrix,
    reference: &SoftLabelMatrix,
    thresholds: &ThresholdVector,
    segment_seconds: f64,
    label_binarize_threshold: f64,
) -> Result<SegmentCounts> {
    if pred_scores.values.dim() != reference.values.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs reference {:?}",
            pred_scores.values.dim(),
            reference.values.dim()
        )));
    }
    if pred_scores.labels != reference.labels {
        return Err(Error::Shape("vocabulary mismatch".into()));
    }
    let k = pred_scores.classes();
    if thresholds.0.len() != k {
        return Err(Error::Shape(format!(
            "{} thresholds for {k} classes",
            thresholds.0.len()
        )));
    }
    let seg_frames = frames_per_segment(segment_seconds, pred_scores.frame_hop_seconds)?;
    let t = pred_scores.frames();

    let mut counts = SegmentCounts::zeros(k);
    let mut start = 0;
    while start < t {
        let end = (start + seg_frames).min(t);
        let mut seg_fn = 0_u64;
        let mut seg_fp = 0_u64;
        for class in 0..k {
            let mut ref_active = false;
            let mut pred_active = false;
            for frame in start..end {
                ref_active |= reference.values[[frame, class]] >= label_binarize_threshold;
                pred_active |= pred_scores.values[[frame, class]] >= thresholds.0[class];
            }
            match (ref_active, pred_active) {
                (true, true) => counts.tp[class] += 1,
                (true, false) => {
                    counts.fn_[class] += 1;
                    seg_fn += 1;
                }
                (false, true) => {
                    counts.fp[class] += 1;
                    seg_fp += 1;
                }
                (false, false) => {}
            }
            if ref_active {
                counts.ref_pos[class] += 1;
                counts.actives += 1;
            }
        }
        let s = seg_fn.min(seg_fp);
        counts.substitutions += s;
        counts.deletions += seg_fn - s;
        counts.insertions += seg_fp - s;
        start = end;
    }
    Ok(counts)
}

/// Micro-average error rate `(S + D + I) / N`.
pub fn error_rate(counts: &SegmentCounts) -> Result<f64> {
    if counts.actives == 0 {
        return Err(Error::UndefinedMetric(
            "error rate needs at least one active reference segment".into(),
        ));
    }
    Ok((counts.substitutions + counts.deletions + counts.insertions) as f64
        / counts.actives as f64)
}

/// Result of the per-class threshold sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimalF1 {
    pub thresholds: ThresholdVector,
    /// Per-class best F1; `None` for classes with no positive reference
    /// segment (excluded from the macro mean).
    pub per_class_f1: Vec<Option<f64>>,
    pub macro_f1: f64,
}

/// Sweeps class-specific thresholds over candidate values (midpoints of
/// consecutive sorted unique scores, plus 0 and 1) and keeps, per class, the
/// largest threshold attaining the maximal segment-based F1. Classes without
/// any positive reference segment are excluded from the macro mean.
pub fn optimal_threshold_f1(
    scores: &[SoftLabelMatrix],
    references: &[SoftLabelMatrix],
    segment_seconds: f64,
    label_binarize_threshold: f64,
) -> Result<OptimalF1> {
    if scores.len() != references.len() || scores.is_empty() {
        return Err(Error::InvalidInput(
            "need matching, non-empty score/reference sets".into(),
        ));
    }
    let k = scores[0].classes();
    let mut thresholds = vec![1.0; k];
    let mut per_class = vec![None; k];

    for class in 0..k {
        // Candidate thresholds from this class's scores across all clips.
        let mut unique: Vec<f64> = scores
            .iter()
            .flat_map(|m| m.values.column(class).to_vec())
            .collect();
        unique.sort_by(f64::total_cmp);
        unique.dedup();
        let mut candidates = Vec::with_capacity(unique.len() + 1);
        candidates.push(0.0);
        for pair in unique.windows(2) {
            candidates.push((pair[0] + pair[1]) / 2.0);
        }
        candidates.push(1.0);
        candidates.sort_by(f64::total_cmp);
        candidates.dedup();

        let mut best: Option<(f64, f64)> = None; // (f1, threshold)
        let mut any_positive = false;
        for &cand in &candidates {
            let mut tv = ThresholdVector::uniform(k, 2.0); // others: never active
            tv.0[class] = cand;
            let mut total = SegmentCounts::zeros(k);
            for (s, r) in scores.iter().zip(references) {
                let c = segment_counts(s, r, &tv, segment_seconds, label_binarize_threshold)?;
                total.merge(&c);
            }
            if total.ref_pos[class] == 0 {
                break; // no positives anywhere: skip the class entirely
            }
            any_positive = true;
            let f1 = total.f1(class);
            // Strict `>` on F1 plus ascending candidates keeps the largest
            // maximizing threshold (fewest false positives).
            match best {
                Some((bf, _)) if f1 < bf => {}
                Some((bf, bt)) if f1 == bf => best = Some((bf, bt.max(cand))),
                _ => best = Some((f1, cand)),
            }
        }
        if any_positive {
            let (f1, th) = best.expect("at least one candidate evaluated");
            per_class[class] = Some(f1);
            thresholds[class] = th;
        }
    }

    let active: Vec<f64> = per_class.iter().flatten().copied().collect();
    if active.is_empty() {
        return Err(Error::UndefinedMetric(
            "no class has a positive reference segment".into(),
        ));
    }
    Ok(OptimalF1 {
        thresholds: ThresholdVector(thresholds),
        macro_f1: active.iter().sum::<f64>() / active.len() as f64,
        per_class_f1: per_class,
    })
}

/// One row of the co-occurrence table: for a class's active frames, the
/// share (percent) with 0, 1, 2 and 3-or-more other classes active, plus the
/// class's total active duration in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapRow {
    pub label: String,
    pub percent: [f64; 4],
    pub duration_seconds: f64,
    /// True when the class never activates; its percentages are all zero.
    pub never_active: bool,
}

/// Frame-wise co-occurrence statistics over a binarized reference set.
pub fn overlap_statistics(
    references: &[SoftLabelMatrix],
    binarize_threshold: f64,
) -> Result<Vec<OverlapRow>> {
    let first = references
        .first()
        .ok_or_else(|| Error::InvalidInput("empty reference set".into()))?;
    let k = first.classes();
    let hop = first.frame_hop_seconds;
    let mut buckets = vec![[0u64; 4]; k];
    let mut active_frames = vec![0u64; k];
    for m in references {
        if m.classes() != k {
            return Err(Error::Shape("class count varies across clips".into()));
        }
        for frame in 0..m.frames() {
            let active: Vec<bool> = (0..k)
                .map(|c| m.values[[frame, c]] >= binarize_threshold)
                .collect();
            let total_active = active.iter().filter(|&&a| a).count();
            for (c, &is_active) in active.iter().enumerate() {
                if is_active {
                    active_frames[c] += 1;
                    let others = (total_active - 1).min(3);
                    buckets[c][others] += 1;
                }
            }
        }
    }
    Ok((0..k)
        .map(|c| {
            let n = active_frames[c];
            let percent = if n == 0 {
                [0.0; 4]
            } else {
                std::array::from_fn(|b| 100.0 * buckets[c][b] as f64 / n as f64)
            };
            OverlapRow {
                label: first.labels[c].clone(),
                percent,
                duration_seconds: n as f64 * hop,
                never_active: n == 0,
            }
        })
        .collect())
}

/// Per-clip separation metrics row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipSeparation {
    pub clip: String,
    pub class: String,
    pub sdr: f64,
    pub sdri: f64,
    pub si_sdr: f64,
    /// SDR of the raw mixture against the same reference.
    pub mixture_sdr: f64,
}

/// Mean separation metrics over clips.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeparationSummary {
    pub clips: usize,
    pub sdr: f64,
    pub sdri: f64,
    pub si_sdr: f64,
    pub mixture_sdr: f64,
}

impl SeparationSummary {
    pub fn from_clips(rows: &[ClipSeparation]) -> Option<Self> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some(Self {
            clips: rows.len(),
            sdr: rows.iter().map(|r| r.sdr).sum::<f64>() / n,
            sdri: rows.iter().map(|r| r.sdri).sum::<f64>() / n,
            si_sdr: rows.iter().map(|r| r.si_sdr).sum::<f64>() / n,
            mixture_sdr: rows.iter().map(|r| r.mixture_sdr).sum::<f64>() / n,
        })
    }
}

/// Per-class detection result in a report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassReport {
    pub label: String,
    pub f1: Option<f64>,
    pub threshold: f64,
}

/// Aggregate report covering whichever stages were evaluated.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub separation: Option<SeparationSummary>,
    pub er: Option<f64>,
    pub macro_f1: Option<f64>,
    pub per_class: Vec<ClassReport>,
    pub overlap: Vec<OverlapRow>,
    /// Where the class thresholds were fitted: "eval" or "validation".
    pub threshold_fit: String,
    pub config_hash: String,
    pub separator_checksum: Option<String>,
    /// Per-fold metrics plus their mean and the pooled-score metric, when a
    /// cross-validation run produced several folds.
    pub folds: Option<FoldReport>,
    pub framework: Option<String>,
    pub conv_filters: Option<usize>,
    pub learnable_params: Option<usize>,
    pub deterministic: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub er: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub per_fold: Vec<FoldMetrics>,
    /// Mean of the per-fold metrics.
    pub averaged_er: f64,
    pub averaged_macro_f1: f64,
    /// Metrics over all folds' scores pooled into one evaluation set.
    pub pooled_er: f64,
    pub pooled_macro_f1: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Renders per-class rows as CSV with a stable column order.
pub fn per_class_csv(report: &MetricsReport) -> String {
    let mut out = String::from("label,f1,threshold\n");
    for row in &report.per_class {
        let f1 = row
            .f1
            .map(|v| format!("{v}"))
            .unwrap_or_else(|| "".to_string());
        out.push_str(&format!("{},{},{}\n", row.label, f1, row.threshold));
    }
    out
}

/// Renders the overlap table as CSV mirroring the co-occurrence layout.
pub fn overlap_csv(rows: &[OverlapRow]) -> String {
    let mut out = String::from("label,pct_0,pct_1,pct_2,pct_3plus,duration_min\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.label,
            r.percent[0],
            r.percent[1],
            r.percent[2],
            r.percent[3],
            r.duration_seconds / 60.0
        ));
    }
    out
}

/// Thresholds fitted per fold on validation scores, keyed by fold index.
pub type FoldThresholds = BTreeMap<usize, ThresholdVector>;
