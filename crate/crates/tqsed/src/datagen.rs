//! Dataset ingestion and a seeded synthetic polyphonic generator.
//!
//! Generated layout under the output directory:
//!
//! ```text
//! audio/clip_00000.wav          mixtures
//! stems/<class>/clip_00000.wav  per-event ground-truth tracks
//! stems/background/...          broadband noise floor (when enabled)
//! labels/clip_00000.csv         frame-level soft labels, header = classes
//! manifest_lass.jsonl           stems with class-name captions
//! manifest_sed.jsonl            mixtures with label files
//! vocabulary.json               class order
//! ```
//!
//! Mixtures are exactly the sum of the stems on disk: stems are quantized
//! to the 32-bit float grid before summation, so only the final mixture
//! write rounds (half an ulp, well under the 1e-7 additivity budget).

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::{wav, Waveform};
use crate::sed::SoftLabelMatrix;
use crate::{Error, Result};

pub const BACKGROUND_CAPTION: &str = "background";

/// Spectral prototype for one event class. Bands are chosen disjoint so the
/// separation task stays learnable at desk scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prototype {
    Tone { freq_hz: f64 },
    NoiseBand { low_hz: f64, high_hz: f64 },
    Chirp { start_hz: f64, end_hz: f64 },
}

impl Prototype {
    /// Nominal occupied band, for the disjointness check.
    pub fn band(&self) -> (f64, f64) {
        match *self {
            Prototype::Tone { freq_hz } => (freq_hz - 30.0, freq_hz + 30.0),
            Prototype::NoiseBand { low_hz, high_hz } => (low_hz, high_hz),
            Prototype::Chirp { start_hz, end_hz } => {
                (start_hz.min(end_hz), start_hz.max(end_hz))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundNoise {
    /// Per-clip noise level range in dBFS (peak).
    pub level_db: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub vocabulary: Vec<String>,
    pub prototypes: Vec<Prototype>,
    pub clip_seconds: f64,
    /// Inclusive range for the per-clip event count.
    pub events_per_clip: (usize, usize),
    /// Probability that a new event is placed overlapping an earlier one.
    pub overlap_bias: f64,
    /// Per-event duration range in seconds.
    pub event_seconds: (f64, f64),
    /// Per-event peak level range in dBFS.
    pub event_level_db: (f64, f64),
    pub background: Option<BackgroundNoise>,
    /// Frame grid for the soft labels (matches the detector features).
    pub label_hop_seconds: f64,
    pub label_window_seconds: f64,
    /// Frame RMS that maps to a soft label of 1.0.
    pub label_ref_rms: f64,
    pub seed: u64,
    pub sample_rate: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocabulary: vec![],
            prototypes: vec![],
            clip_seconds: 5.0,
            events_per_clip: (2, 5),
            overlap_bias: 0.5,
            event_seconds: (0.8, 2.0),
            event_level_db: (-18.0, -6.0),
            background: None,
            label_hop_seconds: 0.2,
            label_window_seconds: 0.4,
            label_ref_rms: 0.1,
            seed: 0,
            sample_rate: 16_000,
        }
    }
}

impl SynthConfig {
    /// Validates hard invariants; returns warnings for overlapping bands.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.vocabulary.is_empty() || self.vocabulary.len() != self.prototypes.len() {
            return Err(Error::Config(format!(
                "{} classes but {} prototypes",
                self.vocabulary.len(),
                self.prototypes.len()
            )));
        }
        if !(self.clip_seconds > 0.0) || self.sample_rate == 0 {
            return Err(Error::Config(
                "clip length and sample rate must be positive".into(),
            ));
        }
        if self.events_per_clip.0 > self.events_per_clip.1 {
            return Err(Error::Config("events_per_clip range is inverted".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_bias) {
            return Err(Error::Config("overlap_bias must lie in [0, 1]".into()));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        let mut warnings = Vec::new();
        for (i, p) in self.prototypes.iter().enumerate() {
            let (lo, hi) = p.band();
            if hi >= nyquist {
                return Err(Error::Config(format!(
                    "prototype for '{}' reaches {hi} Hz, above Nyquist {nyquist}",
                    self.vocabulary[i]
                )));
            }
            for (j, q) in self.prototypes.iter().enumerate().skip(i + 1) {
                let (lo2, hi2) = q.band();
                if lo.max(lo2) <= hi.min(hi2) {
                    warnings.push(format!(
                        "spectral bands of '{}' and '{}' overlap ([{lo}, {hi}] vs [{lo2}, {hi2}])",
                        self.vocabulary[i], self.vocabulary[j]
                    ));
                }
            }
        }
        Ok(warnings)
    }
}

/// Stems-with-captions manifest entry (one JSON object per line on disk).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionManifestEntry {
    pub audio_path: PathBuf,
    pub caption: String,
    pub duration_seconds: f64,
}

/// Mixture-with-labels manifest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SedManifestEntry {
    pub audio_path: PathBuf,
    pub label_path: PathBuf,
}

/// Everything `synth_generate` produced.
pub struct SynthOutput {
    pub out_dir: PathBuf,
    pub clips: usize,
    pub lass_manifest: PathBuf,
    pub sed_manifest: PathBuf,
    pub warnings: Vec<String>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

fn render_event(
    proto: &Prototype,
    len: usize,
    sample_rate: u32,
    rng: &mut ChaCha12Rng,
) -> Vec<f64> {
    let sr = sample_rate as f64;
    let mut out = match *proto {
        Prototype::Tone { freq_hz } => {
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (0..len)
                .map(|n| (std::f64::consts::TAU * freq_hz * n as f64 / sr + phase).sin())
                .collect::<Vec<f64>>()
        }
        Prototype::Chirp { start_hz, end_hz } => {
            let dur = len as f64 / sr;
            let slope = (end_hz - start_hz) / (2.0 * dur);
            (0..len)
                .map(|n| {
                    let t = n as f64 / sr;
                    (std::f64::consts::TAU * (start_hz * t + slope * t * t)).sin()
                })
                .collect()
        }
        Prototype::NoiseBand { low_hz, high_hz } => {
            let fft_len = len.next_power_of_two().max(16);
            let mut noise: Vec<f64> =
                (0..fft_len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut planner = RealFftPlanner::<f64>::new();
            let fwd = planner.plan_fft_forward(fft_len);
            let inv = planner.plan_fft_inverse(fft_len);
            let mut spec = fwd.make_output_vec();
            fwd.process(&mut noise, &mut spec).expect("planned sizes");
            for (k, c) in spec.iter_mut().enumerate() {
                let f = k as f64 * sr / fft_len as f64;
                if f < low_hz || f > high_hz {
                    *c = realfft::num_complex::Complex64::new(0.0, 0.0);
                }
            }
            let mut time = inv.make_output_vec();
            inv.process(&mut spec, &mut time).expect("planned sizes");
            let scale = 1.0 / fft_len as f64;
            time.iter().take(len).map(|v| v * scale).collect()
        }
    };
    // 10 ms raised-cosine fades against clicks.
    let fade = ((0.01 * sr) as usize).min(len / 2).max(1);
    for i in 0..fade {
        let w = 0.5 * (1.0 - (std::f64::consts::PI * i as f64 / fade as f64).cos());
        out[i] *= w;
        out[len - 1 - i] *= w;
    }
    let peak = out.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        for v in &mut out {
            *v /= peak;
        }
    }
    out
}

/// Soft labels from stem frame energy: frames whose RMS clears -60 dBFS get
/// min(1, rms / ref_rms), centered windows on the label frame grid.
fn labels_from_stems(stems: &[Vec<f64>], cfg: &SynthConfig) -> Array2<f64> {
    let n = (cfg.clip_seconds * cfg.sample_rate as f64).round() as usize;
    let hop = (cfg.label_hop_seconds * cfg.sample_rate as f64).round() as usize;
    let win = (cfg.label_window_seconds * cfg.sample_rate as f64).round() as usize;
    let t = n / hop + 1;
    let gate = 10f64.powf(-60.0 / 20.0);
    let mut labels = Array2::zeros((t, stems.len()));
    for (k, stem) in stems.iter().enumerate() {
        for ti in 0..t {
            let center = ti * hop;
            let lo = center.saturating_sub(win / 2);
            let hi = (center + win / 2).min(n);
            if hi <= lo {
                continue;
            }
            let sumsq: f64 = stem[lo..hi].iter().map(|v| v * v).sum();
            let rms = (sumsq / (hi - lo) as f64).sqrt();
            if rms > gate {
                labels[[ti, k]] = (rms / cfg.label_ref_rms).min(1.0);
            }
        }
    }
    labels
}

fn quantize_f32(x: &mut [f64]) {
    for v in x.iter_mut() {
        *v = *v as f32 as f64;
    }
}

/// Generates `n_clips` synthetic polyphonic clips with per-class stems,
/// frame-level soft labels and both manifests. Deterministic for a fixed
/// seed; each clip derives its own stream from the master seed.
pub fn synth_generate(cfg: &SynthConfig, n_clips: usize, out_dir: &Path) -> Result<SynthOutput> {
    let warnings = cfg.validate()?;
    let k = cfg.vocabulary.len();
    let sr = cfg.sample_rate;
    let n = (cfg.clip_seconds * sr as f64).round() as usize;

    std::fs::create_dir_all(out_dir.join("audio"))?;
    std::fs::create_dir_all(out_dir.join("labels"))?;
    for label in &cfg.vocabulary {
        std::fs::create_dir_all(out_dir.join("stems").join(label))?;
    }
    if cfg.background.is_some() {
        std::fs::create_dir_all(out_dir.join("stems").join(BACKGROUND_CAPTION))?;
    }

    let mut lass_lines: Vec<String> = Vec::new();
    let mut sed_lines: Vec<String> = Vec::new();

    for clip in 0..n_clips {
        let mut rng = ChaCha12Rng::seed_from_u64(splitmix64(cfg.seed ^ (clip as u64)));
        let clip_name = format!("clip_{clip:05}");
        let mut stems: Vec<Vec<f64>> = vec![vec![0.0; n]; k];
        let mut spans: Vec<(usize, usize)> = Vec::new();

        let n_events = rng.random_range(cfg.events_per_clip.0..=cfg.events_per_clip.1);
        for _ in 0..n_events {
            let class = rng.random_range(0..k);
            let dur_s = rng.random_range(cfg.event_seconds.0..=cfg.event_seconds.1);
            let dur = ((dur_s * sr as f64).round() as usize).clamp(2, n);
            let onset = if !spans.is_empty() && rng.random_range(0.0..1.0) < cfg.overlap_bias {
                // Land inside an existing event's span.
                let (s, e) = spans[rng.random_range(0..spans.len())];
                let hi = e.min(n.saturating_sub(dur));
                let lo = s.min(hi);
                rng.random_range(lo..=hi)
            } else {
                rng.random_range(0..=n - dur)
            };
            let level_db = rng.random_range(cfg.event_level_db.0..=cfg.event_level_db.1);
            let gain = 10f64.powf(level_db / 20.0);
            let rendered = render_event(&cfg.prototypes[class], dur, sr, &mut rng);
            for (i, &v) in rendered.iter().enumerate() {
                stems[class][onset + i] += gain * v;
            }
            spans.push((onset, onset + dur));
        }

        let mut background = cfg.background.as_ref().map(|b| {
            let level = rng.random_range(b.level_db.0..=b.level_db.1);
            let gain = 10f64.powf(level / 20.0);
            (0..n)
                .map(|_| gain * rng.random_range(-1.0..1.0))
                .collect::<Vec<f64>>()
        });

        // Clip guard: a shared gain keeps the mixture inside [-0.99, 0.99]
        // while preserving additivity.
        let mut peak = 0.0_f64;
        for i in 0..n {
            let mut s: f64 = stems.iter().map(|st| st[i]).sum();
            if let Some(bg) = &background {
                s += bg[i];
            }
            peak = peak.max(s.abs());
        }
        if peak > 0.99 {
            let g = 0.99 / peak;
            for stem in &mut stems {
                for v in stem.iter_mut() {
                    *v *= g;
                }
            }
            if let Some(bg) = &mut background {
                for v in bg.iter_mut() {
                    *v *= g;
                }
            }
        }

        for stem in &mut stems {
            quantize_f32(stem);
        }
        if let Some(bg) = &mut background {
            quantize_f32(bg);
        }

        let mut mixture = vec![0.0_f64; n];
        for stem in &stems {
            for (m, &v) in mixture.iter_mut().zip(stem) {
                *m += v;
            }
        }
        if let Some(bg) = &background {
            for (m, &v) in mixture.iter_mut().zip(bg) {
                *m += v;
            }
        }

        let mixture_rel = format!("audio/{clip_name}.wav");
        wav::write_wav(&out_dir.join(&mixture_rel), &Waveform::new(mixture, sr)?)?;

        for (class, stem) in stems.iter().enumerate() {
            if stem.iter().all(|&v| v == 0.0) {
                continue;
            }
            let rel = format!("stems/{}/{clip_name}.wav", cfg.vocabulary[class]);
            wav::write_wav(&out_dir.join(&rel), &Waveform::new(stem.clone(), sr)?)?;
            lass_lines.push(serde_json::to_string(&CaptionManifestEntry {
                audio_path: rel.into(),
                caption: cfg.vocabulary[class].clone(),
                duration_seconds: cfg.clip_seconds,
            })?);
        }
        if let Some(bg) = &background {
            let rel = format!("stems/{BACKGROUND_CAPTION}/{clip_name}.wav");
            wav::write_wav(&out_dir.join(&rel), &Waveform::new(bg.clone(), sr)?)?;
            lass_lines.push(serde_json::to_string(&CaptionManifestEntry {
                audio_path: rel.into(),
                caption: BACKGROUND_CAPTION.into(),
                duration_seconds: cfg.clip_seconds,
            })?);
        }

        let labels = labels_from_stems(&stems, cfg);
        let matrix =
            SoftLabelMatrix::new(labels, cfg.label_hop_seconds, cfg.vocabulary.clone())?;
        let label_rel = format!("labels/{clip_name}.csv");
        matrix.write_csv(&out_dir.join(&label_rel))?;
        sed_lines.push(serde_json::to_string(&SedManifestEntry {
            audio_path: mixture_rel.into(),
            label_path: label_rel.into(),
        })?);
    }

    let lass_manifest = out_dir.join("manifest_lass.jsonl");
    let sed_manifest = out_dir.join("manifest_sed.jsonl");
    if n_clips > 0 {
        write_lines(&lass_manifest, &lass_lines)?;
        write_lines(&sed_manifest, &sed_lines)?;
        std::fs::write(
            out_dir.join("vocabulary.json"),
            serde_json::to_string_pretty(&cfg.vocabulary)?,
        )?;
    }
    Ok(SynthOutput {
        out_dir: out_dir.to_path_buf(),
        clips: n_clips,
        lass_manifest,
        sed_manifest,
        warnings,
    })
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for line in lines {
        writeln!(f, "{line}")?;
    }
    f.flush()?;
    Ok(())
}

/// Loads a caption manifest (JSON lines), resolving paths against the
/// manifest's directory and checking the audio files exist.
pub fn load_caption_manifest(path: &Path) -> Result<Vec<CaptionManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut entry: CaptionManifestEntry =
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        if entry.caption.trim().is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "empty caption".into(),
            });
        }
        entry.audio_path = base.join(&entry.audio_path);
        if !entry.audio_path.exists() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("audio file {} does not exist", entry.audio_path.display()),
            });
        }
        out.push(entry);
    }
    Ok(out)
}

/// A loaded detection clip: mixture path plus its label matrix.
#[derive(Debug, Clone)]
pub struct SedClip {
    pub audio_path: PathBuf,
    pub labels: SoftLabelMatrix,
}

/// Loads a detection manifest, checking each label file against the clip's
/// frame grid (`floor(samples / hop) + 1`) and the vocabulary order.
pub fn load_sed_manifest(
    path: &Path,
    vocabulary: &[String],
    label_hop_seconds: f64,
) -> Result<Vec<SedClip>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: SedManifestEntry = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let audio_path = base.join(&entry.audio_path);
        let label_path = base.join(&entry.label_path);
        let labels = SoftLabelMatrix::read_csv(&label_path, label_hop_seconds)?;
        if labels.labels != vocabulary {
            return Err(Error::InvalidInput(format!(
                "{}: label columns {:?} do not match vocabulary {:?}",
                label_path.display(),
                labels.labels,
                vocabulary
            )));
        }
        let reader = hound::WavReader::open(&audio_path)?;
        let samples = reader.duration() as usize;
        let sr = reader.spec().sample_rate;
        let hop = (label_hop_seconds * sr as f64).round() as usize;
        let expected = samples / hop + 1;
        if labels.frames() != expected {
            return Err(Error::InvalidInput(format!(
                "{}: {} label frames but audio implies {expected}",
                label_path.display(),
                labels.frames()
            )));
        }
        out.push(SedClip { audio_path, labels });
    }
    Ok(out)
}
