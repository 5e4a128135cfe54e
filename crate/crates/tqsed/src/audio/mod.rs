//! Deterministic time-frequency feature extraction shared by the separator
//! (complex STFT) and the detectors (log-mel).

mod mel;
mod resample;
mod stft;
pub mod wav;

pub use mel::{logmel, mel_filterbank, LogMelFeature, LogMelParams};
pub use resample::resample;
pub use stft::{
    istft, ola_weights, stft, ComplexSpectrogram, ResolvedStft, StftParams, WindowKind,
};

use crate::{Error, Result};

/// Mono sample sequence plus its sample rate. Samples are dimensionless
/// amplitudes, nominally in [-1, 1]; finiteness is enforced at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// All-zero waveform of `len` samples.
    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Sum of squared samples.
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()))
    }

    /// Scales every sample by `gain` in place.
    pub fn scale(&mut self, gain: f64) {
        for s in &mut self.samples {
            *s *= gain;
        }
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }
}
