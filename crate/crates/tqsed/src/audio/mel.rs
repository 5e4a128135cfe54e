//! Log-mel feature extraction for the detection branches.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::stft::{stft, StftParams};
use super::Waveform;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogMelParams {
    pub n_mels: usize,
    pub window_seconds: f64,
    pub hop_seconds: f64,
    pub f_min: f64,
    /// Upper band edge; `None` means Nyquist.
    pub f_max: Option<f64>,
    /// Added to mel power before the natural log.
    pub log_floor: f64,
}

impl Default for LogMelParams {
    fn default() -> Self {
        Self {
            n_mels: 64,
            window_seconds: 0.4,
            hop_seconds: 0.2,
            f_min: 0.0,
            f_max: None,
            log_floor: 1e-10,
        }
    }
}

impl LogMelParams {
    fn validate(&self, sample_rate: u32) -> Result<f64> {
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be positive".into()));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let f_max = self.f_max.unwrap_or(nyquist);
        if !(self.f_min >= 0.0 && self.f_min < f_max && f_max <= nyquist) {
            return Err(Error::Config(format!(
                "need 0 <= f_min < f_max <= {nyquist}, got [{}, {f_max}]",
                self.f_min
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        Ok(f_max)
    }

    pub fn stft_params(&self) -> StftParams {
        StftParams::new(self.window_seconds, self.hop_seconds)
    }
}

/// T x n_mels matrix of log mel-band powers.
#[derive(Debug, Clone)]
pub struct LogMelFeature {
    pub values: Array2<f64>,
    pub params: LogMelParams,
}

impl LogMelFeature {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10.0_f64.powf(m / 2595.0) - 1.0)
}

/// Triangular mel filterbank, peak 1, over `bins` FFT bins.
pub fn mel_filterbank(
    n_mels: usize,
    bins: usize,
    fft: usize,
    sample_rate: u32,
    f_min: f64,
    f_max: f64,
) -> Array2<f64> {
    let lo = hz_to_mel(f_min);
    let hi = hz_to_mel(f_max);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((n_mels, bins));
    for m in 0..n_mels {
        let (a, b, c) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / fft as f64;
            let v = if f >= a && f <= b && b > a {
                (f - a) / (b - a)
            } else if f > b && f <= c && c > b {
                (c - f) / (c - b)
            } else {
                0.0
            };
            fb[[m, k]] = v;
        }
    }
    fb
}

pub fn logmel(w: &Waveform, params: &LogMelParams) -> Result<LogMelFeature> {
    let f_max = params.validate(w.sample_rate())?;
    let spec = stft(w, &params.stft_params())?;
    let r = params.stft_params().resolve(w.sample_rate())?;
    let fb = mel_filterbank(
        params.n_mels,
        spec.bins(),
        r.fft,
        w.sample_rate(),
        params.f_min,
        f_max,
    );
    let power = spec.values.mapv(|c| c.norm_sqr());
    // (T x F) . (F x M)
    let mel = power.dot(&fb.t());
    let values = mel.mapv(|p| (p + params.log_floor).ln());
    Ok(LogMelFeature {
        values,
        params: *params,
    })
}
