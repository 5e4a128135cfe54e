//! Short-time Fourier transform and its inverse.
//!
//! Framing uses center padding (reflect) so T = floor(len/hop) + 1 regardless
//! of window size. Frames are windowed, zero-extended to `fft_size` and
//! transformed with a real FFT; the inverse overlap-adds windowed frames and
//! normalizes by the accumulated squared window, which reconstructs the
//! input exactly whenever adjacent windows overlap by at least half.

use ndarray::Array2;
use realfft::num_complex::Complex64;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    Hann,
}

impl WindowKind {
    fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            // Periodic Hann, the variant whose shifted squares sum to a
            // constant when hop divides len/2.
            WindowKind::Hann => (0..len)
                .map(|n| {
                    let x = std::f64::consts::TAU * n as f64 / len as f64;
                    0.5 * (1.0 - x.cos())
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StftParams {
    pub window_seconds: f64,
    pub hop_seconds: f64,
    #[serde(default)]
    pub window_kind: WindowKind,
    /// FFT length in samples; `None` picks the next power of two at or above
    /// the window length once the sample rate is known.
    #[serde(default)]
    pub fft_size: Option<usize>,
}

impl StftParams {
    pub fn new(window_seconds: f64, hop_seconds: f64) -> Self {
        Self {
            window_seconds,
            hop_seconds,
            window_kind: WindowKind::Hann,
            fft_size: None,
        }
    }

    /// Resolves second-based fields against a sample rate, validating the
    /// type invariants.
    pub fn resolve(&self, sample_rate: u32) -> Result<ResolvedStft> {
        if !(self.window_seconds > 0.0 && self.hop_seconds > 0.0) {
            return Err(Error::Config(
                "window and hop must be positive".into(),
            ));
        }
        if self.hop_seconds > self.window_seconds {
            return Err(Error::Config(format!(
                "hop ({}s) must not exceed window ({}s)",
                self.hop_seconds, self.window_seconds
            )));
        }
        let window = (self.window_seconds * sample_rate as f64).round() as usize;
        let hop = (self.hop_seconds * sample_rate as f64).round() as usize;
        if window == 0 || hop == 0 {
            return Err(Error::Config(
                "window/hop resolve to zero samples at this sample rate".into(),
            ));
        }
        let fft = self.fft_size.unwrap_or_else(|| window.next_power_of_two());
        if fft < window {
            return Err(Error::Config(format!(
                "fft_size {fft} smaller than window of {window} samples"
            )));
        }
        Ok(ResolvedStft {
            window,
            hop,
            fft,
            kind: self.window_kind,
        })
    }
}

/// Sample-domain STFT geometry for one sample rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedStft {
    pub window: usize,
    pub hop: usize,
    pub fft: usize,
    pub kind: WindowKind,
}

impl ResolvedStft {
    pub fn bins(&self) -> usize {
        self.fft / 2 + 1
    }

    pub fn frames_for(&self, source_length: usize) -> usize {
        source_length / self.hop + 1
    }

    /// Whether `istft(stft(x))` reconstructs x: the normalized overlap-add
    /// needs adjacent windows to overlap by at least half.
    pub fn supports_reconstruction(&self) -> bool {
        match self.kind {
            WindowKind::Hann => 2 * self.hop <= self.window,
        }
    }
}

/// T x F complex matrix plus the geometry needed to invert it.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub values: Array2<Complex64>,
    pub params: StftParams,
    pub sample_rate: u32,
    pub source_length: usize,
}

impl ComplexSpectrogram {
    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bins(&self) -> usize {
        self.values.ncols()
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.values.mapv(|c| c.norm())
    }
}

/// Reflect-pads by `pad` on both sides (no edge repetition).
fn reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * pad);
    for i in 0..pad {
        out.push(x[pad - i]);
    }
    out.extend_from_slice(x);
    for i in 0..pad {
        out.push(x[n - 2 - i]);
    }
    out
}

pub fn stft(w: &Waveform, params: &StftParams) -> Result<ComplexSpectrogram> {
    if w.is_empty() {
        return Err(Error::InvalidInput("empty waveform".into()));
    }
    let r = params.resolve(w.sample_rate())?;
    let pad = r.window / 2;
    if w.len() <= pad {
        return Err(Error::InvalidInput(format!(
            "waveform of {} samples too short for a {}-sample window",
            w.len(),
            r.window
        )));
    }
    let padded = reflect_pad(w.samples(), pad);
    let frames = r.frames_for(w.len());
    let bins = r.bins();

    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(r.fft);
    let window = r.kind.coefficients(r.window);
    let mut buf = fft.make_input_vec();
    let mut spectrum = fft.make_output_vec();

    let mut values = Array2::zeros((frames, bins));
    for t in 0..frames {
        let start = t * r.hop;
        buf[..r.window]
            .iter_mut()
            .zip(&padded[start..start + r.window])
            .zip(&window)
            .for_each(|((b, &x), &w)| *b = x * w);
        buf[r.window..].fill(0.0);
        fft.process(&mut buf, &mut spectrum)
            .expect("fft buffer sizes are planned");
        for (k, &c) in spectrum.iter().enumerate() {
            values[[t, k]] = c;
        }
    }
    Ok(ComplexSpectrogram {
        values,
        params: *params,
        sample_rate: w.sample_rate(),
        source_length: w.len(),
    })
}

/// Inverse STFT via window-weighted overlap-add. Output length equals the
/// spectrogram's `source_length` exactly.
pub fn istft(spec: &ComplexSpectrogram) -> Result<Waveform> {
    let r = spec.params.resolve(spec.sample_rate)?;
    if !r.supports_reconstruction() {
        return Err(Error::Config(format!(
            "hop of {} samples exceeds half the {}-sample window; \
             overlap-add cannot reconstruct",
            r.hop, r.window
        )));
    }
    let frames = spec.frames();
    let expected = r.frames_for(spec.source_length);
    if frames != expected || spec.bins() != r.bins() {
        return Err(Error::Shape(format!(
            "spectrogram is {}x{}, geometry wants {}x{}",
            frames,
            spec.bins(),
            expected,
            r.bins()
        )));
    }

    let pad = r.window / 2;
    let total = spec.source_length + 2 * pad;
    let window = r.kind.coefficients(r.window);

    let mut planner = RealFftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(r.fft);
    let mut spectrum = ifft.make_input_vec();
    let mut frame = ifft.make_output_vec();

    let mut num = vec![0.0_f64; total + r.window];
    let mut den = vec![0.0_f64; total + r.window];
    let scale = 1.0 / r.fft as f64;
    for t in 0..frames {
        for k in 0..r.bins() {
            spectrum[k] = spec.values[[t, k]];
        }
        // Real inverse requires purely real DC/Nyquist bins.
        spectrum[0].im = 0.0;
        if r.fft % 2 == 0 {
            spectrum[r.bins() - 1].im = 0.0;
        }
        ifft.process(&mut spectrum, &mut frame)
            .expect("ifft buffer sizes are planned");
        let start = t * r.hop;
        for n in 0..r.window {
            num[start + n] += window[n] * frame[n] * scale;
            den[start + n] += window[n] * window[n];
        }
    }

    let mut samples = Vec::with_capacity(spec.source_length);
    for m in 0..spec.source_length {
        let d = den[pad + m];
        samples.push(if d > 1e-12 { num[pad + m] / d } else { 0.0 });
    }
    Waveform::new(samples, spec.sample_rate)
}

/// Overlap-add normalization weights for each output sample, as used by
/// [`istft`]. Needed by training code to backpropagate through the inverse.
pub fn ola_weights(r: &ResolvedStft, source_length: usize) -> Vec<f64> {
    let pad = r.window / 2;
    let frames = r.frames_for(source_length);
    let window = r.kind.coefficients(r.window);
    let mut den = vec![0.0_f64; source_length + 2 * pad + r.window];
    for t in 0..frames {
        let start = t * r.hop;
        for n in 0..r.window {
            den[start + n] += window[n] * window[n];
        }
    }
    den[pad..pad + source_length].to_vec()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn params_16k() -> StftParams {
        StftParams::new(0.064, 0.01)
    }

    fn random_wave(rng: &mut ChaCha12Rng, len: usize) -> Waveform {
        let samples: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        Waveform::new(samples, 16_000).unwrap()
    }

    #[test]
    fn silence_gives_zero_matrix_of_expected_shape() {
        let w = Waveform::silence(16_000, 16_000);
        let s = stft(&w, &params_16k()).unwrap();
        assert_eq!(s.frames(), 101);
        assert_eq!(s.bins(), 1024 / 2 + 1);
        assert!(s.values.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn stft_is_linear_in_the_input() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let w = random_wave(&mut rng, 8_000);
        let mut w2 = w.clone();
        w2.scale(2.0);
        let a = stft(&w, &params_16k()).unwrap();
        let b = stft(&w2, &params_16k()).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert!((y - x * 2.0).norm() < 1e-9);
        }
    }

    #[test]
    fn sine_peak_lands_in_the_right_bin() {
        // Oracle: brute-force DFT of one windowed frame, computed without
        // any FFT machinery.
        let sr = 16_000_u32;
        let freq = 440.0;
        let samples: Vec<f64> = (0..sr as usize)
            .map(|n| (std::f64::consts::TAU * freq * n as f64 / sr as f64).sin())
            .collect();
        let w = Waveform::new(samples.clone(), sr).unwrap();
        let p = params_16k();
        let r = p.resolve(sr).unwrap();

        let window = WindowKind::Hann.coefficients(r.window);
        // Frame centered mid-signal (no padding involvement).
        let center = 8_000_usize;
        let start = center - r.window / 2;
        let mut brute = vec![0.0_f64; r.bins()];
        for (k, mag) in brute.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for n in 0..r.fft {
                let x = if n < r.window {
                    samples[start + n] * window[n]
                } else {
                    0.0
                };
                let ang = -std::f64::consts::TAU * k as f64 * n as f64 / r.fft as f64;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            *mag = (re * re + im * im).sqrt();
        }
        let brute_argmax = brute
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;

        let s = stft(&w, &p).unwrap();
        let t = center / r.hop;
        let row = s.values.row(t);
        let fft_argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .unwrap()
            .0;

        let expected = freq * r.fft as f64 / sr as f64;
        assert_eq!(fft_argmax, brute_argmax);
        assert!((fft_argmax as f64 - expected).abs() <= 1.0);
    }

    #[test]
    fn round_trip_reconstructs_within_1e6() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..20 {
            let len = rng.random_range(8_000..160_000);
            let w = random_wave(&mut rng, len);
            let s = stft(&w, &params_16k()).unwrap();
            let back = istft(&s).unwrap();
            assert_eq!(back.len(), w.len());
            let max_err = w
                .samples()
                .iter()
                .zip(back.samples())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max);
            assert!(max_err < 1e-6, "round trip error {max_err}");
        }
    }

    #[test]
    fn zero_spectrogram_inverts_to_silence_of_source_length() {
        let w = Waveform::silence(12_345, 16_000);
        let s = stft(&w, &params_16k()).unwrap();
        let back = istft(&s).unwrap();
        assert_eq!(back.len(), 12_345);
        assert!(back.samples().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn istft_rejects_hop_larger_than_half_window() {
        let w = Waveform::silence(16_000, 16_000);
        let p = StftParams::new(0.064, 0.05);
        let s = stft(&w, &p).unwrap();
        assert!(matches!(istft(&s), Err(Error::Config(_))));
    }

    #[test]
    fn empty_and_nonfinite_inputs_are_rejected() {
        let empty = Waveform::silence(0, 16_000);
        assert!(matches!(
            stft(&empty, &params_16k()),
            Err(Error::InvalidInput(_))
        ));
        assert!(Waveform::new(vec![0.0, f64::NAN], 16_000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn spectrogram_energy_matches_windowed_signal_energy() {
        // Parseval per frame: sum w^2 x^2 == (1/fft) * sum c_k |S_k|^2 with
        // c_k = 2 except DC and Nyquist.
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let w = random_wave(&mut rng, 16_000);
        let p = params_16k();
        let r = p.resolve(16_000).unwrap();
        let s = stft(&w, &p).unwrap();

        let window = WindowKind::Hann.coefficients(r.window);
        let padded = reflect_pad(w.samples(), r.window / 2);
        let mut time_energy = 0.0;
        for t in 0..s.frames() {
            let start = t * r.hop;
            for n in 0..r.window {
                let v = padded[start + n] * window[n];
                time_energy += v * v;
            }
        }
        let mut freq_energy = 0.0;
        for t in 0..s.frames() {
            for k in 0..s.bins() {
                let c = if k == 0 || k == s.bins() - 1 { 1.0 } else { 2.0 };
                freq_energy += c * s.values[[t, k]].norm_sqr();
            }
        }
        freq_energy /= r.fft as f64;
        let rel = (time_energy - freq_energy).abs() / time_energy;
        assert!(rel < 0.01, "relative energy mismatch {rel}");
    }

    #[test]
    fn shape_determinism_across_runs() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let w = random_wave(&mut rng, 20_000);
        let a = stft(&w, &params_16k()).unwrap();
        let b = stft(&w, &params_16k()).unwrap();
        assert_eq!(a.values, b.values);
    }
}
