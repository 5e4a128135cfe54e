//! Band-limited sinc resampling.

use super::Waveform;
use crate::Result;

/// Taps on each side of the interpolation kernel.
const HALF_TAPS: usize = 32;

/// Converts `w` to `target_rate` with a Hann-windowed sinc kernel. The
/// cutoff tracks the lower of the two Nyquist frequencies.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if w.sample_rate() == target_rate {
        return Ok(w.clone());
    }
    let ratio = target_rate as f64 / w.sample_rate() as f64;
    let out_len = (w.len() as f64 * ratio).round() as usize;
    let cutoff = ratio.min(1.0);
    let x = w.samples();
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let center = j as f64 / ratio;
        let lo = (center - HALF_TAPS as f64).ceil().max(0.0) as usize;
        let hi = ((center + HALF_TAPS as f64).floor() as usize).min(w.len().saturating_sub(1));
        let mut acc = 0.0;
        for (i, &xi) in x.iter().enumerate().take(hi + 1).skip(lo) {
            let u = center - i as f64;
            let s = if u == 0.0 {
                1.0
            } else {
                let a = std::f64::consts::PI * u * cutoff;
                a.sin() / a
            };
            let win = 0.5 * (1.0 + (std::f64::consts::PI * u / HALF_TAPS as f64).cos());
            acc += xi * s * cutoff * win;
        }
        out.push(acc);
    }
    Waveform::new(out, target_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_survives_upsampling() {
        let sr = 16_000_u32;
        let freq = 440.0;
        let samples: Vec<f64> = (0..sr as usize)
            .map(|n| (std::f64::consts::TAU * freq * n as f64 / sr as f64).sin())
            .collect();
        let w = Waveform::new(samples, sr).unwrap();
        let up = resample(&w, 32_000).unwrap();
        assert_eq!(up.sample_rate(), 32_000);
        // Compare against the ideal sine away from the edges.
        let mut max_err = 0.0_f64;
        for n in 1000..up.len() - 1000 {
            let t = n as f64 / 32_000.0;
            let ideal = (std::f64::consts::TAU * freq * t).sin();
            max_err = max_err.max((up.samples()[n] - ideal).abs());
        }
        assert!(max_err < 0.01, "max interior error {max_err}");
    }

    #[test]
    fn downsampling_halves_the_length() {
        let w = Waveform::new(vec![0.25; 32_000], 32_000).unwrap();
        let down = resample(&w, 16_000).unwrap();
        assert_eq!(down.len(), 16_000);
    }
}
