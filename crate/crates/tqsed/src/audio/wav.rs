//! WAV reading/writing. Mono only; 16-bit PCM and float32 are accepted on
//! read, float32 is written.

use std::path::Path;

use super::Waveform;
use crate::{Error, Result};

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::InvalidInput(format!(
            "{}: expected mono, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::InvalidInput(format!(
                "{}: unsupported format {fmt:?}/{bits}-bit (want float32 or int16)",
                path.display()
            )))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Reads a WAV and enforces the model sample rate, optionally resampling.
pub fn read_wav_at_rate(path: &Path, sample_rate: u32, allow_resample: bool) -> Result<Waveform> {
    let w = read_wav(path)?;
    if w.sample_rate() == sample_rate {
        return Ok(w);
    }
    if allow_resample {
        super::resample(&w, sample_rate)
    } else {
        Err(Error::InvalidInput(format!(
            "{}: sample rate {} does not match configured {} (pass --resample to convert)",
            path.display(),
            w.sample_rate(),
            sample_rate
        )))
    }
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in w.samples() {
        writer.write_sample(s as f32)?;
    }
    writer.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..1000).map(|i| ((i as f64) * 0.013).sin() * 0.5).collect();
        let w = Waveform::new(samples.clone(), 16_000).unwrap();
        write_wav(&path, &w).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 16_000);
        for (a, b) in samples.iter().zip(back.samples()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn pcm16_is_scaled_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        for v in [0_i16, 16384, -32768, 32767] {
            writer.write_sample(v).unwrap();
        }
        writer.finalize().unwrap();
        let w = read_wav(&path).unwrap();
        assert_eq!(w.samples()[0], 0.0);
        assert!((w.samples()[1] - 0.5).abs() < 1e-9);
        assert_eq!(w.samples()[2], -1.0);
    }

    #[test]
    fn stereo_is_rejected_not_downmixed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut writer = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..10 {
            writer.write_sample(0.1_f32).unwrap();
            writer.write_sample(-0.1_f32).unwrap();
        }
        writer.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rate_mismatch_needs_the_resample_flag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.wav");
        let w = Waveform::new(vec![0.1; 32_000], 32_000).unwrap();
        write_wav(&path, &w).unwrap();
        assert!(read_wav_at_rate(&path, 16_000, false).is_err());
        let resampled = read_wav_at_rate(&path, 16_000, true).unwrap();
        assert_eq!(resampled.sample_rate(), 16_000);
        assert!((resampled.len() as i64 - 16_000).abs() <= 1);
    }
}
