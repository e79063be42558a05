//! Mono 16 kHz WAV input/output (16-bit integer or 32-bit float PCM).

use std::path::Path;

use super::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Int16,
    Float32,
}

fn hound_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(0, format!("{}: {other}", path.display())),
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| hound_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(
            22,
            format!("{}: expected mono, found {} channels", path.display(), spec.channels),
        ));
    }
    if spec.sample_rate != DEFAULT_SAMPLE_RATE {
        return Err(Error::format(
            24,
            format!(
                "{}: sample rate {} Hz is not supported (expected {DEFAULT_SAMPLE_RATE})",
                path.display(),
                spec.sample_rate
            ),
        ));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| hound_err(path, e))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| hound_err(path, e))?,
        (fmt, bits) => {
            return Err(Error::format(
                34,
                format!("{}: unsupported sample format {fmt:?}/{bits}", path.display()),
            ))
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform, format: WavFormat) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: match format {
            WavFormat::Int16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Int16 => hound::SampleFormat::Int,
            WavFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| hound_err(path, e))?;
    for &s in w.samples() {
        match format {
            WavFormat::Int16 => {
                let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
                writer.write_sample(v)
            }
            WavFormat::Float32 => writer.write_sample(s),
        }
        .map_err(|e| hound_err(path, e))?;
    }
    writer.finalize().map_err(|e| hound_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.25, -0.5, 0.125, 1e-3], 16000).unwrap();
        write_wav(&p, &w, WavFormat::Float32).unwrap();
        assert_eq!(read_wav(&p).unwrap(), w);
    }

    #[test]
    fn int16_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.25, -0.5, 0.3333], 16000).unwrap();
        write_wav(&p, &w, WavFormat::Int16).unwrap();
        let r = read_wav(&p).unwrap();
        for (a, b) in w.samples().iter().zip(r.samples()) {
            assert!((a - b).abs() < 1.0 / 16000.0);
        }
    }

    #[test]
    fn other_rates_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let w = Waveform::new(vec![0.0; 10], 44100).unwrap();
        write_wav(&p, &w, WavFormat::Float32).unwrap();
        assert!(matches!(read_wav(&p), Err(Error::Format { .. })));
    }
}
