//! Signal-processing primitives: waveforms, STFT/iSTFT, log-mel features,
//! integrated loudness and peak handling.

mod loudness;
mod mel;
mod stft;
pub mod wav;

pub use loudness::{measure_lufs, normalize_lufs, peak_clamp, peak_db, DEFAULT_PEAK_CEILING_DB};
pub use mel::{log_mel, mel_filterbank, MelSpec, MEL_FLOOR};
pub use stft::{hann_periodic, istft, stft, Spectrogram, WindowKind};

pub(crate) use mel::mel_energies;
pub(crate) use stft::{stft_adjoint_frames, stft_frames};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Real scalar types the DSP kernels run on.
pub trait Sample: rustfft::FftNum + rustfft::num_traits::Float {}
impl Sample for f32 {}
impl Sample for f64 {}

/// Mono PCM signal at full scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Shape("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
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

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum()
    }

    pub fn scaled(&self, gain: f32) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }

    pub fn slice(&self, start: usize, len: usize) -> Self {
        Self {
            samples: self.samples[start..start + len].to_vec(),
            sample_rate: self.sample_rate,
        }
    }

    /// Sample-wise sum; lengths and rates must agree.
    pub fn add(&self, other: &Waveform) -> Result<Self> {
        self.check_compatible(other)?;
        Ok(Self {
            samples: self
                .samples
                .iter()
                .zip(&other.samples)
                .map(|(a, b)| a + b)
                .collect(),
            sample_rate: self.sample_rate,
        })
    }

    pub fn check_compatible(&self, other: &Waveform) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Shape(format!(
                "length mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        if self.sample_rate != other.sample_rate {
            return Err(Error::Shape(format!(
                "sample rate mismatch: {} vs {}",
                self.sample_rate, other.sample_rate
            )));
        }
        Ok(())
    }

    /// Returns a copy padded with zeros (or truncated) to `len` samples.
    pub fn resized(&self, len: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}
