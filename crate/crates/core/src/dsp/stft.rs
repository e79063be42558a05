use rustfft::num_complex::{Complex, Complex32};
use rustfft::FftPlanner;

use super::{Sample, Waveform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    HannPeriodic,
}

/// Complex short-time spectrum, `frames × (window_size / 2 + 1)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub bins: Vec<Complex32>,
    pub frames: usize,
    pub window_size: usize,
    pub hop_size: usize,
    pub window_kind: WindowKind,
    pub sample_rate: u32,
}

impl Spectrogram {
    pub fn freq_bins(&self) -> usize {
        self.window_size / 2 + 1
    }

    pub fn frame(&self, i: usize) -> &[Complex32] {
        let nb = self.freq_bins();
        &self.bins[i * nb..(i + 1) * nb]
    }

    pub fn magnitudes(&self) -> Vec<f32> {
        self.bins.iter().map(|c| c.norm()).collect()
    }

    /// Same layout with every bin replaced.
    pub fn with_bins(&self, bins: Vec<Complex32>) -> Result<Self> {
        if bins.len() != self.bins.len() {
            return Err(Error::Shape(format!(
                "expected {} bins, got {}",
                self.bins.len(),
                bins.len()
            )));
        }
        Ok(Self {
            bins,
            ..self.clone()
        })
    }
}

pub fn hann_periodic<T: Sample>(n: usize) -> Vec<T> {
    let two_pi = T::from(2.0 * std::f64::consts::PI).unwrap();
    let nf = T::from(n).unwrap();
    let half = T::from(0.5).unwrap();
    (0..n)
        .map(|i| half - half * (two_pi * T::from(i).unwrap() / nf).cos())
        .collect()
}

/// Maps an index of the reflect-padded signal back to the original signal.
fn reflect_source(p: usize, pad: usize, len: usize) -> usize {
    if p < pad {
        pad - p
    } else if p < pad + len {
        p - pad
    } else {
        len - 2 - (p - pad - len)
    }
}

pub(crate) fn frame_count(len: usize, hop: usize) -> usize {
    len / hop + 1
}

fn validate_params(window: usize, hop: usize) -> Result<()> {
    if window < 2 || window % 2 != 0 {
        return Err(Error::Format {
            offset: 0,
            msg: format!("window size {window} must be even and ≥ 2"),
        });
    }
    if hop == 0 || hop > window {
        return Err(Error::Format {
            offset: 0,
            msg: format!("hop size {hop} must be in 1..={window}"),
        });
    }
    Ok(())
}

/// Centered (reflect-padded) windowed DFT of `x`. Returns `frames × (window/2+1)` bins.
pub(crate) fn stft_frames<T: Sample>(
    x: &[T],
    window: usize,
    hop: usize,
) -> Result<(usize, Vec<Complex<T>>)> {
    validate_params(window, hop)?;
    if x.len() < window {
        return Err(Error::InputTooShort {
            needed: window,
            got: x.len(),
        });
    }
    let pad = window / 2;
    let frames = frame_count(x.len(), hop);
    let nb = window / 2 + 1;
    let win = hann_periodic::<T>(window);
    let fft = FftPlanner::<T>::new().plan_fft_forward(window);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); window];
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); fft.get_inplace_scratch_len()];
    let mut out = Vec::with_capacity(frames * nb);
    for f in 0..frames {
        let start = f * hop;
        for (n, b) in buf.iter_mut().enumerate() {
            let p = start + n;
            let v = if p < pad + x.len() + pad {
                x[reflect_source(p, pad, x.len())]
            } else {
                T::zero()
            };
            *b = Complex::new(v * win[n], T::zero());
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        out.extend_from_slice(&buf[..nb]);
    }
    Ok((frames, out))
}

/// Adjoint of [`stft_frames`]: maps a gradient over the complex bins back onto
/// the `len` input samples (reflect padding folded back in).
pub(crate) fn stft_adjoint_frames<T: Sample>(
    grad: &[Complex<T>],
    frames: usize,
    window: usize,
    hop: usize,
    len: usize,
) -> Vec<T> {
    let pad = window / 2;
    let nb = window / 2 + 1;
    let win = hann_periodic::<T>(window);
    let ifft = FftPlanner::<T>::new().plan_fft_inverse(window);
    let mut buf = vec![Complex::new(T::zero(), T::zero()); window];
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); ifft.get_inplace_scratch_len()];
    let mut out = vec![T::zero(); len];
    for f in 0..frames {
        buf.iter_mut().for_each(|b| *b = Complex::new(T::zero(), T::zero()));
        buf[..nb].copy_from_slice(&grad[f * nb..(f + 1) * nb]);
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = f * hop;
        for (n, b) in buf.iter().enumerate() {
            let p = start + n;
            if p < pad + len + pad {
                let i = reflect_source(p, pad, len);
                out[i] = out[i] + b.re * win[n];
            }
        }
    }
    out
}

pub fn stft(w: &Waveform, window_size: usize, hop_size: usize) -> Result<Spectrogram> {
    let (frames, bins) = stft_frames(w.samples(), window_size, hop_size)?;
    Ok(Spectrogram {
        bins,
        frames,
        window_size,
        hop_size,
        window_kind: WindowKind::HannPeriodic,
        sample_rate: w.sample_rate(),
    })
}

/// Weighted overlap-add inverse of [`stft`]; output is trimmed or zero-padded to `length`.
pub fn istft(s: &Spectrogram, length: usize) -> Result<Waveform> {
    validate_params(s.window_size, s.hop_size)?;
    let window = s.window_size;
    let nb = s.freq_bins();
    if s.bins.len() != s.frames * nb {
        return Err(Error::format(
            0,
            format!(
                "spectrogram holds {} bins, expected {} frames × {} bins",
                s.bins.len(),
                s.frames,
                nb
            ),
        ));
    }
    let pad = window / 2;
    let win = hann_periodic::<f32>(window);
    let ifft = FftPlanner::<f32>::new().plan_fft_inverse(window);
    let total = (s.frames - 1) * s.hop_size + window;
    let mut acc = vec![0.0f64; total];
    let mut norm = vec![0.0f64; total];
    let mut buf = vec![Complex32::new(0.0, 0.0); window];
    let scale = 1.0 / window as f32;
    for f in 0..s.frames {
        let frame = s.frame(f);
        buf[..nb].copy_from_slice(frame);
        for k in nb..window {
            buf[k] = frame[window - k].conj();
        }
        ifft.process(&mut buf);
        let start = f * s.hop_size;
        for n in 0..window {
            acc[start + n] += (buf[n].re * scale * win[n]) as f64;
            norm[start + n] += (win[n] * win[n]) as f64;
        }
    }
    let samples = (0..length)
        .map(|i| {
            let p = i + pad;
            if p < total && norm[p] > 1e-8 {
                (acc[p] / norm[p]) as f32
            } else {
                0.0
            }
        })
        .collect();
    Waveform::new(samples, s.sample_rate)
}
