use super::stft::stft_frames;
use super::Waveform;
use crate::error::{Error, Result};

/// Energy floor applied before the logarithm.
pub const MEL_FLOOR: f64 = 1e-5;

/// Log mel-band energies, `frames × n_mels` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    pub log_mels: Vec<f32>,
    pub frames: usize,
    pub window_size: usize,
    pub n_mels: usize,
    pub floor: f64,
}

impl MelSpec {
    pub fn frame(&self, i: usize) -> &[f32] {
        &self.log_mels[i * self.n_mels..(i + 1) * self.n_mels]
    }

    /// Time-averaged linear energy per band.
    pub fn mean_energy(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.n_mels];
        for f in 0..self.frames {
            for (a, &v) in acc.iter_mut().zip(self.frame(f)) {
                *a += (v as f64).exp();
            }
        }
        acc.iter().map(|a| a / self.frames as f64).collect()
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale spanning 0 Hz to Nyquist,
/// `n_mels × (n_fft/2 + 1)` row-major. Every row sums to one; a filter
/// narrower than the bin spacing collapses onto its nearest bin.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Vec<f64> {
    let nb = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut fb = vec![0.0f64; n_mels * nb];
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut fb[m * nb..(m + 1) * nb];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let up = (f - lo) / (center - lo);
            let down = (hi - f) / (hi - center);
            *w = up.min(down).max(0.0);
        }
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.iter_mut().for_each(|w| *w /= sum);
        } else {
            let nearest = ((center / bin_hz).round() as usize).min(nb - 1);
            row[nearest] = 1.0;
        }
    }
    fb
}

/// Mel energies of `x` with 64-bit accumulation; returns `(frames, energies)`.
pub(crate) fn mel_energies(
    x: &[f32],
    sample_rate: u32,
    window: usize,
    n_mels: usize,
) -> Result<(usize, Vec<f64>)> {
    if n_mels == 0 {
        return Err(Error::config("n_mels", "must be at least 1"));
    }
    let (frames, bins) = stft_frames(x, window, window / 4)?;
    let nb = window / 2 + 1;
    let fb = mel_filterbank(sample_rate, window, n_mels);
    let mut out = vec![0.0f64; frames * n_mels];
    let mut power = vec![0.0f64; nb];
    for f in 0..frames {
        for (p, c) in power.iter_mut().zip(&bins[f * nb..(f + 1) * nb]) {
            *p = (c.re as f64).powi(2) + (c.im as f64).powi(2);
        }
        for m in 0..n_mels {
            out[f * n_mels + m] = fb[m * nb..(m + 1) * nb]
                .iter()
                .zip(&power)
                .map(|(w, p)| w * p)
                .sum();
        }
    }
    Ok((frames, out))
}

/// Log of floor-clamped mel power, hop = window / 4.
pub fn log_mel(w: &Waveform, window_size: usize, n_mels: usize) -> Result<MelSpec> {
    let (frames, energies) = mel_energies(w.samples(), w.sample_rate(), window_size, n_mels)?;
    Ok(MelSpec {
        log_mels: energies
            .iter()
            .map(|e| e.max(MEL_FLOOR).ln() as f32)
            .collect(),
        frames,
        window_size,
        n_mels,
        floor: MEL_FLOOR,
    })
}
