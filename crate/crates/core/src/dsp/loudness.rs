//! K-weighted, gated integrated loudness for mono signals.

use super::Waveform;
use crate::error::{Error, Result};

pub const DEFAULT_PEAK_CEILING_DB: f64 = -0.5;

const ABSOLUTE_GATE_LUFS: f64 = -70.0;
const RELATIVE_GATE_LU: f64 = -10.0;
const BLOCK_S: f64 = 0.4;
const STEP_S: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 3],
}

impl Biquad {
    fn run(&self, x: &[f64]) -> Vec<f64> {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        x.iter()
            .map(|&x0| {
                let y0 = self.b[0] * x0 + self.b[1] * x1 + self.b[2] * x2
                    - self.a[1] * y1
                    - self.a[2] * y2;
                x2 = x1;
                x1 = x0;
                y2 = y1;
                y1 = y0;
                y0
            })
            .collect()
    }
}

/// The two K-weighting stages (high shelf, then RLB high-pass), re-derived
/// from their analog prototypes for the given rate.
fn k_weighting(sample_rate: u32) -> [Biquad; 2] {
    let fs = sample_rate as f64;

    let f0 = 1681.974450955533;
    let gain_db = 3.999843853973347;
    let q = 0.7071752369554196;
    let k = (std::f64::consts::PI * f0 / fs).tan();
    let vh = 10f64.powf(gain_db / 20.0);
    let vb = vh.powf(0.4996667741545416);
    let a0 = 1.0 + k / q + k * k;
    let shelf = Biquad {
        b: [
            (vh + vb * k / q + k * k) / a0,
            2.0 * (k * k - vh) / a0,
            (vh - vb * k / q + k * k) / a0,
        ],
        a: [1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0],
    };

    let f0 = 38.13547087602444;
    let q = 0.5003270373238773;
    let k = (std::f64::consts::PI * f0 / fs).tan();
    let a0 = 1.0 + k / q + k * k;
    let highpass = Biquad {
        b: [1.0, -2.0, 1.0],
        a: [1.0, 2.0 * (k * k - 1.0) / a0, (1.0 - k / q + k * k) / a0],
    };
    [shelf, highpass]
}

fn block_loudness(mean_square: f64) -> f64 {
    -0.691 + 10.0 * mean_square.log10()
}

/// Integrated loudness in LUFS (mono channel weight 1.0, absolute gate
/// −70 LUFS, relative gate −10 LU). Signals shorter than one 400 ms block
/// are measured as a single block.
pub fn measure_lufs(w: &Waveform) -> Result<f64> {
    if w.is_empty() {
        return Err(Error::SilentInput("empty signal".into()));
    }
    let x: Vec<f64> = w.samples().iter().map(|&s| s as f64).collect();
    let [shelf, hp] = k_weighting(w.sample_rate());
    let y = hp.run(&shelf.run(&x));

    let fs = w.sample_rate() as f64;
    let block = ((BLOCK_S * fs).round() as usize).min(y.len());
    let step = ((STEP_S * fs).round() as usize).max(1);
    let mut blocks = Vec::new();
    let mut start = 0;
    while start + block <= y.len() {
        let ms = y[start..start + block].iter().map(|v| v * v).sum::<f64>() / block as f64;
        blocks.push(ms);
        start += step;
    }

    let gated: Vec<f64> = blocks
        .iter()
        .copied()
        .filter(|&ms| ms > 0.0 && block_loudness(ms) > ABSOLUTE_GATE_LUFS)
        .collect();
    if gated.is_empty() {
        return Err(Error::SilentInput(
            "no block above the absolute loudness gate".into(),
        ));
    }
    let relative_gate =
        block_loudness(gated.iter().sum::<f64>() / gated.len() as f64) + RELATIVE_GATE_LU;
    let kept: Vec<f64> = gated
        .into_iter()
        .filter(|&ms| block_loudness(ms) > relative_gate)
        .collect();
    if kept.is_empty() {
        return Err(Error::SilentInput("all blocks gated".into()));
    }
    Ok(block_loudness(kept.iter().sum::<f64>() / kept.len() as f64))
}

/// Scales `w` to `target` LUFS; returns the scaled signal and applied gain in dB.
pub fn normalize_lufs(w: &Waveform, target: f64) -> Result<(Waveform, f64)> {
    let measured = measure_lufs(w)?;
    let gain_db = target - measured;
    let gain = 10f64.powf(gain_db / 20.0) as f32;
    Ok((w.scaled(gain), gain_db))
}

pub fn peak_db(w: &Waveform) -> f64 {
    20.0 * (w.peak() as f64).log10()
}

/// Rescales so the absolute peak equals the ceiling when it exceeds it.
pub fn peak_clamp(w: &Waveform, ceiling_db: f64) -> Waveform {
    let ceiling = 10f64.powf(ceiling_db / 20.0) as f32;
    let peak = w.peak();
    if peak <= ceiling {
        return w.clone();
    }
    let gain = ceiling / peak;
    let samples = w
        .samples()
        .iter()
        .map(|s| (s * gain).clamp(-ceiling, ceiling))
        .collect();
    Waveform::new(samples, w.sample_rate()).expect("scaled finite samples stay finite")
}
