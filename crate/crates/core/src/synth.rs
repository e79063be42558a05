//! Procedural stand-ins for the three source domains.
//!
//! speech: harmonic stack on a wandering f0 in 90–250 Hz with formant-like
//! weighting, syllabic amplitude modulation and pauses.
//! music: sustained chords of harmonic notes under slow envelopes.
//! sfx: filtered noise bursts and chirps.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dsp::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::mixture::SourceId;

const PEAK: f64 = 0.5;

pub fn synth_toy_source<R: Rng + ?Sized>(
    source: SourceId,
    duration_s: f64,
    rng: &mut R,
) -> Result<Waveform> {
    if !(duration_s >= 0.5) {
        return Err(Error::config("duration", "toy sources need at least 0.5 s"));
    }
    let n = (duration_s * DEFAULT_SAMPLE_RATE as f64).round() as usize;
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let mut x = match source {
        SourceId::Speech => speech(n, sr, rng),
        SourceId::Music => music(n, sr, rng),
        SourceId::Sfx => sfx(n, sr, rng),
    };
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= PEAK / peak);
    }
    Waveform::new(x.into_iter().map(|v| v as f32).collect(), DEFAULT_SAMPLE_RATE)
}

fn formant_gain(freq: f64, formants: &[(f64, f64)]) -> f64 {
    formants
        .iter()
        .map(|&(center, bw)| 1.0 / (1.0 + ((freq - center) / bw).powi(2)))
        .sum::<f64>()
        + 0.02
}

fn speech<R: Rng + ?Sized>(n: usize, sr: f64, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let base_f0 = rng.random_range(90.0..250.0);
    let mut t = rng.random_range(0..(0.1 * sr) as usize);
    let mut phase = 0.0f64;
    while t < n {
        let voiced = rng.random_range((0.15 * sr) as usize..(0.4 * sr) as usize);
        let pause = rng.random_range((0.12 * sr) as usize..(0.25 * sr) as usize);
        let formants = [
            (rng.random_range(300.0..850.0), 90.0),
            (rng.random_range(900.0..2300.0), 140.0),
            (rng.random_range(2400.0..3200.0), 200.0),
        ];
        let glide = rng.random_range(-0.25..0.25);
        let syllable_rate = rng.random_range(3.0..6.0);
        let end = (t + voiced).min(n);
        for i in t..end {
            let u = (i - t) as f64 / voiced as f64;
            let f0 = (base_f0 * (1.0 + glide * (u - 0.5))).clamp(90.0, 250.0);
            phase += 2.0 * PI * f0 / sr;
            let env = (PI * u).sin().powf(0.6) * (0.6 + 0.4 * (2.0 * PI * syllable_rate * u).cos().abs());
            let mut v = 0.0;
            let mut h = 1;
            while (h as f64) * f0 < 4000.0 {
                v += formant_gain(h as f64 * f0, &formants) * (h as f64 * phase).sin() / (h as f64).sqrt();
                h += 1;
            }
            out[i] = env * v;
        }
        t = end + pause;
    }
    out
}

fn music<R: Rng + ?Sized>(n: usize, sr: f64, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let scale = [0, 2, 4, 5, 7, 9, 11];
    let root = rng.random_range(48..60);
    let mut t = 0usize;
    while t < n {
        let len = rng.random_range((0.5 * sr) as usize..(1.0 * sr) as usize);
        let voices = rng.random_range(2..=4);
        let degree = rng.random_range(0..7);
        let notes: Vec<f64> = (0..voices)
            .map(|v| {
                let d = degree + 2 * v;
                let midi = root + scale[d % 7] + 12 * (d / 7) as i32;
                440.0 * 2f64.powf((midi as f64 - 69.0) / 12.0)
            })
            .collect();
        let phases: Vec<f64> = (0..voices).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let attack = 0.08 * sr;
        let release = 0.15 * sr;
        let end = (t + len + release as usize).min(n);
        for i in t..end {
            let k = (i - t) as f64;
            let env = if k < attack {
                k / attack
            } else if k < len as f64 {
                1.0 - 0.3 * (k - attack) / len as f64
            } else {
                0.7 * (1.0 - (k - len as f64) / release).max(0.0)
            };
            let mut v = 0.0;
            for (f, p) in notes.iter().zip(&phases) {
                for h in 1..=4 {
                    v += (2.0 * PI * f * h as f64 * i as f64 / sr + p).sin() / (h * h) as f64;
                }
            }
            out[i] += env * v;
        }
        t += len;
    }
    out
}

fn one_pole(x: &mut [f64], coeff: f64) {
    let mut y = 0.0;
    for v in x.iter_mut() {
        y += coeff * (*v - y);
        *v = y;
    }
}

fn sfx<R: Rng + ?Sized>(n: usize, sr: f64, rng: &mut R) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let mut t = rng.random_range(0..(0.05 * sr) as usize);
    while t < n {
        let len = rng.random_range((0.1 * sr) as usize..(0.5 * sr) as usize);
        let end = (t + len).min(n);
        let decay = rng.random_range(3.0..12.0);
        if rng.random_bool(0.65) {
            let mut burst: Vec<f64> = (t..end).map(|_| StandardNormal.sample(rng)).collect();
            let lowpass = rng.random_range(0.2..1.0);
            one_pole(&mut burst, lowpass);
            if rng.random_bool(0.5) {
                // High-pass by subtracting a smoothed copy.
                let mut smooth = burst.clone();
                one_pole(&mut smooth, 0.05);
                burst.iter_mut().zip(&smooth).for_each(|(b, s)| *b -= s);
            }
            for (k, b) in burst.iter().enumerate() {
                out[t + k] += b * (-decay * k as f64 / sr).exp();
            }
        } else {
            let f_start: f64 = rng.random_range(300.0..5000.0);
            let f_end: f64 = rng.random_range(300.0..5000.0);
            let mut phase = 0.0;
            for i in t..end {
                let u = (i - t) as f64 / len as f64;
                phase += 2.0 * PI * (f_start * (f_end / f_start).powf(u)) / sr;
                out[i] += 0.7 * phase.sin() * (-0.5 * decay * u).exp() * (PI * u).sin();
            }
        }
        t = end + rng.random_range(0..(0.2 * sr) as usize);
    }
    out
}
