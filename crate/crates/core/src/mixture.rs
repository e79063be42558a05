//! Training/evaluation example construction: loudness protocol, track-count
//! sampling and evaluation segmentation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{normalize_lufs, peak_clamp, Waveform, DEFAULT_PEAK_CEILING_DB};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceId {
    Speech,
    Music,
    Sfx,
}

impl SourceId {
    pub const ALL: [SourceId; 3] = [SourceId::Speech, SourceId::Music, SourceId::Sfx];

    pub fn as_str(self) -> &'static str {
        match self {
            SourceId::Speech => "speech",
            SourceId::Music => "music",
            SourceId::Sfx => "sfx",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SourceId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speech" => Ok(SourceId::Speech),
            "music" => Ok(SourceId::Music),
            "sfx" => Ok(SourceId::Sfx),
            other => Err(Error::config("source", format!("unknown source id `{other}`"))),
        }
    }
}

/// Loudness and track-count protocol for building mixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixSpec {
    pub target_lufs: BTreeMap<SourceId, f64>,
    pub lufs_jitter: f64,
    pub mix_lufs: f64,
    pub mix_jitter: f64,
    pub peak_ceiling_db: f64,
    pub track_count_probs: [f64; 3],
}

impl Default for MixSpec {
    fn default() -> Self {
        Self {
            target_lufs: BTreeMap::from([
                (SourceId::Speech, -17.0),
                (SourceId::Music, -24.0),
                (SourceId::Sfx, -21.0),
            ]),
            lufs_jitter: 2.0,
            mix_lufs: -27.0,
            mix_jitter: 2.0,
            peak_ceiling_db: DEFAULT_PEAK_CEILING_DB,
            track_count_probs: [0.6, 0.2, 0.2],
        }
    }
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        validate_probs(&self.track_count_probs).map_err(|e| match e {
            Error::Config { msg, .. } => Error::config("mix.track_count_probs", msg),
            e => e,
        })?;
        if !(self.lufs_jitter >= 0.0) {
            return Err(Error::config("mix.lufs_jitter", "must be ≥ 0"));
        }
        if !(self.mix_jitter >= 0.0) {
            return Err(Error::config("mix.mix_jitter", "must be ≥ 0"));
        }
        for s in SourceId::ALL {
            if !self.target_lufs.contains_key(&s) {
                return Err(Error::config(
                    format!("mix.target_lufs.{s}"),
                    "missing target loudness",
                ));
            }
        }
        Ok(())
    }
}

fn validate_probs(probs: &[f64; 3]) -> Result<()> {
    if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::config("probs", "entries must be finite and ≥ 0"));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config("probs", format!("entries sum to {sum}, expected 1")));
    }
    Ok(())
}

/// Draws how many tracks (1, 2 or 3) make up a mixture.
pub fn sample_track_count<R: Rng + ?Sized>(probs: &[f64; 3], rng: &mut R) -> Result<usize> {
    validate_probs(probs)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Ok(i + 1);
        }
    }
    // u landed in the rounding gap above the cumulative sum: last nonzero class.
    Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) + 1)
}

/// Uniformly chooses which `k` sources are active.
pub fn sample_active_sources<R: Rng + ?Sized>(k: usize, rng: &mut R) -> BTreeSet<SourceId> {
    let mut pool = SourceId::ALL.to_vec();
    let mut chosen = BTreeSet::new();
    for _ in 0..k.min(3) {
        let i = rng.random_range(0..pool.len());
        chosen.insert(pool.remove(i));
    }
    chosen
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MixMetadata {
    /// Loudness each stem was normalized to before summation.
    pub stem_target_lufs: BTreeMap<SourceId, f64>,
    /// Total gain applied to each stem (loudness + peak + mixture stages).
    pub stem_gain_db: BTreeMap<SourceId, f64>,
    /// Common gain applied to the summed mixture and all stems.
    pub mix_gain_db: f64,
    pub seed: Option<u64>,
}

/// A mixture with its aligned stems; `mixture` is the exact sum of the stems.
#[derive(Debug, Clone, PartialEq)]
pub struct MixItem {
    pub mixture: Waveform,
    pub stems: BTreeMap<SourceId, Waveform>,
    pub active: BTreeSet<SourceId>,
    pub metadata: MixMetadata,
}

impl MixItem {
    /// Builds an item from stems taken as-is; the mixture is their sum.
    pub fn from_stems(stems: BTreeMap<SourceId, Waveform>) -> Result<Self> {
        let mixture = sum_stems(&stems)?;
        Ok(Self {
            mixture,
            active: stems.keys().copied().collect(),
            stems,
            metadata: MixMetadata::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.mixture.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mixture.is_empty()
    }

    pub fn stem(&self, s: SourceId) -> Option<&Waveform> {
        self.stems.get(&s)
    }

    /// Stem for `s`, or silence when the source is absent.
    pub fn stem_or_silence(&self, s: SourceId) -> Waveform {
        self.stems
            .get(&s)
            .cloned()
            .unwrap_or_else(|| Waveform::zeros(self.len(), self.mixture.sample_rate()))
    }

    fn slice(&self, start: usize, len: usize) -> Self {
        Self {
            mixture: self.mixture.slice(start, len),
            stems: self
                .stems
                .iter()
                .map(|(s, w)| (*s, w.slice(start, len)))
                .collect(),
            active: self.active.clone(),
            metadata: self.metadata.clone(),
        }
    }
}

fn sum_stems(stems: &BTreeMap<SourceId, Waveform>) -> Result<Waveform> {
    let mut it = stems.values();
    let first = it
        .next()
        .ok_or_else(|| Error::Contract("mixture needs at least one stem".into()))?;
    let mut acc = first.clone();
    for w in it {
        acc = acc.add(w)?;
    }
    Ok(acc)
}

fn gain(db: f64) -> f32 {
    10f64.powf(db / 20.0) as f32
}

/// Applies the loudness protocol to 1–3 stems and sums them.
///
/// Stems are normalized to their jittered per-source targets, peak-clamped
/// when any exceeds the ceiling, summed, and the sum normalized to the
/// jittered mixture loudness with the same gain applied to every stem.
pub fn make_mixture<R: Rng + ?Sized>(
    stems: &BTreeMap<SourceId, Waveform>,
    spec: &MixSpec,
    rng: &mut R,
) -> Result<MixItem> {
    spec.validate()?;
    if stems.is_empty() || stems.len() > 3 {
        return Err(Error::Contract(format!(
            "a mixture takes 1 to 3 stems, got {}",
            stems.len()
        )));
    }
    let first = stems.values().next().expect("non-empty");
    for w in stems.values() {
        first.check_compatible(w)?;
    }

    let mut meta = MixMetadata::default();
    let mut out: BTreeMap<SourceId, Waveform> = BTreeMap::new();
    for (&s, w) in stems {
        let u: f64 = rng.random();
        let target = spec.target_lufs[&s] + spec.lufs_jitter * (2.0 * u - 1.0);
        let (normed, g) = normalize_lufs(w, target)
            .map_err(|e| Error::SilentInput(format!("stem {s}: {e}")))?;
        meta.stem_target_lufs.insert(s, target);
        meta.stem_gain_db.insert(s, g);
        out.insert(s, normed);
    }

    let ceiling = 10f64.powf(spec.peak_ceiling_db / 20.0) as f32;
    if out.values().any(|w| w.peak() > ceiling) {
        for (s, w) in out.iter_mut() {
            let before = w.peak();
            *w = peak_clamp(w, spec.peak_ceiling_db);
            if before > 0.0 {
                *meta.stem_gain_db.get_mut(s).expect("recorded") +=
                    20.0 * (w.peak() as f64 / before as f64).log10();
            }
        }
    }

    let u: f64 = rng.random();
    let mix_target = spec.mix_lufs + spec.mix_jitter * (2.0 * u - 1.0);
    let (_, mut mix_gain_db) = normalize_lufs(&sum_stems(&out)?, mix_target)?;
    let scale = |out: &BTreeMap<SourceId, Waveform>, db: f64| -> BTreeMap<SourceId, Waveform> {
        out.iter().map(|(s, w)| (*s, w.scaled(gain(db)))).collect()
    };
    let mut scaled = scale(&out, mix_gain_db);
    let mut mixture = sum_stems(&scaled)?;

    // The mixture gain may push a stem or the sum over the ceiling again.
    let peak = scaled
        .values()
        .map(Waveform::peak)
        .fold(mixture.peak(), f32::max);
    if peak > ceiling {
        mix_gain_db += 20.0 * (ceiling as f64 / peak as f64).log10();
        scaled = scale(&out, mix_gain_db);
        while scaled.values().any(|w| w.peak() > ceiling) || sum_stems(&scaled)?.peak() > ceiling {
            mix_gain_db -= 1e-6;
            scaled = scale(&out, mix_gain_db);
        }
        mixture = sum_stems(&scaled)?;
    }
    for g in meta.stem_gain_db.values_mut() {
        *g += mix_gain_db;
    }
    meta.mix_gain_db = mix_gain_db;

    Ok(MixItem {
        mixture,
        active: scaled.keys().copied().collect(),
        stems: scaled,
        metadata: meta,
    })
}

/// Silence threshold (relative to the mixture peak) used for evaluation trimming.
pub const DEFAULT_SILENCE_DB: f64 = -40.0;
const SILENCE_WINDOW_S: f64 = 0.05;

fn window_rms(x: &[f32]) -> f64 {
    (x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Per-sample activity mask: a sample is active when its 50 ms window's RMS
/// is above `threshold`.
fn activity_mask(x: &[f32], win: usize, threshold: f64) -> Vec<bool> {
    let mut mask = vec![false; x.len()];
    for (chunk, m) in x.chunks(win).zip(mask.chunks_mut(win)) {
        let active = threshold > 0.0 && window_rms(chunk) > threshold;
        m.iter_mut().for_each(|v| *v = active);
    }
    mask
}

/// Trims leading/trailing silence, cuts the remainder into non-overlapping
/// `seg_len_s` segments and keeps those in which every active stem is
/// non-silent for at least `min_coverage` of the segment.
pub fn prepare_eval_segments(
    item: &MixItem,
    seg_len_s: f64,
    silence_db: f64,
    min_coverage: f64,
) -> Result<Vec<MixItem>> {
    if !(seg_len_s > 0.0) {
        return Err(Error::config("seg_len", "must be positive"));
    }
    let sr = item.mixture.sample_rate() as f64;
    let win = ((SILENCE_WINDOW_S * sr).round() as usize).max(1);
    let seg = (seg_len_s * sr).round() as usize;
    let rel = 10f64.powf(silence_db / 20.0);

    let peak = item.mixture.peak() as f64;
    let mix_mask = activity_mask(item.mixture.samples(), win, peak * rel);
    let (Some(first), Some(last)) = (
        mix_mask.iter().position(|&a| a),
        mix_mask.iter().rposition(|&a| a),
    ) else {
        return Ok(Vec::new());
    };
    let trimmed = item.slice(first, last + 1 - first);

    let stem_masks: BTreeMap<SourceId, Vec<bool>> = trimmed
        .active
        .iter()
        .filter_map(|s| item.stems.get(s).map(|full| (*s, full)))
        .map(|(s, full)| {
            let threshold = full.peak() as f64 * rel;
            (s, activity_mask(trimmed.stems[&s].samples(), win, threshold))
        })
        .collect();

    let mut out = Vec::new();
    let mut start = 0;
    while start + seg <= trimmed.len() {
        let keep = stem_masks.values().all(|m| {
            let active = m[start..start + seg].iter().filter(|&&a| a).count();
            active as f64 / seg as f64 >= min_coverage
        });
        if keep {
            out.push(trimmed.slice(start, seg));
        }
        start += seg;
    }
    Ok(out)
}
