//! Separation metrics, mask post-processing and the evaluation harness.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex32;
use serde::{Deserialize, Serialize};

use crate::config::MelScales;
use crate::dsp::wav::read_wav;
use crate::dsp::{istft, stft, Waveform};
use crate::error::{Error, Result};
use crate::losses::multiscale_mel_loss;
use crate::manifest::Manifest;
use crate::mixture::{make_mixture, prepare_eval_segments, MixItem, MixSpec, SourceId, DEFAULT_SILENCE_DB};
use crate::model::SdCodec;
use crate::train::data::item_seed;

/// Bounds on reported SI-SDR values.
pub const SI_SDR_CEILING_DB: f64 = 60.0;
pub const SI_SDR_FLOOR_DB: f64 = -60.0;

pub const MASK_WINDOW: usize = 1024;
pub const MASK_HOP: usize = 256;
pub const MASK_EPS: f64 = 1e-8;

/// Scale-invariant SDR of `est` against `reference`, in dB.
pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    est.check_compatible(reference)?;
    let (mut dot, mut ref_energy) = (0.0f64, 0.0f64);
    for (&e, &r) in est.samples().iter().zip(reference.samples()) {
        dot += e as f64 * r as f64;
        ref_energy += (r as f64).powi(2);
    }
    if ref_energy == 0.0 {
        return Err(Error::SilentReference);
    }
    let alpha = dot / ref_energy;
    let (mut target, mut noise) = (0.0f64, 0.0f64);
    for (&e, &r) in est.samples().iter().zip(reference.samples()) {
        let t = alpha * r as f64;
        target += t * t;
        noise += (t - e as f64).powi(2);
    }
    if noise <= target * 10f64.powf(-SI_SDR_CEILING_DB / 10.0) {
        return Ok(SI_SDR_CEILING_DB);
    }
    Ok((10.0 * (target / noise).log10()).max(SI_SDR_FLOOR_DB))
}

/// Improvement of `est` over the unprocessed mixture.
pub fn si_sdri(est: &Waveform, reference: &Waveform, mix: &Waveform) -> Result<f64> {
    Ok(si_sdr(est, reference)? - si_sdr(mix, reference)?)
}

/// Multi-scale log-mel distance with the default scales.
pub fn mel_distance(est: &Waveform, reference: &Waveform) -> Result<f64> {
    multiscale_mel_loss(est, reference, &MelScales::default())
}

/// `M_s = |X_s| / (Σ |X_s'| + ε)` per bin, from per-source magnitudes of equal length.
pub fn ratio_masks(mags: &BTreeMap<SourceId, Vec<f32>>) -> Result<BTreeMap<SourceId, Vec<f64>>> {
    let n = mags.values().next().map_or(0, Vec::len);
    if mags.values().any(|m| m.len() != n) {
        return Err(Error::Shape("magnitude maps differ in size".into()));
    }
    let mut total = vec![MASK_EPS; n];
    for m in mags.values() {
        for (t, &v) in total.iter_mut().zip(m) {
            *t += v as f64;
        }
    }
    Ok(mags
        .iter()
        .map(|(&s, m)| (s, m.iter().zip(&total).map(|(&v, &t)| v as f64 / t).collect()))
        .collect())
}

/// Ratio masks from decoded-stem magnitudes applied to the mixture STFT,
/// resynthesized with the mixture phase.
pub fn separate_with_mask(
    mix: &Waveform,
    decoded: &BTreeMap<SourceId, Waveform>,
) -> Result<BTreeMap<SourceId, Waveform>> {
    if decoded.is_empty() {
        return Err(Error::Contract("mask separation needs at least one decoded stem".into()));
    }
    for w in decoded.values() {
        w.check_compatible(mix)?;
    }
    let mix_spec = stft(mix, MASK_WINDOW, MASK_HOP)?;
    let mags: BTreeMap<SourceId, Vec<f32>> = decoded
        .iter()
        .map(|(&s, w)| Ok((s, stft(w, MASK_WINDOW, MASK_HOP)?.magnitudes())))
        .collect::<Result<_>>()?;
    ratio_masks(&mags)?
        .into_iter()
        .map(|(s, mask)| {
            let bins: Vec<Complex32> = mix_spec.bins.iter().zip(&mask).map(|(&c, &m)| c * m as f32).collect();
            Ok((s, istft(&mix_spec.with_bins(bins)?, mix.len())?))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Resynthesis,
    Separation,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Resynthesis => "resynthesis",
            Task::Separation => "separation",
        })
    }
}

/// What a record scores: the full mixture or one source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Mix,
    Speech,
    Music,
    Sfx,
}

impl From<SourceId> for Target {
    fn from(s: SourceId) -> Self {
        match s {
            SourceId::Speech => Target::Speech,
            SourceId::Music => Target::Music,
            SourceId::Sfx => Target::Sfx,
        }
    }
}

impl Target {
    pub const ALL: [Target; 4] = [Target::Mix, Target::Speech, Target::Music, Target::Sfx];

    pub fn as_str(self) -> &'static str {
        match self {
            Target::Mix => "mix",
            Target::Speech => "speech",
            Target::Music => "music",
            Target::Sfx => "sfx",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub segment: String,
    pub task: Task,
    pub target: Target,
    pub si_sdr: f64,
    /// Absent for mixture resynthesis, where the mixture is the reference.
    pub si_sdri: Option<f64>,
    pub mel_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population statistics; `None` for an empty set.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }

    fn close_to(&self, other: &Self, tol: f64) -> bool {
        (self.mean - other.mean).abs() <= tol && (self.std - other.std).abs() <= tol
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub task: Task,
    pub target: Target,
    pub count: usize,
    pub si_sdr: MeanStd,
    pub si_sdri: Option<MeanStd>,
    pub mel_distance: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub aggregates: Vec<Aggregate>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ReportLine {
    Record(EvalRecord),
    Aggregate(Aggregate),
}

const AGGREGATE_TOL: f64 = 1e-9;

fn aggregate(records: &[EvalRecord]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(Task, Target), Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.task, r.target)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((task, target), rs)| {
            let col = |f: fn(&EvalRecord) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<_>>();
            let improvements: Vec<f64> = rs.iter().filter_map(|r| r.si_sdri).collect();
            Aggregate {
                task,
                target,
                count: rs.len(),
                si_sdr: MeanStd::of(&col(|r| r.si_sdr)).unwrap_or_default(),
                si_sdri: MeanStd::of(&improvements),
                mel_distance: MeanStd::of(&col(|r| r.mel_distance)).unwrap_or_default(),
            }
        })
        .collect()
}

impl EvalReport {
    pub fn from_records(records: Vec<EvalRecord>) -> Self {
        let aggregates = aggregate(&records);
        Self { records, aggregates }
    }

    pub fn aggregate(&self, task: Task, target: Target) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.task == task && a.target == target)
    }

    /// Fails unless the stored aggregates match a recomputation from the records.
    pub fn check_consistency(&self) -> Result<()> {
        let fresh = aggregate(&self.records);
        let same = fresh.len() == self.aggregates.len()
            && fresh.iter().zip(&self.aggregates).all(|(a, b)| {
                a.task == b.task
                    && a.target == b.target
                    && a.count == b.count
                    && a.si_sdr.close_to(&b.si_sdr, AGGREGATE_TOL)
                    && a.mel_distance.close_to(&b.mel_distance, AGGREGATE_TOL)
                    && match (&a.si_sdri, &b.si_sdri) {
                        (Some(x), Some(y)) => x.close_to(y, AGGREGATE_TOL),
                        (None, None) => true,
                        _ => false,
                    }
            });
        if same {
            Ok(())
        } else {
            Err(Error::Contract("report aggregates disagree with its records".into()))
        }
    }

    /// One JSON object per line: records first, then aggregates.
    pub fn to_text(&self) -> Result<String> {
        self.check_consistency()?;
        let mut out = String::new();
        let lines = self
            .records
            .iter()
            .cloned()
            .map(ReportLine::Record)
            .chain(self.aggregates.iter().cloned().map(ReportLine::Aggregate));
        for line in lines {
            let json = serde_json::to_string(&line).map_err(|e| Error::Contract(e.to_string()))?;
            out.push_str(&json);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut report = Self::default();
        let mut offset = 0;
        for line in text.lines() {
            let here = offset;
            offset += line.len() + 1;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(line).map_err(|e| Error::format(here, e.to_string()))? {
                ReportLine::Record(r) => report.records.push(r),
                ReportLine::Aggregate(a) => report.aggregates.push(a),
            }
        }
        report.check_consistency()?;
        Ok(report)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = self.to_text()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    /// Aggregate table: one row per task, SI-SDR / SI-SDRi / mel distance per target.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<12}", "");
        for t in Target::ALL {
            let _ = write!(out, " | {:^32}", t.as_str());
        }
        out.push('\n');
        let _ = write!(out, "{:<12}", "");
        for _ in Target::ALL {
            let _ = write!(out, " | {:>10} {:>10} {:>10}", "SI-SDR", "SI-SDRi", "mel");
        }
        out.push('\n');
        for task in [Task::Resynthesis, Task::Separation] {
            let _ = write!(out, "{:<12}", task.to_string());
            for target in Target::ALL {
                match self.aggregate(task, target) {
                    Some(a) => {
                        let sdri = a.si_sdri.map_or("-".to_string(), |m| format!("{:.2}", m.mean));
                        let _ = write!(
                            out,
                            " | {:>10.2} {:>10} {:>10.3}",
                            a.si_sdr.mean, sdri, a.mel_distance.mean
                        );
                    }
                    None => {
                        let _ = write!(out, " | {:>10} {:>10} {:>10}", "-", "-", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// A named evaluation segment.
#[derive(Debug, Clone)]
pub struct EvalSegment {
    pub id: String,
    pub item: MixItem,
}

/// Builds evaluation segments from a stem manifest.
///
/// Mixture `i` combines the `i`-th stem of every source present (shorter
/// lists wrap around), mixed under `spec` with a seed derived from `seed` and
/// `i`, then cut by [`prepare_eval_segments`].
pub fn segments_from_manifest(
    manifest: &Manifest,
    spec: &MixSpec,
    seg_len_s: f64,
    seed: u64,
) -> Result<Vec<EvalSegment>> {
    let mut by_source: BTreeMap<SourceId, Vec<&Path>> = BTreeMap::new();
    for e in &manifest.entries {
        by_source.entry(e.source).or_default().push(&e.path);
    }
    let n = by_source.values().map(Vec::len).max().unwrap_or(0);
    let mut out = Vec::new();
    for i in 0..n {
        let mut stems = BTreeMap::new();
        for (&s, paths) in &by_source {
            stems.insert(s, read_wav(paths[i % paths.len()])?);
        }
        let len = stems.values().map(Waveform::len).min().unwrap_or(0);
        let stems = stems.into_iter().map(|(s, w)| (s, w.slice(0, len))).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, 0, i));
        let item = make_mixture(&stems, spec, &mut rng)?;
        for (j, seg) in prepare_eval_segments(&item, seg_len_s, DEFAULT_SILENCE_DB, 0.5)?
            .into_iter()
            .enumerate()
        {
            out.push(EvalSegment {
                id: format!("mix{i:04}.seg{j:03}"),
                item: seg,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Skip the codec: decoded stems are the true stems.
    pub identity_oracle: bool,
}

fn score(
    records: &mut Vec<EvalRecord>,
    segment: &str,
    task: Task,
    target: Target,
    est: &Waveform,
    reference: &Waveform,
    mix: Option<&Waveform>,
) -> Result<()> {
    records.push(EvalRecord {
        segment: segment.to_string(),
        task,
        target,
        si_sdr: si_sdr(est, reference)?,
        si_sdri: mix.map(|m| si_sdri(est, reference, m)).transpose()?,
        mel_distance: mel_distance(est, reference)?,
    });
    Ok(())
}

/// Resynthesis and mask-separation scores for every segment.
///
/// Each active source is scored against its stem; the decoded stems of every
/// source the model knows feed the separation masks.
pub fn evaluate(model: Option<&SdCodec>, segments: &[EvalSegment], opts: &EvalOptions) -> Result<EvalReport> {
    let mut records = Vec::new();
    for seg in segments {
        let item = &seg.item;
        let mix = &item.mixture;
        let (mix_hat, decoded) = if opts.identity_oracle {
            (mix.clone(), item.stems.clone())
        } else {
            let model =
                model.ok_or_else(|| Error::Contract("evaluation without the identity oracle needs a model".into()))?;
            let all: BTreeSet<SourceId> = model.config().sources.iter().copied().collect();
            model.resynthesize_each(mix, &all)?
        };
        score(&mut records, &seg.id, Task::Resynthesis, Target::Mix, &mix_hat, mix, None)?;
        for s in &item.active {
            if let (Some(est), Some(reference)) = (decoded.get(s), item.stems.get(s)) {
                score(&mut records, &seg.id, Task::Resynthesis, (*s).into(), est, reference, Some(mix))?;
            }
        }
        let separated = separate_with_mask(mix, &decoded)?;
        for s in &item.active {
            if let (Some(est), Some(reference)) = (separated.get(s), item.stems.get(s)) {
                score(&mut records, &seg.id, Task::Separation, (*s).into(), est, reference, Some(mix))?;
            }
        }
    }
    Ok(EvalReport::from_records(records))
}
