//! Seeded batch production for training.
//!
//! Each item's randomness derives from `(seed, step, index)` alone, so a
//! batch can be rebuilt at any step without replaying earlier ones.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::wav::read_wav;
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::mixture::{make_mixture, sample_active_sources, sample_track_count, MixItem, MixSpec, SourceId};
use crate::synth::synth_toy_source;

const MAX_DRAWS: usize = 16;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn item_seed(seed: u64, step: u64, index: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ step) ^ index as u64)
}

/// Where stems come from: generated on the fly or cut from manifest files.
#[derive(Debug, Clone)]
pub enum StemPool {
    Synthetic,
    Files(BTreeMap<SourceId, Vec<Waveform>>),
}

impl StemPool {
    pub fn from_manifest(manifest: &Manifest) -> Result<Self> {
        let mut files: BTreeMap<SourceId, Vec<Waveform>> = BTreeMap::new();
        for e in &manifest.entries {
            files.entry(e.source).or_default().push(read_wav(&e.path)?);
        }
        Ok(StemPool::Files(files))
    }

    fn draw<R: Rng + ?Sized>(&self, s: SourceId, len: usize, sample_rate: u32, rng: &mut R) -> Result<Waveform> {
        let src = match self {
            StemPool::Synthetic => {
                let dur = (len as f64 / sample_rate as f64).max(0.5);
                synth_toy_source(s, dur, rng)?
            }
            StemPool::Files(files) => {
                let pool = files
                    .get(&s)
                    .filter(|v| !v.is_empty())
                    .ok_or_else(|| Error::config("paths.manifest", format!("no `{s}` stems")))?;
                pool[rng.random_range(0..pool.len())].clone()
            }
        };
        if src.len() < len {
            let mut samples = src.samples().to_vec();
            samples.resize(len, 0.0);
            return Waveform::new(samples, src.sample_rate());
        }
        let start = rng.random_range(0..=src.len() - len);
        Ok(src.slice(start, len))
    }
}

/// One training example built from `seed`. Silent crops are redrawn.
pub fn make_item(pool: &StemPool, spec: &MixSpec, len: usize, sample_rate: u32, seed: u64) -> Result<MixItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = sample_track_count(&spec.track_count_probs, &mut rng)?;
    let active = sample_active_sources(k, &mut rng);
    let mut last_err = None;
    for _ in 0..MAX_DRAWS {
        let stems = active
            .iter()
            .map(|&s| Ok((s, pool.draw(s, len, sample_rate, &mut rng)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        match make_mixture(&stems, spec, &mut rng) {
            Ok(mut item) => {
                item.metadata.seed = Some(seed);
                return Ok(item);
            }
            Err(e @ Error::SilentInput(_)) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("at least one draw"))
}

/// A batch in host memory: `batch × samples` row-major signals.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub step: u64,
    pub seeds: Vec<u64>,
    pub len: usize,
    pub mixture: Vec<f32>,
    /// Per source; zeros for items where the source is absent.
    pub stems: BTreeMap<SourceId, Vec<f32>>,
    pub active: Vec<BTreeSet<SourceId>>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.seeds.len()
    }

    pub fn from_items(step: u64, seeds: Vec<u64>, items: &[MixItem], sources: &[SourceId]) -> Result<Self> {
        let len = items.first().map(MixItem::len).unwrap_or(0);
        if items.iter().any(|i| i.len() != len) {
            return Err(Error::Shape("batch items differ in length".into()));
        }
        let mut mixture = Vec::with_capacity(items.len() * len);
        let mut stems: BTreeMap<SourceId, Vec<f32>> = sources.iter().map(|&s| (s, Vec::new())).collect();
        for item in items {
            mixture.extend_from_slice(item.mixture.samples());
            for (s, buf) in stems.iter_mut() {
                match item.stem(*s) {
                    Some(w) => buf.extend_from_slice(w.samples()),
                    None => buf.resize(buf.len() + len, 0.0),
                }
            }
        }
        Ok(Self {
            step,
            seeds,
            len,
            mixture,
            stems,
            active: items.iter().map(|i| i.active.clone()).collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BatchSpec {
    pub seed: u64,
    pub batch_size: usize,
    pub len: usize,
    pub sample_rate: u32,
    pub sources: Vec<SourceId>,
    pub mix: MixSpec,
}

pub fn make_batch(pool: &StemPool, spec: &BatchSpec, step: u64) -> Result<Batch> {
    let seeds: Vec<u64> = (0..spec.batch_size).map(|i| item_seed(spec.seed, step, i)).collect();
    let items = seeds
        .iter()
        .map(|&s| make_item(pool, &spec.mix, spec.len, spec.sample_rate, s))
        .collect::<Result<Vec<_>>>()?;
    Batch::from_items(step, seeds, &items, &spec.sources)
}

/// Background producer of batches for steps `start..end` over a bounded queue.
pub struct BatchStream {
    rx: Receiver<Result<Batch>>,
    handle: Option<JoinHandle<()>>,
}

impl BatchStream {
    pub fn spawn(pool: Arc<StemPool>, spec: BatchSpec, start: u64, end: u64, capacity: usize) -> Self {
        let (tx, rx) = sync_channel(capacity.max(1));
        let handle = std::thread::spawn(move || {
            for step in start..end {
                let b = make_batch(&pool, &spec, step);
                let failed = b.is_err();
                if tx.send(b).is_err() || failed {
                    break;
                }
            }
        });
        Self {
            rx,
            handle: Some(handle),
        }
    }

    pub fn next_batch(&self) -> Result<Batch> {
        self.rx
            .recv()
            .map_err(|_| Error::Contract("batch producer stopped early".into()))?
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        // Closing the receiver makes a producer blocked on a full queue return.
        drop(std::mem::replace(&mut self.rx, sync_channel(1).1));
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
