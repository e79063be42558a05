//! Command implementations behind the `sdcodec` binary.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sdcodec::config::RunConfig;
use sdcodec::dsp::wav::{read_wav, write_wav, WavFormat};
use sdcodec::eval::{evaluate, segments_from_manifest, separate_with_mask, EvalOptions, EvalReport};
use sdcodec::manifest::{Manifest, ManifestEntry};
use sdcodec::mixture::MixSpec;
use sdcodec::synth::synth_toy_source;
use sdcodec::train::checkpoint::{load_checkpoint, load_checkpoint_expecting};
use sdcodec::train::data::{item_seed, StemPool};
use sdcodec::train::{train_until, RunDir};
use sdcodec::{Error, Result, SdCodec, SourceId};

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Parses `all` or a comma-separated list of source ids.
pub fn parse_sources(text: &str) -> Result<Option<BTreeSet<SourceId>>> {
    if text.trim() == "all" {
        return Ok(None);
    }
    let set = text
        .split(',')
        .map(|s| s.trim().parse::<SourceId>())
        .collect::<Result<BTreeSet<_>>>()
        .map_err(|e| Error::config("--sources", e.to_string()))?;
    if set.is_empty() {
        return Err(Error::config("--sources", "no sources given"));
    }
    Ok(Some(set))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `n_items` stems per source plus `manifest.tsv`; returns the manifest path.
pub fn synth_data(out_dir: &Path, n_items: usize, seed: u64, duration_s: f64) -> Result<PathBuf> {
    if !(duration_s >= 0.5) {
        return Err(Error::config("--duration", "toy sources need at least 0.5 s"));
    }
    create_dir(out_dir)?;
    let mut manifest = Manifest::default();
    for s in SourceId::ALL {
        if n_items > 0 {
            create_dir(&out_dir.join(s.as_str()))?;
        }
        for i in 0..n_items {
            let mut rng = ChaCha8Rng::seed_from_u64(item_seed(seed, s.index() as u64 + 1, i));
            let w = synth_toy_source(s, duration_s, &mut rng)?;
            let path = out_dir.join(s.as_str()).join(format!("{s}_{i:04}.wav"));
            write_wav(&path, &w, WavFormat::Float32)?;
            manifest.entries.push(ManifestEntry {
                source: s,
                path,
                duration_s: w.duration_s(),
            });
        }
    }
    let path = out_dir.join(MANIFEST_NAME);
    manifest.save(&path)?;
    Ok(path)
}

fn stem_pool(cfg: &RunConfig) -> Result<StemPool> {
    match &cfg.paths.manifest {
        Some(path) => {
            let m = Manifest::load(path)?;
            if m.is_empty() {
                return Err(Error::config("paths.manifest", "manifest lists no stems"));
            }
            StemPool::from_manifest(&m)
        }
        None => Ok(StemPool::Synthetic),
    }
}

/// Trains to `train.total_steps`; returns the run directory.
pub fn train(config: &Path, run_dir: Option<&Path>, resume: bool) -> Result<PathBuf> {
    let cfg = RunConfig::load(config)?;
    let root = run_dir
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.run_dir.clone())
        .ok_or_else(|| Error::config("paths.run_dir", "no run directory (set it or pass --run-dir)"))?;
    let pool = Arc::new(stem_pool(&cfg)?);
    let run = RunDir::open(&root);
    let mut trainer = match run.latest_checkpoint()? {
        Some(path) if resume => {
            let tr = load_checkpoint_expecting(&path, &cfg)?;
            run.truncate_metrics(tr.step)?;
            log::info!("resuming from {} at step {}", path.display(), tr.step);
            tr
        }
        Some(_) => {
            return Err(Error::config(
                "--run-dir",
                format!("{} already holds checkpoints; pass --resume", root.display()),
            ))
        }
        None => {
            let tr = sdcodec::train::Trainer::new(&cfg)?;
            RunDir::create(&root, &cfg)?;
            if run.metrics_path().exists() {
                std::fs::remove_file(run.metrics_path()).map_err(|e| Error::io(run.metrics_path(), e))?;
            }
            tr
        }
    };
    let total = cfg.train.total_steps;
    let every = (total / 100).max(1);
    train_until(&mut trainer, pool, total, Some(&run), |m| {
        if m.step % every == 0 || m.step == total {
            log::info!(
                "step {}/{} g.mel {:.4} d.loss {:.4}",
                m.step,
                total,
                m.get("g.mel").unwrap_or(f64::NAN),
                m.get("d.loss").unwrap_or(f64::NAN)
            );
        }
    })?;
    Ok(root)
}

/// Loads the generator of a checkpoint for inference.
pub fn load_model(checkpoint: &Path) -> Result<SdCodec> {
    Ok(load_checkpoint(checkpoint)?.model)
}

/// Encodes a WAV file into an SDC1 bitstream; returns its size in bytes.
pub fn encode(model: &SdCodec, input: &Path, output: &Path, sources: Option<BTreeSet<SourceId>>) -> Result<u64> {
    let sources = sources.unwrap_or_else(|| model.config().sources.iter().copied().collect());
    let x = read_wav(input)?;
    let bytes = model.encode_to_bitstream(&x, &sources)?;
    std::fs::write(output, &bytes).map_err(|e| Error::io(output, e))?;
    Ok(bytes.len() as u64)
}

/// Decodes the chosen sources of a bitstream file into a WAV file.
pub fn decode(model: &SdCodec, input: &Path, output: &Path, sources: Option<BTreeSet<SourceId>>) -> Result<()> {
    let bytes = std::fs::read(input).map_err(|e| Error::io(input, e))?;
    let y = model.decode_bitstream(&bytes, sources.as_ref())?;
    write_wav(output, &y, WavFormat::Float32)
}

/// Writes `<source>.wav` for every model source; returns their paths.
pub fn separate(model: &SdCodec, input: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let x = read_wav(input)?;
    let sources: BTreeSet<SourceId> = model.config().sources.iter().copied().collect();
    let (_, decoded) = model.resynthesize_each(&x, &sources)?;
    let separated = separate_with_mask(&x, &decoded)?;
    create_dir(out_dir)?;
    separated
        .iter()
        .map(|(s, w)| {
            let path = out_dir.join(format!("{s}.wav"));
            write_wav(&path, w, WavFormat::Float32)?;
            Ok(path)
        })
        .collect()
}

pub struct EvalArgs<'a> {
    pub model: Option<&'a SdCodec>,
    pub manifest: &'a Path,
    pub report: &'a Path,
    pub segment_s: f64,
    pub seed: u64,
}

pub fn eval(args: &EvalArgs) -> Result<EvalReport> {
    let manifest = Manifest::load(args.manifest)?;
    if manifest.is_empty() {
        log::warn!("{} lists no stems; writing an empty report", args.manifest.display());
    }
    let spec = MixSpec::default();
    let segments = segments_from_manifest(&manifest, &spec, args.segment_s, args.seed)?;
    let opts = EvalOptions {
        identity_oracle: args.model.is_none(),
    };
    let report = evaluate(args.model, &segments, &opts)?;
    report.save(args.report)?;
    Ok(report)
}
