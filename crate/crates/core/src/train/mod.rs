//! The optimization loop: alternating discriminator and generator updates.

pub mod checkpoint;
pub mod data;
pub mod optim;
pub mod shuffle;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::disc::Discriminators;
use crate::error::{Error, Result};
use crate::losses::{gan_losses, total_generator_loss, DiscOutputs, MultiScaleMel, Role, TermLosses};
use crate::mixture::SourceId;
use crate::model::SdCodec;
use crate::rvq::RvqOut;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{make_batch, Batch, BatchSpec, BatchStream, StemPool};
pub use optim::{clipped_grads, lr_at, Adam};
pub use shuffle::{draw_permutations, shuffle_latents};

/// Scalars logged for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    #[serde(flatten)]
    pub values: BTreeMap<String, f64>,
}

impl StepMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }
}

/// Everything a training run owns.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: SdCodec,
    pub disc: Discriminators,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Completed steps.
    pub step: u64,
    pub rng: ChaCha8Rng,
    /// Per quantizer layer, the last step each code was selected.
    pub last_used: BTreeMap<String, Vec<u64>>,
    mel: MultiScaleMel,
}

fn derived_seed(seed: u64, salt: u64) -> u64 {
    data::splitmix64(seed ^ salt.wrapping_mul(0xA076_1D64_78BD_642F))
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Self::with_dtype(cfg, DType::F32)
    }

    pub fn with_dtype(cfg: &RunConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let device = Device::Cpu;
        let seed = cfg.train.seed;
        let model = SdCodec::new(&cfg.codec, derived_seed(seed, 1), dtype, &device)?;
        let disc = Discriminators::new(&cfg.disc, derived_seed(seed, 2), dtype, &device)?;
        let opt_g = Adam::new(model.params(), cfg.train.beta1, cfg.train.beta2)?;
        let opt_d = Adam::new(disc.params(), cfg.train.beta1, cfg.train.beta2)?;
        let last_used = model
            .rvq()
            .all_layers()
            .iter()
            .map(|l| (l.name().to_string(), vec![0; l.codebook_size()]))
            .collect();
        let mel = MultiScaleMel::new(cfg.codec.sample_rate, &cfg.losses.mel_scales, dtype, &device)?;
        Ok(Self {
            cfg: cfg.clone(),
            model,
            disc,
            opt_g,
            opt_d,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(derived_seed(seed, 3)),
            last_used,
            mel,
        })
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            seed: self.cfg.train.seed,
            batch_size: self.cfg.train.batch_size,
            len: self.cfg.train.segment_samples(self.cfg.codec.sample_rate),
            sample_rate: self.cfg.codec.sample_rate,
            sources: self.cfg.codec.sources.clone(),
            mix: self.cfg.mix.clone(),
        }
    }

    fn signal(&self, data: &[f32], b: usize, t: usize) -> Result<Tensor> {
        Ok(Tensor::from_slice(data, (b, t), self.model.device())?.to_dtype(self.model.dtype())?)
    }

    /// One discriminator update followed by one generator update.
    pub fn train_step(&mut self, batch: &Batch) -> Result<StepMetrics> {
        if batch.step != self.step {
            return Err(Error::Contract(format!(
                "batch for step {} fed at step {}",
                batch.step, self.step
            )));
        }
        match self.step_inner(batch) {
            Err(Error::Numeric(msg)) => Err(Error::Numeric(format!(
                "{msg} at step {} (item seeds {:?})",
                self.step + 1,
                batch.seeds
            ))),
            other => other,
        }
    }

    fn step_inner(&mut self, batch: &Batch) -> Result<StepMetrics> {
        let iteration = self.step + 1;
        let lr = lr_at(iteration, &self.cfg.train);
        let b = batch.size();
        let t = batch.len;
        let device = self.model.device().clone();
        let dtype = self.model.dtype();
        let sources = self.cfg.codec.sources.clone();
        let x_mix = self.signal(&batch.mixture, b, t)?;
        let mut stems = BTreeMap::new();
        for &s in &sources {
            let data = batch
                .stems
                .get(&s)
                .ok_or_else(|| Error::Contract(format!("batch has no `{s}` stems")))?;
            stems.insert(s, self.signal(data, b, t)?);
        }
        let mut active_idx: BTreeMap<SourceId, Vec<u32>> = BTreeMap::new();
        let mut masks = BTreeMap::new();
        for &s in &sources {
            let mask: Vec<f32> = batch.active.iter().map(|a| if a.contains(&s) { 1.0 } else { 0.0 }).collect();
            active_idx.insert(
                s,
                (0..b as u32).filter(|&i| batch.active[i as usize].contains(&s)).collect(),
            );
            masks.insert(s, Tensor::from_vec(mask, b, &device)?.to_dtype(dtype)?);
        }

        let z = self.model.encode_batch(&x_mix)?;
        let outs = self.model.rvq().forward_batch(&z, true)?;
        let mut masked = BTreeMap::new();
        for &s in &sources {
            let m = masks[&s].reshape((b, 1, 1))?;
            masked.insert(s, outs[&s].zq.broadcast_mul(&m)?);
        }
        let shuffled = b > 1 && self.rng.random::<f64>() < self.cfg.train.shuffle_latent_prob;
        let (zq_mix, mix_target) = if shuffled {
            let perms = draw_permutations(&sources, b, &mut self.rng);
            shuffle_latents(&masked, &stems, &perms)?
        } else {
            let mut it = sources.iter();
            let first = masked[it.next().expect("validated non-empty")].clone();
            (it.try_fold(first, |acc, s| acc + &masked[s])?, x_mix.clone())
        };

        // Reconstructions that exist in this batch, with their share of the batch.
        let mut recon: Vec<(Role, Tensor, Tensor, f64)> = Vec::new();
        recon.push((Role::Mix, self.model.decode_batch(&zq_mix)?, mix_target, 1.0));
        for &s in &sources {
            let idx = &active_idx[&s];
            if idx.is_empty() {
                continue;
            }
            let sel = Tensor::from_slice(idx, idx.len(), &device)?;
            let y = self.model.decode_batch(&outs[&s].zq.index_select(&sel, 0)?)?;
            let target = stems[&s].index_select(&sel, 0)?;
            recon.push((Role::Source(s), y, target, idx.len() as f64 / b as f64));
        }

        let mut values = BTreeMap::new();

        // Discriminator update on detached reconstructions.
        let mut d_total: Option<Tensor> = None;
        for (_, y, target, frac) in &recon {
            let real = self.disc.forward(target)?;
            let fake = self.disc.forward(&y.detach())?;
            let d = gan_losses(&real, &fake)?.d_loss.affine(*frac, 0.0)?;
            d_total = Some(match d_total {
                None => d,
                Some(a) => (a + d)?,
            });
        }
        let d_total = d_total.expect("mix reconstruction present");
        let d_value = d_total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !d_value.is_finite() {
            return Err(Error::Numeric(format!("discriminator loss is {d_value}")));
        }
        let d_grads = d_total.backward()?;
        let (d_grads, d_norm) = clipped_grads(self.disc.params(), &d_grads, self.cfg.train.grad_clip)?;
        self.opt_d.apply(self.disc.params(), &d_grads, lr)?;
        values.insert("d.loss".to_string(), d_value);
        values.insert("grad_norm.d".to_string(), d_norm);

        // Generator update against the refreshed discriminator.
        let mut terms = BTreeMap::new();
        let mut mel_sum = 0.0;
        for (role, y, target, frac) in &recon {
            let real = detach_outputs(&self.disc.forward(target)?);
            let fake = self.disc.forward(y)?;
            let gan = gan_losses(&real, &fake)?;
            let mel = self.mel.forward(y, target)?;
            mel_sum += frac * mel.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            let (codebook, commitment) = match role {
                Role::Mix => (None, None),
                Role::Source(s) => {
                    let n = active_idx[s].len() as f64;
                    let out = &outs[s];
                    let cb = (out.codebook_loss.broadcast_mul(&masks[s])?.sum_all()? / n)?;
                    let cm = (out.commitment_loss.broadcast_mul(&masks[s])?.sum_all()? / n)?;
                    (Some(cb), Some(cm))
                }
            };
            terms.insert(
                *role,
                TermLosses {
                    mel,
                    feature_match: gan.feature_match,
                    adversarial: gan.g_adv,
                    codebook,
                    commitment,
                    batch_fraction: *frac,
                },
            );
        }
        let required: BTreeSet<SourceId> = batch.active.iter().flatten().copied().collect();
        let (g_total, breakdown) = total_generator_loss(&terms, &required, &self.cfg.losses.weights)?;
        let g_grads = g_total.backward()?;
        let (g_grads, g_norm) = clipped_grads(self.model.params(), &g_grads, self.cfg.train.grad_clip)?;
        self.opt_g.apply(self.model.params(), &g_grads, lr)?;
        for (k, v) in breakdown {
            values.insert(format!("g.{k}"), v);
        }
        values.insert("g.mel".to_string(), mel_sum);
        values.insert("grad_norm.g".to_string(), g_norm);
        values.insert("lr".to_string(), lr);
        values.insert("shuffled".to_string(), if shuffled { 1.0 } else { 0.0 });

        self.record_quantizer_stats(&outs, &active_idx, iteration, &mut values)?;
        let reseeded = self.reseed_dead_codes(&outs, &active_idx, iteration)?;
        values.insert("rvq.reseeded".to_string(), reseeded as f64);

        self.step = iteration;
        Ok(StepMetrics {
            step: iteration,
            values,
        })
    }

    /// Residual energies and code-usage entropy per source and layer, over
    /// the items where the source is active; marks used codes.
    fn record_quantizer_stats(
        &mut self,
        outs: &BTreeMap<SourceId, RvqOut>,
        active_idx: &BTreeMap<SourceId, Vec<u32>>,
        iteration: u64,
        values: &mut BTreeMap<String, f64>,
    ) -> Result<()> {
        let frames = outs
            .values()
            .next()
            .map(|o| o.codes[0].len())
            .unwrap_or(0)
            / self.cfg.train.batch_size.max(1);
        for (s, out) in outs {
            let idx = &active_idx[s];
            if idx.is_empty() {
                continue;
            }
            let chain = self.model.rvq().chain(*s)?;
            for i in 0..=chain.len() {
                let mean = idx.iter().map(|&b| out.residual_energies[b as usize][i]).sum::<f64>() / idx.len() as f64;
                values.insert(format!("rvq.{s}.energy{i}"), mean);
            }
            for (l, layer) in chain.iter().enumerate() {
                let mut hist = vec![0usize; layer.codebook_size()];
                let used = self.last_used.get_mut(layer.name()).expect("tracked layer");
                for &b in idx {
                    for &c in &out.codes[l][b as usize * frames..(b as usize + 1) * frames] {
                        hist[c as usize] += 1;
                        used[c as usize] = iteration;
                    }
                }
                let total = hist.iter().sum::<usize>() as f64;
                let entropy = -hist
                    .iter()
                    .filter(|&&h| h > 0)
                    .map(|&h| {
                        let p = h as f64 / total;
                        p * p.log2()
                    })
                    .sum::<f64>();
                values.insert(format!("rvq.{s}.entropy{l}"), entropy);
            }
        }
        Ok(())
    }

    /// Codes unused for `dead_code_steps` steps are moved onto projected
    /// residuals drawn from this batch.
    fn reseed_dead_codes(
        &mut self,
        outs: &BTreeMap<SourceId, RvqOut>,
        active_idx: &BTreeMap<SourceId, Vec<u32>>,
        iteration: u64,
    ) -> Result<usize> {
        let d = self.cfg.codec.code_dim;
        let b = self.cfg.train.batch_size.max(1);
        let limit = self.cfg.train.dead_code_steps;
        let mut total = 0;
        // Candidate residuals per layer name, from every source routed through it.
        let mut candidates: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (s, out) in outs {
            let idx = &active_idx[s];
            for (l, layer) in self.model.rvq().chain(*s)?.into_iter().enumerate() {
                let proj = &out.projected[l];
                let per_item = proj.len() / b;
                let entry = candidates.entry(layer.name().to_string()).or_default();
                for &i in idx {
                    entry.extend_from_slice(&proj[i as usize * per_item..(i as usize + 1) * per_item]);
                }
            }
        }
        for layer in self.model.rvq().all_layers() {
            let used = self.last_used.get_mut(layer.name()).expect("tracked layer");
            let dead: Vec<usize> = used
                .iter()
                .enumerate()
                .filter(|(_, &u)| iteration.saturating_sub(u) >= limit)
                .map(|(k, _)| k)
                .collect();
            let pool = match candidates.get(layer.name()) {
                Some(p) if !dead.is_empty() && !p.is_empty() => p,
                _ => continue,
            };
            let n = pool.len() / d;
            let mut book = layer.codebook_values()?;
            for &k in &dead {
                let pick = self.rng.random_range(0..n);
                book[k * d..(k + 1) * d].copy_from_slice(&pool[pick * d..(pick + 1) * d]);
                used[k] = iteration;
            }
            let var = self
                .model
                .params()
                .get(&layer.codebook_param_name())
                .expect("codebook parameter");
            let t = Tensor::from_vec(book, var.dims(), var.device())?.to_dtype(var.dtype())?;
            var.set(&t)?;
            total += dead.len();
        }
        Ok(total)
    }
}

fn detach_outputs(o: &DiscOutputs) -> DiscOutputs {
    DiscOutputs {
        logits: o.logits.iter().map(Tensor::detach).collect(),
        features: o
            .features
            .iter()
            .map(|f| f.iter().map(Tensor::detach).collect())
            .collect(),
    }
}

/// Run directory: `config.snapshot`, `checkpoints/`, `metrics.log`.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub const CONFIG: &'static str = "config.snapshot";
    pub const METRICS: &'static str = "metrics.log";
    pub const CHECKPOINTS: &'static str = "checkpoints";

    /// Creates the layout and writes the config snapshot.
    pub fn create(root: impl AsRef<Path>, cfg: &RunConfig) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let ckpt = root.join(Self::CHECKPOINTS);
        std::fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        let snap = root.join(Self::CONFIG);
        std::fs::write(&snap, cfg.to_toml_string()).map_err(|e| Error::io(&snap, e))?;
        Ok(Self { root })
    }

    pub fn open(root: impl AsRef<Path>) -> Self {
        Self {
            root: root.as_ref().to_path_buf(),
        }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join(Self::METRICS)
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.root.join(Self::CHECKPOINTS).join(format!("step{step:08}.sdck"))
    }

    /// Most recent checkpoint by step number.
    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        let dir = self.root.join(Self::CHECKPOINTS);
        let rd = match std::fs::read_dir(&dir) {
            Ok(rd) => rd,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&dir, e)),
        };
        let mut best: Option<(u64, PathBuf)> = None;
        for entry in rd {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let step = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("step"))
                .and_then(|n| n.strip_suffix(".sdck"))
                .and_then(|n| n.parse::<u64>().ok());
            if let Some(step) = step {
                if best.as_ref().is_none_or(|(b, _)| step > *b) {
                    best = Some((step, path));
                }
            }
        }
        Ok(best.map(|(_, p)| p))
    }

    /// Keeps only the metric lines of steps ≤ `step` (used when resuming).
    pub fn truncate_metrics(&self, step: u64) -> Result<()> {
        let path = self.metrics_path();
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
            Err(e) => return Err(Error::io(&path, e)),
        };
        let mut kept = String::new();
        for line in text.lines() {
            let m: StepMetrics =
                serde_json::from_str(line).map_err(|e| Error::format(0, format!("metrics line: {e}")))?;
            if m.step <= step {
                kept.push_str(line);
                kept.push('\n');
            }
        }
        std::fs::write(&path, kept).map_err(|e| Error::io(&path, e))
    }

    pub fn append_metrics(&self, m: &StepMetrics) -> Result<()> {
        let path = self.metrics_path();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", m.to_json_line()).map_err(|e| Error::io(&path, e))
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<StepMetrics>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(0, format!("line {}: {e}", i + 1))))
        .collect()
}

/// Trains until `end_step`, feeding batches from a background producer.
/// With a run directory, metrics are appended and checkpoints written every
/// `checkpoint_every` steps and at the end.
pub fn train_until(
    trainer: &mut Trainer,
    pool: Arc<StemPool>,
    end_step: u64,
    run: Option<&RunDir>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    let mut out = Vec::new();
    if trainer.step >= end_step {
        return Ok(out);
    }
    let stream = BatchStream::spawn(pool, trainer.batch_spec(), trainer.step, end_step, 4);
    while trainer.step < end_step {
        let batch = stream.next_batch()?;
        let m = trainer.train_step(&batch)?;
        if let Some(run) = run {
            run.append_metrics(&m)?;
            if trainer.step % trainer.cfg.train.checkpoint_every == 0 || trainer.step == end_step {
                save_checkpoint(trainer, run.checkpoint_path(trainer.step))?;
            }
        }
        on_step(&m);
        out.push(m);
    }
    Ok(out)
}
