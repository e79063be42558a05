//! Per-source residual vector quantization with an optional shared tail.
//!
//! Every source owns `R − S` quantizer layers; the last `S` layers are
//! shared. Each source's residual runs through its own chain (shared layers
//! included), so every source gets its own codes and its own quantized
//! latent, and the mixture latent is their sum.

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Device, IndexOp, Tensor, D};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::CodecConfig;
use crate::error::{Error, Result};
use crate::mixture::SourceId;
use crate::params::{Init, ParamStore};

/// A latent sequence, `frames × dim` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub values: Vec<f32>,
    pub frames: usize,
    pub dim: usize,
    pub frame_rate: f64,
}

impl LatentTensor {
    pub fn new(values: Vec<f32>, frames: usize, dim: usize, frame_rate: f64) -> Result<Self> {
        if values.len() != frames * dim {
            return Err(Error::Shape(format!(
                "{} values for {frames} × {dim} latent",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite latent value".into()));
        }
        Ok(Self {
            values,
            frames,
            dim,
            frame_rate,
        })
    }

    pub fn zeros(frames: usize, dim: usize, frame_rate: f64) -> Self {
        Self {
            values: vec![0.0; frames * dim],
            frames,
            dim,
            frame_rate,
        }
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// `(1, frames, dim)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.values.clone(), (1, self.frames, self.dim), device)?.to_dtype(dtype)?)
    }

    /// From a `(frames, dim)` or `(1, frames, dim)` tensor.
    pub fn from_tensor(t: &Tensor, frame_rate: f64) -> Result<Self> {
        let t = if t.rank() == 3 { t.i(0)? } else { t.clone() };
        let (frames, dim) = t.dims2()?;
        let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::new(values, frames, dim, frame_rate)
    }

    pub fn max_abs_diff(&self, other: &LatentTensor) -> f32 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Nearest codeword after L2-normalizing query and codewords; ties go to
/// the lowest index. A zero-norm query is compared unnormalized.
pub fn nearest_code(query: &[f64], normalized_codebook: &[f64], raw_codebook: &[f64], d: usize) -> u32 {
    let norm = query.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (q, book): (Vec<f64>, &[f64]) = if norm > 0.0 {
        (query.iter().map(|v| v / norm).collect(), normalized_codebook)
    } else {
        (query.to_vec(), raw_codebook)
    };
    let mut best = 0u32;
    let mut best_dist = f64::INFINITY;
    for (k, c) in book.chunks(d).enumerate() {
        let dist: f64 = q.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best_dist {
            best_dist = dist;
            best = k as u32;
        }
    }
    best
}

pub fn l2_normalize_rows(book: &[f64], d: usize) -> Vec<f64> {
    book.chunks(d)
        .flat_map(|row| {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(move |v| if n > 0.0 { v / n } else { 0.0 })
        })
        .collect()
}

/// One quantizer layer: project `D → d`, look up the codebook, project back.
#[derive(Debug, Clone)]
pub struct VqLayer {
    name: String,
    down_w: Tensor,
    down_b: Tensor,
    up_w: Tensor,
    up_b: Tensor,
    codebook: Tensor,
    code_dim: usize,
}

/// Output of a layer over a `(batch, frames, D)` residual.
#[derive(Debug, Clone)]
pub struct LayerOut {
    /// Up-projected quantized residual, `(batch, frames, D)`.
    pub quantized: Tensor,
    /// `batch × frames` codes, item-major.
    pub codes: Vec<u32>,
    /// Down-projected residuals (`batch × frames × d`), detached.
    pub projected: Vec<f64>,
    /// Per-item mean squared distance used by the codebook/commitment terms, `(batch,)`.
    pub codebook_loss: Tensor,
    pub commitment_loss: Tensor,
}

fn random_orthonormal_rows<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut m: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while m.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| StandardNormal.sample(rng)).collect();
        for u in &m {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            m.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    m.concat()
}

const CODEBOOK_INIT_STD: f64 = 0.1;

impl VqLayer {
    /// Projections start as a random isometry `D → d` and its transpose, so a
    /// fresh layer subtracts the residual's own component along each codeword.
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        latent_dim: usize,
        code_dim: usize,
        codebook_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let proj = random_orthonormal_rows(code_dim, latent_dim, rng);
        let mut transposed = vec![0.0; proj.len()];
        for i in 0..code_dim {
            for j in 0..latent_dim {
                transposed[j * code_dim + i] = proj[i * latent_dim + j];
            }
        }
        let book: Vec<f64> = (0..codebook_size * code_dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                CODEBOOK_INIT_STD * v
            })
            .collect();
        Ok(Self {
            name: name.to_string(),
            down_w: ps.create(&format!("{name}.down.weight"), (code_dim, latent_dim), Init::Values(proj), rng)?,
            down_b: ps.create(&format!("{name}.down.bias"), code_dim, Init::Zeros, rng)?,
            up_w: ps.create(&format!("{name}.up.weight"), (latent_dim, code_dim), Init::Values(transposed), rng)?,
            up_b: ps.create(&format!("{name}.up.bias"), latent_dim, Init::Zeros, rng)?,
            codebook: ps.create(&format!("{name}.codebook"), (codebook_size, code_dim), Init::Values(book), rng)?,
            code_dim,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn codebook_param_name(&self) -> String {
        format!("{}.codebook", self.name)
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.dim(0).unwrap_or(0)
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    pub fn codebook_values(&self) -> Result<Vec<f64>> {
        Ok(self.codebook.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
    }

    /// `(…, D)` → `(…, d)`.
    pub fn project_down(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.down_w.t()?)?.broadcast_add(&self.down_b)?)
    }

    /// `(…, d)` → `(…, D)`.
    pub fn project_up(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.up_w.t()?)?.broadcast_add(&self.up_b)?)
    }

    pub fn lookup_codes(&self, projected: &[f64]) -> Result<Vec<u32>> {
        let raw = self.codebook_values()?;
        let normalized = l2_normalize_rows(&raw, self.code_dim);
        Ok(projected
            .chunks(self.code_dim)
            .map(|q| nearest_code(q, &normalized, &raw, self.code_dim))
            .collect())
    }

    /// Codewords for `codes`, `(n, d)`.
    pub fn codewords(&self, codes: &[u32]) -> Result<Tensor> {
        let idx = Tensor::from_slice(codes, codes.len(), self.codebook.device())?;
        Ok(self.codebook.index_select(&idx, 0)?)
    }

    /// Quantizes a `(batch, frames, D)` residual. In training mode the
    /// quantization is bypassed on the backward path (straight-through).
    pub fn forward(&self, residual: &Tensor, train: bool) -> Result<LayerOut> {
        let (b, f, _) = residual.dims3()?;
        let z_e = self.project_down(residual)?;
        let projected: Vec<f64> = z_e.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let codes = self.lookup_codes(&projected)?;
        let z_q = self.codewords(&codes)?.reshape((b, f, self.code_dim))?;
        let per_item = |t: Tensor| -> Result<Tensor> { Ok(t.sqr()?.mean(D::Minus1)?.mean(D::Minus1)?) };
        let commitment_loss = per_item((&z_e - z_q.detach())?)?;
        let codebook_loss = per_item((&z_q - z_e.detach())?)?;
        let z = if train {
            (&z_e + (&z_q - &z_e)?.detach())?
        } else {
            z_q
        };
        Ok(LayerOut {
            quantized: self.project_up(&z)?,
            codes,
            projected,
            codebook_loss,
            commitment_loss,
        })
    }
}

/// Result of running a chain of layers over a `(batch, frames, D)` latent.
#[derive(Debug, Clone)]
pub struct RvqOut {
    pub zq: Tensor,
    /// Per layer, `batch × frames` codes.
    pub codes: Vec<Vec<u32>>,
    /// Per layer, detached projected residuals.
    pub projected: Vec<Vec<f64>>,
    /// Per item, `‖z − Σ_{r≤i} ẑ_r‖²` for i = 0..=R.
    pub residual_energies: Vec<Vec<f64>>,
    /// Per item, summed over layers.
    pub codebook_loss: Tensor,
    pub commitment_loss: Tensor,
}

fn per_item_energy(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?
        .sqr()?
        .sum(D::Minus1)?
        .sum(D::Minus1)?
        .to_vec1()?)
}

/// Residual recursion: layer i quantizes what layers 1..i−1 left over.
pub fn rvq_apply(layers: &[&VqLayer], z: &Tensor, train: bool) -> Result<RvqOut> {
    if layers.is_empty() {
        return Err(Error::config("codec.n_layers", "quantizer needs at least one layer"));
    }
    let b = z.dim(0)?;
    let mut residual = z.clone();
    let mut zq: Option<Tensor> = None;
    let mut codes = Vec::with_capacity(layers.len());
    let mut projected = Vec::with_capacity(layers.len());
    let mut energies: Vec<Vec<f64>> = vec![Vec::with_capacity(layers.len() + 1); b];
    let mut codebook_loss: Option<Tensor> = None;
    let mut commitment_loss: Option<Tensor> = None;
    for (item, e) in energies.iter_mut().zip(per_item_energy(z)?) {
        item.push(e);
    }
    for layer in layers {
        let out = layer.forward(&residual, train)?;
        residual = (&residual - &out.quantized)?;
        for (item, e) in energies.iter_mut().zip(per_item_energy(&residual)?) {
            item.push(e);
        }
        zq = Some(match zq {
            None => out.quantized,
            Some(acc) => (acc + out.quantized)?,
        });
        codebook_loss = Some(match codebook_loss {
            None => out.codebook_loss,
            Some(acc) => (acc + out.codebook_loss)?,
        });
        commitment_loss = Some(match commitment_loss {
            None => out.commitment_loss,
            Some(acc) => (acc + out.commitment_loss)?,
        });
        codes.push(out.codes);
        projected.push(out.projected);
    }
    Ok(RvqOut {
        zq: zq.expect("at least one layer"),
        codes,
        projected,
        residual_energies: energies,
        codebook_loss: codebook_loss.expect("at least one layer"),
        commitment_loss: commitment_loss.expect("at least one layer"),
    })
}

/// Code indices for a set of sources: `[source][layer][frame]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeGrid {
    pub sources: Vec<SourceId>,
    pub n_layers: usize,
    pub n_frames: usize,
    pub codes: Vec<u32>,
}

impl CodeGrid {
    pub fn new(sources: Vec<SourceId>, n_layers: usize, n_frames: usize, codes: Vec<u32>) -> Result<Self> {
        if codes.len() != sources.len() * n_layers * n_frames {
            return Err(Error::Shape(format!(
                "{} codes for {} sources × {n_layers} layers × {n_frames} frames",
                codes.len(),
                sources.len()
            )));
        }
        Ok(Self {
            sources,
            n_layers,
            n_frames,
            codes,
        })
    }

    fn source_pos(&self, s: SourceId) -> Option<usize> {
        self.sources.iter().position(|&x| x == s)
    }

    pub fn get(&self, s: SourceId, layer: usize, frame: usize) -> Option<u32> {
        let si = self.source_pos(s)?;
        self.codes
            .get((si * self.n_layers + layer) * self.n_frames + frame)
            .copied()
    }

    pub fn layer_codes(&self, s: SourceId, layer: usize) -> Option<&[u32]> {
        let si = self.source_pos(s)?;
        let start = (si * self.n_layers + layer) * self.n_frames;
        Some(&self.codes[start..start + self.n_frames])
    }

    pub fn check_range(&self, codebook_bits: u32) -> Result<()> {
        let limit = 1u64 << codebook_bits;
        if let Some((i, c)) = self.codes.iter().enumerate().find(|(_, &c)| c as u64 >= limit) {
            return Err(Error::format(0, format!("code {c} at position {i} exceeds {limit} entries")));
        }
        Ok(())
    }
}

/// Quantized latents of one item.
#[derive(Debug, Clone)]
pub struct QuantizeOut {
    pub zq_per_source: BTreeMap<SourceId, LatentTensor>,
    pub zq_mix: LatentTensor,
    pub codes: CodeGrid,
    pub codebook_loss: f64,
    pub commitment_loss: f64,
    pub residual_energies: BTreeMap<SourceId, Vec<f64>>,
}

/// Source-specific quantizer chains plus the shared tail.
#[derive(Debug, Clone)]
pub struct MultiRvq {
    cfg: CodecConfig,
    per_source: BTreeMap<SourceId, Vec<VqLayer>>,
    shared_tail: Vec<VqLayer>,
}

impl MultiRvq {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, cfg: &CodecConfig, rng: &mut R) -> Result<Self> {
        let mut per_source = BTreeMap::new();
        for &s in &cfg.sources {
            let layers = (0..cfg.source_layers())
                .map(|i| {
                    VqLayer::new(ps, &format!("rvq.{s}.{i}"), cfg.latent_dim, cfg.code_dim, cfg.codebook_size(), rng)
                })
                .collect::<Result<Vec<_>>>()?;
            per_source.insert(s, layers);
        }
        let shared_tail = (cfg.source_layers()..cfg.n_layers)
            .map(|i| {
                VqLayer::new(ps, &format!("rvq.shared.{i}"), cfg.latent_dim, cfg.code_dim, cfg.codebook_size(), rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            per_source,
            shared_tail,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn shared_tail(&self) -> &[VqLayer] {
        &self.shared_tail
    }

    pub fn source_layers(&self, s: SourceId) -> Option<&[VqLayer]> {
        self.per_source.get(&s).map(Vec::as_slice)
    }

    /// Full chain for `s`: its own layers followed by the shared tail.
    pub fn chain(&self, s: SourceId) -> Result<Vec<&VqLayer>> {
        let own = self
            .per_source
            .get(&s)
            .ok_or_else(|| Error::config("sources", format!("source `{s}` is not configured")))?;
        Ok(own.iter().chain(&self.shared_tail).collect())
    }

    /// Every distinct layer, in parameter order.
    pub fn all_layers(&self) -> Vec<&VqLayer> {
        self.per_source
            .values()
            .flatten()
            .chain(&self.shared_tail)
            .collect()
    }

    /// Runs every configured source over a `(batch, frames, D)` latent.
    pub fn forward_batch(&self, z: &Tensor, train: bool) -> Result<BTreeMap<SourceId, RvqOut>> {
        self.cfg
            .sources
            .iter()
            .map(|&s| Ok((s, rvq_apply(&self.chain(s)?, z, train)?)))
            .collect()
    }

    fn check_active(&self, active: &BTreeSet<SourceId>) -> Result<()> {
        if active.is_empty() {
            return Err(Error::config("sources", "at least one source must be active"));
        }
        if let Some(s) = active.iter().find(|s| !self.cfg.sources.contains(s)) {
            return Err(Error::config("sources", format!("source `{s}` is not configured")));
        }
        Ok(())
    }

    /// Quantizes one latent through every active source path.
    pub fn quantize_all(&self, z: &LatentTensor, active: &BTreeSet<SourceId>) -> Result<QuantizeOut> {
        self.check_active(active)?;
        let dtype = self.shared_or_first_dtype();
        let device = self.device();
        let zt = z.to_tensor(dtype, &device)?;
        let mut zq_per_source = BTreeMap::new();
        let mut codes = Vec::new();
        let mut sources = Vec::new();
        let mut codebook_loss = 0.0;
        let mut commitment_loss = 0.0;
        let mut residual_energies = BTreeMap::new();
        let mut mix: Option<Tensor> = None;
        for &s in self.cfg.sources.iter().filter(|s| active.contains(s)) {
            let out = rvq_apply(&self.chain(s)?, &zt, false)?;
            for layer in &out.codes {
                codes.extend_from_slice(layer);
            }
            sources.push(s);
            codebook_loss += out.codebook_loss.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
            commitment_loss += out.commitment_loss.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
            residual_energies.insert(s, out.residual_energies[0].clone());
            mix = Some(match mix {
                None => out.zq.clone(),
                Some(acc) => (acc + &out.zq)?,
            });
            zq_per_source.insert(s, LatentTensor::from_tensor(&out.zq, z.frame_rate)?);
        }
        let zq_mix = LatentTensor::from_tensor(&mix.expect("non-empty active set"), z.frame_rate)?;
        Ok(QuantizeOut {
            zq_per_source,
            zq_mix,
            codes: CodeGrid::new(sources, self.cfg.n_layers, z.frames, codes)?,
            codebook_loss,
            commitment_loss,
            residual_energies,
        })
    }

    /// Rebuilds the quantized latent of the requested sources from codes alone.
    pub fn decode_from_codes(&self, codes: &CodeGrid, sources: &BTreeSet<SourceId>) -> Result<LatentTensor> {
        if sources.is_empty() {
            return Err(Error::config("sources", "no source requested"));
        }
        if codes.n_layers != self.cfg.n_layers {
            return Err(Error::config(
                "codec.n_layers",
                format!("grid has {} layers, model has {}", codes.n_layers, self.cfg.n_layers),
            ));
        }
        codes.check_range(self.cfg.codebook_bits)?;
        let mut mix: Option<Tensor> = None;
        for &s in self.cfg.sources.iter().filter(|s| sources.contains(s)) {
            if !codes.sources.contains(&s) {
                return Err(Error::config("sources", format!("bitstream carries no codes for `{s}`")));
            }
            let mut acc: Option<Tensor> = None;
            for (layer_idx, layer) in self.chain(s)?.into_iter().enumerate() {
                let c = codes.layer_codes(s, layer_idx).expect("checked");
                let q = layer.project_up(&layer.codewords(c)?.unsqueeze(0)?)?;
                acc = Some(match acc {
                    None => q,
                    Some(a) => (a + q)?,
                });
            }
            let acc = acc.expect("at least one layer");
            mix = Some(match mix {
                None => acc,
                Some(m) => (m + acc)?,
            });
        }
        if let Some(s) = sources.iter().find(|s| !self.cfg.sources.contains(s)) {
            return Err(Error::config("sources", format!("source `{s}` is not configured")));
        }
        LatentTensor::from_tensor(&mix.expect("non-empty"), self.cfg.frame_rate())
    }

    fn first_layer(&self) -> &VqLayer {
        self.per_source
            .values()
            .flatten()
            .next()
            .or_else(|| self.shared_tail.first())
            .expect("at least one layer")
    }

    fn shared_or_first_dtype(&self) -> DType {
        self.first_layer().codebook.dtype()
    }

    fn device(&self) -> Device {
        self.first_layer().codebook.device().clone()
    }
}
