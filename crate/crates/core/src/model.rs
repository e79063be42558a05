//! The full codec: encoder, per-source quantizers and decoder.

use std::collections::BTreeSet;

use candle_core::{DType, Device, Module, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bitstream::{pack_bitstream, unpack_bitstream};
use crate::codec::{Decoder, Encoder};
use crate::config::CodecConfig;
use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::mixture::SourceId;
use crate::params::ParamStore;
use crate::rvq::{CodeGrid, LatentTensor, MultiRvq, QuantizeOut};

#[derive(Debug, Clone)]
pub struct SdCodec {
    cfg: CodecConfig,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    rvq: MultiRvq,
}

impl SdCodec {
    pub fn new(cfg: &CodecConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(dtype, device);
        let encoder = Encoder::new(&mut params, cfg, &mut rng)?;
        let decoder = Decoder::new(&mut params, cfg, &mut rng)?;
        let rvq = MultiRvq::new(&mut params, cfg, &mut rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            encoder,
            decoder,
            rvq,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn rvq(&self) -> &MultiRvq {
        &self.rvq
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// `(batch, samples)` → `(batch, frames, D)`; samples must be a multiple of the hop.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        let (_, t) = x.dims2()?;
        let hop = self.cfg.hop_length();
        if t % hop != 0 {
            return Err(Error::Shape(format!("{t} samples is not a multiple of the hop {hop}")));
        }
        let z = self.encoder.forward(&x.unsqueeze(1)?)?;
        Ok(z.transpose(1, 2)?.contiguous()?)
    }

    /// `(batch, frames, D)` → `(batch, frames × hop)`.
    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        let y = self.decoder.forward(&z.transpose(1, 2)?.contiguous()?)?;
        Ok(y.squeeze(1)?)
    }

    /// Decoder output without the final bounding nonlinearity.
    pub fn decode_batch_raw(&self, z: &Tensor) -> Result<Tensor> {
        let y = self.decoder.forward_raw(&z.transpose(1, 2)?.contiguous()?)?;
        Ok(y.squeeze(1)?)
    }

    /// Right-pads `x` with zeros to a whole number of frames.
    pub fn pad_to_frames(&self, x: &Waveform) -> Vec<f32> {
        let hop = self.cfg.hop_length();
        let mut samples = x.samples().to_vec();
        let padded = samples.len().div_ceil(hop).max(1) * hop;
        samples.resize(padded, 0.0);
        samples
    }

    pub fn encode(&self, x: &Waveform) -> Result<LatentTensor> {
        if x.sample_rate() != self.cfg.sample_rate {
            return Err(Error::format(
                0,
                format!("sample rate {} Hz, codec expects {} Hz", x.sample_rate(), self.cfg.sample_rate),
            ));
        }
        if x.samples().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input sample".into()));
        }
        let samples = self.pad_to_frames(x);
        let n = samples.len();
        let t = Tensor::from_vec(samples, (1, n), self.device())?.to_dtype(self.dtype())?;
        let z = self.encode_batch(&t)?;
        LatentTensor::from_tensor(&z, self.cfg.frame_rate())
    }

    pub fn decode(&self, z: &LatentTensor, out_len: usize) -> Result<Waveform> {
        if z.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite latent".into()));
        }
        if z.dim != self.cfg.latent_dim {
            return Err(Error::Shape(format!(
                "latent width {} does not match D = {}",
                z.dim, self.cfg.latent_dim
            )));
        }
        let available = z.frames * self.cfg.hop_length();
        if out_len > available {
            return Err(Error::Shape(format!(
                "{out_len} samples requested from {} frames ({available} samples)",
                z.frames
            )));
        }
        let y = self.decode_batch(&z.to_tensor(self.dtype(), self.device())?)?;
        let mut samples = y.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("decoder produced non-finite samples".into()));
        }
        samples.truncate(out_len);
        Waveform::new(samples, self.cfg.sample_rate)
    }

    pub fn quantize(&self, z: &LatentTensor, active: &BTreeSet<SourceId>) -> Result<QuantizeOut> {
        self.rvq.quantize_all(z, active)
    }

    pub fn decode_from_codes(&self, codes: &CodeGrid, sources: &BTreeSet<SourceId>) -> Result<LatentTensor> {
        self.rvq.decode_from_codes(codes, sources)
    }

    /// Encodes `x`, quantizes through the given source paths and decodes their sum.
    pub fn resynthesize(&self, x: &Waveform, route: &BTreeSet<SourceId>) -> Result<Waveform> {
        let z = self.encode(x)?;
        let q = self.quantize(&z, route)?;
        self.decode(&q.zq_mix, x.len())
    }

    /// Encodes `x` and decodes every source path separately.
    pub fn resynthesize_each(
        &self,
        x: &Waveform,
        sources: &BTreeSet<SourceId>,
    ) -> Result<(Waveform, std::collections::BTreeMap<SourceId, Waveform>)> {
        let z = self.encode(x)?;
        let q = self.quantize(&z, sources)?;
        let mix = self.decode(&q.zq_mix, x.len())?;
        let per_source = q
            .zq_per_source
            .iter()
            .map(|(&s, zs)| Ok((s, self.decode(zs, x.len())?)))
            .collect::<Result<_>>()?;
        Ok((mix, per_source))
    }

    /// Encodes `x` and packs the codes of `sources` into an SDC1 bitstream.
    pub fn encode_to_bitstream(&self, x: &Waveform, sources: &BTreeSet<SourceId>) -> Result<Vec<u8>> {
        let z = self.encode(x)?;
        let q = self.quantize(&z, sources)?;
        pack_bitstream(&q.codes, &self.cfg, x.len())
    }

    /// Decodes the chosen sources of a bitstream; `None` selects every source it carries.
    pub fn decode_bitstream(&self, bytes: &[u8], sources: Option<&BTreeSet<SourceId>>) -> Result<Waveform> {
        let (codes, header) = unpack_bitstream(bytes)?;
        header.check_config(&self.cfg)?;
        let available: BTreeSet<SourceId> = header.sources.iter().copied().collect();
        let sources = sources.unwrap_or(&available);
        if let Some(s) = sources.iter().find(|s| !available.contains(s)) {
            return Err(Error::config("sources", format!("`{s}` is not in the bitstream")));
        }
        let zq = self.decode_from_codes(&codes, sources)?;
        self.decode(&zq, header.num_samples as usize)
    }
}
