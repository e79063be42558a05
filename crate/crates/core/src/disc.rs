//! Multi-period waveform discriminator and complex STFT discriminator.

use candle_core::Tensor;
use rand::Rng;

use crate::config::DiscConfig;
use crate::error::{Error, Result};
use crate::losses::DiscOutputs;
use crate::nn::{leaky_relu, Conv1d, Conv2d};
use crate::params::ParamStore;
use crate::tensor_ops::stft;

const SLOPE: f64 = 0.1;

/// Looks at every p-th sample: `(batch, samples)` is folded into `p`
/// interleaved sequences and scored by a strided 1-D stack shared across them.
#[derive(Debug, Clone)]
struct PeriodDisc {
    period: usize,
    convs: Vec<Conv1d>,
    post: Conv1d,
}

impl PeriodDisc {
    fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, period: usize, channels: &[usize], rng: &mut R) -> Result<Self> {
        let mut convs = Vec::with_capacity(channels.len() + 1);
        let mut in_c = 1;
        for (i, &c) in channels.iter().enumerate() {
            convs.push(Conv1d::new(ps, &format!("{name}.conv{i}"), in_c, c, 5, 3, 2, 1, rng)?);
            in_c = c;
        }
        convs.push(Conv1d::same(ps, &format!("{name}.conv{}", channels.len()), in_c, in_c, 5, 1, rng)?);
        let post = Conv1d::same(ps, &format!("{name}.post"), in_c, 1, 3, 1, rng)?;
        Ok(Self { period, convs, post })
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let (b, t) = x.dims2()?;
        let p = self.period;
        let padded = t.div_ceil(p) * p;
        let x = if padded > t { x.pad_with_zeros(1, 0, padded - t)? } else { x.clone() };
        let mut h = x
            .reshape((b, padded / p, p))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * p, 1, padded / p))?;
        let mut features = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            h = leaky_relu(&h.apply(c)?, SLOPE)?;
            features.push(h.clone());
        }
        Ok((h.apply(&self.post)?, features))
    }
}

/// Scores the (real, imaginary) spectrogram at one resolution with a 2-D stack.
#[derive(Debug, Clone)]
struct SpecDisc {
    window: usize,
    convs: Vec<Conv2d>,
    post: Conv2d,
}

impl SpecDisc {
    fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, window: usize, ch: usize, rng: &mut R) -> Result<Self> {
        let convs = vec![
            Conv2d::new(ps, &format!("{name}.conv0"), 2, ch, 3, 2, 1, rng)?,
            Conv2d::new(ps, &format!("{name}.conv1"), ch, ch, 3, 2, 1, rng)?,
            Conv2d::new(ps, &format!("{name}.conv2"), ch, ch, 3, 1, 1, rng)?,
            Conv2d::new(ps, &format!("{name}.conv3"), ch, ch, 3, 1, 1, rng)?,
        ];
        let post = Conv2d::new(ps, &format!("{name}.post"), ch, 1, 3, 1, 1, rng)?;
        Ok(Self { window, convs, post })
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let spec = stft(x, self.window, self.window / 4)?.permute((0, 3, 1, 2))?.contiguous()?;
        let mut h = spec;
        let mut features = Vec::with_capacity(self.convs.len());
        for c in &self.convs {
            h = leaky_relu(&h.apply(c)?, SLOPE)?;
            features.push(h.clone());
        }
        Ok((h.apply(&self.post)?, features))
    }
}

#[derive(Debug, Clone)]
pub struct MultiPeriodDisc {
    subs: Vec<PeriodDisc>,
}

impl MultiPeriodDisc {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, cfg: &DiscConfig, rng: &mut R) -> Result<Self> {
        let subs = cfg
            .periods
            .iter()
            .map(|&p| PeriodDisc::new(ps, &format!("mpd.p{p}"), p, &cfg.mpd_channels, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { subs })
    }

    pub fn forward(&self, x: &Tensor) -> Result<DiscOutputs> {
        let (_, t) = x.dims2()?;
        let needed = self.subs.iter().map(|s| s.period).max().unwrap_or(0);
        if t < needed {
            return Err(Error::InputTooShort { needed, got: t });
        }
        let mut out = DiscOutputs {
            logits: Vec::new(),
            features: Vec::new(),
        };
        for s in &self.subs {
            let (l, f) = s.forward(x)?;
            out.logits.push(l);
            out.features.push(f);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct StftDisc {
    subs: Vec<SpecDisc>,
}

impl StftDisc {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, cfg: &DiscConfig, rng: &mut R) -> Result<Self> {
        let subs = cfg
            .stft_windows
            .iter()
            .map(|&w| SpecDisc::new(ps, &format!("stftd.w{w}"), w, cfg.stft_channels, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { subs })
    }

    pub fn forward(&self, x: &Tensor) -> Result<DiscOutputs> {
        let (_, t) = x.dims2()?;
        let needed = self.subs.iter().map(|s| s.window).max().unwrap_or(0);
        if t < needed {
            return Err(Error::InputTooShort { needed, got: t });
        }
        let mut out = DiscOutputs {
            logits: Vec::new(),
            features: Vec::new(),
        };
        for s in &self.subs {
            let (l, f) = s.forward(x)?;
            out.logits.push(l);
            out.features.push(f);
        }
        Ok(out)
    }
}

/// Both discriminators over one parameter store.
#[derive(Debug, Clone)]
pub struct Discriminators {
    params: ParamStore,
    pub mpd: MultiPeriodDisc,
    pub stft: StftDisc,
}

impl Discriminators {
    pub fn new(cfg: &DiscConfig, seed: u64, dtype: candle_core::DType, device: &candle_core::Device) -> Result<Self> {
        use rand::SeedableRng;
        cfg.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new(dtype, device);
        let mpd = MultiPeriodDisc::new(&mut params, cfg, &mut rng)?;
        let stft = StftDisc::new(&mut params, cfg, &mut rng)?;
        Ok(Self { params, mpd, stft })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// MPD sub-discriminators followed by the STFT ones.
    pub fn forward(&self, x: &Tensor) -> Result<DiscOutputs> {
        let mut out = self.mpd.forward(x)?;
        out.extend(self.stft.forward(x)?);
        Ok(out)
    }
}
