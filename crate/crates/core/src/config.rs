//! Structural and training hyperparameters, presets and the run-config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::{MixSpec, SourceId};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// Latent width D.
    pub latent_dim: usize,
    /// Projected code width d.
    pub code_dim: usize,
    /// Quantizer layers R per source path.
    pub n_layers: usize,
    /// Trailing layers S shared across sources.
    pub shared_tail: usize,
    /// Codebook size is 2^K.
    pub codebook_bits: u32,
    pub strides: Vec<usize>,
    pub encoder_channels: usize,
    pub decoder_channels: usize,
    pub res_dilations: Vec<usize>,
    pub sources: Vec<SourceId>,
    pub sample_rate: u32,
}

impl CodecConfig {
    /// 1024-d latent, 12 layers of 1024 codes, 50 frames/s at 16 kHz.
    pub fn paper() -> Self {
        Self {
            latent_dim: 1024,
            code_dim: 8,
            n_layers: 12,
            shared_tail: 0,
            codebook_bits: 10,
            strides: vec![2, 4, 5, 8],
            encoder_channels: 64,
            decoder_channels: 1536,
            res_dilations: vec![1, 3, 9],
            sources: SourceId::ALL.to_vec(),
            sample_rate: 16_000,
        }
    }

    pub fn toy() -> Self {
        Self {
            latent_dim: 64,
            code_dim: 4,
            n_layers: 4,
            shared_tail: 0,
            codebook_bits: 6,
            strides: vec![2, 4, 8],
            encoder_channels: 8,
            decoder_channels: 64,
            res_dilations: vec![1, 3],
            sources: SourceId::ALL.to_vec(),
            sample_rate: 16_000,
        }
    }

    pub fn hop_length(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop_length() as f64
    }

    pub fn codebook_size(&self) -> usize {
        1usize << self.codebook_bits
    }

    pub fn bits_per_frame_per_source(&self) -> usize {
        self.n_layers * self.codebook_bits as usize
    }

    pub fn source_layers(&self) -> usize {
        self.n_layers - self.shared_tail
    }

    pub fn frames_for(&self, samples: usize) -> usize {
        samples.div_ceil(self.hop_length())
    }

    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("codec.{name}");
        if self.latent_dim == 0 {
            return Err(Error::config(f("latent_dim"), "must be positive"));
        }
        if self.code_dim == 0 || self.code_dim > self.latent_dim {
            return Err(Error::config(f("code_dim"), "must be in 1..=latent_dim"));
        }
        if self.n_layers == 0 {
            return Err(Error::config(f("n_layers"), "must be positive"));
        }
        if self.shared_tail > self.n_layers {
            return Err(Error::config(f("shared_tail"), "must be in 0..=n_layers"));
        }
        if self.codebook_bits == 0 || self.codebook_bits > 16 {
            return Err(Error::config(f("codebook_bits"), "must be in 1..=16"));
        }
        if self.strides.is_empty() || self.strides.iter().any(|&s| s == 0) {
            return Err(Error::config(f("strides"), "must be non-empty and positive"));
        }
        if self.sample_rate == 0 || self.sample_rate as usize % self.hop_length() != 0 {
            return Err(Error::config(
                f("strides"),
                format!(
                    "stride product {} must divide the sample rate {}",
                    self.hop_length(),
                    self.sample_rate
                ),
            ));
        }
        if self.encoder_channels == 0 {
            return Err(Error::config(f("encoder_channels"), "must be positive"));
        }
        if self.decoder_channels >> self.strides.len() == 0 {
            return Err(Error::config(
                f("decoder_channels"),
                "must allow one halving per upsampling stage",
            ));
        }
        if self.sources.is_empty() {
            return Err(Error::config(f("sources"), "must list at least one source"));
        }
        let mut seen = self.sources.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.sources.len() {
            return Err(Error::config(f("sources"), "duplicate source"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub batch_size: usize,
    pub segment_s: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub warmup_steps: u64,
    pub gamma: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Fraction of batches whose latent combinations are shuffled.
    pub shuffle_latent_prob: f64,
    pub grad_clip: f64,
    /// Steps without use after which a code is re-seeded.
    pub dead_code_steps: u64,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            total_steps: 400_000,
            batch_size: 64,
            segment_s: 2.0,
            lr: 1e-4,
            beta1: 0.8,
            beta2: 0.99,
            warmup_steps: 10_000,
            gamma: 0.999996,
            seed: 0,
            checkpoint_every: 10_000,
            shuffle_latent_prob: 0.5,
            grad_clip: 10.0,
            dead_code_steps: 200,
        }
    }

    pub fn toy() -> Self {
        let total_steps = 5000;
        Self {
            total_steps,
            batch_size: 8,
            segment_s: 0.5,
            lr: 1e-3,
            warmup_steps: 200,
            gamma: Self::rescaled_gamma(total_steps),
            checkpoint_every: 500,
            ..Self::paper()
        }
    }

    /// Decay that reaches the full-scale schedule's end ratio after `total_steps`.
    pub fn rescaled_gamma(total_steps: u64) -> f64 {
        0.999996f64.powf(400_000.0 / total_steps as f64)
    }

    pub fn segment_samples(&self, sample_rate: u32) -> usize {
        (self.segment_s * sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("train.{name}");
        if self.total_steps == 0 {
            return Err(Error::config(f("total_steps"), "must be positive"));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::config(f("warmup_steps"), "must be below total_steps"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config(f("gamma"), format!("{} is outside (0, 1]", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(Error::config(f("batch_size"), "must be positive"));
        }
        if !(self.segment_s > 0.0) {
            return Err(Error::config(f("segment_s"), "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(f("lr"), "must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(f(name), "must be in [0, 1)"));
            }
        }
        if !(0.0..=1.0).contains(&self.shuffle_latent_prob) {
            return Err(Error::config(f("shuffle_latent_prob"), "must be in [0, 1]"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config(f("grad_clip"), "must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config(f("checkpoint_every"), "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub mel: f64,
    pub feature_match: f64,
    pub adversarial: f64,
    pub codebook: f64,
    pub commitment: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mel: 15.0,
            feature_match: 2.0,
            adversarial: 1.0,
            codebook: 1.0,
            commitment: 0.25,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            mel: 0.0,
            feature_match: 0.0,
            adversarial: 0.0,
            codebook: 0.0,
            commitment: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("mel", self.mel),
            ("feature_match", self.feature_match),
            ("adversarial", self.adversarial),
            ("codebook", self.codebook),
            ("commitment", self.commitment),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("losses.weights.{name}"), "must be ≥ 0"));
            }
        }
        Ok(())
    }
}

/// Window sizes and mel-bin counts of the multi-scale mel loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelScales {
    pub windows: Vec<usize>,
    pub n_mels: Vec<usize>,
}

impl Default for MelScales {
    fn default() -> Self {
        Self {
            windows: vec![32, 64, 128, 256, 512, 1024, 2048],
            n_mels: vec![5, 10, 20, 40, 80, 160, 320],
        }
    }
}

impl MelScales {
    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() || self.windows.len() != self.n_mels.len() {
            return Err(Error::config(
                "losses.mel_scales",
                "windows and n_mels must be non-empty and of equal length",
            ));
        }
        if self.windows.iter().any(|&w| w < 4 || w % 4 != 0) {
            return Err(Error::config("losses.mel_scales.windows", "must be multiples of 4"));
        }
        if self.n_mels.contains(&0) {
            return Err(Error::config("losses.mel_scales.n_mels", "must be positive"));
        }
        Ok(())
    }

    pub fn max_window(&self) -> usize {
        self.windows.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub mel_scales: MelScales,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            mel_scales: MelScales::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscConfig {
    pub periods: Vec<usize>,
    pub mpd_channels: Vec<usize>,
    pub stft_windows: Vec<usize>,
    pub stft_channels: usize,
}

impl DiscConfig {
    pub fn paper() -> Self {
        Self {
            periods: vec![2, 3, 5, 7, 11],
            mpd_channels: vec![32, 128, 512, 1024],
            stft_windows: vec![2048, 1024, 512],
            stft_channels: 32,
        }
    }

    pub fn toy() -> Self {
        Self {
            mpd_channels: vec![4, 8, 16],
            stft_channels: 8,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.periods.is_empty() || self.periods.contains(&0) {
            return Err(Error::config("disc.periods", "must be non-empty and positive"));
        }
        if self.mpd_channels.is_empty() || self.mpd_channels.contains(&0) {
            return Err(Error::config("disc.mpd_channels", "must be non-empty and positive"));
        }
        if self.stft_windows.is_empty() || self.stft_windows.iter().any(|&w| w < 4 || w % 4 != 0) {
            return Err(Error::config("disc.stft_windows", "must be non-empty multiples of 4"));
        }
        if self.stft_channels == 0 {
            return Err(Error::config("disc.stft_channels", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Toy,
    Paper,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Stem manifest; synthetic toy sources are generated on the fly when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub preset: Preset,
    pub codec: CodecConfig,
    pub train: TrainConfig,
    pub mix: MixSpec,
    pub losses: LossConfig,
    pub disc: DiscConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (codec, train, disc) = match preset {
            Preset::Toy => (CodecConfig::toy(), TrainConfig::toy(), DiscConfig::toy()),
            Preset::Paper => (CodecConfig::paper(), TrainConfig::paper(), DiscConfig::paper()),
        };
        Self {
            version: CONFIG_VERSION,
            preset,
            codec,
            train,
            mix: MixSpec::default(),
            losses: LossConfig::default(),
            disc,
            paths: PathsConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!("unsupported version {} (expected {CONFIG_VERSION})", self.version),
            ));
        }
        self.codec.validate()?;
        self.train.validate()?;
        self.mix.validate()?;
        self.losses.weights.validate()?;
        self.losses.mel_scales.validate()?;
        self.disc.validate()?;
        if self.preset == Preset::Paper {
            let p = CodecConfig::paper();
            let forced = [
                ("latent_dim", self.codec.latent_dim == p.latent_dim),
                ("code_dim", self.codec.code_dim == p.code_dim),
                ("n_layers", self.codec.n_layers == p.n_layers),
                ("codebook_bits", self.codec.codebook_bits == p.codebook_bits),
                ("strides", self.codec.hop_length() == p.hop_length()),
            ];
            if let Some((name, _)) = forced.iter().find(|(_, ok)| !ok) {
                return Err(Error::config(
                    format!("codec.{name}"),
                    "fixed by the paper preset",
                ));
            }
        }
        let segment = self.train.segment_samples(self.codec.sample_rate);
        let needed = self
            .losses
            .mel_scales
            .max_window()
            .max(self.disc.stft_windows.iter().copied().max().unwrap_or(0));
        if segment < needed {
            return Err(Error::config(
                "train.segment_s",
                format!("segments of {segment} samples are shorter than the largest window {needed}"),
            ));
        }
        if segment % self.codec.hop_length() != 0 {
            return Err(Error::config(
                "train.segment_s",
                format!("{segment} samples is not a multiple of the hop {}", self.codec.hop_length()),
            ));
        }
        Ok(())
    }

    /// Parses a config file: values override the named preset (default toy);
    /// keys absent from the schema are rejected with their full path.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        let preset = match user.get("preset") {
            None => Preset::Toy,
            Some(toml::Value::String(s)) if s == "toy" => Preset::Toy,
            Some(toml::Value::String(s)) if s == "paper" => Preset::Paper,
            Some(other) => {
                return Err(Error::config("preset", format!("expected \"toy\" or \"paper\", got {other}")))
            }
        };
        let base = Self::preset(preset);
        let mut tree = toml::Table::try_from(&base)
            .map_err(|e| Error::config("<preset>", e.to_string()))?;
        merge(&mut tree, user, "")?;
        let cfg: RunConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Optional keys that may be added even though the preset tree lacks them.
const OPTIONAL_KEYS: &[&str] = &["paths.manifest", "paths.run_dir"];

fn merge(base: &mut toml::Table, user: toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if !is_map_key(&path) => {
                merge(b, u, &path)?
            }
            (Some(slot), v) => *slot = v,
            (None, v) if OPTIONAL_KEYS.contains(&path.as_str()) => {
                base.insert(k, v);
            }
            (None, toml::Value::Table(u)) if path == "paths" => {
                let mut t = toml::Table::new();
                merge(&mut t, u, &path)?;
                base.insert(k, toml::Value::Table(t));
            }
            (None, _) => return Err(Error::config(path, "unknown key")),
        }
    }
    Ok(())
}

fn is_map_key(path: &str) -> bool {
    path == "mix.target_lufs"
}
