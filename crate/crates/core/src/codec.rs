//! Strided residual convolutional encoder and its mirror decoder.

use candle_core::{Module, Tensor};
use rand::Rng;

use crate::config::CodecConfig;
use crate::error::Result;
use crate::fused::repeat_last;
use crate::nn::{Conv1d, Snake};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
struct ResidualUnit {
    snake1: Snake,
    conv1: Conv1d,
    snake2: Snake,
    conv2: Conv1d,
}

impl ResidualUnit {
    fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, dim: usize, dilation: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            snake1: Snake::new(ps, &format!("{name}.snake1"), dim, rng)?,
            conv1: Conv1d::same(ps, &format!("{name}.conv1"), dim, dim, 7, dilation, rng)?,
            snake2: Snake::new(ps, &format!("{name}.snake2"), dim, rng)?,
            conv2: Conv1d::same(ps, &format!("{name}.conv2"), dim, dim, 1, 1, rng)?,
        })
    }
}

impl Module for ResidualUnit {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let ys = xs
            .apply(&self.snake1)?
            .apply(&self.conv1)?
            .apply(&self.snake2)?
            .apply(&self.conv2)?;
        xs + ys
    }
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    res: Vec<ResidualUnit>,
    snake: Snake,
    down: Conv1d,
}

impl Module for EncoderBlock {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mut xs = xs.clone();
        for r in &self.res {
            xs = xs.apply(r)?;
        }
        xs.apply(&self.snake)?.apply(&self.down)
    }
}

/// Waveform `(batch, 1, samples)` → latent `(batch, D, frames)`.
#[derive(Debug, Clone)]
pub struct Encoder {
    conv_in: Conv1d,
    blocks: Vec<EncoderBlock>,
    snake_out: Snake,
    conv_out: Conv1d,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, cfg: &CodecConfig, rng: &mut R) -> Result<Self> {
        let mut ch = cfg.encoder_channels;
        let conv_in = Conv1d::same(ps, "encoder.conv_in", 1, ch, 7, 1, rng)?;
        let mut blocks = Vec::with_capacity(cfg.strides.len());
        for (i, &stride) in cfg.strides.iter().enumerate() {
            let name = format!("encoder.block{i}");
            let res = cfg
                .res_dilations
                .iter()
                .enumerate()
                .map(|(j, &d)| ResidualUnit::new(ps, &format!("{name}.res{j}"), ch, d, rng))
                .collect::<Result<Vec<_>>>()?;
            let snake = Snake::new(ps, &format!("{name}.snake"), ch, rng)?;
            let down = Conv1d::new(
                ps,
                &format!("{name}.down"),
                ch,
                2 * ch,
                2 * stride,
                stride,
                stride.div_ceil(2),
                1,
                rng,
            )?;
            blocks.push(EncoderBlock { res, snake, down });
            ch *= 2;
        }
        let snake_out = Snake::new(ps, "encoder.snake_out", ch, rng)?;
        let conv_out = Conv1d::same(ps, "encoder.conv_out", ch, cfg.latent_dim, 3, 1, rng)?;
        Ok(Self {
            conv_in,
            blocks,
            snake_out,
            conv_out,
        })
    }
}

impl Module for Encoder {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mut xs = xs.apply(&self.conv_in)?;
        for b in &self.blocks {
            xs = xs.apply(b)?;
        }
        xs.apply(&self.snake_out)?.apply(&self.conv_out)
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    snake: Snake,
    stride: usize,
    up: Conv1d,
    res: Vec<ResidualUnit>,
}

impl Module for DecoderBlock {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let xs = xs.apply(&self.snake)?;
        let mut xs = repeat_last(&xs, self.stride)?.apply(&self.up)?;
        for r in &self.res {
            xs = xs.apply(r)?;
        }
        Ok(xs)
    }
}

/// Latent `(batch, D, frames)` → waveform `(batch, 1, frames × hop)`.
///
/// Upsampling is nearest-neighbour repetition followed by a length-preserving
/// convolution, the mirror of the encoder's strided convolutions.
#[derive(Debug, Clone)]
pub struct Decoder {
    conv_in: Conv1d,
    blocks: Vec<DecoderBlock>,
    snake_out: Snake,
    conv_out: Conv1d,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, cfg: &CodecConfig, rng: &mut R) -> Result<Self> {
        let mut ch = cfg.decoder_channels;
        let conv_in = Conv1d::same(ps, "decoder.conv_in", cfg.latent_dim, ch, 7, 1, rng)?;
        let mut blocks = Vec::with_capacity(cfg.strides.len());
        for (i, &stride) in cfg.strides.iter().rev().enumerate() {
            let name = format!("decoder.block{i}");
            let out = ch / 2;
            let snake = Snake::new(ps, &format!("{name}.snake"), ch, rng)?;
            let up = Conv1d::same(ps, &format!("{name}.up"), ch, out, 2 * stride - 1, 1, rng)?;
            let res = cfg
                .res_dilations
                .iter()
                .enumerate()
                .map(|(j, &d)| ResidualUnit::new(ps, &format!("{name}.res{j}"), out, d, rng))
                .collect::<Result<Vec<_>>>()?;
            blocks.push(DecoderBlock {
                snake,
                stride,
                up,
                res,
            });
            ch = out;
        }
        let snake_out = Snake::new(ps, "decoder.snake_out", ch, rng)?;
        let conv_out = Conv1d::same(ps, "decoder.conv_out", ch, 1, 7, 1, rng)?;
        Ok(Self {
            conv_in,
            blocks,
            snake_out,
            conv_out,
        })
    }

    /// Decoder output before the final bounding nonlinearity.
    pub fn forward_raw(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let mut xs = xs.apply(&self.conv_in)?;
        for b in &self.blocks {
            xs = xs.apply(b)?;
        }
        xs.apply(&self.snake_out)?.apply(&self.conv_out)
    }
}

impl Module for Decoder {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        self.forward_raw(xs)?.tanh()
    }
}
