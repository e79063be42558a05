//! Layer building blocks shared by the codec and the discriminators.

use candle_core::{Module, Tensor};
use rand::Rng;

use crate::error::Result;
use crate::fused;
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone)]
pub struct Conv1d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
    dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = ps.create(
            &format!("{name}.weight"),
            (out_c, in_c, kernel),
            Init::fan_in(in_c * kernel),
            rng,
        )?;
        let bias = ps.create(&format!("{name}.bias"), out_c, Init::Zeros, rng)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            dilation,
        })
    }

    /// Length-preserving convolution (odd kernel, symmetric padding).
    pub fn same<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        dilation: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(ps, name, in_c, out_c, kernel, 1, (kernel - 1) * dilation / 2, dilation, rng)
    }
}

impl Module for Conv1d {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let ys = crate::conv::conv1d(xs, &self.weight, self.stride, self.padding, self.dilation)?;
        fused::add_channel_bias(&ys, &self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = ps.create(
            &format!("{name}.weight"),
            (out_c, in_c, kernel, kernel),
            Init::fan_in(in_c * kernel * kernel),
            rng,
        )?;
        let bias = ps.create(&format!("{name}.bias"), out_c, Init::Zeros, rng)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }
}

impl Module for Conv2d {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let ys = crate::conv::conv2d(xs, &self.weight, self.stride, self.padding)?;
        fused::add_channel_bias(&ys, &self.bias)
    }
}

/// Periodic activation `x + sin²(αx)/α` with a learned per-channel α.
#[derive(Debug, Clone)]
pub struct Snake {
    alpha: Tensor,
}

impl Snake {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        let alpha = ps.create(&format!("{name}.alpha"), (1, channels, 1), Init::Const(1.0), rng)?;
        Ok(Self { alpha })
    }
}

impl Module for Snake {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        fused::snake(xs, &self.alpha)
    }
}

pub fn leaky_relu(xs: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    fused::leaky_relu(xs, slope)
}
