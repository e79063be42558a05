//! Differentiable spectral operators on candle tensors.

use candle_core::{bail, CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, D};
use rustfft::num_complex::Complex;

use crate::dsp::{mel_filterbank, stft_adjoint_frames, stft_frames, Sample, MEL_FLOOR};

/// Centered Hann STFT of a `(batch, samples)` tensor, producing
/// `(batch, frames, window/2 + 1, 2)` with (real, imaginary) in the last axis.
/// The backward pass applies the exact adjoint via inverse FFTs.
#[derive(Debug, Clone, Copy)]
struct StftOp {
    window: usize,
    hop: usize,
}

#[derive(Debug, Clone, Copy)]
struct StftAdjointOp {
    window: usize,
    hop: usize,
    len: usize,
}

fn contiguous<'a, T: candle_core::WithDType>(
    storage: &'a CpuStorage,
    layout: &Layout,
) -> candle_core::Result<&'a [T]> {
    let Some((start, end)) = layout.contiguous_offsets() else {
        bail!("stft expects a contiguous tensor")
    };
    Ok(&storage.as_slice::<T>()?[start..end])
}

fn forward<T: Sample>(x: &[T], batch: usize, len: usize, op: &StftOp) -> candle_core::Result<(Vec<T>, usize)> {
    let nb = op.window / 2 + 1;
    let mut out = Vec::new();
    let mut frames = 0;
    for row in x.chunks(len).take(batch) {
        let (f, bins) = stft_frames(row, op.window, op.hop).map_err(candle_core::Error::wrap)?;
        frames = f;
        out.reserve(f * nb * 2);
        for c in bins {
            out.push(c.re);
            out.push(c.im);
        }
    }
    Ok((out, frames))
}

impl CustomOp1 for StftOp {
    fn name(&self) -> &'static str {
        "stft"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (batch, len) = layout.shape().dims2()?;
        let nb = self.window / 2 + 1;
        let (data, frames) = match storage {
            CpuStorage::F32(_) => {
                let (v, f) = forward(contiguous::<f32>(storage, layout)?, batch, len, self)?;
                (CpuStorage::F32(v), f)
            }
            CpuStorage::F64(_) => {
                let (v, f) = forward(contiguous::<f64>(storage, layout)?, batch, len, self)?;
                (CpuStorage::F64(v), f)
            }
            _ => bail!("stft supports f32 and f64 only"),
        };
        Ok((data, Shape::from((batch, frames, nb, 2))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let len = arg.dim(1)?;
        let adj = StftAdjointOp {
            window: self.window,
            hop: self.hop,
            len,
        };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&adj)?))
    }
}

fn adjoint<T: Sample>(g: &[T], batch: usize, frames: usize, op: &StftAdjointOp) -> Vec<T> {
    let nb = op.window / 2 + 1;
    let per = frames * nb * 2;
    let mut out = Vec::with_capacity(batch * op.len);
    for row in g.chunks(per).take(batch) {
        let bins: Vec<Complex<T>> = row.chunks(2).map(|c| Complex::new(c[0], c[1])).collect();
        out.extend(stft_adjoint_frames(&bins, frames, op.window, op.hop, op.len));
    }
    out
}

impl CustomOp1 for StftAdjointOp {
    fn name(&self) -> &'static str {
        "stft-adjoint"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (batch, frames, _, _) = layout.shape().dims4()?;
        let data = match storage {
            CpuStorage::F32(_) => CpuStorage::F32(adjoint(contiguous::<f32>(storage, layout)?, batch, frames, self)),
            CpuStorage::F64(_) => CpuStorage::F64(adjoint(contiguous::<f64>(storage, layout)?, batch, frames, self)),
            _ => bail!("stft supports f32 and f64 only"),
        };
        Ok((data, Shape::from((batch, self.len))))
    }
}

/// `(batch, samples)` → `(batch, frames, bins, 2)`.
pub fn stft(x: &Tensor, window: usize, hop: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(StftOp { window, hop })
}

/// Log mel power of a `(batch, samples)` tensor, hop = window / 4; output
/// `(batch, frames, n_mels)`.
#[derive(Debug, Clone)]
pub struct LogMel {
    window: usize,
    filterbank: Tensor,
}

impl LogMel {
    pub fn new(sample_rate: u32, window: usize, n_mels: usize, dtype: DType, device: &Device) -> candle_core::Result<Self> {
        let nb = window / 2 + 1;
        let fb = mel_filterbank(sample_rate, window, n_mels);
        let filterbank = Tensor::from_vec(fb, (n_mels, nb), device)?.to_dtype(dtype)?.t()?.contiguous()?;
        Ok(Self { window, filterbank })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let spec = stft(x, self.window, self.window / 4)?;
        let power = spec.sqr()?.sum(D::Minus1)?;
        let mel = power.broadcast_matmul(&self.filterbank)?;
        let floor = mel.ones_like()?.affine(MEL_FLOOR, 0.0)?;
        mel.maximum(&floor)?.log()
    }
}
