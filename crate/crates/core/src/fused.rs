//! Fused elementwise layers over `(batch, channels, ...)` tensors.
//!
//! Each op runs a single pass with a hand-written backward so the autograd
//! graph holds one node per layer instead of a chain of broadcasts.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor};

use crate::dsp::Sample;

fn slice<'a, T: candle_core::WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let Some((a, b)) = l.contiguous_offsets() else {
        bail!("fused op expects contiguous tensors")
    };
    Ok(&s.as_slice::<T>()?[a..b])
}

/// `(batch, channels, plane)` split of a layout.
fn planes(l: &Layout) -> candle_core::Result<(usize, usize, usize)> {
    let dims = l.dims();
    if dims.len() < 2 {
        bail!("fused op expects at least (batch, channels), got {dims:?}")
    }
    Ok((dims[0], dims[1], dims[2..].iter().product()))
}

const SNAKE_EPS: f64 = 1e-9;

struct Snake;
struct SnakeGradX;
struct SnakeGradAlpha;

fn snake_fwd<T: Sample>(x: &[T], a: &[T], c: usize, plane: usize) -> Vec<T> {
    let eps = T::from(SNAKE_EPS).unwrap();
    let mut y = Vec::with_capacity(x.len());
    for (i, row) in x.chunks(plane).enumerate() {
        let al = a[i % c];
        let inv = T::one() / (al + eps);
        y.extend(row.iter().map(|&v| {
            let s = (al * v).sin();
            v + s * s * inv
        }));
    }
    y
}

fn snake_grad_x<T: Sample>(x: &[T], a: &[T], g: &[T], c: usize, plane: usize) -> Vec<T> {
    let eps = T::from(SNAKE_EPS).unwrap();
    let two = T::one() + T::one();
    let mut out = Vec::with_capacity(x.len());
    for (i, (row, grow)) in x.chunks(plane).zip(g.chunks(plane)).enumerate() {
        let al = a[i % c];
        let ratio = al / (al + eps);
        out.extend(row.iter().zip(grow).map(|(&v, &gv)| gv * (T::one() + (two * al * v).sin() * ratio)));
    }
    out
}

fn snake_grad_alpha<T: Sample>(x: &[T], a: &[T], g: &[T], c: usize, plane: usize) -> Vec<T> {
    let eps = T::from(SNAKE_EPS).unwrap();
    let two = T::one() + T::one();
    let mut out = vec![T::zero(); c];
    for (i, (row, grow)) in x.chunks(plane).zip(g.chunks(plane)).enumerate() {
        let al = a[i % c];
        let inv = T::one() / (al + eps);
        let mut acc = T::zero();
        for (&v, &gv) in row.iter().zip(grow) {
            let s = (al * v).sin();
            acc = acc + gv * ((two * al * v).sin() * v * inv - s * s * inv * inv);
        }
        out[i % c] = out[i % c] + acc;
    }
    out
}

impl CustomOp2 for Snake {
    fn name(&self) -> &'static str {
        "snake"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, plane) = planes(l1)?;
        if l2.shape().elem_count() != c {
            bail!("snake alpha has {} entries for {c} channels", l2.shape().elem_count())
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(snake_fwd(slice::<f32>(s1, l1)?, slice::<f32>(s2, l2)?, c, plane))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(snake_fwd(slice::<f64>(s1, l1)?, slice::<f64>(s2, l2)?, c, plane))
            }
            _ => bail!("snake supports matching f32 or f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, a: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = x.apply_op3_no_bwd(a, &grad, &SnakeGradX)?;
        let ga = x.apply_op3_no_bwd(a, &grad, &SnakeGradAlpha)?.reshape(a.shape())?;
        Ok((Some(gx), Some(ga)))
    }
}

macro_rules! snake_grad_op {
    ($ty:ident, $name:literal, $f:ident, $shape:expr) => {
        impl CustomOp3 for $ty {
            fn name(&self) -> &'static str {
                $name
            }

            fn cpu_fwd(
                &self,
                s1: &CpuStorage,
                l1: &Layout,
                s2: &CpuStorage,
                l2: &Layout,
                s3: &CpuStorage,
                l3: &Layout,
            ) -> candle_core::Result<(CpuStorage, Shape)> {
                let (_, c, plane) = planes(l1)?;
                let out = match (s1, s2, s3) {
                    (CpuStorage::F32(_), CpuStorage::F32(_), CpuStorage::F32(_)) => CpuStorage::F32($f(
                        slice::<f32>(s1, l1)?,
                        slice::<f32>(s2, l2)?,
                        slice::<f32>(s3, l3)?,
                        c,
                        plane,
                    )),
                    (CpuStorage::F64(_), CpuStorage::F64(_), CpuStorage::F64(_)) => CpuStorage::F64($f(
                        slice::<f64>(s1, l1)?,
                        slice::<f64>(s2, l2)?,
                        slice::<f64>(s3, l3)?,
                        c,
                        plane,
                    )),
                    _ => bail!("snake supports matching f32 or f64 operands"),
                };
                let shape: fn(&Layout, usize) -> Shape = $shape;
                Ok((out, shape(l1, c)))
            }
        }
    };
}

snake_grad_op!(SnakeGradX, "snake-grad-x", snake_grad_x, |l, _| l.shape().clone());
snake_grad_op!(SnakeGradAlpha, "snake-grad-alpha", snake_grad_alpha, |_, c| Shape::from(c));

/// `x + sin²(αx)/α` with one α per channel; `alpha` holds `channels` values.
pub fn snake(x: &Tensor, alpha: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&alpha.contiguous()?, Snake)
}

struct BiasAdd;
struct ChannelSum;

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "bias-add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, plane) = planes(l1)?;
        if l2.shape().elem_count() != c {
            bail!("bias has {} entries for {c} channels", l2.shape().elem_count())
        }
        fn run<T: Sample>(x: &[T], b: &[T], c: usize, plane: usize) -> Vec<T> {
            let mut y = Vec::with_capacity(x.len());
            for (i, row) in x.chunks(plane).enumerate() {
                let bv = b[i % c];
                y.extend(row.iter().map(|&v| v + bv));
            }
            y
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(run(slice::<f32>(s1, l1)?, slice::<f32>(s2, l2)?, c, plane))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(run(slice::<f64>(s1, l1)?, slice::<f64>(s2, l2)?, c, plane))
            }
            _ => bail!("bias-add supports matching f32 or f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let gb = grad.contiguous()?.apply_op1_no_bwd(&ChannelSum)?.reshape(b.shape())?;
        Ok((Some(grad.clone()), Some(gb)))
    }
}

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, plane) = planes(l)?;
        fn run<T: Sample>(x: &[T], c: usize, plane: usize) -> Vec<T> {
            let mut out = vec![T::zero(); c];
            for (i, row) in x.chunks(plane).enumerate() {
                out[i % c] = row.iter().fold(out[i % c], |a, &v| a + v);
            }
            out
        }
        let s = match s {
            CpuStorage::F32(_) => CpuStorage::F32(run(slice::<f32>(s, l)?, c, plane)),
            CpuStorage::F64(_) => CpuStorage::F64(run(slice::<f64>(s, l)?, c, plane)),
            _ => bail!("channel-sum supports f32 or f64"),
        };
        Ok((s, Shape::from(c)))
    }
}

/// Adds one bias value per channel.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&bias.contiguous()?, BiasAdd)
}

/// Nearest-neighbour upsampling of the last axis by an integer factor.
struct Repeat(usize);
/// Adjoint of [`Repeat`]: sums each group of `factor` neighbours.
struct GroupSum(usize);

impl CustomOp1 for Repeat {
    fn name(&self) -> &'static str {
        "repeat-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let f = self.0;
        let mut dims = l.dims().to_vec();
        let Some(last) = dims.last_mut() else { bail!("repeat needs at least one axis") };
        *last *= f;
        fn run<T: Sample>(x: &[T], f: usize) -> Vec<T> {
            let mut y = Vec::with_capacity(x.len() * f);
            for &v in x {
                y.extend(std::iter::repeat_n(v, f));
            }
            y
        }
        let s = match s {
            CpuStorage::F32(_) => CpuStorage::F32(run(slice::<f32>(s, l)?, f)),
            CpuStorage::F64(_) => CpuStorage::F64(run(slice::<f64>(s, l)?, f)),
            _ => bail!("repeat supports f32 or f64"),
        };
        Ok((s, Shape::from(dims)))
    }

    fn bwd(&self, _x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(GroupSum(self.0))?))
    }
}

impl CustomOp1 for GroupSum {
    fn name(&self) -> &'static str {
        "group-sum-last"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let f = self.0;
        let mut dims = l.dims().to_vec();
        match dims.last_mut() {
            Some(last) if *last % f == 0 => *last /= f,
            _ => bail!("group-sum: last axis of {:?} is not a multiple of {f}", l.dims()),
        }
        fn run<T: Sample>(x: &[T], f: usize) -> Vec<T> {
            x.chunks(f).map(|g| g.iter().fold(T::zero(), |a, &v| a + v)).collect()
        }
        let s = match s {
            CpuStorage::F32(_) => CpuStorage::F32(run(slice::<f32>(s, l)?, f)),
            CpuStorage::F64(_) => CpuStorage::F64(run(slice::<f64>(s, l)?, f)),
            _ => bail!("group-sum supports f32 or f64"),
        };
        Ok((s, Shape::from(dims)))
    }

    fn bwd(&self, _x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Repeat(self.0))?))
    }
}

/// Repeats every sample of the last axis `factor` times.
pub fn repeat_last(x: &Tensor, factor: usize) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Repeat(factor))
}

struct LeakyRelu(f64);
struct LeakyReluGrad(f64);

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: Sample>(x: &[T], slope: T) -> Vec<T> {
            x.iter().map(|&v| if v >= T::zero() { v } else { v * slope }).collect()
        }
        let s = match s {
            CpuStorage::F32(_) => CpuStorage::F32(run(slice::<f32>(s, l)?, self.0 as f32)),
            CpuStorage::F64(_) => CpuStorage::F64(run(slice::<f64>(s, l)?, self.0)),
            _ => bail!("leaky-relu supports f32 or f64"),
        };
        Ok((s, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(x.apply_op2_no_bwd(&grad.contiguous()?, &LeakyReluGrad(self.0))?))
    }
}

impl CustomOp2 for LeakyReluGrad {
    fn name(&self) -> &'static str {
        "leaky-relu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: Sample>(x: &[T], g: &[T], slope: T) -> Vec<T> {
            x.iter().zip(g).map(|(&v, &gv)| if v >= T::zero() { gv } else { gv * slope }).collect()
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(run(slice::<f32>(s1, l1)?, slice::<f32>(s2, l2)?, self.0 as f32))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(run(slice::<f64>(s1, l1)?, slice::<f64>(s2, l2)?, self.0))
            }
            _ => bail!("leaky-relu supports matching f32 or f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(LeakyRelu(slope))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    /// Reference graphs built from stock candle ops.
    fn snake_ref(x: &Tensor, a: &Tensor) -> Tensor {
        let a = a.reshape((1, (), 1)).unwrap();
        let s = x.broadcast_mul(&a).unwrap().sin().unwrap().sqr().unwrap();
        (x + s.broadcast_div(&(&a + SNAKE_EPS).unwrap()).unwrap()).unwrap()
    }

    fn bias_ref(x: &Tensor, b: &Tensor) -> Tensor {
        x.broadcast_add(&b.reshape((1, (), 1)).unwrap()).unwrap()
    }

    fn repeat_ref(x: &Tensor, f: usize) -> Tensor {
        let (b, c, t) = x.dims3().unwrap();
        x.unsqueeze(3).unwrap().broadcast_as((b, c, t, f)).unwrap().reshape((b, c, t * f)).unwrap()
    }

    /// Values and gradients of `Σ w ⊙ f(x, p)` agree between two graphs.
    fn compare(
        x: Tensor,
        p: Tensor,
        fused: impl Fn(&Tensor, &Tensor) -> Tensor,
        reference: impl Fn(&Tensor, &Tensor) -> Tensor,
    ) {
        let run = |f: &dyn Fn(&Tensor, &Tensor) -> Tensor| {
            let xv = Var::from_tensor(&x).unwrap();
            let pv = Var::from_tensor(&p).unwrap();
            let y = f(xv.as_tensor(), pv.as_tensor());
            let w = randn(y.dims(), 99);
            let g = (&y * &w).unwrap().sum_all().unwrap().backward().unwrap();
            (y, g.get(xv.as_tensor()).cloned(), g.get(pv.as_tensor()).cloned())
        };
        let (y1, gx1, gp1) = run(&fused);
        let (y2, gx2, gp2) = run(&reference);
        assert!(max_diff(&y1, &y2) < 1e-10);
        assert!(max_diff(&gx1.unwrap(), &gx2.unwrap()) < 1e-10);
        if let (Some(a), Some(b)) = (gp1, gp2) {
            assert!(max_diff(&a, &b) < 1e-9);
        }
    }

    #[test]
    fn snake_matches_reference() {
        let alpha = (randn(&[5], 2).abs().unwrap() + 0.3).unwrap();
        compare(randn(&[3, 5, 17], 1), alpha, |x, a| snake(x, a).unwrap(), snake_ref);
    }

    #[test]
    fn bias_matches_reference() {
        compare(randn(&[2, 4, 9], 3), randn(&[4], 4), |x, b| add_channel_bias(x, b).unwrap(), bias_ref);
        let x4 = randn(&[2, 3, 4, 5], 5);
        let b = randn(&[3], 6);
        let want = x4.broadcast_add(&b.reshape((1, 3, 1, 1)).unwrap()).unwrap();
        assert!(max_diff(&add_channel_bias(&x4, &b).unwrap(), &want) < 1e-12);
    }

    #[test]
    fn repeat_matches_reference() {
        compare(
            randn(&[2, 3, 7], 7),
            randn(&[1], 8),
            |x, p| (repeat_last(x, 4).unwrap() + p.broadcast_as((2, 3, 28)).unwrap()).unwrap(),
            |x, p| (repeat_ref(x, 4) + p.broadcast_as((2, 3, 28)).unwrap()).unwrap(),
        );
    }

    #[test]
    fn leaky_relu_matches_reference() {
        compare(
            randn(&[2, 3, 11], 9),
            randn(&[1], 10),
            |x, p| (leaky_relu(x, 0.1).unwrap() + p.broadcast_as((2, 3, 11)).unwrap()).unwrap(),
            |x, p| (x.maximum(&x.affine(0.1, 0.0).unwrap()).unwrap() + p.broadcast_as((2, 3, 11)).unwrap()).unwrap(),
        );
    }
}
