//! Convolutions with hand-written backward passes.
//!
//! Shallow kernels run as direct loops along contiguous output rows; deeper
//! ones are unfolded into columns and multiplied as one matrix product.

use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

use crate::dsp::Sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geom {
    stride: (usize, usize),
    pad: (usize, usize),
    dil: (usize, usize),
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    b: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

impl Geom {
    fn out_len(len: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
        let span = d * (k - 1) + 1;
        (len + 2 * p).checked_sub(span).map(|v| v / s + 1)
    }

    fn dims(&self, x: &[usize], w: &[usize]) -> candle_core::Result<Dims> {
        let (&[b, cin, h, wd], &[cout, cin2, kh, kw]) = (x, w) else {
            bail!("conv expects 4-d input and kernel, got {x:?} and {w:?}")
        };
        if cin != cin2 {
            bail!("conv input has {cin} channels, kernel expects {cin2}")
        }
        let ho = Self::out_len(h, kh, self.stride.0, self.pad.0, self.dil.0);
        let wo = Self::out_len(wd, kw, self.stride.1, self.pad.1, self.dil.1);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            bail!("conv input {x:?} is smaller than kernel {w:?}")
        };
        Ok(Dims {
            b,
            cin,
            cout,
            h,
            w: wd,
            kh,
            kw,
            ho,
            wo,
        })
    }
}

/// Output positions `t < n_out` whose input index `t·s + off` lies in `0..n_in`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, off: isize, s: usize) -> (usize, usize) {
    let s_i = s as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s_i - 1) / s_i };
    let last = n_in as isize - 1 - off;
    let hi = if last < 0 { 0 } else { (last / s_i + 1).min(n_out as isize) };
    (lo as usize, (hi.max(lo)) as usize)
}

#[inline]
fn row_axpy<T: Sample>(y: &mut [T], x: &[T], a: T, off: isize, s: usize) {
    let (lo, hi) = valid_range(y.len(), x.len(), off, s);
    if lo >= hi {
        return;
    }
    let start = (lo as isize * s as isize + off) as usize;
    if s == 1 {
        for (yv, &xv) in y[lo..hi].iter_mut().zip(&x[start..start + hi - lo]) {
            *yv = *yv + a * xv;
        }
    } else {
        for (j, yv) in y[lo..hi].iter_mut().enumerate() {
            *yv = *yv + a * x[start + j * s];
        }
    }
}

#[inline]
fn row_scatter<T: Sample>(gx: &mut [T], gy: &[T], a: T, off: isize, s: usize) {
    let (lo, hi) = valid_range(gy.len(), gx.len(), off, s);
    if lo >= hi {
        return;
    }
    let start = (lo as isize * s as isize + off) as usize;
    if s == 1 {
        for (xv, &yv) in gx[start..start + hi - lo].iter_mut().zip(&gy[lo..hi]) {
            *xv = *xv + a * yv;
        }
    } else {
        for (j, &yv) in gy[lo..hi].iter().enumerate() {
            let xv = &mut gx[start + j * s];
            *xv = *xv + a * yv;
        }
    }
}

#[inline]
fn row_dot<T: Sample>(gy: &[T], x: &[T], off: isize, s: usize) -> T {
    let (lo, hi) = valid_range(gy.len(), x.len(), off, s);
    let mut acc = T::zero();
    if lo >= hi {
        return acc;
    }
    let start = (lo as isize * s as isize + off) as usize;
    if s == 1 {
        for (&a, &b) in gy[lo..hi].iter().zip(&x[start..start + hi - lo]) {
            acc = acc + a * b;
        }
    } else {
        for (j, &a) in gy[lo..hi].iter().enumerate() {
            acc = acc + a * x[start + j * s];
        }
    }
    acc
}

fn forward<T: Sample>(x: &[T], k: &[T], d: &Dims, g: &Geom) -> Vec<T> {
    let mut y = vec![T::zero(); d.b * d.cout * d.ho * d.wo];
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    for b in 0..d.b {
        for o in 0..d.cout {
            let yp = &mut y[(b * d.cout + o) * plane_out..][..plane_out];
            for i in 0..d.cin {
                let xp = &x[(b * d.cin + i) * plane_in..][..plane_in];
                for kh in 0..d.kh {
                    let (lo, hi) = valid_range(d.ho, d.h, (kh * g.dil.0) as isize - g.pad.0 as isize, g.stride.0);
                    for kw in 0..d.kw {
                        let a = k[((o * d.cin + i) * d.kh + kh) * d.kw + kw];
                        let off = (kw * g.dil.1) as isize - g.pad.1 as isize;
                        for r in lo..hi {
                            let hi_row = r * g.stride.0 + kh * g.dil.0 - g.pad.0;
                            row_axpy(
                                &mut yp[r * d.wo..(r + 1) * d.wo],
                                &xp[hi_row * d.w..(hi_row + 1) * d.w],
                                a,
                                off,
                                g.stride.1,
                            );
                        }
                    }
                }
            }
        }
    }
    y
}

fn grad_input<T: Sample>(gy: &[T], k: &[T], d: &Dims, g: &Geom) -> Vec<T> {
    let mut gx = vec![T::zero(); d.b * d.cin * d.h * d.w];
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    for b in 0..d.b {
        for i in 0..d.cin {
            let xp = &mut gx[(b * d.cin + i) * plane_in..][..plane_in];
            for o in 0..d.cout {
                let yp = &gy[(b * d.cout + o) * plane_out..][..plane_out];
                for kh in 0..d.kh {
                    let (lo, hi) = valid_range(d.ho, d.h, (kh * g.dil.0) as isize - g.pad.0 as isize, g.stride.0);
                    for kw in 0..d.kw {
                        let a = k[((o * d.cin + i) * d.kh + kh) * d.kw + kw];
                        let off = (kw * g.dil.1) as isize - g.pad.1 as isize;
                        for r in lo..hi {
                            let hi_row = r * g.stride.0 + kh * g.dil.0 - g.pad.0;
                            row_scatter(
                                &mut xp[hi_row * d.w..(hi_row + 1) * d.w],
                                &yp[r * d.wo..(r + 1) * d.wo],
                                a,
                                off,
                                g.stride.1,
                            );
                        }
                    }
                }
            }
        }
    }
    gx
}

fn grad_kernel<T: Sample>(gy: &[T], x: &[T], d: &Dims, g: &Geom) -> Vec<T> {
    let mut gk = vec![T::zero(); d.cout * d.cin * d.kh * d.kw];
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    for b in 0..d.b {
        for o in 0..d.cout {
            let yp = &gy[(b * d.cout + o) * plane_out..][..plane_out];
            for i in 0..d.cin {
                let xp = &x[(b * d.cin + i) * plane_in..][..plane_in];
                for kh in 0..d.kh {
                    let (lo, hi) = valid_range(d.ho, d.h, (kh * g.dil.0) as isize - g.pad.0 as isize, g.stride.0);
                    for kw in 0..d.kw {
                        let off = (kw * g.dil.1) as isize - g.pad.1 as isize;
                        let mut acc = T::zero();
                        for r in lo..hi {
                            let hi_row = r * g.stride.0 + kh * g.dil.0 - g.pad.0;
                            acc = acc
                                + row_dot(
                                    &yp[r * d.wo..(r + 1) * d.wo],
                                    &xp[hi_row * d.w..(hi_row + 1) * d.w],
                                    off,
                                    g.stride.1,
                                );
                        }
                        let slot = &mut gk[((o * d.cin + i) * d.kh + kh) * d.kw + kw];
                        *slot = *slot + acc;
                    }
                }
            }
        }
    }
    gk
}

fn slice<'a, T: candle_core::WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let Some((a, b)) = l.contiguous_offsets() else {
        bail!("conv expects contiguous tensors")
    };
    Ok(&s.as_slice::<T>()?[a..b])
}

/// `(x, kernel) → y`.
#[derive(Debug, Clone, Copy)]
struct ConvOp(Geom);

/// `(grad_y, kernel) → grad_x`; carries the input spatial size.
#[derive(Debug, Clone, Copy)]
struct ConvGradInput(Geom, usize, usize);

/// `(grad_y, x) → grad_kernel`; carries the kernel spatial size.
#[derive(Debug, Clone, Copy)]
struct ConvGradKernel(Geom, usize, usize);

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "direct-conv"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let d = self.0.dims(l1.dims(), l2.dims())?;
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(forward(slice::<f32>(s1, l1)?, slice::<f32>(s2, l2)?, &d, &self.0))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(forward(slice::<f64>(s1, l1)?, slice::<f64>(s2, l2)?, &d, &self.0))
            }
            _ => bail!("conv supports matching f32 or f64 operands"),
        };
        Ok((out, Shape::from((d.b, d.cout, d.ho, d.wo))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        k: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, w) = x.dims4()?;
        let (_, _, kh, kw) = k.dims4()?;
        let gx = grad.apply_op2_no_bwd(k, &ConvGradInput(self.0, h, w))?;
        let gk = grad.apply_op2_no_bwd(x, &ConvGradKernel(self.0, kh, kw))?;
        Ok((Some(gx), Some(gk)))
    }
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "direct-conv-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, _, ho, wo) = l1.shape().dims4()?;
        let (cout, cin, kh, kw) = l2.shape().dims4()?;
        let d = Dims {
            b,
            cin,
            cout,
            h: self.1,
            w: self.2,
            kh,
            kw,
            ho,
            wo,
        };
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(grad_input(slice::<f32>(s1, l1)?, slice::<f32>(s2, l2)?, &d, &self.0))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(grad_input(slice::<f64>(s1, l1)?, slice::<f64>(s2, l2)?, &d, &self.0))
            }
            _ => bail!("conv supports matching f32 or f64 operands"),
        };
        Ok((out, Shape::from((b, cin, self.1, self.2))))
    }
}

impl CustomOp2 for ConvGradKernel {
    fn name(&self) -> &'static str {
        "direct-conv-grad-kernel"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, cout, ho, wo) = l1.shape().dims4()?;
        let (_, cin, h, w) = l2.shape().dims4()?;
        let d = Dims {
            b,
            cin,
            cout,
            h,
            w,
            kh: self.1,
            kw: self.2,
            ho,
            wo,
        };
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(grad_kernel(slice::<f32>(s1, l1)?, slice::<f32>(s2, l2)?, &d, &self.0))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(grad_kernel(slice::<f64>(s1, l1)?, slice::<f64>(s2, l2)?, &d, &self.0))
            }
            _ => bail!("conv supports matching f32 or f64 operands"),
        };
        Ok((out, Shape::from((cout, cin, self.1, self.2))))
    }
}

/// Patch extraction `(b, c, h, w) → (c·kh·kw, b, ho·wo)`; carries the kernel size.
#[derive(Debug, Clone, Copy)]
struct Unfold(Geom, usize, usize);

/// Adjoint of [`Unfold`]; carries the kernel and input sizes.
#[derive(Debug, Clone, Copy)]
struct Fold(Geom, usize, usize, usize, usize);

fn unfold<T: Sample>(x: &[T], d: &Dims, g: &Geom) -> Vec<T> {
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    let mut cols = vec![T::zero(); d.cin * d.kh * d.kw * d.b * plane_out];
    for i in 0..d.cin {
        for kh in 0..d.kh {
            let (lo, hi) = valid_range(d.ho, d.h, (kh * g.dil.0) as isize - g.pad.0 as isize, g.stride.0);
            for kw in 0..d.kw {
                let off = (kw * g.dil.1) as isize - g.pad.1 as isize;
                let row = (i * d.kh + kh) * d.kw + kw;
                for b in 0..d.b {
                    let xp = &x[(b * d.cin + i) * plane_in..][..plane_in];
                    let cp = &mut cols[(row * d.b + b) * plane_out..][..plane_out];
                    for r in lo..hi {
                        let src = r * g.stride.0 + kh * g.dil.0 - g.pad.0;
                        row_axpy(
                            &mut cp[r * d.wo..(r + 1) * d.wo],
                            &xp[src * d.w..(src + 1) * d.w],
                            T::one(),
                            off,
                            g.stride.1,
                        );
                    }
                }
            }
        }
    }
    cols
}

fn fold<T: Sample>(cols: &[T], d: &Dims, g: &Geom) -> Vec<T> {
    let plane_in = d.h * d.w;
    let plane_out = d.ho * d.wo;
    let mut x = vec![T::zero(); d.b * d.cin * plane_in];
    for i in 0..d.cin {
        for kh in 0..d.kh {
            let (lo, hi) = valid_range(d.ho, d.h, (kh * g.dil.0) as isize - g.pad.0 as isize, g.stride.0);
            for kw in 0..d.kw {
                let off = (kw * g.dil.1) as isize - g.pad.1 as isize;
                let row = (i * d.kh + kh) * d.kw + kw;
                for b in 0..d.b {
                    let xp = &mut x[(b * d.cin + i) * plane_in..][..plane_in];
                    let cp = &cols[(row * d.b + b) * plane_out..][..plane_out];
                    for r in lo..hi {
                        let dst = r * g.stride.0 + kh * g.dil.0 - g.pad.0;
                        row_scatter(
                            &mut xp[dst * d.w..(dst + 1) * d.w],
                            &cp[r * d.wo..(r + 1) * d.wo],
                            T::one(),
                            off,
                            g.stride.1,
                        );
                    }
                }
            }
        }
    }
    x
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, cin, _, _) = l.shape().dims4()?;
        let d = self.0.dims(l.dims(), &[1, cin, self.1, self.2])?;
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(unfold(slice::<f32>(s, l)?, &d, &self.0)),
            CpuStorage::F64(_) => CpuStorage::F64(unfold(slice::<f64>(s, l)?, &d, &self.0)),
            _ => bail!("conv supports f32 or f64"),
        };
        Ok((out, Shape::from((d.cin * d.kh * d.kw, d.b, d.ho * d.wo))))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (_, _, h, w) = x.dims4()?;
        Ok(Some(grad.contiguous()?.apply_op1(Fold(self.0, self.1, self.2, h, w))?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (rows, b, _) = l.shape().dims3()?;
        let (kh, kw, h, w) = (self.1, self.2, self.3, self.4);
        let cin = rows / (kh * kw);
        let d = self.0.dims(&[b, cin, h, w], &[1, cin, kh, kw])?;
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(fold(slice::<f32>(s, l)?, &d, &self.0)),
            CpuStorage::F64(_) => CpuStorage::F64(fold(slice::<f64>(s, l)?, &d, &self.0)),
            _ => bail!("conv supports f32 or f64"),
        };
        Ok((out, Shape::from((b, cin, h, w))))
    }

    fn bwd(&self, _x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Unfold(self.0, self.1, self.2))?))
    }
}

/// Kernel depth (`in · kh · kw`) from which the unfold + matmul path is used.
const GEMM_MIN_DEPTH: usize = 24;

fn conv4d(x: &Tensor, k: &Tensor, g: Geom) -> candle_core::Result<Tensor> {
    let x = x.contiguous()?;
    let k = k.contiguous()?;
    let (cout, cin, kh, kw) = k.dims4()?;
    let depth = cin * kh * kw;
    if depth < GEMM_MIN_DEPTH {
        return x.apply_op2(&k, ConvOp(g));
    }
    let d = g.dims(x.dims(), k.dims())?;
    let cols = x.apply_op1(Unfold(g, kh, kw))?.reshape((depth, d.b * d.ho * d.wo))?;
    k.reshape((cout, depth))?
        .matmul(&cols)?
        .reshape((cout, d.b, d.ho, d.wo))?
        .transpose(0, 1)
}

/// `(batch, in, len)` ⊛ `(out, in, k)` → `(batch, out, len')`.
pub fn conv1d(x: &Tensor, k: &Tensor, stride: usize, pad: usize, dil: usize) -> candle_core::Result<Tensor> {
    let (b, c, t) = x.dims3()?;
    let (o, i, kl) = k.dims3()?;
    let g = Geom {
        stride: (1, stride),
        pad: (0, pad),
        dil: (1, dil),
    };
    let x4 = x.contiguous()?.reshape((b, c, 1, t))?;
    let k4 = k.contiguous()?.reshape((o, i, 1, kl))?;
    let y = conv4d(&x4, &k4, g)?;
    let (_, _, _, lo) = y.dims4()?;
    y.contiguous()?.reshape((b, o, lo))
}

/// `(batch, in, h, w)` ⊛ `(out, in, kh, kw)` with the same stride and padding on both axes.
pub fn conv2d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> candle_core::Result<Tensor> {
    let g = Geom {
        stride: (stride, stride),
        pad: (pad, pad),
        dil: (1, 1),
    };
    conv4d(x, k, g)
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
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn conv1d_matches_candle() {
        for &(t, k, s, p, d) in &[(37, 7, 1, 3, 1), (37, 7, 1, 9, 3), (40, 8, 4, 2, 1), (45, 10, 5, 3, 1), (16, 3, 2, 0, 1)] {
            for cin in [3, 8] {
                let x = randn(&[2, cin, t], 1);
                let w = randn(&[4, cin, k], 2);
                let want = x.conv1d(&w, p, s, d, 1).unwrap();
                let got = conv1d(&x, &w, s, p, d).unwrap();
                assert_eq!(want.dims(), got.dims());
                assert!(max_diff(&want, &got) < 1e-10);
            }
        }
    }

    #[test]
    fn conv2d_matches_candle() {
        for &(h, w, k, s, p) in &[(9, 13, 3, 1, 1), (9, 13, 3, 2, 1), (8, 12, 3, 2, 1), (7, 7, 5, 3, 2)] {
            for cin in [2, 4] {
                let x = randn(&[2, cin, h, w], 3);
                let kk = randn(&[3, cin, k, k], 4);
                let want = x.conv2d(&kk, p, s, 1, 1).unwrap();
                let got = conv2d(&x, &kk, s, p).unwrap();
                assert_eq!(want.dims(), got.dims());
                assert!(max_diff(&want, &got) < 1e-10);
            }
        }
    }

    /// Gradients of `Σ c ⊙ conv(x, k)` against central differences.
    fn check_grads(x: Tensor, k: Tensor, f: impl Fn(&Tensor, &Tensor) -> Tensor) {
        let xv = Var::from_tensor(&x).unwrap();
        let kv = Var::from_tensor(&k).unwrap();
        let y = f(xv.as_tensor(), kv.as_tensor());
        let c = randn(y.dims(), 9);
        let loss = |x: &Tensor, k: &Tensor| -> f64 {
            (f(x, k) * &c).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let grads = (y * &c).unwrap().sum_all().unwrap().backward().unwrap();
        for (var, other_is_x) in [(&xv, false), (&kv, true)] {
            let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
            for idx in (0..base.len()).step_by(base.len() / 7 + 1) {
                let eps = 1e-5;
                let mut plus = base.clone();
                plus[idx] += eps;
                let mut minus = base.clone();
                minus[idx] -= eps;
                let mk = |v: Vec<f64>| Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap();
                let (lp, lm) = if other_is_x {
                    (loss(&x, &mk(plus)), loss(&x, &mk(minus)))
                } else {
                    (loss(&mk(plus), &k), loss(&mk(minus), &k))
                };
                let fd = (lp - lm) / (2.0 * eps);
                assert!((fd - g[idx]).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn conv1d_gradients() {
        for &(k, s, p, d) in &[(7, 1, 3, 1), (7, 1, 9, 3), (8, 4, 2, 1), (3, 2, 0, 1)] {
            for cin in [3, 8] {
                check_grads(randn(&[2, cin, 24], 5), randn(&[2, cin, k], 6), |x, w| conv1d(x, w, s, p, d).unwrap());
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        for &(s, p) in &[(1, 1), (2, 1), (2, 0)] {
            for cin in [2, 4] {
                check_grads(randn(&[2, cin, 8, 11], 7), randn(&[3, cin, 3, 3], 8), |x, w| conv2d(x, w, s, p).unwrap());
            }
        }
    }
}
