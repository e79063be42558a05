//! Central finite-difference checks of autograd gradients (64-bit only).

use candle_core::{DType, Tensor, Var};

use crate::error::{Error, Result};

/// Smallest magnitude used as the denominator of a relative error.
pub const REL_FLOOR: f64 = 1e-6;

/// `count` evenly spaced flat indices into a tensor of `n` elements.
pub fn spread(n: usize, count: usize) -> Vec<usize> {
    let count = count.min(n).max(1);
    (0..count).map(|i| (2 * i + 1) * n / (2 * count)).collect()
}

fn set_element(var: &Var, base: &[f64], i: usize, value: f64) -> Result<()> {
    let mut v = base.to_vec();
    v[i] = value;
    var.set(&Tensor::from_vec(v, var.shape(), var.device())?)?;
    Ok(())
}

/// Per probed index: (autograd, central difference).
pub fn compare(var: &Var, probe: &[usize], h: f64, loss: impl Fn() -> Result<Tensor>) -> Result<Vec<(f64, f64)>> {
    if var.dtype() != DType::F64 {
        return Err(Error::Contract("gradient checks need a 64-bit variable".into()));
    }
    let grads = loss()?.backward()?;
    let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
        Some(g) => g.flatten_all()?.to_vec1()?,
        None => vec![0.0; var.elem_count()],
    };
    let base: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1()?;
    let eval = || -> Result<f64> { Ok(loss()?.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let mut out = Vec::with_capacity(probe.len());
    for &i in probe {
        set_element(var, &base, i, base[i] + h)?;
        let fp = eval()?;
        set_element(var, &base, i, base[i] - h)?;
        let fm = eval()?;
        set_element(var, &base, i, base[i])?;
        out.push((analytic[i], (fp - fm) / (2.0 * h)));
    }
    Ok(out)
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error over the probe.
pub fn max_rel_error(var: &Var, probe: &[usize], h: f64, loss: impl Fn() -> Result<Tensor>) -> Result<f64> {
    Ok(compare(var, probe, h, loss)?
        .into_iter()
        .map(|(a, n)| rel_error(a, n))
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn spread_is_even_and_in_range() {
        assert_eq!(spread(100, 10), vec![5, 15, 25, 35, 45, 55, 65, 75, 85, 95]);
        assert_eq!(spread(3, 10), vec![0, 1, 2]);
    }

    #[test]
    fn cubic_passes_and_a_wrong_gradient_fails() {
        let x = Var::from_vec(vec![0.5f64, -1.0, 2.0], 3, &Device::Cpu).unwrap();
        let err = max_rel_error(&x, &[0, 1, 2], 1e-5, || Ok(x.as_tensor().powf(3.0)?.sum_all()?)).unwrap();
        assert!(err < 1e-8, "{err}");
        let wrong = max_rel_error(&x, &[0, 1, 2], 1e-5, || {
            let t = x.as_tensor();
            Ok((t.detach().sqr()? * t)?.sum_all()?)
        })
        .unwrap();
        assert!(wrong > 0.5);
        assert_eq!(x.as_tensor().to_vec1::<f64>().unwrap(), vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn rejects_single_precision() {
        let x = Var::from_vec(vec![1.0f32], 1, &Device::Cpu).unwrap();
        assert!(compare(&x, &[0], 1e-3, || Ok(x.as_tensor().sum_all()?)).is_err());
    }
}
