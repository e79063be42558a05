//! Adam with bias correction, global-norm clipping and the learning-rate schedule.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Linear warmup to `lr`, then exponential decay by `gamma` per step.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_steps > 0 && step <= cfg.warmup_steps {
        cfg.lr * step as f64 / cfg.warmup_steps as f64
    } else {
        cfg.lr * cfg.gamma.powf((step - cfg.warmup_steps) as f64)
    }
}

/// Gradients of every parameter in `ps` by name, rescaled so their global
/// L2 norm is at most `max_norm`. Parameters outside the graph get zeros.
/// Returns the gradients and the norm before clipping.
pub fn clipped_grads(ps: &ParamStore, grads: &GradStore, max_norm: f64) -> Result<(BTreeMap<String, Tensor>, f64)> {
    let mut out = BTreeMap::new();
    let mut sq = 0.0f64;
    for (name, var) in ps.iter() {
        let g = match grads.get(var.as_tensor()) {
            Some(g) => g.clone(),
            None => var.as_tensor().zeros_like()?,
        };
        sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        out.insert(name.clone(), g);
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::Numeric(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for g in out.values_mut() {
            *g = g.affine(scale, 0.0)?;
        }
    }
    Ok((out, norm))
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(ps: &ParamStore, beta1: f64, beta2: f64) -> Result<Self> {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, var) in ps.iter() {
            first.insert(name.clone(), var.as_tensor().zeros_like()?);
            second.insert(name.clone(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            first,
            second,
        })
    }

    pub fn apply(&mut self, ps: &ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, var) in ps.iter() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))?;
            let m = self.first.get_mut(name).expect("moment per parameter");
            *m = ((&*m * self.beta1)? + (g * (1.0 - self.beta1))?)?;
            let v = self.second.get_mut(name).expect("moment per parameter");
            *v = ((&*v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&*m / c1)?;
            let v_hat = (&*v / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use candle_core::Device;
    use rand::SeedableRng;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::paper();
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert!((lr_at(10_000, &cfg) - 1e-4).abs() < 1e-15);
        let expected = 1e-4 * (10_000.0 * 0.999996f64.ln()).exp();
        assert!((lr_at(20_000, &cfg) - expected).abs() < 1e-12);
        assert!((lr_at(20_000, &cfg) - 9.6079e-5).abs() < 1e-9);
        // both branches agree at the boundary
        let after = cfg.lr * cfg.gamma.powf(0.0);
        assert_eq!(lr_at(cfg.warmup_steps, &cfg), after);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let dev = Device::Cpu;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::new(DType::F64, &dev);
        ps.create("w", 3, Init::Values(vec![1.0, -2.0, 3.0]), &mut rng).unwrap();
        let mut opt = Adam::new(&ps, 0.8, 0.99).unwrap();
        for _ in 0..500 {
            let w = ps.get("w").unwrap().as_tensor();
            let loss = w.sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            let (g, _) = clipped_grads(&ps, &grads, 10.0).unwrap();
            opt.apply(&ps, &g, 0.05).unwrap();
        }
        let w: Vec<f64> = ps.get("w").unwrap().as_tensor().to_vec1().unwrap();
        assert!(w.iter().all(|v| v.abs() < 0.05), "{w:?}");
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let dev = Device::Cpu;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::new(DType::F64, &dev);
        ps.create("a", 2, Init::Values(vec![30.0, 40.0]), &mut rng).unwrap();
        let a = ps.get("a").unwrap().as_tensor();
        let loss = (a.sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        let grads = loss.backward().unwrap();
        let (g, norm) = clipped_grads(&ps, &grads, 10.0).unwrap();
        assert!((norm - 50.0).abs() < 1e-9);
        let v: Vec<f64> = g["a"].to_vec1().unwrap();
        let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
        assert!((n - 10.0).abs() < 1e-4);
    }
}
