//! Generator loss stack: multi-scale mel, LS-GAN adversarial and feature
//! matching, plus the quantizer terms.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use candle_core::{DType, Device, Tensor, D};

use crate::config::{LossWeights, MelScales};
use crate::dsp::{mel_energies, Waveform, MEL_FLOOR};
use crate::error::{Error, Result};
use crate::mixture::SourceId;
use crate::tensor_ops::LogMel;

/// Differentiable multi-scale log-mel L1 distance.
#[derive(Debug, Clone)]
pub struct MultiScaleMel {
    scales: Vec<LogMel>,
}

impl MultiScaleMel {
    pub fn new(sample_rate: u32, scales: &MelScales, dtype: DType, device: &Device) -> Result<Self> {
        scales.validate()?;
        let scales = scales
            .windows
            .iter()
            .zip(&scales.n_mels)
            .map(|(&w, &m)| LogMel::new(sample_rate, w, m, dtype, device))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self { scales })
    }

    /// Per-item loss of two `(batch, samples)` tensors, shape `(batch,)`.
    pub fn per_item(&self, est: &Tensor, target: &Tensor) -> Result<Tensor> {
        if est.dims() != target.dims() {
            return Err(Error::Shape(format!(
                "estimate {:?} vs target {:?}",
                est.dims(),
                target.dims()
            )));
        }
        let mut acc: Option<Tensor> = None;
        for lm in &self.scales {
            let d = (lm.forward(est)? - lm.forward(target)?)?
                .abs()?
                .mean(D::Minus1)?
                .mean(D::Minus1)?;
            acc = Some(match acc {
                None => d,
                Some(a) => (a + d)?,
            });
        }
        Ok((acc.expect("validated non-empty") / self.scales.len() as f64)?)
    }

    /// Batch mean of [`per_item`](Self::per_item).
    pub fn forward(&self, est: &Tensor, target: &Tensor) -> Result<Tensor> {
        Ok(self.per_item(est, target)?.mean_all()?)
    }
}

/// Multi-scale mel distance in metric mode (no graph, 64-bit accumulation).
pub fn multiscale_mel_loss(est: &Waveform, reference: &Waveform, scales: &MelScales) -> Result<f64> {
    scales.validate()?;
    est.check_compatible(reference)?;
    let mut total = 0.0;
    for (&w, &m) in scales.windows.iter().zip(&scales.n_mels) {
        let (_, a) = mel_energies(est.samples(), est.sample_rate(), w, m)?;
        let (_, b) = mel_energies(reference.samples(), reference.sample_rate(), w, m)?;
        let sum: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (x.max(MEL_FLOOR).ln() - y.max(MEL_FLOOR).ln()).abs())
            .sum();
        total += sum / a.len() as f64;
    }
    Ok(total / scales.windows.len() as f64)
}

/// Scores and intermediate features of a set of sub-discriminators.
#[derive(Debug, Clone)]
pub struct DiscOutputs {
    pub logits: Vec<Tensor>,
    pub features: Vec<Vec<Tensor>>,
}

impl DiscOutputs {
    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    /// Concatenates sub-discriminator lists of two stacks.
    pub fn extend(&mut self, other: DiscOutputs) {
        self.logits.extend(other.logits);
        self.features.extend(other.features);
    }

    fn check_matches(&self, other: &DiscOutputs) -> Result<()> {
        let shape_of = |o: &DiscOutputs| -> Vec<Vec<Vec<usize>>> {
            o.features
                .iter()
                .zip(&o.logits)
                .map(|(f, l)| {
                    f.iter()
                        .map(|t| t.dims().to_vec())
                        .chain(std::iter::once(l.dims().to_vec()))
                        .collect()
                })
                .collect()
        };
        if self.logits.len() != self.features.len() || shape_of(self) != shape_of(other) {
            return Err(Error::Shape("discriminator outputs differ in structure".into()));
        }
        if self.features.iter().any(Vec::is_empty) {
            return Err(Error::Shape("sub-discriminator without features".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GanLosses {
    pub d_loss: Tensor,
    pub g_adv: Tensor,
    pub feature_match: Tensor,
}

fn mean_over(terms: Vec<Tensor>) -> Result<Tensor> {
    let n = terms.len() as f64;
    let mut it = terms.into_iter();
    let first = it.next().ok_or_else(|| Error::Shape("no sub-discriminators".into()))?;
    let sum = it.try_fold(first, |a, t| a + t)?;
    Ok((sum / n)?)
}

/// Least-squares adversarial terms and L1 feature matching.
pub fn gan_losses(real: &DiscOutputs, fake: &DiscOutputs) -> Result<GanLosses> {
    real.check_matches(fake)?;
    let mut d = Vec::with_capacity(real.len());
    let mut g = Vec::with_capacity(real.len());
    let mut fm = Vec::with_capacity(real.len());
    for (r, f) in real.logits.iter().zip(&fake.logits) {
        let real_term = r.affine(-1.0, 1.0)?.sqr()?.mean_all()?;
        d.push((real_term + f.sqr()?.mean_all()?)?);
        g.push(f.affine(-1.0, 1.0)?.sqr()?.mean_all()?);
    }
    for (rf, ff) in real.features.iter().zip(&fake.features) {
        let layers = rf
            .iter()
            .zip(ff)
            .map(|(a, b)| Ok((a - b)?.abs()?.mean_all()?))
            .collect::<Result<Vec<_>>>()?;
        fm.push(mean_over(layers)?);
    }
    Ok(GanLosses {
        d_loss: mean_over(d)?,
        g_adv: mean_over(g)?,
        feature_match: mean_over(fm)?,
    })
}

/// A term of the total loss: the mixture reconstruction or one source's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Role {
    Mix,
    Source(SourceId),
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Mix => f.write_str("mix"),
            Role::Source(s) => write!(f, "{s}"),
        }
    }
}

/// Unweighted scalar terms of one role's generator loss.
#[derive(Debug, Clone)]
pub struct TermLosses {
    pub mel: Tensor,
    pub feature_match: Tensor,
    pub adversarial: Tensor,
    pub codebook: Option<Tensor>,
    pub commitment: Option<Tensor>,
    /// Share of the batch this role covers; the role's loss is scaled by it
    /// so the total equals the batch mean of per-item sums.
    pub batch_fraction: f64,
}

impl TermLosses {
    fn weighted(&self, w: &LossWeights) -> Result<Tensor> {
        let mut t = ((self.mel.affine(w.mel, 0.0)? + self.feature_match.affine(w.feature_match, 0.0)?)?
            + self.adversarial.affine(w.adversarial, 0.0)?)?;
        if let Some(c) = &self.codebook {
            t = (t + c.affine(w.codebook, 0.0)?)?;
        }
        if let Some(c) = &self.commitment {
            t = (t + c.affine(w.commitment, 0.0)?)?;
        }
        Ok(t.affine(self.batch_fraction, 0.0)?)
    }
}

/// Per-term values for logging, keyed `"{role}.{term}"` plus `"total"`.
pub type LossBreakdown = BTreeMap<String, f64>;

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Sums the weighted generator loss over the mixture and every required source.
pub fn total_generator_loss(
    terms: &BTreeMap<Role, TermLosses>,
    required: &BTreeSet<SourceId>,
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    if !terms.contains_key(&Role::Mix) {
        return Err(Error::Contract("no mixture reconstruction".into()));
    }
    if let Some(s) = required.iter().find(|s| !terms.contains_key(&Role::Source(**s))) {
        return Err(Error::Contract(format!("no reconstruction for active source `{s}`")));
    }
    let mut breakdown = LossBreakdown::new();
    let mut total: Option<Tensor> = None;
    for (role, t) in terms {
        breakdown.insert(format!("{role}.mel"), scalar(&t.mel)?);
        breakdown.insert(format!("{role}.feature_match"), scalar(&t.feature_match)?);
        breakdown.insert(format!("{role}.adversarial"), scalar(&t.adversarial)?);
        if let Some(c) = &t.codebook {
            breakdown.insert(format!("{role}.codebook"), scalar(c)?);
        }
        if let Some(c) = &t.commitment {
            breakdown.insert(format!("{role}.commitment"), scalar(c)?);
        }
        let w = t.weighted(weights)?;
        total = Some(match total {
            None => w,
            Some(a) => (a + w)?,
        });
    }
    let total = total.expect("mix present");
    let v = scalar(&total)?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("generator loss is {v}")));
    }
    breakdown.insert("total".into(), v);
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DiscConfig;
    use crate::disc::Discriminators;
    use crate::dsp::log_mel;
    use crate::gradcheck::{max_rel_error, spread};
    use crate::params::ParamStore;
    use crate::rvq::VqLayer;
    use candle_core::Var;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const GRAD_TOL: f64 = 1e-2;

    fn sine(freq: f64, amp: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
            .collect()
    }

    fn wave(v: &[f64]) -> Waveform {
        Waveform::new(v.iter().map(|&x| x as f32).collect(), 16000).unwrap()
    }

    fn small_scales() -> MelScales {
        MelScales {
            windows: vec![32, 64, 128],
            n_mels: vec![5, 10, 20],
        }
    }

    fn small_disc() -> DiscConfig {
        DiscConfig {
            periods: vec![2, 3],
            mpd_channels: vec![4, 4],
            stft_windows: vec![64, 32],
            stft_channels: 4,
        }
    }

    fn outputs(logits: &[f64], feats: &[f64]) -> DiscOutputs {
        let dev = Device::Cpu;
        DiscOutputs {
            logits: logits.iter().map(|&v| Tensor::full(v, (2, 3), &dev).unwrap()).collect(),
            features: feats
                .iter()
                .map(|&v| vec![Tensor::full(v, (2, 4), &dev).unwrap(), Tensor::full(v, 5, &dev).unwrap()])
                .collect(),
        }
    }

    fn value(t: &Tensor) -> f64 {
        scalar(t).unwrap()
    }

    #[test]
    fn mel_loss_identity_and_sign_blindness() {
        let x = wave(&sine(1000.0, 0.5, 4096));
        let neg = wave(&sine(1000.0, -0.5, 4096));
        let scales = MelScales::default();
        assert_eq!(multiscale_mel_loss(&x, &x, &scales).unwrap(), 0.0);
        assert!(multiscale_mel_loss(&neg, &x, &scales).unwrap() < 1e-9);
    }

    #[test]
    fn mel_loss_of_silence_is_the_distance_to_the_floor() {
        let x = wave(&sine(1000.0, 0.5, 4096));
        let zero = Waveform::zeros(4096, 16000);
        let scales = MelScales::default();
        let mut expect = 0.0;
        for (&w, &m) in scales.windows.iter().zip(&scales.n_mels) {
            let lm = log_mel(&x, w, m).unwrap();
            let floor = MEL_FLOOR.ln();
            expect += lm.log_mels.iter().map(|&v| (floor - v as f64).abs()).sum::<f64>() / lm.log_mels.len() as f64;
        }
        expect /= scales.windows.len() as f64;
        let got = multiscale_mel_loss(&zero, &x, &scales).unwrap();
        assert!(got > 0.0);
        assert!((got - expect).abs() < 1e-5 * expect, "{got} vs {expect}");
    }

    #[test]
    fn mel_loss_rejects_length_mismatch() {
        let a = wave(&sine(500.0, 0.5, 4096));
        let b = wave(&sine(500.0, 0.5, 4000));
        assert!(multiscale_mel_loss(&a, &b, &MelScales::default()).is_err());
        let m = MultiScaleMel::new(16000, &small_scales(), DType::F64, &Device::Cpu).unwrap();
        let ta = Tensor::zeros((1, 256), DType::F64, &Device::Cpu).unwrap();
        let tb = Tensor::zeros((1, 200), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(m.forward(&ta, &tb), Err(Error::Shape(_))));
    }

    #[test]
    fn tensor_mel_agrees_with_metric_mel() {
        let a = sine(700.0, 0.4, 2048);
        let b: Vec<f64> = sine(900.0, 0.3, 2048).iter().zip(&a).map(|(x, y)| x + 0.5 * y).collect();
        let scales = small_scales();
        let metric = multiscale_mel_loss(&wave(&a), &wave(&b), &scales).unwrap();
        let m = MultiScaleMel::new(16000, &scales, DType::F64, &Device::Cpu).unwrap();
        let ta = Tensor::from_vec(a, (1, 2048), &Device::Cpu).unwrap();
        let tb = Tensor::from_vec(b, (1, 2048), &Device::Cpu).unwrap();
        let t = value(&m.forward(&ta, &tb).unwrap());
        assert!((t - metric).abs() < 1e-4 * metric, "{t} vs {metric}");
    }

    #[test]
    fn least_squares_values() {
        let ones = outputs(&[1.0, 1.0], &[0.3, 0.2]);
        let zeros = outputs(&[0.0, 0.0], &[0.3, 0.2]);
        let g = gan_losses(&ones, &zeros).unwrap();
        assert_eq!(value(&g.d_loss), 0.0);
        assert_eq!(value(&g.g_adv), 1.0);
        assert_eq!(value(&g.feature_match), 0.0);
        let half = outputs(&[0.5, 0.5], &[0.0, 0.0]);
        let g = gan_losses(&half, &half).unwrap();
        assert_eq!(value(&g.d_loss), 0.5);
        assert_eq!(value(&g.g_adv), 0.25);
    }

    #[test]
    fn feature_matching_averages_layers_then_subdiscriminators() {
        let real = outputs(&[0.0, 0.0], &[1.0, 2.0]);
        let fake = outputs(&[0.0, 0.0], &[0.0, 0.0]);
        assert!((value(&gan_losses(&real, &fake).unwrap().feature_match) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn mismatched_structures_are_shape_errors() {
        let a = outputs(&[0.0, 0.0], &[0.0, 0.0]);
        let b = outputs(&[0.0], &[0.0]);
        assert!(matches!(gan_losses(&a, &b), Err(Error::Shape(_))));
    }

    fn term(v: f64, quantizer: bool) -> TermLosses {
        let t = |x: f64| Tensor::new(x, &Device::Cpu).unwrap();
        TermLosses {
            mel: t(v),
            feature_match: t(2.0 * v),
            adversarial: t(3.0 * v),
            codebook: quantizer.then(|| t(4.0 * v)),
            commitment: quantizer.then(|| t(5.0 * v)),
            batch_fraction: 1.0,
        }
    }

    #[test]
    fn total_loss_contract() {
        let speech = BTreeSet::from([SourceId::Speech]);
        let only_speech = BTreeMap::from([(Role::Source(SourceId::Speech), term(1.0, true))]);
        assert!(matches!(
            total_generator_loss(&only_speech, &speech, &LossWeights::default()),
            Err(Error::Contract(_))
        ));
        let only_mix = BTreeMap::from([(Role::Mix, term(1.0, false))]);
        assert!(matches!(
            total_generator_loss(&only_mix, &speech, &LossWeights::default()),
            Err(Error::Contract(_))
        ));
        let all: BTreeSet<SourceId> = SourceId::ALL.into_iter().collect();
        let mut terms = BTreeMap::from([(Role::Mix, term(1.0, false))]);
        for s in SourceId::ALL {
            terms.insert(Role::Source(s), term(0.5, true));
        }
        let (total, breakdown) = total_generator_loss(&terms, &all, &LossWeights::zero()).unwrap();
        assert_eq!(value(&total), 0.0);
        assert_eq!(breakdown.keys().filter(|k| k.ends_with(".mel")).count(), 4);
    }

    #[test]
    fn total_loss_is_additive() {
        let w = LossWeights::default();
        let all: BTreeSet<SourceId> = SourceId::ALL.into_iter().collect();
        let mut terms = BTreeMap::from([(Role::Mix, term(0.7, false))]);
        for (i, s) in SourceId::ALL.into_iter().enumerate() {
            terms.insert(Role::Source(s), term(0.1 * (i + 1) as f64, true));
        }
        let (total, _) = total_generator_loss(&terms, &all, &w).unwrap();
        let separate: f64 = terms
            .values()
            .map(|t| {
                let mut v = w.mel * value(&t.mel) + w.feature_match * value(&t.feature_match) + w.adversarial * value(&t.adversarial);
                v += t.codebook.as_ref().map_or(0.0, |c| w.codebook * value(c));
                v += t.commitment.as_ref().map_or(0.0, |c| w.commitment * value(c));
                v
            })
            .sum();
        assert!((value(&total) - separate).abs() <= 1e-6 * separate.abs());
    }

    #[test]
    fn single_track_item_has_two_roles_on_the_same_target() {
        let speech = BTreeSet::from([SourceId::Speech]);
        let terms = BTreeMap::from([(Role::Mix, term(1.0, false)), (Role::Source(SourceId::Speech), term(1.0, true))]);
        let (_, breakdown) = total_generator_loss(&terms, &speech, &LossWeights::default()).unwrap();
        let roles: BTreeSet<&str> = breakdown.keys().filter_map(|k| k.split_once('.').map(|(r, _)| r)).collect();
        assert_eq!(roles, BTreeSet::from(["mix", "speech"]));
    }

    fn signal_var(n: usize, seed: u64) -> Var {
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f64> = (0..n)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                0.3 * x
            })
            .collect();
        Var::from_vec(v, (1, n), &Device::Cpu).unwrap()
    }

    #[test]
    fn mel_gradient_matches_finite_differences() {
        let m = MultiScaleMel::new(16000, &small_scales(), DType::F64, &Device::Cpu).unwrap();
        let est = signal_var(512, 1);
        let target = Tensor::from_vec(sine(600.0, 0.4, 512), (1, 512), &Device::Cpu).unwrap();
        let err = max_rel_error(&est, &spread(512, 10), 1e-6, || m.forward(est.as_tensor(), &target)).unwrap();
        assert!(err < GRAD_TOL, "{err}");
    }

    #[test]
    fn adversarial_and_feature_gradients_match_finite_differences() {
        let disc = Discriminators::new(&small_disc(), 3, DType::F64, &Device::Cpu).unwrap();
        let fake = signal_var(256, 2);
        let real = Tensor::from_vec(sine(900.0, 0.4, 256), (1, 256), &Device::Cpu).unwrap();
        let real_out = disc.forward(&real).unwrap();
        let probe = spread(256, 10);
        let adv = max_rel_error(&fake, &probe, 1e-6, || {
            Ok(gan_losses(&real_out, &disc.forward(fake.as_tensor())?)?.g_adv)
        })
        .unwrap();
        assert!(adv < GRAD_TOL, "adversarial {adv}");
        let fm = max_rel_error(&fake, &probe, 1e-6, || {
            Ok(gan_losses(&real_out, &disc.forward(fake.as_tensor())?)?.feature_match)
        })
        .unwrap();
        assert!(fm < GRAD_TOL, "feature matching {fm}");
    }

    #[test]
    fn discriminator_gradient_matches_finite_differences() {
        let disc = Discriminators::new(&small_disc(), 4, DType::F64, &Device::Cpu).unwrap();
        let real = Tensor::from_vec(sine(900.0, 0.4, 256), (1, 256), &Device::Cpu).unwrap();
        let fake = signal_var(256, 5).as_tensor().detach();
        for name in ["mpd.p3.conv0.weight", "stftd.w32.conv1.weight"] {
            let var = disc.params().get(name).unwrap().clone();
            let err = max_rel_error(&var, &spread(var.elem_count(), 10), 1e-6, || {
                Ok(gan_losses(&disc.forward(&real)?, &disc.forward(&fake)?)?.d_loss)
            })
            .unwrap();
            assert!(err < GRAD_TOL, "{name}: {err}");
        }
    }

    #[test]
    fn quantizer_term_gradients_match_finite_differences() {
        let mut ps = ParamStore::new(DType::F64, &Device::Cpu);
        let layer = VqLayer::new(&mut ps, "vq", 8, 3, 16, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let z = signal_var(8 * 5, 7).as_tensor().reshape((1, 5, 8)).unwrap();
        let book = ps.get("vq.codebook").unwrap().clone();
        let used = layer.forward(&z, true).unwrap().codes;
        let probe: Vec<usize> = used.iter().flat_map(|&c| (0..3).map(move |j| c as usize * 3 + j)).take(10).collect();
        let err = max_rel_error(&book, &probe, 1e-6, || Ok(layer.forward(&z, true)?.codebook_loss.sum_all()?)).unwrap();
        assert!(err < GRAD_TOL, "codebook {err}");
        let down = ps.get("vq.down.weight").unwrap().clone();
        let err = max_rel_error(&down, &spread(down.elem_count(), 10), 1e-6, || {
            Ok(layer.forward(&z, true)?.commitment_loss.sum_all()?)
        })
        .unwrap();
        assert!(err < GRAD_TOL, "commitment {err}");
    }
}
