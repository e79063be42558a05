//! Re-pairing of per-source latents across batch items.

use std::collections::BTreeMap;

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::mixture::SourceId;

/// One independent permutation of `0..batch` per source.
pub fn draw_permutations<R: Rng + ?Sized>(
    sources: &[SourceId],
    batch: usize,
    rng: &mut R,
) -> BTreeMap<SourceId, Vec<u32>> {
    sources
        .iter()
        .map(|&s| {
            let mut p: Vec<u32> = (0..batch as u32).collect();
            p.shuffle(rng);
            (s, p)
        })
        .collect()
}

/// New item `i` combines source `s` of item `perm[s][i]`: the returned latent
/// is `Σ_s zq_s[perm_s(i)]` and the target `Σ_s x_s[perm_s(i)]`, summed in
/// source order. Absent sources must already be zeroed in both maps.
pub fn shuffle_latents(
    zq: &BTreeMap<SourceId, Tensor>,
    stems: &BTreeMap<SourceId, Tensor>,
    perms: &BTreeMap<SourceId, Vec<u32>>,
) -> Result<(Tensor, Tensor)> {
    let mut latent: Option<Tensor> = None;
    let mut target: Option<Tensor> = None;
    for (s, z) in zq {
        let x = stems
            .get(s)
            .ok_or_else(|| Error::Contract(format!("latent for `{s}` has no target stem")))?;
        let p = perms
            .get(s)
            .ok_or_else(|| Error::Contract(format!("no permutation for `{s}`")))?;
        let b = z.dim(0)?;
        if p.len() != b || x.dim(0)? != b {
            return Err(Error::Shape(format!("permutation of {} for batch of {b}", p.len())));
        }
        let idx = Tensor::from_slice(p, b, z.device())?;
        let zs = z.index_select(&idx, 0)?;
        let xs = x.index_select(&idx, 0)?;
        latent = Some(match latent {
            None => zs,
            Some(a) => (a + zs)?,
        });
        target = Some(match target {
            None => xs,
            Some(a) => (a + xs)?,
        });
    }
    match (latent, target) {
        (Some(l), Some(t)) => Ok((l, t)),
        _ => Err(Error::Contract("no latents to shuffle".into())),
    }
}
