use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::MASK;
use crate::error::{Error, Result};

/// What happened to a selected position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Substitution {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub input_ids: Vec<usize>,
    /// Selected positions, ascending.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<usize>,
    pub substitutions: Vec<Substitution>,
}

impl MaskedBatch {
    /// Target id at every position, `None` where nothing was selected.
    pub fn dense_targets(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.input_ids.len()];
        for (&p, &t) in self.positions.iter().zip(&self.targets) {
            out[p] = Some(t);
        }
        out
    }
}

/// Number of positions selected for a sequence of `len` tokens.
pub fn masked_count(len: usize, rate: f64) -> usize {
    ((rate * len as f64).round() as usize).clamp(1, len)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub rate: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
        }
    }
}

/// Selects `round(rate * len)` positions uniformly; 80% become MASK, 10% a
/// random id from `random_ids`, 10% stay.
pub fn mask_for_mlm(ids: &[usize], rate: f64, seed: u64, random_ids: Range<usize>) -> Result<MaskedBatch> {
    mask_with(
        ids,
        &MaskingConfig {
            rate,
            ..MaskingConfig::default()
        },
        seed,
        random_ids,
    )
}

pub fn mask_with(ids: &[usize], cfg: &MaskingConfig, seed: u64, random_ids: Range<usize>) -> Result<MaskedBatch> {
    if ids.is_empty() {
        return Err(Error::Input("cannot mask an empty sample".into()));
    }
    if !(cfg.rate > 0.0 && cfg.rate < 1.0) {
        return Err(Error::Input(format!("mask rate must be in (0, 1), got {}", cfg.rate)));
    }
    if random_ids.is_empty() {
        return Err(Error::Input("empty range of replacement ids".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = masked_count(ids.len(), cfg.rate);
    let mut positions = sample(&mut rng, ids.len(), k).into_vec();
    positions.sort_unstable();
    let mut input_ids = ids.to_vec();
    let mut substitutions = Vec::with_capacity(k);
    for &p in &positions {
        let r: f64 = rng.gen();
        let s = if r < cfg.mask_prob {
            input_ids[p] = MASK;
            Substitution::Mask
        } else if r < cfg.mask_prob + cfg.random_prob {
            input_ids[p] = rng.gen_range(random_ids.clone());
            Substitution::Random
        } else {
            Substitution::Keep
        };
        substitutions.push(s);
    }
    let targets = positions.iter().map(|&p| ids[p]).collect();
    Ok(MaskedBatch {
        input_ids,
        positions,
        targets,
        substitutions,
    })
}
