//! In-batch negative sampling for clone retrieval.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;

use super::{check_phase, fit, MetricsLog, Objective, TrainConfig, TrainOutcome};
use crate::adapters::Phase;
use crate::assembly::ModelAssembly;
use crate::error::{Error, Result};
use crate::eval::retrieval::mean_map_at_r;
use crate::heads::{pooled_embeddings, pooled_forward};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::transformer::EncoderInput;

/// Symmetric cross-entropy over the `B × B` cosine-similarity matrix
/// divided by `tau`; row `i` of `anchors` matches row `i` of `positives`.
pub fn inbatch_loss<T: Scalar>(tape: &mut Tape<T>, anchors: Var, positives: Var, tau: f64) -> Result<Var> {
    let b = tape.shape(anchors)[0];
    if b < 2 {
        return Err(Error::Contract("in-batch contrastive loss needs at least two pairs".into()));
    }
    let a = tape.normalize_rows(anchors)?;
    let p = tape.normalize_rows(positives)?;
    let s = tape.matmul_nt(a, p)?;
    let s = tape.scale(s, T::from_f64(1.0 / tau))?;
    let targets: Vec<usize> = (0..b).collect();
    let l1 = tape.cross_entropy(s, &targets)?;
    let st = tape.transpose(s)?;
    let l2 = tape.cross_entropy(st, &targets)?;
    let l = tape.add(l1, l2)?;
    tape.scale(l, T::from_f64(0.5))
}

pub fn inbatch_loss_value(anchors: &Tensor, positives: &Tensor, tau: f64) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(anchors.cast());
    let p = tape.constant(positives.cast());
    let l = inbatch_loss(&mut tape, a, p, tau)?;
    Ok(tape.value(l).item())
}

/// `b` (anchor, positive) index pairs from `b` distinct classes.
pub fn sample_inbatch<R: Rng + ?Sized>(classes: &[usize], b: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    if b < 2 {
        return Err(Error::Contract("in-batch sampling needs a batch of at least two".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &c) in classes.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let eligible: Vec<&Vec<usize>> = by_class.values().filter(|m| m.len() >= 2).collect();
    if eligible.len() < b {
        return Err(Error::Dataset(format!(
            "only {} clone classes with two or more members for a batch of {b}",
            eligible.len()
        )));
    }
    Ok(sample(rng, eligible.len(), b)
        .into_iter()
        .map(|c| {
            let members = eligible[c];
            let two = sample(rng, members.len(), 2);
            (members[two.index(0)], members[two.index(1)])
        })
        .collect())
}

/// Trains with in-batch negatives; validation metric is MAP@R over `valid`.
pub fn train_retrieval_inbatch(
    asm: &mut ModelAssembly,
    train: (&[Vec<usize>], &[usize]),
    valid: (&[Vec<usize>], &[usize]),
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<TrainOutcome> {
    check_phase(asm, cfg, &[Phase::TAdapterTask, Phase::FullFinetune])?;
    let (items, classes) = train;
    let (v_items, v_classes) = valid;
    if items.len() != classes.len() || v_items.len() != v_classes.len() {
        return Err(Error::Input("items and clone classes differ in length".into()));
    }
    let (bs, tau, eb) = (cfg.batch_size, cfg.temperature as f64, cfg.eval_batch);
    let obj = Objective {
        metric: "map_at_r",
        higher_is_better: true,
        loss: Box::new(move |tape, binder, asm, rng, ctx| {
            let pairs = sample_inbatch(classes, bs, rng)?;
            let anchors: Vec<Vec<usize>> = pairs.iter().map(|p| items[p.0].clone()).collect();
            let positives: Vec<Vec<usize>> = pairs.iter().map(|p| items[p.1].clone()).collect();
            let a = pooled_forward(tape, binder, asm, &EncoderInput::from_sequences(&anchors)?, ctx)?;
            let p = pooled_forward(tape, binder, asm, &EncoderInput::from_sequences(&positives)?, ctx)?;
            inbatch_loss(tape, a, p, tau)
        }),
        validate: Box::new(move |asm| {
            let emb = pooled_embeddings(asm, v_items, eb)?;
            Ok(mean_map_at_r(&emb, v_classes)?.score)
        }),
    };
    fit(asm, cfg, obj, log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn needs_two_pairs() {
        let a = Tensor::full(&[1, 4], 1.0);
        assert!(matches!(inbatch_loss_value(&a, &a, 0.07), Err(Error::Contract(_))));
    }

    #[test]
    fn one_hot_codes_give_near_zero_loss() {
        let codes = Tensor::eye(8);
        assert!(inbatch_loss_value(&codes, &codes, 0.07).unwrap() < 1e-4);
    }

    #[test]
    fn sampling_uses_distinct_classes() {
        let classes: Vec<usize> = (0..40).map(|i| i / 4).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let pairs = sample_inbatch(&classes, 8, &mut rng).unwrap();
            let mut seen: Vec<usize> = pairs.iter().map(|p| classes[p.0]).collect();
            assert!(pairs.iter().all(|p| p.0 != p.1 && classes[p.0] == classes[p.1]));
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), 8);
        }
        assert!(sample_inbatch(&classes, 11, &mut rng).is_err());
    }
}
