//! Binary clone classification over pooled pair features.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{check_phase, fit, MetricsLog, Objective, TrainConfig, TrainOutcome};
use crate::adapters::Phase;
use crate::assembly::ModelAssembly;
use crate::error::{Error, Result};
use crate::eval::classify::{f1, ConfusionCounts};
use crate::heads::{pair_logits, predict_pairs};
use crate::transformer::EncoderInput;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPair {
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    /// `true` when both sides come from one clone class.
    pub label: bool,
}

/// `n` pairs, alternating positive and negative, drawn deterministically.
pub fn make_pairs(items: &[Vec<usize>], classes: &[usize], n: usize, seed: u64) -> Result<Vec<LabeledPair>> {
    if items.len() != classes.len() {
        return Err(Error::Input("items and clone classes differ in length".into()));
    }
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &c) in classes.iter().enumerate() {
        by_class.entry(c).or_default().push(i);
    }
    let multi: Vec<&Vec<usize>> = by_class.values().filter(|m| m.len() >= 2).collect();
    if multi.is_empty() || by_class.len() < 2 {
        return Err(Error::Dataset("need two classes and one class with two members".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let (i, j, label) = if k % 2 == 0 {
            let m = multi.choose(&mut rng).expect("non-empty");
            let two = rand::seq::index::sample(&mut rng, m.len(), 2);
            (m[two.index(0)], m[two.index(1)], true)
        } else {
            loop {
                let i = rng.gen_range(0..items.len());
                let j = rng.gen_range(0..items.len());
                if classes[i] != classes[j] {
                    break (i, j, false);
                }
            }
        };
        out.push(LabeledPair {
            left: items[i].clone(),
            right: items[j].clone(),
            label,
        });
    }
    Ok(out)
}

pub fn confusion(asm: &ModelAssembly, pairs: &[LabeledPair], chunk: usize) -> Result<ConfusionCounts> {
    let inputs: Vec<(Vec<usize>, Vec<usize>)> = pairs.iter().map(|p| (p.left.clone(), p.right.clone())).collect();
    let pred = predict_pairs(asm, &inputs, chunk)?;
    Ok(ConfusionCounts::from_predictions(
        pred.iter().copied().zip(pairs.iter().map(|p| p.label)),
    ))
}

/// Cross-entropy on `[u, v, |u−v|, u⊙v]` logits with early stopping on
/// validation F1.
pub fn train_pair_classifier(
    asm: &mut ModelAssembly,
    train: &[LabeledPair],
    valid: &[LabeledPair],
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<TrainOutcome> {
    check_phase(asm, cfg, &[Phase::TAdapterTask, Phase::FullFinetune])?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Dataset("empty pair set".into()));
    }
    let (bs, eb) = (cfg.batch_size, cfg.eval_batch);
    let obj = Objective {
        metric: "f1",
        higher_is_better: true,
        loss: Box::new(move |tape, binder, asm, rng, ctx| {
            let picks: Vec<&LabeledPair> = (0..bs).map(|_| &train[rng.gen_range(0..train.len())]).collect();
            let left: Vec<Vec<usize>> = picks.iter().map(|p| p.left.clone()).collect();
            let right: Vec<Vec<usize>> = picks.iter().map(|p| p.right.clone()).collect();
            let targets: Vec<usize> = picks.iter().map(|p| p.label as usize).collect();
            let a = EncoderInput::from_sequences(&left)?;
            let b = EncoderInput::from_sequences(&right)?;
            let logits = pair_logits(tape, binder, asm, &a, &b, ctx)?;
            tape.cross_entropy(logits, &targets)
        }),
        validate: Box::new(move |asm| Ok(f1(&confusion(asm, valid, eb)?).f1)),
    };
    fit(asm, cfg, obj, log)
}
