use rand::Rng;

use super::{check_phase, chunks, fit, MetricsLog, Objective, TrainConfig, TrainOutcome};
use crate::adapters::Phase;
use crate::assembly::ModelAssembly;
use crate::corpus::masking::{mask_with, MaskedBatch, MaskingConfig};
use crate::corpus::vocab::SPECIALS;
use crate::error::{Error, Result};
use crate::params::Binder;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;
use crate::transformer::{encoder_forward, mlm_head, EncoderInput, ForwardCtx};

const VALID_MASK_SEED: u64 = 0x5EED_0F_4D41534B;

/// Masks everything after the leading sequence-start token.
pub fn mask_sequence(seq: &[usize], rate: f64, seed: u64, vocab_size: usize) -> Result<MaskedBatch> {
    if seq.len() < 2 {
        return Err(Error::Input("MLM sequence needs at least one token after the start token".into()));
    }
    let cfg = MaskingConfig {
        rate,
        ..MaskingConfig::default()
    };
    let mut m = mask_with(&seq[1..], &cfg, seed, SPECIALS.len()..vocab_size)?;
    m.input_ids.insert(0, seq[0]);
    for p in &mut m.positions {
        *p += 1;
    }
    Ok(m)
}

/// Mean cross-entropy over masked positions of `batch`.
pub fn mlm_loss<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<T>,
    asm: &ModelAssembly,
    batch: &[MaskedBatch],
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let seqs: Vec<Vec<usize>> = batch.iter().map(|m| m.input_ids.clone()).collect();
    let input = EncoderInput::from_sequences(&seqs)?;
    let trace = encoder_forward(tape, binder, asm, &input, ctx)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, m) in batch.iter().enumerate() {
        rows.extend(m.positions.iter().map(|&p| b * input.seq + p));
        targets.extend_from_slice(&m.targets);
    }
    let states = tape.select_rows(trace.last(), &rows)?;
    let logits = mlm_head(tape, binder, asm, states, asm.has_invertible())?;
    tape.cross_entropy(logits, &targets)
}

/// Masked-token loss on `valid` with fixed per-sequence masks, averaged
/// over all masked tokens.
pub fn mlm_validation_loss(asm: &ModelAssembly, valid: &[Vec<usize>], rate: f64, chunk: usize) -> Result<f64> {
    if valid.is_empty() {
        return Err(Error::Dataset("empty MLM validation set".into()));
    }
    let vocab = asm.config().vocab_size;
    let masked: Vec<MaskedBatch> = valid
        .iter()
        .enumerate()
        .map(|(i, s)| mask_sequence(s, rate, VALID_MASK_SEED.wrapping_add(i as u64), vocab))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut count = 0usize;
    for r in chunks(masked.len(), chunk) {
        let part = &masked[r];
        let n: usize = part.iter().map(|m| m.positions.len()).sum();
        let mut tape = Tape::<f32>::new();
        let mut binder = Binder::frozen(asm.params());
        let l = mlm_loss(&mut tape, &mut binder, asm, part, &mut ForwardCtx::eval())?;
        total += tape.value(l).item() as f64 * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// Masked language modeling. In the `l_adapter_mlm` phase only language
/// and invertible adapters move; `full_finetune` pretrains the backbone.
pub fn train_mlm(
    asm: &mut ModelAssembly,
    train: &[Vec<usize>],
    valid: &[Vec<usize>],
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<TrainOutcome> {
    check_phase(asm, cfg, &[Phase::LAdapterMlm, Phase::FullFinetune])?;
    if train.is_empty() {
        return Err(Error::Dataset("empty MLM training set".into()));
    }
    let vocab = asm.config().vocab_size;
    let (rate, bs, eb) = (cfg.mask_rate, cfg.batch_size, cfg.eval_batch);
    let obj = Objective {
        metric: "mlm_loss",
        higher_is_better: false,
        loss: Box::new(move |tape, binder, asm, rng, ctx| {
            let batch: Vec<MaskedBatch> = (0..bs)
                .map(|_| {
                    let s = &train[rng.gen_range(0..train.len())];
                    mask_sequence(s, rate, rng.gen(), vocab)
                })
                .collect::<Result<_>>()?;
            mlm_loss(tape, binder, asm, &batch, ctx)
        }),
        validate: Box::new(move |asm| mlm_validation_loss(asm, valid, rate, eb)),
    };
    fit(asm, cfg, obj, log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn start_token_is_never_masked() {
        let seq: Vec<usize> = std::iter::once(5).chain(10..30).collect();
        for seed in 0..50 {
            let m = mask_sequence(&seq, 0.3, seed, 40).unwrap();
            assert_eq!(m.input_ids[0], 5);
            assert!(m.positions.iter().all(|&p| p >= 1));
            assert_eq!(m.input_ids.len(), seq.len());
            for (&p, &t) in m.positions.iter().zip(&m.targets) {
                assert_eq!(seq[p], t);
            }
        }
    }
}
