//! Teacher-forced training of task adapters plus the summarization decoder.

use rand::Rng;

use super::{check_phase, chunks, fit, MetricsLog, Objective, TrainConfig, TrainOutcome};
use crate::adapters::Phase;
use crate::assembly::ModelAssembly;
use crate::corpus::vocab::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::params::Binder;
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;
use crate::transformer::{decoder_forward, encoder_forward, EncoderInput, ForwardCtx};

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryPair {
    /// Encoder input, starting with the sequence-start token.
    pub code: Vec<usize>,
    /// Reference summary without BOS/EOS.
    pub doc: Vec<usize>,
}

/// Mean next-token cross-entropy over the non-padding decoder positions.
pub fn seq2seq_loss<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<T>,
    asm: &ModelAssembly,
    batch: &[&SummaryPair],
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let codes: Vec<Vec<usize>> = batch.iter().map(|p| p.code.clone()).collect();
    let input = EncoderInput::from_sequences(&codes)?;
    let trace = encoder_forward(tape, binder, asm, &input, ctx)?;
    let dec_len = batch.iter().map(|p| p.doc.len() + 1).max().unwrap_or(1);
    let mut dec = Vec::with_capacity(batch.len() * dec_len);
    let mut valid = Vec::with_capacity(dec.capacity());
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (b, p) in batch.iter().enumerate() {
        dec.push(BOS);
        dec.extend_from_slice(&p.doc);
        let n = p.doc.len() + 1;
        dec.extend(std::iter::repeat(PAD).take(dec_len - n));
        valid.extend(std::iter::repeat(true).take(n));
        valid.extend(std::iter::repeat(false).take(dec_len - n));
        rows.extend((0..n).map(|t| b * dec_len + t));
        targets.extend_from_slice(&p.doc);
        targets.push(EOS);
    }
    let logits = decoder_forward(
        tape,
        binder,
        asm,
        trace.last(),
        &input.valid,
        input.seq,
        &dec,
        &valid,
        dec_len,
        ctx,
    )?;
    let picked = tape.select_rows(logits, &rows)?;
    tape.cross_entropy(picked, &targets)
}

/// Token-weighted validation loss.
pub fn seq2seq_validation_loss(asm: &ModelAssembly, valid: &[SummaryPair], chunk: usize) -> Result<f64> {
    if valid.is_empty() {
        return Err(Error::Dataset("empty summarization validation set".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for r in chunks(valid.len(), chunk) {
        let part: Vec<&SummaryPair> = valid[r].iter().collect();
        let n: usize = part.iter().map(|p| p.doc.len() + 1).sum();
        let mut tape = Tape::<f32>::new();
        let mut binder = Binder::frozen(asm.params());
        let l = seq2seq_loss(&mut tape, &mut binder, asm, &part, &mut ForwardCtx::eval())?;
        total += tape.value(l).item() as f64 * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

pub fn train_seq2seq(
    asm: &mut ModelAssembly,
    train: &[SummaryPair],
    valid: &[SummaryPair],
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<TrainOutcome> {
    check_phase(asm, cfg, &[Phase::TAdapterTask, Phase::FullFinetune])?;
    if !asm.has_decoder() {
        return Err(Error::Config("summarization needs a decoder".into()));
    }
    if train.is_empty() {
        return Err(Error::Dataset("empty summarization training set".into()));
    }
    let (bs, eb) = (cfg.batch_size, cfg.eval_batch);
    let obj = Objective {
        metric: "seq2seq_loss",
        higher_is_better: false,
        loss: Box::new(move |tape, binder, asm, rng, ctx| {
            let batch: Vec<&SummaryPair> = (0..bs).map(|_| &train[rng.gen_range(0..train.len())]).collect();
            seq2seq_loss(tape, binder, asm, &batch, ctx)
        }),
        validate: Box::new(move |asm| seq2seq_validation_loss(asm, valid, eb)),
    };
    fit(asm, cfg, obj, log)
}
