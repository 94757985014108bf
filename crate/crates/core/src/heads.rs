//! Sequence pooling and the clone-pair classification head.

use crate::assembly::ModelAssembly;
use crate::error::{Error, Result};
use crate::params::Binder;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::transformer::{encode, encoder_forward, EncoderInput, ForwardCtx};

/// Final-layer state of the first (sequence-start) token of each sequence,
/// as a `batch × h` tape variable.
pub fn pooled_forward<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<T>,
    asm: &ModelAssembly,
    input: &EncoderInput,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let trace = encoder_forward(tape, binder, asm, input, ctx)?;
    let rows: Vec<usize> = (0..input.batch).map(|b| b * input.seq).collect();
    tape.select_rows(trace.last(), &rows)
}

/// Evaluation-mode pooled embeddings, `n × h`, computed in chunks.
pub fn pooled_embeddings(asm: &ModelAssembly, seqs: &[Vec<usize>], chunk: usize) -> Result<Tensor> {
    if seqs.is_empty() {
        return Err(Error::Input("no sequences to embed".into()));
    }
    let h = asm.config().hidden_size;
    let mut data = Vec::with_capacity(seqs.len() * h);
    for part in seqs.chunks(chunk.max(1)) {
        let input = EncoderInput::from_sequences(part)?;
        let out = encode(asm, &input, false)?;
        for b in 0..input.batch {
            data.extend_from_slice(out.vector(out.hidden.len() - 1, b, 0));
        }
    }
    Tensor::new(vec![seqs.len(), h], data)
}

/// `[u, v, |u−v|, u⊙v]` for row-aligned pooled embeddings.
pub fn pair_features<T: Scalar>(tape: &mut Tape<T>, u: Var, v: Var) -> Result<Var> {
    let d = tape.sub(u, v)?;
    let ad = tape.abs(d)?;
    let prod = tape.mul(u, v)?;
    tape.concat_cols(&[u, v, ad, prod])
}

/// Two-way logits for each pair `(a_i, b_i)`.
pub fn pair_logits<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<T>,
    asm: &ModelAssembly,
    a: &EncoderInput,
    b: &EncoderInput,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    if !asm.has_pair_head() {
        return Err(Error::Config("assembly has no pair classification head".into()));
    }
    if a.batch != b.batch {
        return Err(Error::Input(format!("{} left vs {} right pair members", a.batch, b.batch)));
    }
    let u = pooled_forward(tape, binder, asm, a, ctx)?;
    let v = pooled_forward(tape, binder, asm, b, ctx)?;
    let f = pair_features(tape, u, v)?;
    let w = binder.var(tape, "head.cls.w")?;
    let bias = binder.var(tape, "head.cls.b")?;
    let z = tape.matmul(f, w)?;
    tape.add_row(z, bias)
}

/// Predicted clone labels (`true` = same class) for each pair.
pub fn predict_pairs(asm: &ModelAssembly, pairs: &[(Vec<usize>, Vec<usize>)], chunk: usize) -> Result<Vec<bool>> {
    let mut out = Vec::with_capacity(pairs.len());
    for part in pairs.chunks(chunk.max(1)) {
        let left: Vec<Vec<usize>> = part.iter().map(|p| p.0.clone()).collect();
        let right: Vec<Vec<usize>> = part.iter().map(|p| p.1.clone()).collect();
        let a = EncoderInput::from_sequences(&left)?;
        let b = EncoderInput::from_sequences(&right)?;
        let mut tape = Tape::<f32>::new();
        let mut binder = Binder::frozen(asm.params());
        let logits = pair_logits(&mut tape, &mut binder, asm, &a, &b, &mut ForwardCtx::eval())?;
        let l = tape.value(logits);
        out.extend((0..l.rows()).map(|i| l.at(i, 1) > l.at(i, 0)));
    }
    Ok(out)
}
