//! Post-layer-norm transformer encoder with adapter call sites, a tied MLM
//! head, and a causal decoder with cross-attention for summarization.
//!
//! Encoder layer `l` computes
//!
//! ```text
//! a   = LN1(x + Attn(x))
//! f   = FFN(a)                        // r_l
//! h_l = LN2(f + a)
//! out = h_l                           if no adapter is mounted at l
//!     = LN2(Adapters(h_l, f) + a)     otherwise
//! ```
//!
//! so a layer whose adapters return their residual reproduces the plain block
//! bit for bit.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapters::{bottleneck_block, invertible_forward_block, invertible_inverse_block, AdapterKind};
use crate::assembly::ModelAssembly;
use crate::config::ModelConfig;
use crate::corpus::vocab::PAD;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Names and shapes of every backbone tensor for `config`.
pub fn backbone_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let h = config.hidden_size;
    let f = config.ffn_size;
    let mut out = vec![
        ("backbone.embed.tok".to_string(), vec![config.vocab_size, h]),
        ("backbone.embed.pos".to_string(), vec![config.max_seq_len, h]),
        ("backbone.mlm.bias".to_string(), vec![config.vocab_size]),
    ];
    for l in 0..config.num_layers {
        let p = format!("backbone.layers.{l}");
        attention_shapes(&mut out, &format!("{p}.attn"), h);
        norm_shapes(&mut out, &format!("{p}.ln1"), h);
        ffn_shapes(&mut out, &format!("{p}.ffn"), h, f);
        norm_shapes(&mut out, &format!("{p}.ln2"), h);
    }
    out
}

pub fn decoder_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let h = config.hidden_size;
    let mut out = vec![
        ("decoder.embed.tok".to_string(), vec![config.vocab_size, h]),
        ("decoder.embed.pos".to_string(), vec![config.max_seq_len, h]),
        ("decoder.out.bias".to_string(), vec![config.vocab_size]),
    ];
    for l in 0..config.decoder_layers {
        let p = format!("decoder.layers.{l}");
        attention_shapes(&mut out, &format!("{p}.self"), h);
        norm_shapes(&mut out, &format!("{p}.ln1"), h);
        attention_shapes(&mut out, &format!("{p}.cross"), h);
        norm_shapes(&mut out, &format!("{p}.ln2"), h);
        ffn_shapes(&mut out, &format!("{p}.ffn"), h, config.ffn_size);
        norm_shapes(&mut out, &format!("{p}.ln3"), h);
    }
    out
}

fn attention_shapes(out: &mut Vec<(String, Vec<usize>)>, p: &str, h: usize) {
    for m in ["q", "k", "v", "o"] {
        out.push((format!("{p}.{m}.w"), vec![h, h]));
        out.push((format!("{p}.{m}.b"), vec![h]));
    }
}

fn norm_shapes(out: &mut Vec<(String, Vec<usize>)>, p: &str, h: usize) {
    out.push((format!("{p}.gain"), vec![h]));
    out.push((format!("{p}.bias"), vec![h]));
}

fn ffn_shapes(out: &mut Vec<(String, Vec<usize>)>, p: &str, h: usize, f: usize) {
    out.push((format!("{p}.in.w"), vec![h, f]));
    out.push((format!("{p}.in.b"), vec![f]));
    out.push((format!("{p}.out.w"), vec![f, h]));
    out.push((format!("{p}.out.b"), vec![h]));
}

fn init_from_shapes(shapes: Vec<(String, Vec<usize>)>, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (name, shape) in shapes {
        let t = if name.ends_with(".gain") {
            Tensor::full(&shape, 1.0)
        } else if name.ends_with(".b") || name.ends_with(".bias") {
            Tensor::zeros(&shape)
        } else if name.ends_with(".tok") || name.ends_with(".pos") {
            Tensor::uniform(&shape, 0.1, &mut rng)
        } else {
            let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            Tensor::uniform(&shape, bound, &mut rng)
        };
        store.insert(name, t);
    }
    store
}

/// Fresh backbone weights: Xavier-uniform projections, unit norm gains,
/// embeddings uniform in `±0.1`.
pub fn init_backbone(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    Ok(init_from_shapes(backbone_shapes(config), seed))
}

pub fn init_decoder(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    Ok(init_from_shapes(decoder_shapes(config), seed))
}

/// Two-way classifier over `[u, v, |u-v|, u⊙v]`.
pub fn init_pair_head(config: &ModelConfig, seed: u64) -> ParamStore {
    init_from_shapes(
        vec![
            ("head.cls.w".into(), vec![4 * config.hidden_size, 2]),
            ("head.cls.b".into(), vec![2]),
        ],
        seed,
    )
}

/// A padded batch of token sequences, flattened row-major as `batch × seq`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderInput {
    pub ids: Vec<usize>,
    pub valid: Vec<bool>,
    pub batch: usize,
    pub seq: usize,
}

impl EncoderInput {
    pub fn new(ids: Vec<usize>, valid: Vec<bool>, batch: usize, seq: usize) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq || valid.len() != ids.len() {
            return Err(Error::Input(format!(
                "encoder input of {} ids / {} flags for {batch}x{seq}",
                ids.len(),
                valid.len()
            )));
        }
        Ok(Self { ids, valid, batch, seq })
    }

    /// Right-pads with PAD to the longest sequence.
    pub fn from_sequences(seqs: &[Vec<usize>]) -> Result<Self> {
        let seq = seqs.iter().map(Vec::len).max().unwrap_or(0);
        if seqs.is_empty() || seqs.iter().any(Vec::is_empty) {
            return Err(Error::Input("empty sequence in encoder batch".into()));
        }
        let mut ids = Vec::with_capacity(seqs.len() * seq);
        let mut valid = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            ids.extend_from_slice(s);
            valid.extend(std::iter::repeat(true).take(s.len()));
            ids.extend(std::iter::repeat(PAD).take(seq - s.len()));
            valid.extend(std::iter::repeat(false).take(seq - s.len()));
        }
        Self::new(ids, valid, seqs.len(), seq)
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.seq > config.max_seq_len {
            return Err(Error::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                self.seq, config.max_seq_len
            )));
        }
        if let Some(&bad) = self.ids.iter().find(|&&i| i >= config.vocab_size) {
            return Err(Error::Input(format!("token id {bad} >= vocab_size {}", config.vocab_size)));
        }
        Ok(())
    }
}

/// Dropout and attention-capture settings for one forward pass.
pub struct ForwardCtx {
    pub dropout: f32,
    pub capture: bool,
    rng: ChaCha8Rng,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            dropout: 0.0,
            capture: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn capturing() -> Self {
        Self {
            capture: true,
            ..Self::eval()
        }
    }

    pub fn train(dropout: f32, seed: u64) -> Self {
        Self {
            dropout,
            capture: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.rng
    }
}

/// Tape handles for one encoder pass. `hidden[0]` is the embedding output
/// (after the invertible adapter, when mounted); `attention[l][b][head]` is
/// filled only when capturing.
pub struct EncoderTrace {
    pub hidden: Vec<Var>,
    pub attention: Vec<Vec<Vec<Var>>>,
}

impl EncoderTrace {
    pub fn last(&self) -> Var {
        *self.hidden.last().expect("encoder trace has the embedding layer")
    }
}

fn key_masks(valid: &[bool], batch: usize, q_len: usize, k_len: usize, causal: bool) -> Vec<Rc<[bool]>> {
    (0..batch)
        .map(|b| {
            let keys = &valid[b * k_len..(b + 1) * k_len];
            (0..q_len)
                .flat_map(|i| (0..k_len).map(move |j| keys[j] && (!causal || j <= i)))
                .collect::<Vec<_>>()
                .into()
        })
        .collect()
}

fn linear<T: Scalar>(tape: &mut Tape<T>, binder: &mut Binder<T>, p: &str, x: Var) -> Result<Var> {
    let w = binder.var(tape, &format!("{p}.w"))?;
    let b = binder.var(tape, &format!("{p}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn norm<T: Scalar>(tape: &mut Tape<T>, binder: &mut Binder<T>, p: &str, x: Var) -> Result<Var> {
    let g = binder.var(tape, &format!("{p}.gain"))?;
    let b = binder.var(tape, &format!("{p}.bias"))?;
    tape.layer_norm(x, g, b)
}

fn ffn<T: Scalar>(tape: &mut Tape<T>, binder: &mut Binder<T>, p: &str, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
    let z = linear(tape, binder, &format!("{p}.in"), x)?;
    let z = tape.gelu(z)?;
    let z = linear(tape, binder, &format!("{p}.out"), z)?;
    tape.dropout(z, ctx.dropout, &mut ctx.rng)
}

#[allow(clippy::too_many_arguments)]
fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<T>,
    cfg: &ModelConfig,
    p: &str,
    xq: Var,
    xkv: Var,
    batch: usize,
    q_len: usize,
    k_len: usize,
    masks: &[Rc<[bool]>],
    ctx: &mut ForwardCtx,
) -> Result<(Var, Vec<Vec<Var>>)> {
    let dh = cfg.head_dim();
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let q = linear(tape, binder, &format!("{p}.q"), xq)?;
    let k = linear(tape, binder, &format!("{p}.k"), xkv)?;
    let v = linear(tape, binder, &format!("{p}.v"), xkv)?;
    let mut rows = Vec::with_capacity(batch);
    let mut probs_all = Vec::with_capacity(batch);
    for b in 0..batch {
        let mut heads = Vec::with_capacity(cfg.num_heads);
        let mut probs = Vec::with_capacity(cfg.num_heads);
        for hd in 0..cfg.num_heads {
            let qs = tape.slice(q, b * q_len, q_len, hd * dh, dh)?;
            let ks = tape.slice(k, b * k_len, k_len, hd * dh, dh)?;
            let vs = tape.slice(v, b * k_len, k_len, hd * dh, dh)?;
            let s = tape.matmul_nt(qs, ks)?;
            let s = tape.scale(s, scale)?;
            let a = tape.softmax(s, Some(&masks[b]))?;
            probs.push(a);
            let a = tape.dropout(a, ctx.dropout, &mut ctx.rng)?;
            heads.push(tape.matmul(a, vs)?);
        }
        rows.push(if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? });
        probs_all.push(probs);
    }
    let merged = if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows)? };
    let out = linear(tape, binder, &format!("{p}.o"), merged)?;
    let out = tape.dropout(out, ctx.dropout, &mut ctx.rng)?;
    Ok((out, probs_all))
}

/// Applies the adapters mounted at `layer` to `(h_l, r_l)`.
fn adapter_stack<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<T>,
    asm: &ModelAssembly,
    layer: usize,
    h_l: Var,
    r_l: Var,
) -> Result<Var> {
    let (mut input, mut residual) = (h_l, r_l);
    if asm.has_adapter(AdapterKind::Language, layer) {
        let la = bottleneck_block(tape, binder, AdapterKind::Language, layer, input, residual)?;
        input = la;
        residual = la;
    }
    if asm.has_adapter(AdapterKind::Task, layer) {
        let ta = bottleneck_block(tape, binder, AdapterKind::Task, layer, input, residual)?;
        residual = ta;
    }
    Ok(residual)
}

pub fn encoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<T>,
    asm: &ModelAssembly,
    input: &EncoderInput,
    ctx: &mut ForwardCtx,
) -> Result<EncoderTrace> {
    let cfg = asm.config();
    input.check(cfg)?;
    let (batch, seq) = (input.batch, input.seq);
    let tok = binder.var(tape, "backbone.embed.tok")?;
    let pos = binder.var(tape, "backbone.embed.pos")?;
    let e_tok = tape.embedding(tok, &input.ids)?;
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let e_pos = tape.embedding(pos, &positions)?;
    let mut x = tape.add(e_tok, e_pos)?;
    if asm.has_invertible() {
        x = invertible_forward_block(tape, binder, x)?;
    }

    let masks = key_masks(&input.valid, batch, seq, seq, false);
    let mut hidden = vec![x];
    let mut attn_maps = Vec::new();
    for l in 0..cfg.num_layers {
        let p = format!("backbone.layers.{l}");
        let (att, probs) = attention(tape, binder, cfg, &format!("{p}.attn"), x, x, batch, seq, seq, &masks, ctx)?;
        let s = tape.add(x, att)?;
        let a = norm(tape, binder, &format!("{p}.ln1"), s)?;
        let f = ffn(tape, binder, &format!("{p}.ffn"), a, ctx)?;
        let s = tape.add(f, a)?;
        let h_l = norm(tape, binder, &format!("{p}.ln2"), s)?;
        let mounted = asm.has_adapter(AdapterKind::Language, l) || asm.has_adapter(AdapterKind::Task, l);
        x = if mounted {
            let o = adapter_stack(tape, binder, asm, l, h_l, f)?;
            let s = tape.add(o, a)?;
            norm(tape, binder, &format!("{p}.ln2"), s)?
        } else {
            h_l
        };
        hidden.push(x);
        if ctx.capture {
            attn_maps.push(probs);
        }
    }
    Ok(EncoderTrace { hidden, attention: attn_maps })
}

/// Vocabulary logits for the rows of `states`, passing through the inverse
/// invertible adapter first when requested and mounted.
pub fn mlm_head<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<T>,
    asm: &ModelAssembly,
    states: Var,
    use_inverse: bool,
) -> Result<Var> {
    let h = if use_inverse && asm.has_invertible() {
        invertible_inverse_block(tape, binder, states)?
    } else {
        states
    };
    let tok = binder.var(tape, "backbone.embed.tok")?;
    let bias = binder.var(tape, "backbone.mlm.bias")?;
    let logits = tape.matmul_nt(h, tok)?;
    tape.add_row(logits, bias)
}

/// Runs the decoder over `dec` (flattened `batch × dec_len`, right-padded)
/// against encoder states `enc` (`batch·enc_len × h`) and returns logits for
/// every decoder position.
#[allow(clippy::too_many_arguments)]
pub fn decoder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    binder: &mut Binder<T>,
    asm: &ModelAssembly,
    enc: Var,
    enc_valid: &[bool],
    enc_len: usize,
    dec: &[usize],
    dec_valid: &[bool],
    dec_len: usize,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let cfg = asm.config();
    if !asm.has_decoder() {
        return Err(Error::Config("assembly has no decoder".into()));
    }
    let batch = dec.len() / dec_len.max(1);
    if dec_len == 0 || dec_len > cfg.max_seq_len || dec.len() != batch * dec_len || dec_valid.len() != dec.len() {
        return Err(Error::Input(format!("decoder input of {} ids for length {dec_len}", dec.len())));
    }
    if let Some(&bad) = dec.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Input(format!("token id {bad} >= vocab_size")));
    }
    let tok = binder.var(tape, "decoder.embed.tok")?;
    let pos = binder.var(tape, "decoder.embed.pos")?;
    let e = tape.embedding(tok, dec)?;
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..dec_len).collect();
    let p = tape.embedding(pos, &positions)?;
    let mut x = tape.add(e, p)?;

    let self_masks = key_masks(dec_valid, batch, dec_len, dec_len, true);
    let cross_masks = key_masks(enc_valid, batch, dec_len, enc_len, false);
    for l in 0..cfg.decoder_layers {
        let p = format!("decoder.layers.{l}");
        let (sa, _) = attention(tape, binder, cfg, &format!("{p}.self"), x, x, batch, dec_len, dec_len, &self_masks, ctx)?;
        let s = tape.add(x, sa)?;
        x = norm(tape, binder, &format!("{p}.ln1"), s)?;
        let (ca, _) = attention(tape, binder, cfg, &format!("{p}.cross"), x, enc, batch, dec_len, enc_len, &cross_masks, ctx)?;
        let s = tape.add(x, ca)?;
        x = norm(tape, binder, &format!("{p}.ln2"), s)?;
        let f = ffn(tape, binder, &format!("{p}.ffn"), x, ctx)?;
        let s = tape.add(x, f)?;
        x = norm(tape, binder, &format!("{p}.ln3"), s)?;
    }
    let bias = binder.var(tape, "decoder.out.bias")?;
    let logits = tape.matmul_nt(x, tok)?;
    tape.add_row(logits, bias)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub sequence: usize,
    pub head: usize,
    /// `seq × seq`, row `i` is the distribution of query position `i`.
    pub weights: Tensor,
}

/// Evaluation-mode encoder results as plain values.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub batch: usize,
    pub seq: usize,
    pub valid: Vec<bool>,
    /// `num_layers + 1` tensors of shape `batch·seq × h`.
    pub hidden: Vec<Tensor>,
    pub attention: Vec<AttentionRecord>,
}

impl EncoderOutput {
    pub fn vector(&self, layer: usize, sequence: usize, position: usize) -> &[f32] {
        self.hidden[layer].row(sequence * self.seq + position)
    }

    pub fn final_states(&self) -> &Tensor {
        self.hidden.last().expect("at least the embedding layer")
    }

    pub fn attention_for(&self, layer: usize, sequence: usize, head: usize) -> Option<&AttentionRecord> {
        self.attention
            .iter()
            .find(|r| r.layer == layer && r.sequence == sequence && r.head == head)
    }
}

/// Evaluation-mode encoding; no gradients are tracked.
pub fn encode(asm: &ModelAssembly, input: &EncoderInput, capture: bool) -> Result<EncoderOutput> {
    let mut tape = Tape::<f32>::new();
    let mut binder = Binder::frozen(asm.params());
    let mut ctx = if capture { ForwardCtx::capturing() } else { ForwardCtx::eval() };
    let trace = encoder_forward(&mut tape, &mut binder, asm, input, &mut ctx)?;
    let hidden = trace.hidden.iter().map(|&v| tape.value(v).clone()).collect();
    let mut attention = Vec::new();
    for (layer, per_seq) in trace.attention.iter().enumerate() {
        for (sequence, heads) in per_seq.iter().enumerate() {
            for (head, &v) in heads.iter().enumerate() {
                attention.push(AttentionRecord {
                    layer,
                    sequence,
                    head,
                    weights: tape.value(v).clone(),
                });
            }
        }
    }
    Ok(EncoderOutput {
        batch: input.batch,
        seq: input.seq,
        valid: input.valid.clone(),
        hidden,
        attention,
    })
}

/// Vocabulary logits for every position of the final encoder layer.
pub fn mlm_logits(asm: &ModelAssembly, output: &EncoderOutput, use_inverse: bool) -> Result<Tensor> {
    let mut tape = Tape::<f32>::new();
    let mut binder = Binder::frozen(asm.params());
    let states = tape.constant(output.final_states().clone());
    let logits = mlm_head(&mut tape, &mut binder, asm, states, use_inverse)?;
    Ok(tape.value(logits).clone())
}

/// Encoder-side context for incremental decoding of one sequence.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub encoder_states: Tensor,
    pub encoder_valid: Vec<bool>,
}

impl DecoderState {
    pub fn from_encoder(output: &EncoderOutput, sequence: usize) -> Result<Self> {
        let h = output.final_states().cols();
        let start = sequence * output.seq;
        let mut data = Vec::with_capacity(output.seq * h);
        for p in 0..output.seq {
            data.extend_from_slice(output.final_states().row(start + p));
        }
        Ok(Self {
            encoder_states: Tensor::new(vec![output.seq, h], data)?,
            encoder_valid: output.valid[start..start + output.seq].to_vec(),
        })
    }
}

/// Next-token logits (`vocab_size`) after `prefix`, which starts with BOS.
pub fn decode_step(asm: &ModelAssembly, state: &DecoderState, prefix: &[usize]) -> Result<Tensor> {
    if prefix.is_empty() {
        return Err(Error::Input("decoder prefix must hold at least BOS".into()));
    }
    let mut tape = Tape::<f32>::new();
    let mut binder = Binder::frozen(asm.params());
    let enc = tape.constant(state.encoder_states.clone());
    let valid = vec![true; prefix.len()];
    let logits = decoder_forward(
        &mut tape,
        &mut binder,
        asm,
        enc,
        &state.encoder_valid,
        state.encoder_valid.len(),
        prefix,
        &valid,
        prefix.len(),
        &mut ForwardCtx::eval(),
    )?;
    let all = tape.value(logits);
    let v = all.cols();
    Tensor::new(vec![v], all.row(prefix.len() - 1).to_vec())
}
