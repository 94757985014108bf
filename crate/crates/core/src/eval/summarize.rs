//! Autoregressive summary generation.

use serde::{Deserialize, Serialize};

use crate::assembly::ModelAssembly;
use crate::corpus::vocab::{BOS, EOS};
use crate::error::{Error, Result};
use crate::transformer::{decode_step, encode, DecoderState, EncoderInput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    Beam(usize),
}

fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln() + m;
    logits.iter().map(|&v| v as f64 - lse).collect()
}

/// First index of the largest value.
fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug)]
struct Hyp {
    tokens: Vec<usize>,
    logp: f64,
    done: bool,
}

impl Hyp {
    /// Length-normalized log-probability; EOS counts as a step.
    fn score(&self) -> f64 {
        let steps = self.tokens.len() + self.done as usize;
        if steps == 0 {
            0.0
        } else {
            self.logp / steps as f64
        }
    }
}

/// Summary tokens (without BOS/EOS) for one code sequence, at most
/// `max_len` long.
pub fn summarize(asm: &ModelAssembly, code: &[usize], max_len: usize, strategy: Strategy) -> Result<Vec<usize>> {
    if !asm.has_decoder() {
        return Err(Error::Config("summarization needs a trained decoder".into()));
    }
    let input = EncoderInput::from_sequences(&[code.to_vec()])?;
    let out = encode(asm, &input, false)?;
    let state = DecoderState::from_encoder(&out, 0)?;
    let max_len = max_len.min(asm.config().max_seq_len.saturating_sub(1));
    if max_len == 0 {
        return Ok(Vec::new());
    }
    match strategy {
        Strategy::Greedy => {
            let mut prefix = vec![BOS];
            while prefix.len() - 1 < max_len {
                let next = argmax(decode_step(asm, &state, &prefix)?.data());
                if next == EOS {
                    break;
                }
                prefix.push(next);
            }
            Ok(prefix[1..].to_vec())
        }
        Strategy::Beam(k) => {
            if k == 0 {
                return Err(Error::Input("beam width must be positive".into()));
            }
            let mut beams = vec![Hyp {
                tokens: Vec::new(),
                logp: 0.0,
                done: false,
            }];
            loop {
                if beams.iter().all(|h| h.done) {
                    break;
                }
                let mut cands: Vec<Hyp> = Vec::new();
                for h in &beams {
                    if h.done {
                        cands.push(h.clone());
                        continue;
                    }
                    let mut prefix = vec![BOS];
                    prefix.extend_from_slice(&h.tokens);
                    let lp = log_softmax(decode_step(asm, &state, &prefix)?.data());
                    let mut order: Vec<usize> = (0..lp.len()).collect();
                    order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
                    for &t in order.iter().take(k) {
                        let mut n = h.clone();
                        n.logp += lp[t];
                        if t == EOS {
                            n.done = true;
                        } else {
                            n.tokens.push(t);
                            n.done = n.tokens.len() >= max_len;
                        }
                        cands.push(n);
                    }
                }
                cands.sort_by(|a, b| b.score().total_cmp(&a.score()));
                cands.truncate(k);
                beams = cands;
            }
            Ok(beams.swap_remove(0).tokens)
        }
    }
}
