//! Cloze tests: predict one masked token without any parameter updates.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::ModelAssembly;
use crate::corpus::generator::CodeSample;
use crate::corpus::vocab::{Vocabulary, CLS, MASK, SPECIALS};
use crate::error::{Error, Result};
use crate::params::Binder;
use crate::tape::Tape;
use crate::train::chunks;
use crate::transformer::{encoder_forward, mlm_head, EncoderInput, ForwardCtx};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClozeMode {
    All,
    MaxMin,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClozeItem {
    /// Model input with MASK at `position`.
    pub input: Vec<usize>,
    pub position: usize,
    pub gold: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClozeResult {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

fn masked_item(ids: &[usize], pos: usize) -> ClozeItem {
    let mut input = Vec::with_capacity(ids.len() + 1);
    input.push(CLS);
    input.extend_from_slice(ids);
    let gold = input[pos + 1];
    input[pos + 1] = MASK;
    ClozeItem {
        input,
        position: pos + 1,
        gold,
    }
}

/// One item per sample. `MaxMin` masks a `max`/`min` call name in the
/// function body and balances the two answers; `All` masks a random body
/// token. At most `limit` items.
pub fn build_cloze_items(
    samples: &[&CodeSample],
    vocab: &Vocabulary,
    mode: ClozeMode,
    limit: usize,
    seed: u64,
) -> Result<Vec<ClozeItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = match mode {
        ClozeMode::All => samples
            .iter()
            .map(|s| {
                let ids = vocab.encode(&s.code_tokens);
                let start = s.body_start();
                let pos = rng.gen_range(start..ids.len());
                masked_item(&ids, pos)
            })
            .collect::<Vec<_>>(),
        ClozeMode::MaxMin => {
            let (max_id, min_id) = (vocab.try_id("max")?, vocab.try_id("min")?);
            let mut by_gold = [Vec::new(), Vec::new()];
            for s in samples {
                let ids = vocab.encode(&s.code_tokens);
                let start = s.body_start();
                let spots: Vec<usize> = (start..ids.len()).filter(|&i| ids[i] == max_id || ids[i] == min_id).collect();
                if let Some(&pos) = spots.choose(&mut rng) {
                    by_gold[(ids[pos] == min_id) as usize].push(masked_item(&ids, pos));
                }
            }
            let per = by_gold[0].len().min(by_gold[1].len()).min(limit / 2);
            let mut out = Vec::with_capacity(2 * per);
            for g in &mut by_gold {
                g.shuffle(&mut rng);
                out.extend(g.drain(..per));
            }
            out
        }
    };
    items.shuffle(&mut rng);
    items.truncate(limit);
    Ok(items)
}

/// Predicted id from one row of vocabulary logits.
pub fn predict_from_logits(logits: &[f32], mode: ClozeMode, candidates: [usize; 2]) -> usize {
    match mode {
        ClozeMode::All => {
            let mut best = SPECIALS.len().min(logits.len() - 1);
            for (i, &v) in logits.iter().enumerate().skip(SPECIALS.len()) {
                if v > logits[best] {
                    best = i;
                }
            }
            best
        }
        ClozeMode::MaxMin => {
            if logits[candidates[1]] > logits[candidates[0]] {
                candidates[1]
            } else {
                candidates[0]
            }
        }
    }
}

/// Accuracy of masked-token prediction over `items`.
pub fn cloze_test(
    asm: &ModelAssembly,
    items: &[ClozeItem],
    mode: ClozeMode,
    vocab: &Vocabulary,
    chunk: usize,
) -> Result<ClozeResult> {
    if items.is_empty() {
        return Err(Error::Dataset("empty cloze set".into()));
    }
    let candidates = [vocab.try_id("max")?, vocab.try_id("min")?];
    if mode == ClozeMode::MaxMin {
        if let Some(bad) = items.iter().find(|it| !candidates.contains(&it.gold)) {
            return Err(Error::Dataset(format!(
                "max/min cloze item has gold token {:?}",
                vocab.token(bad.gold)
            )));
        }
    }
    let mut correct = 0;
    for r in chunks(items.len(), chunk) {
        let part = &items[r];
        let seqs: Vec<Vec<usize>> = part.iter().map(|i| i.input.clone()).collect();
        let input = EncoderInput::from_sequences(&seqs)?;
        let mut tape = Tape::<f32>::new();
        let mut binder = Binder::frozen(asm.params());
        let trace = encoder_forward(&mut tape, &mut binder, asm, &input, &mut ForwardCtx::eval())?;
        let rows: Vec<usize> = part.iter().enumerate().map(|(b, it)| b * input.seq + it.position).collect();
        let states = tape.select_rows(trace.last(), &rows)?;
        let logits = mlm_head(&mut tape, &mut binder, asm, states, asm.has_invertible())?;
        let l = tape.value(logits);
        for (b, it) in part.iter().enumerate() {
            if predict_from_logits(l.row(b), mode, candidates) == it.gold {
                correct += 1;
            }
        }
    }
    Ok(ClozeResult {
        correct,
        total: items.len(),
        accuracy: correct as f64 / items.len() as f64,
    })
}
