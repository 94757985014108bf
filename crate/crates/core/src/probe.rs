//! Linear probes over frozen hidden states and attention extraction.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assembly::ModelAssembly;
use crate::corpus::generator::{CodeSample, CPX_CAP, LENGTH_BUCKETS};
use crate::corpus::lang::AstTag;
use crate::corpus::vocab::{Vocabulary, CLS};
use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::transformer::{encode, EncoderInput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Token,
    Sequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    AstTag,
    Len,
    Cpx,
}

impl ProbeTask {
    pub const ALL: [ProbeTask; 3] = [ProbeTask::AstTag, ProbeTask::Len, ProbeTask::Cpx];

    pub fn name(self) -> &'static str {
        match self {
            ProbeTask::AstTag => "ast_tag",
            ProbeTask::Len => "len",
            ProbeTask::Cpx => "cpx",
        }
    }

    pub fn granularity(self) -> Granularity {
        match self {
            ProbeTask::AstTag => Granularity::Token,
            _ => Granularity::Sequence,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            ProbeTask::AstTag => AstTag::ALL.len(),
            ProbeTask::Len => LENGTH_BUCKETS,
            ProbeTask::Cpx => CPX_CAP + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub layer: usize,
}

impl ProbeDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, num_classes: usize, layer: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::Input(format!("{} feature rows for {} labels", features.rows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!("label {bad} outside {num_classes} classes")));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            layer,
        })
    }
}

/// Probe input: sequence-start token followed by the function body.
pub fn probe_input(sample: &CodeSample, vocab: &Vocabulary) -> Vec<usize> {
    std::iter::once(CLS).chain(vocab.encode(sample.body_tokens())).collect()
}

/// Hidden states at `layer` (0 = embeddings). Token granularity yields one
/// row per body token. Sequence granularity yields the sequence-start state,
/// except at layer 0 where that state is input-independent and the sum over
/// positions is used instead.
pub fn extract_representations(
    asm: &ModelAssembly,
    samples: &[&CodeSample],
    vocab: &Vocabulary,
    layer: usize,
    granularity: Granularity,
) -> Result<Tensor> {
    let l_max = asm.config().num_layers;
    if layer > l_max {
        return Err(Error::Input(format!("layer {layer} outside 0..={l_max}")));
    }
    let h = asm.config().hidden_size;
    let mut data = Vec::new();
    let mut rows = 0;
    for part in samples.chunks(32) {
        let seqs: Vec<Vec<usize>> = part.iter().map(|s| probe_input(s, vocab)).collect();
        let input = EncoderInput::from_sequences(&seqs)?;
        let out = encode(asm, &input, false)?;
        for (b, s) in seqs.iter().enumerate() {
            match granularity {
                Granularity::Token => {
                    for p in 1..s.len() {
                        data.extend_from_slice(out.vector(layer, b, p));
                        rows += 1;
                    }
                }
                Granularity::Sequence if layer == 0 => {
                    let mut acc = vec![0.0f32; h];
                    for p in 0..s.len() {
                        for (a, &v) in acc.iter_mut().zip(out.vector(0, b, p)) {
                            *a += v;
                        }
                    }
                    data.extend(acc);
                    rows += 1;
                }
                Granularity::Sequence => {
                    data.extend_from_slice(out.vector(layer, b, 0));
                    rows += 1;
                }
            }
        }
    }
    if rows == 0 {
        return Err(Error::Dataset("no probe features extracted".into()));
    }
    Tensor::new(vec![rows, h], data)
}

pub fn probe_labels(samples: &[&CodeSample], task: ProbeTask) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for s in samples {
        match task {
            ProbeTask::AstTag => {
                let tags = s
                    .body_tags()
                    .ok_or_else(|| Error::Dataset("sample without AST tags".into()))?;
                out.extend(tags.iter().map(|t| t.index()));
            }
            ProbeTask::Len => out.push(s.length_bucket),
            ProbeTask::Cpx => out.push(s.cpx_bucket),
        }
    }
    Ok(out)
}

pub fn probe_dataset(
    asm: &ModelAssembly,
    samples: &[&CodeSample],
    vocab: &Vocabulary,
    layer: usize,
    task: ProbeTask,
) -> Result<ProbeDataset> {
    let features = extract_representations(asm, samples, vocab, layer, task.granularity())?;
    ProbeDataset::new(features, probe_labels(samples, task)?, task.num_classes(), layer)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub train_fraction: f64,
    pub seed: u64,
    /// Z-score features with training-split statistics.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            epochs: 200,
            train_fraction: 0.8,
            seed: 0,
            standardize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub weight: Tensor,
    pub bias: Tensor,
    mean: Vec<f32>,
    scale: Vec<f32>,
}

impl LinearProbe {
    fn prepare(&self, features: &Tensor) -> Tensor {
        let mut f = features.clone();
        let cols = f.cols();
        for (i, v) in f.data_mut().iter_mut().enumerate() {
            let j = i % cols;
            *v = (*v - self.mean[j]) * self.scale[j];
        }
        f
    }

    pub fn predict(&self, features: &Tensor) -> Result<Vec<usize>> {
        let f = self.prepare(features);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(f);
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let z = tape.matmul(x, w)?;
        let z = tape.add_row(z, b)?;
        let z = tape.value(z);
        Ok((0..z.rows())
            .map(|i| {
                let row = z.row(i);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub probe: LinearProbe,
    pub train_accuracy: f64,
    pub valid_accuracy: f64,
    /// Validation frequency of the most common training label.
    pub majority_fraction: f64,
}

/// Seeded 80/20 (by default) permutation split of `n` rows.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((n as f64 * train_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let valid = idx.split_off(cut);
    (idx, valid)
}

fn accuracy(pred: &[usize], gold: &[usize]) -> f64 {
    let hits = pred.iter().zip(gold).filter(|(a, b)| a == b).count();
    hits as f64 / gold.len().max(1) as f64
}

/// Multinomial logistic regression by full-batch gradient descent.
pub fn train_probe(ds: &ProbeDataset, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let mut present = vec![false; ds.num_classes];
    for &l in &ds.labels {
        present[l] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::Dataset("probing needs at least two classes".into()));
    }
    let n = ds.labels.len();
    if n < 2 {
        return Err(Error::Dataset("probing needs at least two examples".into()));
    }
    let (tr, va) = split_indices(n, cfg.train_fraction, cfg.seed);
    let h = ds.features.cols();
    let gather = |idx: &[usize]| -> Result<(Tensor, Vec<usize>)> {
        let mut d = Vec::with_capacity(idx.len() * h);
        for &i in idx {
            d.extend_from_slice(ds.features.row(i));
        }
        Ok((Tensor::new(vec![idx.len(), h], d)?, idx.iter().map(|&i| ds.labels[i]).collect()))
    };
    let (xtr, ytr) = gather(&tr)?;
    let (xva, yva) = gather(&va)?;

    let mut mean = vec![0.0f32; h];
    let mut scale = vec![1.0f32; h];
    if cfg.standardize {
        for j in 0..h {
            let col: Vec<f64> = (0..xtr.rows()).map(|i| xtr.at(i, j) as f64).collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64;
            mean[j] = m as f32;
            scale[j] = if var > 1e-12 { (1.0 / var.sqrt()) as f32 } else { 0.0 };
        }
    }
    let mut probe = LinearProbe {
        weight: Tensor::zeros(&[h, ds.num_classes]),
        bias: Tensor::zeros(&[ds.num_classes]),
        mean,
        scale,
    };
    let x = probe.prepare(&xtr);
    for _ in 0..cfg.epochs {
        let mut tape = Tape::<f32>::new();
        let xv = tape.constant(x.clone());
        let w = tape.leaf(probe.weight.clone(), true);
        let b = tape.leaf(probe.bias.clone(), true);
        let z = tape.matmul(xv, w)?;
        let z = tape.add_row(z, b)?;
        let loss = tape.cross_entropy(z, &ytr)?;
        tape.backward(loss)?;
        let gw = tape.grad(w).expect("weight grad").clone();
        let gb = tape.grad(b).expect("bias grad").clone();
        for (p, g) in probe.weight.data_mut().iter_mut().zip(gw.data()) {
            *p -= cfg.learning_rate * g;
        }
        for (p, g) in probe.bias.data_mut().iter_mut().zip(gb.data()) {
            *p -= cfg.learning_rate * g;
        }
    }
    let mut counts = vec![0usize; ds.num_classes];
    for &l in &ytr {
        counts[l] += 1;
    }
    let majority = (0..ds.num_classes).fold(0, |best, c| if counts[c] > counts[best] { c } else { best });
    let majority_fraction = yva.iter().filter(|&&l| l == majority).count() as f64 / yva.len() as f64;
    Ok(ProbeResult {
        train_accuracy: accuracy(&probe.predict(&xtr)?, &ytr),
        valid_accuracy: accuracy(&probe.predict(&xva)?, &yva),
        majority_fraction,
        probe,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeCurve {
    pub task: ProbeTask,
    /// Validation accuracy for layers `0..=num_layers`.
    pub accuracies: Vec<f64>,
    pub majority_fraction: f64,
}

/// Extract-and-probe at every layer with one shared split.
pub fn probe_curve(
    asm: &ModelAssembly,
    samples: &[&CodeSample],
    vocab: &Vocabulary,
    task: ProbeTask,
    cfg: &ProbeConfig,
) -> Result<ProbeCurve> {
    let mut accuracies = Vec::with_capacity(asm.config().num_layers + 1);
    let mut majority_fraction = 0.0;
    for layer in 0..=asm.config().num_layers {
        let ds = probe_dataset(asm, samples, vocab, layer, task)?;
        let r = train_probe(&ds, cfg)?;
        majority_fraction = r.majority_fraction;
        accuracies.push(r.valid_accuracy);
    }
    Ok(ProbeCurve {
        task,
        accuracies,
        majority_fraction,
    })
}

pub fn curves_csv(model: &str, curves: &[ProbeCurve]) -> String {
    let mut s = String::from("model,task,layer,accuracy,majority\n");
    for c in curves {
        for (l, a) in c.accuracies.iter().enumerate() {
            let _ = writeln!(s, "{model},{},{l},{a},{}", c.task.name(), c.majority_fraction);
        }
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadAttention {
    pub layer: usize,
    pub head: usize,
    pub row: Vec<f32>,
    /// `(position, weight)`, heaviest first, ties by position.
    pub top: Vec<(usize, f32)>,
}

/// Attention of `token_index` over `ids` for every layer and head.
pub fn attention_summary(asm: &ModelAssembly, ids: &[usize], token_index: usize, k: usize) -> Result<Vec<HeadAttention>> {
    if token_index >= ids.len() {
        return Err(Error::Input(format!("token index {token_index} outside sequence of {}", ids.len())));
    }
    let input = EncoderInput::from_sequences(&[ids.to_vec()])?;
    let out = encode(asm, &input, true)?;
    let mut res = Vec::new();
    for rec in &out.attention {
        let row = rec.weights.row(token_index).to_vec();
        let mut order: Vec<usize> = (0..row.len()).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        res.push(HeadAttention {
            layer: rec.layer,
            head: rec.head,
            top: order.iter().take(k).map(|&p| (p, row[p])).collect(),
            row,
        });
    }
    Ok(res)
}

pub fn tv_distance(a: &[f32], b: &[f32]) -> f64 {
    0.5 * a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>()
}

/// Total-variation distance per `(layer, head)` between two summaries of
/// the same input.
pub fn compare_attention(a: &[HeadAttention], b: &[HeadAttention]) -> Result<Vec<(usize, usize, f64)>> {
    if a.len() != b.len() {
        return Err(Error::Input("attention summaries cover different heads".into()));
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if (x.layer, x.head) != (y.layer, y.head) || x.row.len() != y.row.len() {
                return Err(Error::Input("attention summaries are not aligned".into()));
            }
            Ok((x.layer, x.head, tv_distance(&x.row, &y.row)))
        })
        .collect()
}

/// One row per `(layer, head)` with the full distribution.
pub fn attention_csv(model: &str, tokens: &[String], rows: &[HeadAttention]) -> String {
    let mut s = String::from("model,layer,head");
    for (i, t) in tokens.iter().enumerate() {
        let _ = write!(s, ",{i}:{}", t.replace(',', "<comma>"));
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{model},{},{}", r.layer, r.head);
        for w in &r.row {
            let _ = write!(s, ",{w}");
        }
        s.push('\n');
    }
    s
}
