use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::bleu::smoothed_bleu4;
use super::classify::f1;
use super::cloze::{cloze_test, ClozeItem, ClozeMode};
use super::retrieval::mean_map_at_r;
use super::summarize::{summarize, Strategy};
use crate::assembly::ModelAssembly;
use crate::corpus::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::heads::pooled_embeddings;
use crate::train::pairs::{confusion, LabeledPair};
use crate::train::seq2seq::SummaryPair;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EvalTask {
    Cloze { mode: ClozeMode },
    Retrieval,
    PairClassification,
    Summarization { strategy: Strategy, max_len: usize },
}

impl EvalTask {
    pub fn name(&self) -> String {
        match self {
            EvalTask::Cloze { mode: ClozeMode::All } => "cloze_all".into(),
            EvalTask::Cloze { mode: ClozeMode::MaxMin } => "cloze_maxmin".into(),
            EvalTask::Retrieval => "retrieval".into(),
            EvalTask::PairClassification => "pair_classification".into(),
            EvalTask::Summarization { .. } => "summarization".into(),
        }
    }
}

pub enum EvalData<'a> {
    Cloze(&'a [ClozeItem]),
    Retrieval { items: &'a [Vec<usize>], classes: &'a [usize] },
    Pairs(&'a [LabeledPair]),
    Summaries(&'a [SummaryPair]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub extra: BTreeMap<String, f64>,
    pub n: usize,
    pub seconds: f64,
    pub trainable_params: usize,
    pub total_params: usize,
}

pub const CSV_HEADER: &str = "model,task,metric,value,n,seconds,trainable_params,total_params";

impl EvalReport {
    /// One CSV row per metric, the primary metric first.
    pub fn csv_rows(&self) -> String {
        let mut s = String::new();
        let rows = std::iter::once((&self.metric, &self.value)).chain(self.extra.iter());
        for (m, v) in rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.3},{},{}",
                self.model, self.task, m, v, self.n, self.seconds, self.trainable_params, self.total_params
            );
        }
        s
    }
}

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in reports {
        s.push_str(&r.csv_rows());
    }
    s
}

/// Runs the metric(s) of `task` on `data`.
pub fn evaluate_suite(
    model: &str,
    asm: &ModelAssembly,
    task: &EvalTask,
    data: &EvalData<'_>,
    vocab: &Vocabulary,
) -> Result<EvalReport> {
    let start = Instant::now();
    let mut extra = BTreeMap::new();
    let (metric, value, n) = match (task, data) {
        (EvalTask::Cloze { mode }, EvalData::Cloze(items)) => {
            let r = cloze_test(asm, items, *mode, vocab, 32)?;
            extra.insert("correct".into(), r.correct as f64);
            ("accuracy", r.accuracy, r.total)
        }
        (EvalTask::Retrieval, EvalData::Retrieval { items, classes }) => {
            let emb = pooled_embeddings(asm, items, 32)?;
            let m = mean_map_at_r(&emb, classes)?;
            extra.insert("skipped_queries".into(), m.skipped as f64);
            ("map_at_r", m.score, m.evaluated)
        }
        (EvalTask::PairClassification, EvalData::Pairs(pairs)) => {
            let s = f1(&confusion(asm, pairs, 32)?);
            extra.insert("precision".into(), s.precision);
            extra.insert("recall".into(), s.recall);
            extra.insert("accuracy".into(), s.accuracy);
            ("f1", s.f1, pairs.len())
        }
        (EvalTask::Summarization { strategy, max_len }, EvalData::Summaries(pairs)) => {
            if pairs.is_empty() {
                return Err(Error::Dataset("empty summarization set".into()));
            }
            let mut total = 0.0;
            for p in pairs.iter() {
                let out = summarize(asm, &p.code, *max_len, *strategy)?;
                total += smoothed_bleu4(&out, &p.doc);
            }
            let bleu = total / pairs.len() as f64;
            extra.insert("bleu_x100".into(), bleu * 100.0);
            ("smoothed_bleu4", bleu, pairs.len())
        }
        _ => {
            return Err(Error::Input(format!("dataset does not match task {}", task.name())));
        }
    };
    Ok(EvalReport {
        model: model.into(),
        task: task.name(),
        metric: metric.into(),
        value,
        extra,
        n,
        seconds: start.elapsed().as_secs_f64(),
        trainable_params: asm.trainable_params(),
        total_params: asm.total_params(),
    })
}
