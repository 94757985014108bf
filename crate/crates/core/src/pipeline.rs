//! Dataset views over a corpus and the model-building stages shared by the
//! experiment runner, the CLI and the tests.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSet, AdapterStackPolicy, Phase};
use crate::assembly::{build_assembly, ModelAssembly};
use crate::config::{AdapterConfig, ModelConfig};
use crate::corpus::generator::Corpus;
use crate::corpus::vocab::{Vocabulary, CLS};
use crate::error::{Error, Result};
use crate::eval::{ClozeMode, EvalData, EvalTask, Strategy};
use crate::params::ParamStore;
use crate::train::{
    make_pairs, train_mlm, train_pair_classifier, train_retrieval_inbatch, train_seq2seq, LabeledPair, MetricsLog,
    SummaryPair, TrainConfig, TrainOutcome,
};
use crate::transformer::{init_backbone, init_decoder, init_pair_head};

/// Sample indices partitioned by clone class, so no class straddles splits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_by_class(corpus: &Corpus, valid_fraction: f64, test_fraction: f64, seed: u64) -> Result<Splits> {
    if !(valid_fraction >= 0.0 && test_fraction >= 0.0 && valid_fraction + test_fraction < 1.0) {
        return Err(Error::Config("split fractions must be non-negative and sum below 1".into()));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut unlabeled = Vec::new();
    for (i, s) in corpus.samples.iter().enumerate() {
        match s.clone_class {
            Some(c) => by_class.entry(c).or_default().push(i),
            None => unlabeled.push(i),
        }
    }
    let mut classes: Vec<usize> = by_class.keys().copied().collect();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = classes.len();
    let n_valid = (n as f64 * valid_fraction).round() as usize;
    let n_test = (n as f64 * test_fraction).round() as usize;
    let collect = |cs: &[usize]| -> Vec<usize> {
        let mut v: Vec<usize> = cs.iter().flat_map(|c| by_class[c].iter().copied()).collect();
        v.sort_unstable();
        v
    };
    let mut train = collect(&classes[n_valid + n_test..]);
    train.extend(unlabeled);
    train.sort_unstable();
    Ok(Splits {
        valid: collect(&classes[..n_valid]),
        test: collect(&classes[n_valid..n_valid + n_test]),
        train,
    })
}

fn capped(mut v: Vec<usize>, max_len: usize) -> Vec<usize> {
    v.truncate(max_len);
    v
}

/// Start token followed by every code token, comment included.
/// The entries of `idx` whose function body uses none of `tokens`.
pub fn without_tokens(corpus: &Corpus, idx: &[usize], tokens: &[String]) -> Vec<usize> {
    idx.iter()
        .copied()
        .filter(|&i| !corpus.samples[i].body_tokens().iter().any(|t| tokens.contains(t)))
        .collect()
}

pub fn code_sequences(corpus: &Corpus, idx: &[usize], vocab: &Vocabulary, max_len: usize) -> Vec<Vec<usize>> {
    idx.iter()
        .map(|&i| {
            let ids = std::iter::once(CLS).chain(vocab.encode(&corpus.samples[i].code_tokens)).collect();
            capped(ids, max_len)
        })
        .collect()
}

/// Start token followed by the function body only.
pub fn body_sequences(corpus: &Corpus, idx: &[usize], vocab: &Vocabulary, max_len: usize) -> Vec<Vec<usize>> {
    idx.iter()
        .map(|&i| {
            let ids = std::iter::once(CLS).chain(vocab.encode(corpus.samples[i].body_tokens())).collect();
            capped(ids, max_len)
        })
        .collect()
}

pub fn nl_sequences(sentences: &[Vec<String>], vocab: &Vocabulary, max_len: usize) -> Vec<Vec<usize>> {
    sentences
        .iter()
        .map(|s| capped(std::iter::once(CLS).chain(vocab.encode(s)).collect(), max_len))
        .collect()
}

pub fn clone_classes(corpus: &Corpus, idx: &[usize]) -> Result<Vec<usize>> {
    idx.iter()
        .map(|&i| {
            corpus.samples[i]
                .clone_class
                .ok_or_else(|| Error::Dataset(format!("sample {i} has no clone class")))
        })
        .collect()
}

pub fn summary_pairs(corpus: &Corpus, idx: &[usize], vocab: &Vocabulary, max_len: usize) -> Vec<SummaryPair> {
    let bodies = body_sequences(corpus, idx, vocab, max_len);
    idx.iter()
        .zip(bodies)
        .filter_map(|(&i, code)| {
            corpus.samples[i].doc_tokens.as_ref().map(|d| SummaryPair {
                code,
                doc: capped(vocab.encode(d), max_len.saturating_sub(1)),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownstreamTask {
    Retrieval,
    CloneDetection,
    Summarization,
}

impl DownstreamTask {
    pub const ALL: [DownstreamTask; 3] = [
        DownstreamTask::Retrieval,
        DownstreamTask::CloneDetection,
        DownstreamTask::Summarization,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DownstreamTask::Retrieval => "retrieval",
            DownstreamTask::CloneDetection => "clone_detection",
            DownstreamTask::Summarization => "summarization",
        }
    }

    pub fn eval_task(self, summary_len: usize) -> EvalTask {
        match self {
            DownstreamTask::Retrieval => EvalTask::Retrieval,
            DownstreamTask::CloneDetection => EvalTask::PairClassification,
            DownstreamTask::Summarization => EvalTask::Summarization {
                strategy: Strategy::Greedy,
                max_len: summary_len,
            },
        }
    }

    /// Task-specific trainable extras: the pair classifier or the decoder.
    pub fn extras(self, config: &ModelConfig, seed: u64) -> Result<ParamStore> {
        match self {
            DownstreamTask::Retrieval => Ok(ParamStore::new()),
            DownstreamTask::CloneDetection => Ok(init_pair_head(config, seed)),
            DownstreamTask::Summarization => init_decoder(config, seed),
        }
    }
}

impl std::str::FromStr for DownstreamTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskSplit {
    Retrieval { items: Vec<Vec<usize>>, classes: Vec<usize> },
    Pairs(Vec<LabeledPair>),
    Summaries(Vec<SummaryPair>),
}

impl TaskSplit {
    pub fn as_eval(&self) -> EvalData<'_> {
        match self {
            TaskSplit::Retrieval { items, classes } => EvalData::Retrieval { items, classes },
            TaskSplit::Pairs(p) => EvalData::Pairs(p),
            TaskSplit::Summaries(s) => EvalData::Summaries(s),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TaskSplit::Retrieval { items, .. } => items.len(),
            TaskSplit::Pairs(p) => p.len(),
            TaskSplit::Summaries(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub task: DownstreamTask,
    pub train: TaskSplit,
    pub valid: TaskSplit,
    pub test: TaskSplit,
}

impl TaskData {
    /// Pair counts per split are `pairs_per_sample ×` the split size.
    pub fn build(
        task: DownstreamTask,
        corpus: &Corpus,
        splits: &Splits,
        vocab: &Vocabulary,
        max_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let make = |idx: &[usize], salt: u64| -> Result<TaskSplit> {
            Ok(match task {
                DownstreamTask::Retrieval => TaskSplit::Retrieval {
                    items: body_sequences(corpus, idx, vocab, max_len),
                    classes: clone_classes(corpus, idx)?,
                },
                DownstreamTask::CloneDetection => {
                    let items = body_sequences(corpus, idx, vocab, max_len);
                    let classes = clone_classes(corpus, idx)?;
                    TaskSplit::Pairs(make_pairs(&items, &classes, 2 * idx.len(), seed ^ salt)?)
                }
                DownstreamTask::Summarization => TaskSplit::Summaries(summary_pairs(corpus, idx, vocab, max_len)),
            })
        };
        Ok(Self {
            task,
            train: make(&splits.train, 0x11)?,
            valid: make(&splits.valid, 0x22)?,
            test: make(&splits.test, 0x33)?,
        })
    }
}

/// Trains whatever `asm.phase()` leaves trainable on `data`.
pub fn train_task(asm: &mut ModelAssembly, data: &TaskData, cfg: &TrainConfig, log: &mut MetricsLog) -> Result<TrainOutcome> {
    match (&data.train, &data.valid) {
        (TaskSplit::Retrieval { items, classes }, TaskSplit::Retrieval { items: vi, classes: vc }) => {
            train_retrieval_inbatch(asm, (items, classes), (vi, vc), cfg, log)
        }
        (TaskSplit::Pairs(t), TaskSplit::Pairs(v)) => train_pair_classifier(asm, t, v, cfg, log),
        (TaskSplit::Summaries(t), TaskSplit::Summaries(v)) => train_seq2seq(asm, t, v, cfg, log),
        _ => Err(Error::Input("train and validation splits hold different tasks".into())),
    }
}

/// Randomly initialised backbone assembled for full training.
pub fn fresh_backbone(config: &ModelConfig, seed: u64) -> Result<ModelAssembly> {
    let backbone = init_backbone(config, seed)?;
    build_assembly(
        config,
        &backbone,
        &AdapterSet::default(),
        &AdapterStackPolicy::none(config.num_layers),
        Phase::FullFinetune,
        ParamStore::new(),
    )
}

/// MLM pretraining from scratch; returns the backbone weights.
pub fn pretrain_backbone(
    config: &ModelConfig,
    seed: u64,
    train: &[Vec<usize>],
    valid: &[Vec<usize>],
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<(ParamStore, TrainOutcome)> {
    let mut asm = fresh_backbone(config, seed)?;
    let cfg = TrainConfig {
        phase: Phase::FullFinetune,
        ..cfg.clone()
    };
    let out = train_mlm(&mut asm, train, valid, &cfg, log)?;
    Ok((asm.backbone_params(), out))
}

/// Backbone with fresh language (and optionally invertible) adapters on
/// every layer, ready for the `l_adapter_mlm` phase.
pub fn language_assembly(
    config: &ModelConfig,
    adapter: &AdapterConfig,
    backbone: &ParamStore,
    seed: u64,
) -> Result<ModelAssembly> {
    let h = config.hidden_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inv = adapter.invertible.then(|| adapter.invertible_hidden_for(h));
    let set = AdapterSet::fresh_language(config.num_layers, h, adapter.bottleneck_for(h), inv, &mut rng)?;
    build_assembly(
        config,
        backbone,
        &set,
        &AdapterStackPolicy::language_only(config.num_layers),
        Phase::LAdapterMlm,
        ParamStore::new(),
    )
}

pub fn train_language_adapters(
    config: &ModelConfig,
    adapter: &AdapterConfig,
    backbone: &ParamStore,
    train: &[Vec<usize>],
    valid: &[Vec<usize>],
    cfg: &TrainConfig,
    log: &mut MetricsLog,
) -> Result<(ModelAssembly, TrainOutcome)> {
    let mut asm = language_assembly(config, adapter, backbone, cfg.seed)?;
    let cfg = TrainConfig {
        phase: Phase::LAdapterMlm,
        ..cfg.clone()
    };
    let out = train_mlm(&mut asm, train, valid, &cfg, log)?;
    Ok((asm, out))
}

/// Fresh task adapters on every layer, stacked over `language` when given
/// (minus the last `drop_last_k` layers), plus the task's head or decoder.
pub fn task_assembly(
    config: &ModelConfig,
    adapter: &AdapterConfig,
    backbone: &ParamStore,
    language: Option<&AdapterSet>,
    task: DownstreamTask,
    seed: u64,
) -> Result<ModelAssembly> {
    let h = config.hidden_size;
    let n = config.num_layers;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = language.cloned().unwrap_or_default();
    set.task.clear();
    set.add_fresh_task(n, h, adapter.bottleneck_for(h), &mut rng)?;
    let policy = match language {
        Some(_) => AdapterStackPolicy::stacked(n).apply_drop_policy(adapter.drop_last_k)?,
        None => {
            set.invertible = None;
            AdapterStackPolicy::task_only(n)
        }
    };
    build_assembly(config, backbone, &set, &policy, Phase::TAdapterTask, task.extras(config, seed ^ 0x5eed)?)
}

/// Plain backbone plus task extras with everything trainable.
pub fn finetune_assembly(config: &ModelConfig, backbone: &ParamStore, task: DownstreamTask, seed: u64) -> Result<ModelAssembly> {
    build_assembly(
        config,
        backbone,
        &AdapterSet::default(),
        &AdapterStackPolicy::none(config.num_layers),
        Phase::FullFinetune,
        task.extras(config, seed ^ 0x5eed)?,
    )
}

/// Frozen view of `backbone` with the given adapters mounted per `policy`,
/// for evaluation, cloze and probing.
pub fn inference_assembly(
    config: &ModelConfig,
    backbone: &ParamStore,
    adapters: &AdapterSet,
    policy: &AdapterStackPolicy,
    extras: ParamStore,
) -> Result<ModelAssembly> {
    let phase = if policy.any_task() {
        Phase::TAdapterTask
    } else {
        Phase::LAdapterMlm
    };
    build_assembly(config, backbone, adapters, policy, phase, extras)
}

/// The cloze modes reported by default.
pub const CLOZE_MODES: [ClozeMode; 2] = [ClozeMode::All, ClozeMode::MaxMin];

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generator::{generate_corpus, mini_language_vocab};

    #[test]
    fn splits_are_disjoint_by_class() {
        let c = generate_corpus(1, 30, 3).unwrap();
        let s = split_by_class(&c, 0.1, 0.2, 4).unwrap();
        assert_eq!(s.train.len() + s.valid.len() + s.test.len(), c.samples.len());
        let cls = |idx: &[usize]| -> std::collections::BTreeSet<usize> {
            idx.iter().map(|&i| c.samples[i].clone_class.unwrap()).collect()
        };
        assert!(cls(&s.train).is_disjoint(&cls(&s.test)));
        assert!(cls(&s.valid).is_disjoint(&cls(&s.test)));
        assert_eq!(cls(&s.test).len(), 6);
        assert_eq!(s, split_by_class(&c, 0.1, 0.2, 4).unwrap());
    }

    #[test]
    fn sequences_start_with_cls() {
        let c = generate_corpus(1, 4, 2).unwrap();
        let v = mini_language_vocab();
        let seqs = code_sequences(&c, &[0, 1], &v, 16);
        assert!(seqs.iter().all(|s| s[0] == CLS && s.len() <= 16));
        let pairs = summary_pairs(&c, &[0], &v, 64);
        assert_eq!(pairs[0].code[0], CLS);
        assert!(!pairs[0].doc.is_empty());
    }
}
