//! Experiment directories: a TOML config plus every artifact the pipeline
//! produces, one verb at a time or all at once.
//!
//! ```text
//! <dir>/config.toml
//! <dir>/corpus.jsonl, nl.jsonl
//! <dir>/checkpoints/*.ckpt
//! <dir>/logs/*.jsonl, timings.json
//! <dir>/reports/*.csv, *.json, summary.md
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSet, AdapterStackPolicy, Phase};
use crate::assembly::ModelAssembly;
use crate::budget::{parameter_budget, BudgetReport};
use crate::config::{AdapterConfig, ModelConfig};
use crate::corpus::generator::{generate_corpus, generate_nl_corpus, mini_language_vocab, problem_count, CodeSample, Corpus};
use crate::corpus::io::{load_corpus, save_corpus};
use crate::corpus::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::eval::report::reports_to_csv;
use crate::eval::retrieval::random_baseline;
use crate::eval::{build_cloze_items, evaluate_suite, EvalData, EvalReport, EvalTask};
use crate::params::ParamStore;
use crate::pipeline::{
    code_sequences, finetune_assembly, inference_assembly, nl_sequences, pretrain_backbone, split_by_class, task_assembly,
    train_language_adapters, train_task, without_tokens, DownstreamTask, Splits, TaskData, TaskSplit, CLOZE_MODES,
};
use crate::probe::{attention_csv, attention_summary, compare_attention, curves_csv, probe_curve, probe_input, ProbeConfig, ProbeCurve, ProbeTask};
use crate::train::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, MetricsLog, TrainConfig, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneSource {
    Code,
    Nl,
    /// Code from which every program using one of `holdout_tokens` is
    /// removed; the language adapters later see the full corpus.
    CodeHoldout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    /// 0 selects every problem the generator knows.
    pub problems: usize,
    pub solutions: usize,
    pub nl_documents: usize,
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            problems: 0,
            solutions: 4,
            nl_documents: 4000,
            valid_fraction: 0.1,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Step {
    GenCorpus,
    Pretrain,
    TrainLadapter,
    TrainTadapter,
    Finetune,
    Eval,
    Cloze,
    Probe,
    Attention,
    Budget,
    Report,
}

impl Step {
    pub const ALL: [Step; 11] = [
        Step::GenCorpus,
        Step::Pretrain,
        Step::TrainLadapter,
        Step::TrainTadapter,
        Step::Finetune,
        Step::Eval,
        Step::Cloze,
        Step::Probe,
        Step::Attention,
        Step::Budget,
        Step::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Step::GenCorpus => "gen-corpus",
            Step::Pretrain => "pretrain",
            Step::TrainLadapter => "train-ladapter",
            Step::TrainTadapter => "train-tadapter",
            Step::Finetune => "finetune",
            Step::Eval => "eval",
            Step::Cloze => "cloze",
            Step::Probe => "probe",
            Step::Attention => "attention",
            Step::Budget => "budget",
            Step::Report => "report",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub corpus: CorpusSpec,
    /// `vocab_size` is filled in from the generator vocabulary when 0.
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub source: BackboneSource,
    pub holdout_tokens: Vec<String>,
    pub tasks: Vec<DownstreamTask>,
    /// Stack task adapters over trained language adapters when available.
    pub stack_language: bool,
    pub pretrain: TrainConfig,
    pub ladapter: TrainConfig,
    pub tadapter: TrainConfig,
    pub finetune: TrainConfig,
    pub summary_len: usize,
    pub cloze_items: usize,
    pub probe: ProbeConfig,
    pub probe_samples: usize,
    /// Sample and body-token index for the attention verb.
    pub attention_sample: usize,
    pub attention_token: usize,
    pub steps: Vec<Step>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut pretrain = TrainConfig::for_phase(Phase::FullFinetune);
        pretrain.learning_rate = 1e-3;
        let mut ladapter = TrainConfig::for_phase(Phase::LAdapterMlm);
        ladapter.learning_rate = 1e-3;
        let mut tadapter = TrainConfig::for_phase(Phase::TAdapterTask);
        tadapter.learning_rate = 1e-3;
        let finetune = TrainConfig::for_phase(Phase::FullFinetune);
        Self {
            name: "experiment".into(),
            seed: 0,
            corpus: CorpusSpec::default(),
            model: ModelConfig::default(),
            adapter: AdapterConfig::default(),
            source: BackboneSource::Code,
            holdout_tokens: vec!["max".into(), "min".into()],
            tasks: DownstreamTask::ALL.to_vec(),
            stack_language: true,
            pretrain,
            ladapter,
            tadapter,
            finetune,
            summary_len: 16,
            cloze_items: 1000,
            probe: ProbeConfig::default(),
            probe_samples: 300,
            attention_sample: 0,
            attention_token: 0,
            steps: Step::ALL.to_vec(),
        }
    }
}

impl ExperimentConfig {
    /// A configuration small enough to run end to end in a couple of
    /// minutes on one core.
    pub fn quick() -> Self {
        let mut c = Self::default();
        c.corpus.problems = 60;
        c.corpus.nl_documents = 600;
        c.model.num_layers = 2;
        c.model.hidden_size = 32;
        c.model.ffn_size = 64;
        c.model.num_heads = 2;
        c.model.decoder_layers = 1;
        for t in [&mut c.pretrain, &mut c.ladapter, &mut c.tadapter, &mut c.finetune] {
            t.max_steps = 40;
            t.eval_every = 20;
            t.batch_size = 8;
        }
        c.probe.epochs = 50;
        c.probe_samples = 80;
        c.cloze_items = 100;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.resolve();
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Fills derived fields and pins every phase to its own phase tag.
    pub fn resolve(&mut self) {
        if self.model.vocab_size == 0 {
            self.model.vocab_size = mini_language_vocab().len();
        }
        self.pretrain.phase = Phase::FullFinetune;
        self.ladapter.phase = Phase::LAdapterMlm;
        self.tadapter.phase = Phase::TAdapterTask;
        self.finetune.phase = Phase::FullFinetune;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for t in [&self.pretrain, &self.ladapter, &self.tadapter, &self.finetune] {
            t.validate()?;
        }
        if self.model.vocab_size != mini_language_vocab().len() {
            return Err(Error::Config(format!(
                "vocab_size {} does not match the corpus vocabulary ({})",
                self.model.vocab_size,
                mini_language_vocab().len()
            )));
        }
        if self.corpus.solutions < 2 {
            return Err(Error::Config("clone classes need at least two solutions".into()));
        }
        if self.corpus.problems > problem_count() {
            return Err(Error::Config(format!("at most {} problems are available", problem_count())));
        }
        if self.adapter.drop_last_k > self.model.num_layers {
            return Err(Error::Config("drop_last_k exceeds layer count".into()));
        }
        Ok(())
    }
}

/// Exclusive hold on an experiment directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

pub struct Experiment {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    vocab: Vocabulary,
}

impl Experiment {
    /// Creates `dir` and writes `config` to it.
    pub fn create(dir: &Path, mut config: ExperimentConfig) -> Result<Self> {
        config.resolve();
        config.validate()?;
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.toml"), config.to_toml()?)?;
        Self::with_config(dir, config)
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("config.toml");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::with_config(dir, ExperimentConfig::from_toml(&text)?)
    }

    fn with_config(dir: &Path, config: ExperimentConfig) -> Result<Self> {
        for sub in ["checkpoints", "logs", "reports"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            vocab: mini_language_vocab(),
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.dir.join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn log_path(&self, name: &str) -> PathBuf {
        self.dir.join("logs").join(format!("{name}.jsonl"))
    }

    pub fn report_path(&self, name: &str) -> PathBuf {
        self.dir.join("reports").join(name)
    }

    fn seed(&self, salt: u64) -> u64 {
        self.config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(salt)
    }

    fn write_report(&self, name: &str, body: &str) -> Result<PathBuf> {
        let p = self.report_path(name);
        fs::write(&p, body)?;
        Ok(p)
    }

    fn record_timing(&self, step: &str, seconds: f64) -> Result<()> {
        let path = self.dir.join("logs").join("timings.json");
        let mut t = self.timings()?;
        t.insert(step.to_string(), seconds);
        fs::write(path, serde_json::to_string_pretty(&t)?)?;
        Ok(())
    }

    pub fn timings(&self) -> Result<BTreeMap<String, f64>> {
        let path = self.dir.join("logs").join("timings.json");
        if !path.exists() {
            return Ok(BTreeMap::new());
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    fn timed<T>(&self, step: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        self.record_timing(step, start.elapsed().as_secs_f64())?;
        Ok(out)
    }

    // ---- data ----

    pub fn gen_corpus(&self) -> Result<Corpus> {
        self.timed("gen-corpus", || {
            let c = &self.config.corpus;
            let problems = if c.problems == 0 { problem_count() } else { c.problems };
            let corpus = generate_corpus(self.seed(1), problems, c.solutions)?;
            save_corpus(&corpus, &self.dir.join("corpus.jsonl"))?;
            let nl = generate_nl_corpus(self.seed(2), c.nl_documents);
            let mut f = std::io::BufWriter::new(fs::File::create(self.dir.join("nl.jsonl"))?);
            for doc in &nl {
                writeln!(f, "{}", serde_json::to_string(doc)?)?;
            }
            f.flush()?;
            log::info!("generated {} code samples and {} NL documents", corpus.samples.len(), nl.len());
            Ok(corpus)
        })
    }

    pub fn corpus(&self) -> Result<Corpus> {
        let p = self.dir.join("corpus.jsonl");
        if !p.exists() {
            return Err(Error::Dataset(format!("{} missing; run gen-corpus first", p.display())));
        }
        load_corpus(&p)
    }

    pub fn nl_corpus(&self) -> Result<Vec<Vec<String>>> {
        let p = self.dir.join("nl.jsonl");
        let f = fs::File::open(&p).map_err(|e| Error::Dataset(format!("{}: {e}", p.display())))?;
        BufReader::new(f)
            .lines()
            .map(|l| Ok(serde_json::from_str(&l?)?))
            .collect()
    }

    pub fn splits(&self, corpus: &Corpus) -> Result<Splits> {
        let c = &self.config.corpus;
        split_by_class(corpus, c.valid_fraction, c.test_fraction, self.seed(3))
    }

    fn samples<'c>(corpus: &'c Corpus, idx: &[usize]) -> Vec<&'c CodeSample> {
        idx.iter().map(|&i| &corpus.samples[i]).collect()
    }

    pub fn task_data(&self, corpus: &Corpus, task: DownstreamTask) -> Result<TaskData> {
        let splits = self.splits(corpus)?;
        TaskData::build(task, corpus, &splits, &self.vocab, self.config.model.max_seq_len, self.seed(4))
    }

    // ---- checkpoints ----

    fn save(&self, name: &str, params: ParamStore, phase: Phase, policy: Option<AdapterStackPolicy>, out: &TrainOutcome, seed: u64) -> Result<()> {
        let mut notes = BTreeMap::new();
        notes.insert("metric".into(), out.metric.clone());
        notes.insert("best".into(), out.best.to_string());
        let ck = Checkpoint {
            config: self.config.model.clone(),
            params,
            optimizer: None,
            meta: CheckpointMeta {
                phase: Some(phase),
                step: out.steps,
                seed,
                policy,
                notes,
            },
        };
        save_checkpoint(&self.checkpoint_path(name), &ck)
    }

    fn load(&self, name: &str) -> Result<Checkpoint> {
        let p = self.checkpoint_path(name);
        if !p.exists() {
            return Err(Error::Checkpoint(format!("{} missing", p.display())));
        }
        let ck = load_checkpoint(&p)?;
        if ck.config != self.config.model {
            return Err(Error::Config(format!("{} was trained with a different model config", p.display())));
        }
        Ok(ck)
    }

    pub fn backbone(&self) -> Result<ParamStore> {
        Ok(self.load("backbone")?.params)
    }

    pub fn language_adapters(&self) -> Result<Option<AdapterSet>> {
        if !self.checkpoint_path("ladapter").exists() {
            return Ok(None);
        }
        Ok(Some(AdapterSet::from_store(&self.load("ladapter")?.params)?))
    }

    fn stacked_language(&self) -> Result<Option<AdapterSet>> {
        if self.config.stack_language {
            self.language_adapters()
        } else {
            Ok(None)
        }
    }

    // ---- training verbs ----

    pub fn run_pretrain(&self) -> Result<TrainOutcome> {
        self.timed("pretrain", || {
            let max = self.config.model.max_seq_len;
            let (train, valid) = match self.config.source {
                BackboneSource::Code => {
                    let corpus = self.corpus()?;
                    let s = self.splits(&corpus)?;
                    (code_sequences(&corpus, &s.train, &self.vocab, max), code_sequences(&corpus, &s.valid, &self.vocab, max))
                }
                BackboneSource::CodeHoldout => {
                    let corpus = self.corpus()?;
                    let s = self.splits(&corpus)?;
                    let tr = without_tokens(&corpus, &s.train, &self.config.holdout_tokens);
                    let va = without_tokens(&corpus, &s.valid, &self.config.holdout_tokens);
                    if tr.is_empty() || va.is_empty() {
                        return Err(Error::Dataset("holdout_tokens remove every pretraining sample".into()));
                    }
                    (code_sequences(&corpus, &tr, &self.vocab, max), code_sequences(&corpus, &va, &self.vocab, max))
                }
                BackboneSource::Nl => {
                    let seqs = nl_sequences(&self.nl_corpus()?, &self.vocab, max);
                    let cut = seqs.len() - (seqs.len() / 10).max(1);
                    (seqs[..cut].to_vec(), seqs[cut..].to_vec())
                }
            };
            let mut log = MetricsLog::new();
            let mut cfg = self.config.pretrain.clone();
            cfg.seed = self.seed(10);
            let (backbone, out) = pretrain_backbone(&self.config.model, self.seed(11), &train, &valid, &cfg, &mut log)?;
            log.write(&self.log_path("pretrain"))?;
            self.save("backbone", backbone, Phase::FullFinetune, None, &out, cfg.seed)?;
            Ok(out)
        })
    }

    pub fn run_train_ladapter(&self) -> Result<TrainOutcome> {
        self.timed("train-ladapter", || {
            let corpus = self.corpus()?;
            let s = self.splits(&corpus)?;
            let max = self.config.model.max_seq_len;
            let train = code_sequences(&corpus, &s.train, &self.vocab, max);
            let valid = code_sequences(&corpus, &s.valid, &self.vocab, max);
            let mut log = MetricsLog::new();
            let mut cfg = self.config.ladapter.clone();
            cfg.seed = self.seed(20);
            let backbone = self.backbone()?;
            let (asm, out) =
                train_language_adapters(&self.config.model, &self.config.adapter, &backbone, &train, &valid, &cfg, &mut log)?;
            log.write(&self.log_path("ladapter"))?;
            self.save("ladapter", asm.pluggable_params(), Phase::LAdapterMlm, Some(asm.policy().clone()), &out, cfg.seed)?;
            Ok(out)
        })
    }

    fn task_model_fresh(&self, task: DownstreamTask, backbone: &ParamStore) -> Result<ModelAssembly> {
        let lang = self.stacked_language()?;
        task_assembly(&self.config.model, &self.config.adapter, backbone, lang.as_ref(), task, self.seed(30))
    }

    pub fn run_train_tadapter(&self, task: DownstreamTask) -> Result<TrainOutcome> {
        self.timed(&format!("train-tadapter:{}", task.name()), || {
            let corpus = self.corpus()?;
            let data = self.task_data(&corpus, task)?;
            let backbone = self.backbone()?;
            let mut asm = self.task_model_fresh(task, &backbone)?;
            let mut log = MetricsLog::new();
            let mut cfg = self.config.tadapter.clone();
            cfg.seed = self.seed(31);
            let out = train_task(&mut asm, &data, &cfg, &mut log)?;
            log.write(&self.log_path(&format!("tadapter_{}", task.name())))?;
            let mut params = asm.params().subset("adapters.task.");
            params.extend(asm.params().subset("head."));
            params.extend(asm.params().subset("decoder."));
            self.save(
                &format!("tadapter_{}", task.name()),
                params,
                Phase::TAdapterTask,
                Some(asm.policy().clone()),
                &out,
                cfg.seed,
            )?;
            Ok(out)
        })
    }

    pub fn run_finetune(&self, task: DownstreamTask) -> Result<TrainOutcome> {
        self.timed(&format!("finetune:{}", task.name()), || {
            let corpus = self.corpus()?;
            let data = self.task_data(&corpus, task)?;
            let backbone = self.backbone()?;
            let mut asm = finetune_assembly(&self.config.model, &backbone, task, self.seed(40))?;
            let mut log = MetricsLog::new();
            let mut cfg = self.config.finetune.clone();
            cfg.seed = self.seed(41);
            let out = train_task(&mut asm, &data, &cfg, &mut log)?;
            log.write(&self.log_path(&format!("finetune_{}", task.name())))?;
            self.save(&format!("finetune_{}", task.name()), asm.params().clone(), Phase::FullFinetune, None, &out, cfg.seed)?;
            Ok(out)
        })
    }

    // ---- model views ----

    /// Backbone alone, or with the trained language adapters.
    pub fn encoder_model(&self, with_language: bool) -> Result<ModelAssembly> {
        let backbone = self.backbone()?;
        let n = self.config.model.num_layers;
        match (with_language, self.language_adapters()?) {
            (true, Some(set)) => inference_assembly(
                &self.config.model,
                &backbone,
                &set,
                &AdapterStackPolicy::language_only(n),
                ParamStore::new(),
            ),
            (true, None) => Err(Error::Checkpoint("no trained language adapters; run train-ladapter".into())),
            (false, _) => inference_assembly(
                &self.config.model,
                &backbone,
                &AdapterSet::default(),
                &AdapterStackPolicy::none(n),
                ParamStore::new(),
            ),
        }
    }

    pub fn tadapter_model(&self, task: DownstreamTask) -> Result<ModelAssembly> {
        let ck = self.load(&format!("tadapter_{}", task.name()))?;
        let backbone = self.backbone()?;
        let mut asm = self.task_model_fresh(task, &backbone)?;
        if let Some(p) = &ck.meta.policy {
            if p != asm.policy() {
                return Err(Error::Checkpoint("task adapters were trained with a different stacking policy".into()));
            }
        }
        asm.load_params(&ck.params)?;
        Ok(asm)
    }

    pub fn finetune_model(&self, task: DownstreamTask) -> Result<ModelAssembly> {
        let ck = self.load(&format!("finetune_{}", task.name()))?;
        let mut asm = finetune_assembly(&self.config.model, &ck.params.subset("backbone."), task, self.seed(40))?;
        asm.load_params(&ck.params)?;
        Ok(asm)
    }

    // ---- evaluation verbs ----

    pub fn run_eval(&self) -> Result<Vec<EvalReport>> {
        self.timed("eval", || {
            let corpus = self.corpus()?;
            let mut reports = Vec::new();
            for &task in &self.config.tasks {
                let data = self.task_data(&corpus, task)?;
                let et = task.eval_task(self.config.summary_len);
                let mut variants: Vec<(&str, ModelAssembly)> = Vec::new();
                if self.checkpoint_path(&format!("tadapter_{}", task.name())).exists() {
                    variants.push(("tadapter", self.tadapter_model(task)?));
                }
                if self.checkpoint_path(&format!("finetune_{}", task.name())).exists() {
                    variants.push(("finetune", self.finetune_model(task)?));
                }
                if task == DownstreamTask::Retrieval {
                    variants.push(("backbone", self.encoder_model(false)?));
                }
                for (name, asm) in &variants {
                    reports.push(evaluate_suite(name, asm, &et, &data.test.as_eval(), &self.vocab)?);
                }
                if let TaskSplit::Retrieval { classes, .. } = &data.test {
                    let start = Instant::now();
                    let value = random_baseline(classes, self.config.model.hidden_size, 20, self.seed(50))?;
                    reports.push(EvalReport {
                        model: "random".into(),
                        task: et.name(),
                        metric: "map_at_r".into(),
                        value,
                        extra: BTreeMap::new(),
                        n: classes.len(),
                        seconds: start.elapsed().as_secs_f64(),
                        trainable_params: 0,
                        total_params: 0,
                    });
                }
            }
            self.write_report("eval.csv", &reports_to_csv(&reports))?;
            self.write_report("eval.json", &serde_json::to_string_pretty(&reports)?)?;
            Ok(reports)
        })
    }

    pub fn run_cloze(&self) -> Result<Vec<EvalReport>> {
        self.timed("cloze", || {
            let corpus = self.corpus()?;
            let s = self.splits(&corpus)?;
            let held: Vec<usize> = s.valid.iter().chain(&s.test).copied().collect();
            let samples = Self::samples(&corpus, &held);
            let mut models = vec![("backbone", self.encoder_model(false)?)];
            if self.language_adapters()?.is_some() {
                models.push(("ladapter", self.encoder_model(true)?));
            }
            let mut reports = Vec::new();
            for mode in CLOZE_MODES {
                let items = build_cloze_items(&samples, &self.vocab, mode, self.config.cloze_items, self.seed(60))?;
                if items.is_empty() {
                    log::warn!("no cloze items for {mode:?}");
                    continue;
                }
                for (name, asm) in &models {
                    reports.push(evaluate_suite(name, asm, &EvalTask::Cloze { mode }, &EvalData::Cloze(&items), &self.vocab)?);
                }
            }
            self.write_report("cloze.csv", &reports_to_csv(&reports))?;
            Ok(reports)
        })
    }

    pub fn run_probe(&self) -> Result<Vec<(String, ProbeCurve)>> {
        self.timed("probe", || {
            let corpus = self.corpus()?;
            let s = self.splits(&corpus)?;
            let mut idx = s.test.clone();
            idx.extend(&s.valid);
            idx.truncate(self.config.probe_samples);
            let samples = Self::samples(&corpus, &idx);
            let mut models = vec![("backbone", self.encoder_model(false)?)];
            if self.language_adapters()?.is_some() {
                models.push(("ladapter", self.encoder_model(true)?));
            }
            let mut out = Vec::new();
            let mut csv = String::new();
            for (name, asm) in &models {
                let mut cfg = self.config.probe.clone();
                cfg.seed = self.seed(70);
                let curves: Vec<ProbeCurve> = ProbeTask::ALL
                    .iter()
                    .map(|&t| probe_curve(asm, &samples, &self.vocab, t, &cfg))
                    .collect::<Result<_>>()?;
                let body = curves_csv(name, &curves);
                csv.push_str(if csv.is_empty() { &body } else { body.split_once('\n').map_or("", |x| x.1) });
                out.extend(curves.into_iter().map(|c| (name.to_string(), c)));
            }
            self.write_report("probe.csv", &csv)?;
            self.write_report("probe.json", &serde_json::to_string_pretty(&out)?)?;
            Ok(out)
        })
    }

    /// Attention of one body token of one sample for the backbone and, if
    /// trained, the language-adapted model, plus their per-head TV distance.
    pub fn run_attention(&self, sample: usize, token: usize) -> Result<String> {
        self.timed("attention", || {
            let corpus = self.corpus()?;
            let s = corpus
                .samples
                .get(sample)
                .ok_or_else(|| Error::Input(format!("sample {sample} outside corpus of {}", corpus.samples.len())))?;
            let mut ids = probe_input(s, &self.vocab);
            ids.truncate(self.config.model.max_seq_len);
            let tokens = self.vocab.decode(&ids);
            let index = token + 1;
            let base = attention_summary(&self.encoder_model(false)?, &ids, index, 3)?;
            let mut csv = attention_csv("backbone", &tokens, &base);
            if self.language_adapters()?.is_some() {
                let adapted = attention_summary(&self.encoder_model(true)?, &ids, index, 3)?;
                let more = attention_csv("ladapter", &tokens, &adapted);
                csv.push_str(more.split_once('\n').map_or("", |x| x.1));
                let mut tv = String::from("layer,head,tv_distance\n");
                for (l, h, d) in compare_attention(&base, &adapted)? {
                    tv.push_str(&format!("{l},{h},{d}\n"));
                }
                self.write_report("attention_tv.csv", &tv)?;
            }
            self.write_report("attention.csv", &csv)?;
            Ok(csv)
        })
    }

    /// Parameter budgets of every configured phase.
    pub fn run_budget(&self) -> Result<Vec<(String, BudgetReport)>> {
        let backbone = self.backbone()?;
        let cfg = &self.config.model;
        let mut out = Vec::new();
        let timings = self.timings()?;
        let mut push = |name: String, asm: ModelAssembly, phase: Phase, timing_key: &str| {
            let mut r = parameter_budget(&asm, phase);
            if let Some(&t) = timings.get(timing_key) {
                r.phase_seconds.insert(timing_key.to_string(), t);
            }
            out.push((name, r));
        };
        let lang = crate::pipeline::language_assembly(cfg, &self.config.adapter, &backbone, 0)?;
        push("ladapter".into(), lang, Phase::LAdapterMlm, "train-ladapter");
        for &task in &self.config.tasks {
            push(
                format!("tadapter_{}", task.name()),
                self.task_model_fresh(task, &backbone)?,
                Phase::TAdapterTask,
                &format!("train-tadapter:{}", task.name()),
            );
            push(
                format!("finetune_{}", task.name()),
                finetune_assembly(cfg, &backbone, task, 0)?,
                Phase::FullFinetune,
                &format!("finetune:{}", task.name()),
            );
        }
        let mut csv = String::from("model,phase,component,total,trainable,seconds\n");
        for (name, r) in &out {
            let secs: f64 = r.phase_seconds.values().sum();
            for (c, n) in &r.components {
                csv.push_str(&format!("{name},{},{},{},{},{secs:.3}\n", r.phase, c.name(), n.total, n.trainable));
            }
            csv.push_str(&format!("{name},{},all,{},{},{secs:.3}\n", r.phase, r.total, r.trainable));
        }
        self.write_report("budget.csv", &csv)?;
        self.write_report("budget.json", &serde_json::to_string_pretty(&out)?)?;
        Ok(out)
    }

    /// Collects every report CSV into one markdown summary.
    pub fn run_report(&self) -> Result<PathBuf> {
        let mut md = format!("# {}\n\n", self.config.name);
        for (title, file) in [
            ("Evaluation", "eval.csv"),
            ("Cloze", "cloze.csv"),
            ("Probing", "probe.csv"),
            ("Attention distance", "attention_tv.csv"),
            ("Parameter budget", "budget.csv"),
        ] {
            let p = self.report_path(file);
            if !p.exists() {
                continue;
            }
            md.push_str(&format!("## {title}\n\n"));
            md.push_str(&csv_to_markdown(&fs::read_to_string(p)?));
            md.push('\n');
        }
        let timings = self.timings()?;
        if !timings.is_empty() {
            md.push_str("## Wall clock\n\n| step | seconds |\n|---|---|\n");
            for (k, v) in timings {
                md.push_str(&format!("| {k} | {v:.1} |\n"));
            }
        }
        self.write_report("summary.md", &md)
    }

    /// Runs `steps` in order under the directory lock. `INCOMPLETE` exists
    /// while the run is in progress and stays behind if a step fails.
    pub fn run(&self, steps: &[Step]) -> Result<()> {
        let _lock = DirLock::acquire(&self.dir)?;
        let marker = self.dir.join(INCOMPLETE_MARKER);
        fs::write(&marker, "")?;
        for &step in steps {
            log::info!("step {}", step.name());
            self.run_step(step)?;
        }
        fs::remove_file(marker)?;
        Ok(())
    }

    pub fn run_step(&self, step: Step) -> Result<()> {
        match step {
            Step::GenCorpus => {
                self.gen_corpus()?;
            }
            Step::Pretrain => {
                self.run_pretrain()?;
            }
            Step::TrainLadapter => {
                self.run_train_ladapter()?;
            }
            Step::TrainTadapter => {
                for &t in &self.config.tasks {
                    self.run_train_tadapter(t)?;
                }
            }
            Step::Finetune => {
                for &t in &self.config.tasks {
                    self.run_finetune(t)?;
                }
            }
            Step::Eval => {
                self.run_eval()?;
            }
            Step::Cloze => {
                self.run_cloze()?;
            }
            Step::Probe => {
                self.run_probe()?;
            }
            Step::Attention => {
                self.run_attention(self.config.attention_sample, self.config.attention_token)?;
            }
            Step::Budget => {
                self.run_budget()?;
            }
            Step::Report => {
                self.run_report()?;
            }
        }
        Ok(())
    }
}

fn csv_to_markdown(csv: &str) -> String {
    let mut lines = csv.lines();
    let Some(head) = lines.next() else {
        return String::new();
    };
    let cols = head.split(',').count();
    let mut md = format!("| {} |\n|{}\n", head.replace(',', " | "), "---|".repeat(cols));
    for l in lines {
        md.push_str(&format!("| {} |\n", l.replace(',', " | ")));
    }
    md
}
