//! Oracles and checks shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::fs;
use std::path::Path;
use std::rc::Rc;

use codeadapt::adapters::{
    invertible_forward, invertible_inverse, AdapterKind, AdapterSet, AdapterStackPolicy, BottleneckAdapter,
    InvertibleAdapterPair, Phase,
};
use codeadapt::assembly::{build_assembly, ModelAssembly};
use codeadapt::config::{AdapterConfig, ModelConfig};
use codeadapt::corpus::generator::{generate_corpus, mini_language_vocab, CodeSample};
use codeadapt::eval::retrieval::RetrievalInstance;
use codeadapt::gradcheck::grad_check;
use codeadapt::params::{Binder, ParamStore};
use codeadapt::pipeline::{
    fresh_backbone, inference_assembly, language_assembly, split_by_class, task_assembly, train_task, DownstreamTask, TaskData,
};
use codeadapt::probe::{probe_curve, probe_dataset, train_probe, ProbeConfig, ProbeDataset, ProbeTask};
use codeadapt::tape::{Tape, Var};
use codeadapt::train::{MetricsLog, TrainConfig};
use codeadapt::transformer::{encode, encoder_forward, init_backbone, mlm_head, mlm_logits, EncoderInput, ForwardCtx};
use codeadapt::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;
const OP_EPS: f64 = 1e-6;
// Attention gradients through the full stack are small; a wider step keeps
// the difference quotient above rounding noise.
const MODEL_EPS: f64 = 1e-4;

// ---------- gradients ----------

pub fn rand64(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::<f64>::uniform(shape, 1.0, &mut rng)
}

/// Contracts `out` against fixed random weights so every output entry gets a
/// distinct upstream gradient.
fn project(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = tape.constant(rand64(&shape, 999));
    let m = tape.mul(out, w)?;
    tape.sum(m)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

fn op_cases() -> Vec<(&'static str, Tensor<f64>, OpFn, bool)> {
    let c = |shape: &[usize], seed: u64| rand64(shape, seed);
    let mask15: Rc<[bool]> = (0..15).map(|i| i % 5 != 3 && i != 14).collect::<Vec<_>>().into();
    let mask16: Rc<[bool]> = (0..16).map(|i| i % 4 != 3).collect::<Vec<_>>().into();
    let (gain, bias) = (c(&[6], 23), c(&[6], 24));
    let (g2, b2, g3) = (gain.clone(), bias.clone(), gain.clone());
    let b3 = bias.clone();
    // (name, input, op, whether the output still needs projecting to a scalar)
    vec![
        ("add", c(&[3, 4], 2), Box::new(|t: &mut Tape<f64>, x| {
            let o = t.constant(rand64(&[3, 4], 1));
            t.add(x, o)
        }), true),
        ("sub", c(&[3, 4], 3), Box::new(|t: &mut Tape<f64>, x| {
            let o = t.constant(rand64(&[3, 4], 1));
            t.sub(o, x)
        }), true),
        ("mul", c(&[3, 4], 4), Box::new(|t: &mut Tape<f64>, x| {
            let o = t.constant(rand64(&[3, 4], 1));
            t.mul(x, o)
        }), true),
        ("mul_self", c(&[3, 4], 5), Box::new(|t: &mut Tape<f64>, x| t.mul(x, x)), true),
        ("scale", c(&[3, 4], 6), Box::new(|t: &mut Tape<f64>, x| t.scale(x, -2.5)), true),
        ("relu", c(&[3, 4], 7), Box::new(|t: &mut Tape<f64>, x| t.relu(x)), true),
        ("gelu", c(&[3, 4], 8), Box::new(|t: &mut Tape<f64>, x| t.gelu(x)), true),
        ("abs", c(&[3, 4], 9), Box::new(|t: &mut Tape<f64>, x| t.abs(x)), true),
        ("matmul_lhs", c(&[3, 4], 11), Box::new(|t: &mut Tape<f64>, x| {
            let o = t.constant(rand64(&[4, 5], 10));
            t.matmul(x, o)
        }), true),
        ("matmul_rhs", c(&[4, 5], 12), Box::new(|t: &mut Tape<f64>, x| {
            let o = t.constant(rand64(&[3, 4], 13));
            t.matmul(o, x)
        }), true),
        ("matmul_nt", c(&[5, 4], 14), Box::new(|t: &mut Tape<f64>, x| {
            let o = t.constant(rand64(&[3, 4], 15));
            t.matmul_nt(o, x)
        }), true),
        ("transpose", c(&[3, 4], 16), Box::new(|t: &mut Tape<f64>, x| t.transpose(x)), true),
        ("add_row_bias", c(&[4], 17), Box::new(|t: &mut Tape<f64>, b| {
            let x = t.constant(rand64(&[3, 4], 18));
            t.add_row(x, b)
        }), true),
        ("add_row_input", c(&[3, 4], 19), Box::new(|t: &mut Tape<f64>, x| {
            let b = t.constant(rand64(&[4], 20));
            t.add_row(x, b)
        }), true),
        ("softmax", c(&[3, 5], 21), Box::new(|t: &mut Tape<f64>, x| t.softmax(x, None)), true),
        ("masked_softmax", c(&[3, 5], 22), Box::new(move |t: &mut Tape<f64>, x| t.softmax(x, Some(&mask15))), true),
        ("layer_norm_x", c(&[4, 6], 25), Box::new(move |t: &mut Tape<f64>, x| {
            let g = t.constant(gain.clone());
            let b = t.constant(bias.clone());
            t.layer_norm(x, g, b)
        }), true),
        ("layer_norm_gain", g2, Box::new(move |t: &mut Tape<f64>, g| {
            let x = t.constant(rand64(&[4, 6], 26));
            let b = t.constant(b2.clone());
            t.layer_norm(x, g, b)
        }), true),
        ("layer_norm_bias", b3, Box::new(move |t: &mut Tape<f64>, b| {
            let x = t.constant(rand64(&[4, 6], 27));
            let g = t.constant(g3.clone());
            t.layer_norm(x, g, b)
        }), true),
        ("normalize_rows", c(&[3, 4], 28), Box::new(|t: &mut Tape<f64>, x| t.normalize_rows(x)), true),
        ("cross_entropy", c(&[3, 5], 29), Box::new(|t: &mut Tape<f64>, x| t.cross_entropy(x, &[0, 4, 2])), false),
        ("sum", c(&[3, 5], 30), Box::new(|t: &mut Tape<f64>, x| t.sum(x)), false),
        ("mean", c(&[3, 5], 31), Box::new(|t: &mut Tape<f64>, x| t.mean(x)), false),
        ("embedding", c(&[6, 4], 32), Box::new(|t: &mut Tape<f64>, x| t.embedding(x, &[1, 5, 1, 0, 3])), true),
        ("select_rows", c(&[5, 3], 33), Box::new(|t: &mut Tape<f64>, x| t.select_rows(x, &[4, 0, 4, 2])), true),
        ("slice", c(&[5, 6], 34), Box::new(|t: &mut Tape<f64>, x| t.slice(x, 1, 3, 2, 3)), true),
        ("concat_cols", c(&[3, 2], 35), Box::new(|t: &mut Tape<f64>, x| {
            let o = t.constant(rand64(&[3, 4], 36));
            t.concat_cols(&[o, x, x])
        }), true),
        ("concat_rows", c(&[2, 3], 37), Box::new(|t: &mut Tape<f64>, x| {
            let o = t.constant(rand64(&[4, 3], 38));
            t.concat_rows(&[x, o])
        }), true),
        ("split_cols", c(&[3, 7], 39), Box::new(|t: &mut Tape<f64>, x| {
            let parts = t.split_cols(x, &[2, 4, 1])?;
            let a = t.scale(parts[0], 3.0)?;
            let c = t.scale(parts[2], -1.0)?;
            t.concat_cols(&[parts[1], c, a])
        }), true),
        ("dropout", c(&[4, 5], 40), Box::new(|t: &mut Tape<f64>, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(41);
            t.dropout(x, 0.3, &mut rng)
        }), true),
        // softmax(QKᵀ/√d)V with padded keys, as the encoder uses it.
        ("attention", c(&[4, 6], 43), Box::new(move |t: &mut Tape<f64>, x| {
            let w = t.constant(rand64(&[6, 6], 42));
            let q = t.matmul(x, w)?;
            let s = t.matmul_nt(q, x)?;
            let s = t.scale(s, 1.0 / 6f64.sqrt())?;
            let p = t.softmax(s, Some(&mask16))?;
            t.matmul(p, x)
        }), true),
    ]
}

/// Maximum relative error of every primitive op against central differences.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    op_cases()
        .into_iter()
        .map(|(name, x, f, project_out)| {
            let err = grad_check(
                |t, v| {
                    let out = f(t, v)?;
                    if project_out {
                        project(t, out)
                    } else {
                        Ok(out)
                    }
                },
                &x,
                OP_EPS,
            )
            .unwrap();
            (name, err)
        })
        .collect()
}

fn noisy_adapter(kind: AdapterKind, h: usize, d: usize, rng: &mut ChaCha8Rng) -> BottleneckAdapter {
    BottleneckAdapter::from_parts(
        kind,
        Tensor::uniform(&[h, d], 0.5, rng),
        Tensor::uniform(&[d], 0.5, rng),
        Tensor::uniform(&[d, h], 0.5, rng),
        Tensor::uniform(&[h], 0.5, rng),
    )
    .unwrap()
}

/// Relative gradient error of an MLM loss through a one-layer encoder with
/// stacked language and task adapters and a random invertible adapter, for
/// one parameter tensor of each kind.
pub fn encoder_gradient_errors() -> Vec<(&'static str, f64)> {
    let config = ModelConfig {
        num_layers: 1,
        hidden_size: 8,
        num_heads: 2,
        ffn_size: 12,
        vocab_size: 11,
        max_seq_len: 8,
        dropout_rate: 0.0,
        decoder_layers: 1,
    };
    let backbone = init_backbone(&config, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut adapters = AdapterSet::default();
    adapters.language.insert(0, noisy_adapter(AdapterKind::Language, 8, 3, &mut rng));
    adapters.task.insert(0, noisy_adapter(AdapterKind::Task, 8, 3, &mut rng));
    adapters.invertible = Some(InvertibleAdapterPair::random(8, 4, &mut rng).unwrap());
    let asm = build_assembly(
        &config,
        &backbone,
        &adapters,
        &AdapterStackPolicy::stacked(1),
        Phase::FullFinetune,
        ParamStore::new(),
    )
    .unwrap();

    // The second sequence is padded at its last position.
    let input = EncoderInput::new(
        vec![5, 7, 2, 9, 3, 8, 1, 0],
        vec![true, true, true, true, true, true, true, false],
        2,
        4,
    )
    .unwrap();
    let targets = [7usize, 2, 9, 10, 3, 8, 1, 0];

    let names = [
        "backbone.embed.tok",
        "backbone.embed.pos",
        "backbone.layers.0.attn.q.w",
        "backbone.layers.0.attn.v.b",
        "backbone.layers.0.ffn.in.w",
        "backbone.layers.0.ln2.gain",
        "backbone.mlm.bias",
        "adapters.lang.0.down.w",
        "adapters.lang.0.up.w",
        "adapters.task.0.down.w",
        "adapters.task.0.up.b",
        "adapters.inv.f.in.w",
        "adapters.inv.g.out.w",
    ];
    names
        .into_iter()
        .map(|name| {
            let x: Tensor<f64> = asm.params().get(name).unwrap().cast();
            let err = grad_check(
                |tape, v| {
                    let mut binder = Binder::<f64>::frozen(asm.params());
                    binder.bind(name, v);
                    let mut ctx = ForwardCtx::eval();
                    let trace = encoder_forward(tape, &mut binder, &asm, &input, &mut ctx)?;
                    let logits = mlm_head(tape, &mut binder, &asm, trace.last(), true)?;
                    tape.cross_entropy(logits, &targets)
                },
                &x,
                MODEL_EPS,
            )
            .unwrap();
            (name, err)
        })
        .collect()
}

// ---------- adapters ----------

pub fn small_config(vocab: usize) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        hidden_size: 16,
        num_heads: 2,
        ffn_size: 32,
        vocab_size: vocab,
        max_seq_len: 24,
        dropout_rate: 0.0,
        decoder_layers: 1,
    }
}

fn random_batch(rng: &mut ChaCha8Rng, vocab: usize, max_len: usize) -> EncoderInput {
    let batch = rng.gen_range(1..5);
    let seqs: Vec<Vec<usize>> = (0..batch)
        .map(|_| {
            let len = rng.gen_range(1..=max_len);
            (0..len).map(|_| rng.gen_range(1..vocab)).collect()
        })
        .collect();
    EncoderInput::from_sequences(&seqs).unwrap()
}

/// Largest deviation in final states or MLM logits between a plain backbone
/// and the same backbone with fresh language, invertible and task adapters.
pub fn identity_deviation(batches: usize) -> f64 {
    let config = small_config(30);
    let backbone = init_backbone(&config, 1).unwrap();
    let plain = inference_assembly(
        &config,
        &backbone,
        &AdapterSet::default(),
        &AdapterStackPolicy::none(2),
        ParamStore::new(),
    )
    .unwrap();
    let adapter = AdapterConfig {
        bottleneck: Some(4),
        ..AdapterConfig::default()
    };
    let language = language_assembly(&config, &adapter, &backbone, 2).unwrap();
    assert!(language.has_invertible());
    let set = language.adapter_set().unwrap();
    let stacked = task_assembly(&config, &adapter, &backbone, Some(&set), DownstreamTask::Retrieval, 3).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..batches {
        let input = random_batch(&mut rng, 30, 20);
        let base = encode(&plain, &input, false).unwrap();
        let base_logits = mlm_logits(&plain, &base, false).unwrap();
        for asm in [&language, &stacked] {
            let out = encode(asm, &input, false).unwrap();
            worst = worst.max(out.final_states().max_abs_diff(base.final_states()));
            let logits = mlm_logits(asm, &out, true).unwrap();
            worst = worst.max(logits.max_abs_diff(&base_logits));
        }
    }
    worst
}

pub fn invertible_round_trip_error(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = InvertibleAdapterPair::random(16, 8, &mut rng).unwrap();
    let x = Tensor::uniform(&[n, 16], 2.0, &mut rng);
    let y = invertible_forward(&pair, &x).unwrap();
    assert!(y.max_abs_diff(&x) > 1e-2, "random pair should move its input");
    invertible_inverse(&pair, &y).unwrap().max_abs_diff(&x)
}

pub struct FreezeReport {
    pub steps: u64,
    /// Frozen tensors whose bits changed.
    pub changed: Vec<String>,
    pub frozen_tensors: usize,
    pub fingerprint_unchanged: bool,
    pub task_adapters_moved: bool,
}

/// Trains stacked task adapters for `steps` steps on retrieval and compares
/// every frozen tensor bit for bit with its value before the phase.
pub fn freeze_check(steps: usize) -> FreezeReport {
    let vocab = mini_language_vocab();
    let corpus = generate_corpus(9, 24, 4).unwrap();
    let splits = split_by_class(&corpus, 0.2, 0.2, 9).unwrap();
    let config = ModelConfig {
        num_layers: 1,
        ..small_config(vocab.len())
    };
    let adapter = AdapterConfig {
        bottleneck: Some(4),
        ..AdapterConfig::default()
    };
    let backbone = init_backbone(&config, 10).unwrap();
    let mut language = language_assembly(&config, &adapter, &backbone, 11).unwrap();
    // Non-trivial language adapters, so a leak into them would show.
    for (name, t) in language.pluggable_params().iter() {
        let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64);
        *language.params_mut().get_mut(name).unwrap() = Tensor::uniform(t.shape(), 0.1, &mut rng);
    }
    let set = language.adapter_set().unwrap();
    let mut asm = task_assembly(&config, &adapter, &backbone, Some(&set), DownstreamTask::Retrieval, 12).unwrap();
    let frozen_before: Vec<(String, Tensor)> = asm
        .params()
        .iter()
        .filter(|(n, _)| !Phase::TAdapterTask.is_trainable(n))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let task_before = asm.params().subset("adapters.task.");
    let fingerprint = asm.frozen_fingerprint().to_string();

    let data = TaskData::build(DownstreamTask::Retrieval, &corpus, &splits, &vocab, config.max_seq_len, 13).unwrap();
    let cfg = TrainConfig {
        phase: Phase::TAdapterTask,
        learning_rate: 1e-3,
        batch_size: 8,
        max_steps: steps,
        patience: steps,
        eval_every: steps.div_ceil(2).max(1),
        seed: 14,
        ..TrainConfig::default()
    };
    let out = train_task(&mut asm, &data, &cfg, &mut MetricsLog::new()).unwrap();

    let changed = frozen_before
        .iter()
        .filter(|(name, t)| {
            let now = asm.params().get(name).unwrap();
            now.shape() != t.shape() || now.data().iter().zip(t.data()).any(|(a, b)| a.to_bits() != b.to_bits())
        })
        .map(|(n, _)| n.clone())
        .collect();
    let task_adapters_moved = asm.params().subset("adapters.task.") != task_before;
    FreezeReport {
        steps: out.steps,
        changed,
        frozen_tensors: frozen_before.len(),
        fingerprint_unchanged: asm.current_frozen_fingerprint() == fingerprint && asm.verify_frozen().is_ok(),
        task_adapters_moved,
    }
}

// ---------- metrics ----------

fn cos(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// MAP@R by definition: each item's rank is the number of items that beat
/// it, then precision at every relevant rank up to R.
pub fn brute_force_map(inst: &RetrievalInstance) -> f64 {
    let sims: Vec<f64> = inst.database.iter().map(|d| cos(&inst.query, d)).collect();
    let n = sims.len();
    let mut at_rank = vec![usize::MAX; n];
    for i in 0..n {
        let rank = (0..n).filter(|&j| sims[j] > sims[i] || (sims[j] == sims[i] && j < i)).count();
        at_rank[rank] = i;
    }
    let r = inst.classes.iter().filter(|&&c| c == inst.query_class).count();
    let mut total = 0.0;
    for pos in 1..=r {
        let item = at_rank[pos - 1];
        if inst.classes[item] != inst.query_class {
            continue;
        }
        let relevant_so_far = (1..=pos)
            .filter(|&p| inst.classes[at_rank[p - 1]] == inst.query_class)
            .count();
        total += relevant_so_far as f64 / pos as f64;
    }
    total / r as f64
}

/// At most 20 database items, at least one sharing the query's class.
pub fn random_instance(rng: &mut ChaCha8Rng) -> RetrievalInstance {
    let dim = rng.gen_range(2..6);
    let n = rng.gen_range(3..=20);
    let k = rng.gen_range(2..5);
    let vec = |rng: &mut ChaCha8Rng| (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>();
    let query_class = rng.gen_range(0..k);
    let mut classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    classes[rng.gen_range(0..n)] = query_class;
    RetrievalInstance {
        query: vec(rng),
        query_class,
        database: (0..n).map(|_| vec(rng)).collect(),
        classes,
    }
}

/// Smoothed BLEU-4 with list-based n-gram matching and the product form of
/// the geometric mean.
pub fn reference_bleu<T: PartialEq + Clone>(c: &[T], r: &[T]) -> f64 {
    if c.is_empty() {
        return 0.0;
    }
    let grams = |s: &[T], n: usize| -> Vec<Vec<T>> {
        if s.len() < n {
            Vec::new()
        } else {
            (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
        }
    };
    let mut product = 1.0f64;
    for n in 1..=4 {
        let cg = grams(c, n);
        let mut pool = grams(r, n);
        let mut matched = 0usize;
        for g in &cg {
            if let Some(pos) = pool.iter().position(|x| x == g) {
                pool.swap_remove(pos);
                matched += 1;
            }
        }
        let p = if n == 1 {
            matched as f64 / cg.len() as f64
        } else {
            (matched as f64 + 1.0) / (cg.len() as f64 + 1.0)
        };
        product *= p;
    }
    let bp = if c.len() > r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    bp * product.powf(0.25)
}

pub fn random_token_pair(rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>) {
    let lc = rng.gen_range(1..15);
    let lr = rng.gen_range(1..15);
    let c = (0..lc).map(|_| rng.gen_range(0..5)).collect();
    let r = (0..lr).map(|_| rng.gen_range(0..5)).collect();
    (c, r)
}

// ---------- experiment files ----------

/// Drops a `seconds` column, if any.
pub fn without_seconds(csv: &str) -> String {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
    let skip = header.iter().position(|&h| h == "seconds");
    let keep = |line: &str| -> String {
        line.split(',')
            .enumerate()
            .filter(|(i, _)| Some(*i) != skip)
            .map(|(_, f)| f)
            .collect::<Vec<_>>()
            .join(",")
    };
    std::iter::once(keep(&header.join(",")))
        .chain(lines.map(keep))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn read_dir_sorted(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

/// Metric logs (`*.jsonl`) of an experiment directory.
pub fn metric_logs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    read_dir_sorted(&dir.join("logs"))
        .into_iter()
        .filter(|(n, _)| n.ends_with(".jsonl"))
        .collect()
}

// ---------- probing ----------

fn skewed_labels(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| match rng.gen_range(0..10) {
            0..=5 => 0,
            6..=8 => 1,
            _ => 2,
        })
        .collect()
}

pub fn one_hot_probe_accuracy() -> f64 {
    let labels = skewed_labels(400, 1);
    let mut data = vec![0.0f32; 400 * 3];
    for (i, &l) in labels.iter().enumerate() {
        data[i * 3 + l] = 1.0;
    }
    let ds = ProbeDataset::new(Tensor::new(vec![400, 3], data).unwrap(), labels, 3, 0).unwrap();
    train_probe(&ds, &ProbeConfig::default()).unwrap().valid_accuracy
}

/// `(accuracy, majority fraction)` of a probe on constant features.
pub fn constant_probe(standardize: bool) -> (f64, f64) {
    let labels = skewed_labels(500, 2);
    let ds = ProbeDataset::new(Tensor::full(&[500, 4], 0.7), labels, 3, 0).unwrap();
    let cfg = ProbeConfig {
        standardize,
        ..ProbeConfig::default()
    };
    let r = train_probe(&ds, &cfg).unwrap();
    (r.valid_accuracy, r.majority_fraction)
}

fn probe_model(layers: usize, seed: u64) -> (ModelAssembly, Vec<CodeSample>) {
    let vocab = mini_language_vocab();
    let config = ModelConfig {
        num_layers: layers,
        max_seq_len: 96,
        ..small_config(vocab.len())
    };
    (fresh_backbone(&config, seed).unwrap(), generate_corpus(3, 40, 3).unwrap().samples)
}

pub struct ShuffleControl {
    pub shuffled: f64,
    pub majority: f64,
    pub real: f64,
}

/// AST-tag probe at layer 2 with real and with shuffled labels.
pub fn shuffle_control() -> ShuffleControl {
    let (asm, owned) = probe_model(2, 4);
    let refs: Vec<&CodeSample> = owned.iter().collect();
    let ds = probe_dataset(&asm, &refs, &mini_language_vocab(), 2, ProbeTask::AstTag).unwrap();
    let mut labels = ds.labels.clone();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    let shuffled = ProbeDataset::new(ds.features.clone(), labels, ds.num_classes, ds.layer).unwrap();
    let r = train_probe(&shuffled, &ProbeConfig::default()).unwrap();
    let real = train_probe(&ds, &ProbeConfig::default()).unwrap();
    ShuffleControl {
        shuffled: r.valid_accuracy,
        majority: r.majority_fraction,
        real: real.valid_accuracy,
    }
}

/// Runs every probe task on a 3-layer encoder. Returns whether each curve
/// had L+1 points in [0, 1] and whether the weights were left alone.
pub fn probe_curves_check() -> (bool, bool) {
    let layers = 3;
    let (asm, owned) = probe_model(layers, 6);
    let before = asm.params().clone();
    let fingerprint = asm.current_frozen_fingerprint();
    let refs: Vec<&CodeSample> = owned.iter().collect();
    let cfg = ProbeConfig {
        epochs: 50,
        ..ProbeConfig::default()
    };
    let shapes_ok = ProbeTask::ALL.into_iter().all(|task| {
        let curve = probe_curve(&asm, &refs, &mini_language_vocab(), task, &cfg).unwrap();
        curve.accuracies.len() == layers + 1 && curve.accuracies.iter().all(|a| (0.0..=1.0).contains(a))
    });
    (shapes_ok, asm.current_frozen_fingerprint() == fingerprint && asm.params() == &before)
}
