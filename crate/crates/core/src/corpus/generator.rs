//! Synthetic labeled corpora in the mini language.
//!
//! A problem fixes a computation and its doc string; its solutions are
//! semantic clones that differ by identifier renaming, reordering of
//! independent initializations, operand swaps of commutative calls and
//! comparisons, and loop/branch-form changes.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lang::{bin, call, cond, num, var, AstTag, BinOp, Builtin, CmpOp, Expr, Program, Stmt};
use super::vocab::Vocabulary;

const FUNC_NAMES: [&str; 12] = [
    "solve", "compute", "calc", "run", "work", "helper", "task", "process", "apply", "handle", "evaluate", "step",
];
const SINGLE_PARAMS: [&str; 5] = ["n", "x", "t", "w", "z"];
const PAIR_PARAMS: [(&str, &str); 6] = [("a", "b"), ("x", "y"), ("p", "q"), ("u", "w"), ("m", "k"), ("s", "t")];
const THIRD_PARAMS: [&str; 3] = ["c", "d", "e"];
const MAX_ACC: [&str; 6] = ["best", "hi", "top", "big", "most_v", "peak"];
const MIN_ACC: [&str; 6] = ["lo", "low", "least_v", "small", "floor_v", "bottom"];
const GENERIC_ACC: [&str; 6] = ["res", "out", "acc", "val", "tmp", "ans"];
const INDEX_NAMES: [&str; 5] = ["i", "j", "idx", "pos", "cur"];
const ITEM_NAMES: [&str; 4] = ["v", "cand", "item", "term"];
const COUNT_NAMES: [&str; 4] = ["cnt", "count_v", "hits", "num_v"];

const KEYWORDS: [&str; 6] = ["def", "if", "while", "return", "max", "min"];
const PUNCT: [&str; 17] = [
    "#", "(", ")", "{", "}", ",", ";", "=", "+", "-", "*", "%", "<", ">", "<=", ">=", "==",
];
const DOC_WORDS: [&str; 35] = [
    "return", "the", "largest", "smallest", "of", "two", "three", "values", "plus", "sum", "multiples", "below",
    "limit", "value", "to", "at", "most", "least", "find", "product", "modulo", "count", "raise", "power",
    "distance", "between", "scale", "by", "and", "add", "is", "for", "each", "step", "then",
];
const NUMBERS: [i64; 16] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 100, 999, 1000];

/// Every token the generator can emit, in a fixed order.
pub fn mini_language_vocab() -> Vocabulary {
    let mut toks: Vec<String> = Vec::new();
    toks.extend(KEYWORDS.iter().map(|s| s.to_string()));
    toks.extend(PUNCT.iter().map(|s| s.to_string()));
    toks.push("!=".into());
    toks.extend(NUMBERS.iter().map(|n| n.to_string()));
    toks.extend(FUNC_NAMES.iter().map(|s| s.to_string()));
    toks.extend(SINGLE_PARAMS.iter().map(|s| s.to_string()));
    for (a, b) in PAIR_PARAMS {
        toks.push(a.into());
        toks.push(b.into());
    }
    for pool in [&THIRD_PARAMS[..], &MAX_ACC, &MIN_ACC, &GENERIC_ACC, &INDEX_NAMES, &ITEM_NAMES, &COUNT_NAMES] {
        toks.extend(pool.iter().map(|s| s.to_string()));
    }
    toks.extend(DOC_WORDS.iter().map(|s| s.to_string()));
    Vocabulary::from_tokens(toks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Family {
    PairExtreme { f: Builtin, c: i64 },
    TripleExtreme { f: Builtin, c: i64 },
    RangeSum { k: i64 },
    Clamp { f: Builtin, c: i64 },
    ScanExtreme { f: Builtin, k: i64, m: i64 },
    CountIf { c: i64 },
    PowerMod { k: i64 },
    Distance,
    Linear { k: i64, c: i64 },
}

fn all_problems() -> Vec<Family> {
    let mut out = Vec::new();
    for f in [Builtin::Max, Builtin::Min] {
        for c in 1..=9 {
            out.push(Family::PairExtreme { f, c });
            out.push(Family::TripleExtreme { f, c });
            out.push(Family::Clamp { f, c });
        }
        for k in 2..=7 {
            for m in 5..=9 {
                out.push(Family::ScanExtreme { f, k, m });
            }
        }
    }
    for k in 1..=9 {
        out.push(Family::RangeSum { k });
    }
    for c in 2..=9 {
        out.push(Family::CountIf { c });
        out.push(Family::PowerMod { k: c });
    }
    out.push(Family::Distance);
    for k in 2..=10 {
        for c in 1..=9 {
            out.push(Family::Linear { k, c });
        }
    }
    out
}

/// Number of distinct problems (clone classes) the generator can produce.
pub fn problem_count() -> usize {
    all_problems().len()
}

fn words(ws: &[&str]) -> Vec<String> {
    ws.iter().map(|s| s.to_string()).collect()
}

fn extreme_word(f: Builtin) -> &'static str {
    match f {
        Builtin::Max => "largest",
        Builtin::Min => "smallest",
    }
}

impl Family {
    fn doc(self) -> Vec<String> {
        let n = |v: i64| v.to_string();
        match self {
            Family::PairExtreme { f, c } => {
                let mut d = words(&["return", "the", extreme_word(f), "of", "two", "values", "plus"]);
                d.push(n(c));
                d
            }
            Family::TripleExtreme { f, c } => {
                let mut d = words(&["return", "the", extreme_word(f), "of", "three", "values", "plus"]);
                d.push(n(c));
                d
            }
            Family::RangeSum { k } => {
                let mut d = words(&["sum", "the", "multiples", "of"]);
                d.push(n(k));
                d.extend(words(&["below", "the", "limit"]));
                d
            }
            Family::Clamp { f, c } => {
                let bound = if f == Builtin::Min { "most" } else { "least" };
                let mut d = words(&["limit", "the", "value", "to", "at", bound]);
                d.push(n(c));
                d
            }
            Family::ScanExtreme { f, k, m } => {
                let mut d = words(&["find", "the", extreme_word(f), "product", "of"]);
                d.push(n(k));
                d.push("modulo".into());
                d.push(n(m));
                d.extend(words(&["below", "the", "limit"]));
                d
            }
            Family::CountIf { c } => {
                let mut d = words(&["count", "the", "multiples", "of"]);
                d.push(n(c));
                d.extend(words(&["below", "the", "limit"]));
                d
            }
            Family::PowerMod { k } => {
                let mut d = words(&["raise"]);
                d.push(n(k));
                d.extend(words(&["to", "the", "limit", "power", "modulo", "1000"]));
                d
            }
            Family::Distance => words(&["return", "the", "distance", "between", "two", "values"]),
            Family::Linear { k, c } => {
                let mut d = words(&["scale", "the", "value", "by"]);
                d.push(n(k));
                d.extend(words(&["and", "add"]));
                d.push(n(c));
                d
            }
        }
    }
}

/// Draws names without repeats inside one program.
struct Names<'r> {
    used: HashSet<&'static str>,
    rng: &'r mut ChaCha8Rng,
}

impl Names<'_> {
    fn pick(&mut self, pool: &[&'static str]) -> String {
        let free: Vec<&'static str> = pool.iter().copied().filter(|n| !self.used.contains(n)).collect();
        let n = *free.choose(self.rng).expect("name pools are larger than any program needs");
        self.used.insert(n);
        n.to_string()
    }

    fn pair(&mut self) -> (String, String) {
        let free: Vec<(&'static str, &'static str)> = PAIR_PARAMS
            .iter()
            .copied()
            .filter(|(a, b)| !self.used.contains(a) && !self.used.contains(b))
            .collect();
        let (a, b) = *free.choose(self.rng).expect("free parameter pair");
        self.used.insert(a);
        self.used.insert(b);
        (a.to_string(), b.to_string())
    }
}

fn acc_pool(f: Builtin) -> &'static [&'static str] {
    match f {
        Builtin::Max => &MAX_ACC,
        Builtin::Min => &MIN_ACC,
    }
}

fn maybe_swap(rng: &mut ChaCha8Rng, a: Expr, b: Expr) -> (Expr, Expr) {
    if rng.gen_bool(0.5) {
        (b, a)
    } else {
        (a, b)
    }
}

fn cmp(rng: &mut ChaCha8Rng, l: Expr, op: CmpOp, r: Expr) -> super::lang::Cond {
    if rng.gen_bool(0.5) {
        cond(r, op.flipped(), l)
    } else {
        cond(l, op, r)
    }
}

fn commutative(rng: &mut ChaCha8Rng, a: Expr, op: BinOp, b: Expr) -> Expr {
    let (a, b) = if matches!(op, BinOp::Add | BinOp::Mul) {
        maybe_swap(rng, a, b)
    } else {
        (a, b)
    };
    bin(a, op, b)
}

fn increment(rng: &mut ChaCha8Rng, i: &str) -> Stmt {
    Stmt::Assign(i.into(), commutative(rng, var(i), BinOp::Add, num(1)))
}

fn inits(rng: &mut ChaCha8Rng, mut stmts: Vec<Stmt>) -> Vec<Stmt> {
    stmts.shuffle(rng);
    stmts
}

fn counted_loop(rng: &mut ChaCha8Rng, i: &str, n: &str, mut body: Vec<Stmt>) -> Stmt {
    body.push(increment(rng, i));
    Stmt::While(cmp(rng, var(i), CmpOp::Lt, var(n)), body)
}

fn solution(family: Family, rng: &mut ChaCha8Rng) -> Program {
    let mut names = Names {
        used: HashSet::new(),
        rng,
    };
    let name = names.pick(&FUNC_NAMES);
    let (params, body) = match family {
        Family::PairExtreme { f, c } => {
            let (a, b) = names.pair();
            let r = names.pick(acc_pool(f));
            let rng = &mut *names.rng;
            let (x, y) = maybe_swap(rng, var(&a), var(&b));
            let body = if rng.gen_bool(0.5) {
                vec![
                    Stmt::Assign(r.clone(), call(f, x, y)),
                    Stmt::Assign(r.clone(), commutative(rng, var(&r), BinOp::Add, num(c))),
                    Stmt::Return(var(&r)),
                ]
            } else {
                vec![
                    Stmt::Assign(r.clone(), commutative(rng, call(f, x, y), BinOp::Add, num(c))),
                    Stmt::Return(var(&r)),
                ]
            };
            (vec![a, b], body)
        }
        Family::TripleExtreme { f, c } => {
            let (a, b) = names.pair();
            let z = names.pick(&THIRD_PARAMS);
            let r = names.pick(acc_pool(f));
            let rng = &mut *names.rng;
            let mut ops = vec![var(&a), var(&b), var(&z)];
            ops.shuffle(rng);
            let (x, y) = maybe_swap(rng, ops[0].clone(), ops[1].clone());
            let (p, q) = maybe_swap(rng, var(&r), ops[2].clone());
            let body = vec![
                Stmt::Assign(r.clone(), call(f, x, y)),
                Stmt::Assign(r.clone(), call(f, p, q)),
                Stmt::Assign(r.clone(), commutative(rng, var(&r), BinOp::Add, num(c))),
                Stmt::Return(var(&r)),
            ];
            (vec![a, b, z], body)
        }
        Family::RangeSum { k } => {
            let n = names.pick(&SINGLE_PARAMS);
            let s = names.pick(&GENERIC_ACC);
            let i = names.pick(&INDEX_NAMES);
            let rng = &mut *names.rng;
            let mut body = inits(rng, vec![Stmt::Assign(s.clone(), num(0)), Stmt::Assign(i.clone(), num(0))]);
            let term = commutative(rng, var(&i), BinOp::Mul, num(k));
            let upd = Stmt::Assign(s.clone(), commutative(rng, var(&s), BinOp::Add, term));
            body.push(counted_loop(rng, &i, &n, vec![upd]));
            body.push(Stmt::Return(var(&s)));
            (vec![n], body)
        }
        Family::Clamp { f, c } => {
            let x = names.pick(&SINGLE_PARAMS);
            let rng = &mut *names.rng;
            // min(x, c) caps from above, max(x, c) from below
            let first = if rng.gen_bool(0.5) {
                let (p, q) = maybe_swap(rng, var(&x), num(c));
                Stmt::Assign(x.clone(), call(f, p, q))
            } else {
                let op = if f == Builtin::Min { CmpOp::Gt } else { CmpOp::Lt };
                Stmt::If(cmp(rng, var(&x), op, num(c)), vec![Stmt::Assign(x.clone(), num(c))])
            };
            (vec![x.clone()], vec![first, Stmt::Return(var(&x))])
        }
        Family::ScanExtreme { f, k, m } => {
            let n = names.pick(&SINGLE_PARAMS);
            let best = names.pick(acc_pool(f));
            let i = names.pick(&INDEX_NAMES);
            let v = names.pick(&ITEM_NAMES);
            let rng = &mut *names.rng;
            let start = if f == Builtin::Max { 0 } else { 999 };
            let mut body = inits(rng, vec![Stmt::Assign(best.clone(), num(start)), Stmt::Assign(i.clone(), num(0))]);
            let item = Stmt::Assign(v.clone(), bin(commutative(rng, var(&i), BinOp::Mul, num(k)), BinOp::Mod, num(m)));
            let update = if rng.gen_bool(0.7) {
                let (p, q) = maybe_swap(rng, var(&best), var(&v));
                Stmt::Assign(best.clone(), call(f, p, q))
            } else {
                let op = if f == Builtin::Max { CmpOp::Gt } else { CmpOp::Lt };
                Stmt::If(cmp(rng, var(&v), op, var(&best)), vec![Stmt::Assign(best.clone(), var(&v))])
            };
            body.push(counted_loop(rng, &i, &n, vec![item, update]));
            body.push(Stmt::Return(var(&best)));
            (vec![n], body)
        }
        Family::CountIf { c } => {
            let n = names.pick(&SINGLE_PARAMS);
            let cnt = names.pick(&COUNT_NAMES);
            let i = names.pick(&INDEX_NAMES);
            let rng = &mut *names.rng;
            let mut body = inits(rng, vec![Stmt::Assign(cnt.clone(), num(0)), Stmt::Assign(i.clone(), num(0))]);
            let test = cmp(rng, bin(var(&i), BinOp::Mod, num(c)), CmpOp::Eq, num(0));
            let hit = Stmt::If(test, vec![Stmt::Assign(cnt.clone(), commutative(rng, var(&cnt), BinOp::Add, num(1)))]);
            body.push(counted_loop(rng, &i, &n, vec![hit]));
            body.push(Stmt::Return(var(&cnt)));
            (vec![n], body)
        }
        Family::PowerMod { k } => {
            let n = names.pick(&SINGLE_PARAMS);
            let r = names.pick(&GENERIC_ACC);
            let i = names.pick(&INDEX_NAMES);
            let rng = &mut *names.rng;
            let mut body = inits(rng, vec![Stmt::Assign(r.clone(), num(1)), Stmt::Assign(i.clone(), num(0))]);
            let upd = Stmt::Assign(r.clone(), bin(commutative(rng, var(&r), BinOp::Mul, num(k)), BinOp::Mod, num(1000)));
            body.push(counted_loop(rng, &i, &n, vec![upd]));
            body.push(Stmt::Return(var(&r)));
            (vec![n], body)
        }
        Family::Distance => {
            let (a, b) = names.pair();
            let d = names.pick(&GENERIC_ACC);
            let rng = &mut *names.rng;
            let (x, y) = maybe_swap(rng, var(&a), var(&b));
            let body = vec![
                Stmt::Assign(d.clone(), bin(x, BinOp::Sub, y)),
                Stmt::If(
                    cmp(rng, var(&d), CmpOp::Lt, num(0)),
                    vec![Stmt::Assign(d.clone(), bin(num(0), BinOp::Sub, var(&d)))],
                ),
                Stmt::Return(var(&d)),
            ];
            (vec![a, b], body)
        }
        Family::Linear { k, c } => {
            let x = names.pick(&SINGLE_PARAMS);
            let r = names.pick(&GENERIC_ACC);
            let rng = &mut *names.rng;
            let body = if rng.gen_bool(0.5) {
                let scaled = commutative(rng, var(&x), BinOp::Mul, num(k));
                vec![
                    Stmt::Assign(r.clone(), commutative(rng, scaled, BinOp::Add, num(c))),
                    Stmt::Return(var(&r)),
                ]
            } else {
                vec![
                    Stmt::Assign(r.clone(), commutative(rng, var(&x), BinOp::Mul, num(k))),
                    Stmt::Assign(r.clone(), commutative(rng, var(&r), BinOp::Add, num(c))),
                    Stmt::Return(var(&r)),
                ]
            };
            (vec![x], body)
        }
    };
    Program {
        doc: family.doc(),
        name,
        params,
        body,
    }
}

/// A generated program with its labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodeSample {
    /// Full program tokens: the `#` doc comment followed by the function.
    pub code_tokens: Vec<String>,
    pub doc_tokens: Option<Vec<String>>,
    pub clone_class: Option<usize>,
    pub tags: Option<Vec<AstTag>>,
    pub length_bucket: usize,
    pub cpx_bucket: usize,
}

pub const CPX_CAP: usize = 8;
pub const LENGTH_BUCKETS: usize = 10;

impl CodeSample {
    /// Index of the first token after the leading comment.
    pub fn body_start(&self) -> usize {
        match &self.tags {
            Some(tags) => tags.iter().position(|&t| t != AstTag::COMMENT).unwrap_or(tags.len()),
            None => {
                if self.code_tokens.first().map(String::as_str) == Some("#") {
                    self.code_tokens.iter().position(|t| t == "def").unwrap_or(self.code_tokens.len())
                } else {
                    0
                }
            }
        }
    }

    pub fn body_tokens(&self) -> &[String] {
        &self.code_tokens[self.body_start()..]
    }

    pub fn body_tags(&self) -> Option<&[AstTag]> {
        let s = self.body_start();
        self.tags.as_deref().map(|t| &t[s..])
    }
}

/// `1 +` the number of `if`/`while` tokens in the function body.
pub fn cyclomatic_complexity(sample: &CodeSample) -> usize {
    1 + sample
        .body_tokens()
        .iter()
        .filter(|t| t.as_str() == "if" || t.as_str() == "while")
        .count()
}

pub fn cpx_bucket(cc: usize) -> usize {
    cc.min(CPX_CAP)
}

/// Bucket of `len` given ascending decile edges.
pub fn length_bucket(len: usize, edges: &[usize]) -> usize {
    edges.iter().filter(|&&e| len >= e).count()
}

/// Decile edges of the given lengths.
pub fn decile_edges(lengths: &[usize]) -> Vec<usize> {
    let mut sorted = lengths.to_vec();
    sorted.sort_unstable();
    if sorted.is_empty() {
        return Vec::new();
    }
    (1..LENGTH_BUCKETS)
        .map(|q| sorted[(q * sorted.len() / LENGTH_BUCKETS).min(sorted.len() - 1)])
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub samples: Vec<CodeSample>,
    /// Decile edges over body lengths used for `length_bucket`.
    pub length_edges: Vec<usize>,
}

impl Corpus {
    /// Recomputes length and complexity labels from tokens.
    pub fn relabel(&mut self) {
        let lengths: Vec<usize> = self.samples.iter().map(|s| s.body_tokens().len()).collect();
        self.length_edges = decile_edges(&lengths);
        for s in &mut self.samples {
            s.length_bucket = length_bucket(s.body_tokens().len(), &self.length_edges);
            s.cpx_bucket = cpx_bucket(cyclomatic_complexity(s));
        }
    }

    pub fn num_classes(&self) -> usize {
        self.samples
            .iter()
            .filter_map(|s| s.clone_class)
            .max()
            .map_or(0, |m| m + 1)
    }
}

/// Programs and their samples; `programs[i]` produced `samples[i]`.
pub struct GeneratedCorpus {
    pub corpus: Corpus,
    pub programs: Vec<Program>,
}

/// `n_problems` clone classes with `solutions_per_problem` distinct
/// solutions each, deterministic in `seed`.
pub fn generate_corpus(seed: u64, n_problems: usize, solutions_per_problem: usize) -> crate::Result<Corpus> {
    Ok(generate_with_programs(seed, n_problems, solutions_per_problem)?.corpus)
}

pub fn generate_with_programs(
    seed: u64,
    n_problems: usize,
    solutions_per_problem: usize,
) -> crate::Result<GeneratedCorpus> {
    if n_problems == 0 || solutions_per_problem == 0 {
        return Err(crate::Error::Input("problem and solution counts must be positive".into()));
    }
    let mut problems = all_problems();
    if n_problems > problems.len() {
        return Err(crate::Error::Input(format!(
            "at most {} problems available, asked for {n_problems}",
            problems.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    problems.shuffle(&mut rng);
    problems.truncate(n_problems);

    let mut samples = Vec::with_capacity(n_problems * solutions_per_problem);
    let mut programs = Vec::with_capacity(samples.capacity());
    for (class, &family) in problems.iter().enumerate() {
        let mut seen = HashSet::new();
        let mut made = 0;
        let mut attempts = 0;
        while made < solutions_per_problem {
            attempts += 1;
            if attempts > 200 * solutions_per_problem {
                return Err(crate::Error::Input(format!(
                    "could not find {solutions_per_problem} distinct solutions for problem {class}"
                )));
            }
            let p = solution(family, &mut rng);
            let (tokens, tags) = p.render();
            if !seen.insert(tokens.clone()) {
                continue;
            }
            samples.push(CodeSample {
                code_tokens: tokens,
                doc_tokens: Some(p.doc.clone()),
                clone_class: Some(class),
                tags: Some(tags),
                length_bucket: 0,
                cpx_bucket: 0,
            });
            programs.push(p);
            made += 1;
        }
    }
    let mut corpus = Corpus {
        samples,
        length_edges: Vec::new(),
    };
    corpus.relabel();
    Ok(GeneratedCorpus { corpus, programs })
}

/// Natural-language paragraphs of 3 to 6 sentences for pretraining a
/// text-only backbone. Sentences are doc strings, filler, statements that
/// tie accumulator names to extreme words, or mentions of two random
/// lexicon tokens. Call names only ever appear in the random mentions, so
/// the text never links an extreme word to `max` or `min`.
pub fn generate_nl_corpus(seed: u64, n: usize) -> Vec<Vec<String>> {
    let problems = all_problems();
    let lexicon: Vec<String> = mini_language_vocab().tokens()[super::vocab::SPECIALS.len()..].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fillers: [&[&str]; 4] = [
        &["then", "return", "the", "value"],
        &["for", "each", "step", "add", "the", "value"],
        &["the", "limit", "is", "the", "count"],
        &["return", "the", "sum"],
    ];
    let sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
        match rng.gen_range(0..4) {
            0 => problems.choose(rng).expect("problems").doc(),
            1 => words(fillers.choose(rng).expect("fillers")),
            2 => {
                let (pool, word) = if rng.gen_bool(0.5) {
                    (&MAX_ACC, "largest")
                } else {
                    (&MIN_ACC, "smallest")
                };
                let name = *pool.choose(rng).expect("pool");
                if rng.gen_bool(0.5) {
                    words(&["the", name, "value", "is", "the", word])
                } else {
                    words(&["add", "the", word, "value", "to", name])
                }
            }
            _ => {
                let a = lexicon.choose(rng).expect("lexicon").clone();
                let b = lexicon.choose(rng).expect("lexicon").clone();
                vec!["the".into(), a, "and".into(), "the".into(), b]
            }
        }
    };
    (0..n)
        .map(|_| {
            let k = rng.gen_range(3..=6);
            (0..k).flat_map(|_| sentence(&mut rng)).collect()
        })
        .collect()
}

/// Fixed argument tuples for checking clone semantics.
pub const PROBE_INPUTS: [[i64; 3]; 8] = [
    [0, 0, 0],
    [3, 7, 5],
    [9, 2, 4],
    [12, 12, 1],
    [5, 1, 8],
    [-4, 6, 2],
    [7, 11, -3],
    [15, 3, 9],
];
