use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use codeadapt::experiment::{Experiment, ExperimentConfig, Step};
use codeadapt::pipeline::DownstreamTask;
use codeadapt::train::TrainOutcome;
use codeadapt::{Error, Result};

#[derive(Parser)]
#[command(name = "codeadapt", version, about = "Language and task adapters for small code transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DirArg {
    /// Experiment directory.
    #[arg(long, short)]
    dir: PathBuf,
}

#[derive(Args)]
struct CreateArgs {
    #[command(flatten)]
    dir: DirArg,
    /// TOML experiment config; written into the directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the small built-in config.
    #[arg(long)]
    quick: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TaskArgs {
    #[command(flatten)]
    dir: DirArg,
    /// One of retrieval, clone_detection, summarization; all configured
    /// tasks when omitted.
    #[arg(long)]
    task: Option<DownstreamTask>,
}

#[derive(Subcommand)]
enum Command {
    /// Create the experiment directory if needed and generate the corpora.
    GenCorpus(CreateArgs),
    /// MLM-pretrain the backbone on code or NL.
    Pretrain(DirArg),
    /// Train language (and invertible) adapters with MLM on code.
    TrainLadapter(DirArg),
    /// Train task adapters plus head or decoder on a downstream task.
    TrainTadapter(TaskArgs),
    /// Fully fine-tune the backbone on a downstream task.
    Finetune(TaskArgs),
    /// Evaluate trained task models on the test split.
    Eval(DirArg),
    /// Masked-token cloze tests with and without language adapters.
    Cloze(DirArg),
    /// Layer-wise linear probes for AST tags, length and complexity.
    Probe(DirArg),
    /// Attention distributions for one token of one sample.
    Attention {
        #[command(flatten)]
        dir: DirArg,
        #[arg(long)]
        sample: Option<usize>,
        /// Index into the function body.
        #[arg(long)]
        token: Option<usize>,
    },
    /// Parameter budgets per phase and component.
    Budget(DirArg),
    /// Collect reports into reports/summary.md.
    Report(DirArg),
    /// Run every configured step in order.
    Run(CreateArgs),
}

fn create_or_open(a: &CreateArgs) -> Result<Experiment> {
    let dir = &a.dir.dir;
    let existing = dir.join("config.toml").exists();
    if existing && a.config.is_none() && !a.quick && a.seed.is_none() {
        return Experiment::open(dir);
    }
    let mut cfg = match (&a.config, a.quick) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_toml(&text)?
        }
        (None, true) => ExperimentConfig::quick(),
        (None, false) if existing => Experiment::open(dir)?.config,
        (None, false) => ExperimentConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    Experiment::create(dir, cfg)
}

fn open(d: &DirArg) -> Result<Experiment> {
    Experiment::open(&d.dir)
}

fn locked<T>(exp: &Experiment, f: impl FnOnce(&Experiment) -> Result<T>) -> Result<T> {
    let _lock = codeadapt::experiment::DirLock::acquire(&exp.dir)?;
    f(exp)
}

fn print_outcome(what: &str, o: &TrainOutcome) {
    println!(
        "{what}: {} {:.4} -> best {:.4} at step {} ({} steps{})",
        o.metric,
        o.initial,
        o.best,
        o.best_step,
        o.steps,
        if o.stopped_early { ", stopped early" } else { "" }
    );
}

fn tasks(exp: &Experiment, t: Option<DownstreamTask>) -> Vec<DownstreamTask> {
    t.map_or_else(|| exp.config.tasks.clone(), |t| vec![t])
}

fn show(path: &Path) {
    if let Ok(s) = std::fs::read_to_string(path) {
        print!("{s}");
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenCorpus(a) => {
            let exp = create_or_open(&a)?;
            let c = locked(&exp, |e| e.gen_corpus())?;
            println!("{} samples, {} clone classes", c.samples.len(), c.num_classes());
        }
        Command::Pretrain(d) => {
            let o = locked(&open(&d)?, |e| e.run_pretrain())?;
            print_outcome("pretrain", &o);
        }
        Command::TrainLadapter(d) => {
            let o = locked(&open(&d)?, |e| e.run_train_ladapter())?;
            print_outcome("train-ladapter", &o);
        }
        Command::TrainTadapter(a) => {
            let exp = open(&a.dir)?;
            locked(&exp, |e| {
                for t in tasks(e, a.task) {
                    print_outcome(&format!("train-tadapter {}", t.name()), &e.run_train_tadapter(t)?);
                }
                Ok(())
            })?;
        }
        Command::Finetune(a) => {
            let exp = open(&a.dir)?;
            locked(&exp, |e| {
                for t in tasks(e, a.task) {
                    print_outcome(&format!("finetune {}", t.name()), &e.run_finetune(t)?);
                }
                Ok(())
            })?;
        }
        Command::Eval(d) => {
            let exp = open(&d)?;
            locked(&exp, |e| e.run_eval())?;
            show(&exp.report_path("eval.csv"));
        }
        Command::Cloze(d) => {
            let exp = open(&d)?;
            locked(&exp, |e| e.run_cloze())?;
            show(&exp.report_path("cloze.csv"));
        }
        Command::Probe(d) => {
            let exp = open(&d)?;
            locked(&exp, |e| e.run_probe())?;
            show(&exp.report_path("probe.csv"));
        }
        Command::Attention { dir, sample, token } => {
            let exp = open(&dir)?;
            let s = sample.unwrap_or(exp.config.attention_sample);
            let t = token.unwrap_or(exp.config.attention_token);
            let csv = locked(&exp, |e| e.run_attention(s, t))?;
            print!("{csv}");
        }
        Command::Budget(d) => {
            let exp = open(&d)?;
            locked(&exp, |e| e.run_budget())?;
            show(&exp.report_path("budget.csv"));
        }
        Command::Report(d) => {
            let exp = open(&d)?;
            let p = locked(&exp, |e| e.run_report())?;
            println!("{}", p.display());
        }
        Command::Run(a) => {
            let exp = create_or_open(&a)?;
            let steps: Vec<Step> = exp.config.steps.clone();
            exp.run(&steps)?;
            println!("{}", exp.report_path("summary.md").display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) => 1,
        Error::FreezeViolation(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
