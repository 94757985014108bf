//! Optimizers, the three training phases, checkpoints and metric logs.

pub mod checkpoint;
pub mod contrastive;
pub mod metrics;
pub mod mlm;
pub mod optim;
pub mod pairs;
pub mod seq2seq;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::Phase;
use crate::assembly::ModelAssembly;
use crate::error::{Error, Result};
use crate::params::Binder;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::ForwardCtx;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use contrastive::{inbatch_loss, inbatch_loss_value, sample_inbatch, train_retrieval_inbatch};
pub use metrics::{MetricRecord, MetricsLog};
pub use mlm::{mlm_validation_loss, train_mlm};
pub use optim::{adam_step, AdamConfig, OptimizerState};
pub use pairs::{make_pairs, train_pair_classifier, LabeledPair};
pub use seq2seq::{seq2seq_validation_loss, train_seq2seq, SummaryPair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase: Phase,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    pub eval_every: usize,
    /// Falls back to the model's `dropout_rate` when unset.
    pub dropout: Option<f32>,
    pub seed: u64,
    /// AdamW decay on weights; 0 gives Adam.
    pub weight_decay: f32,
    /// Contrastive softmax temperature.
    pub temperature: f32,
    pub mask_rate: f64,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::LAdapterMlm,
            learning_rate: 1e-4,
            batch_size: 16,
            max_steps: 2000,
            patience: 5,
            eval_every: 200,
            dropout: None,
            seed: 0,
            weight_decay: 0.0,
            temperature: 0.07,
            mask_rate: 0.15,
            eval_batch: 32,
        }
    }
}

impl TrainConfig {
    pub fn for_phase(phase: Phase) -> Self {
        let learning_rate = match phase {
            Phase::LAdapterMlm => 1e-4,
            Phase::TAdapterTask => 1e-5,
            Phase::FullFinetune => 1e-4,
        };
        Self {
            phase,
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch_size, eval_every and eval_batch must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be > 0".into()));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::Config("mask_rate must be in (0, 1)".into()));
        }
        if let Some(p) = self.dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout {p} outside [0,1)")));
            }
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamConfig {
        AdamConfig::adamw(self.learning_rate, self.weight_decay)
    }
}

/// Result of one training run. `curve` holds `(step, validation metric)`
/// including the step-0 baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub metric: String,
    pub steps: u64,
    pub initial: f64,
    pub best: f64,
    pub best_step: u64,
    pub curve: Vec<(u64, f64)>,
    pub train_loss: Vec<(u64, f64)>,
    pub stopped_early: bool,
}

type LossFn<'a> =
    Box<dyn FnMut(&mut Tape<f32>, &mut Binder<f32>, &ModelAssembly, &mut ChaCha8Rng, &mut ForwardCtx) -> Result<Var> + 'a>;
type ValidateFn<'a> = Box<dyn Fn(&ModelAssembly) -> Result<f64> + 'a>;

pub(crate) struct Objective<'a> {
    pub metric: &'static str,
    pub higher_is_better: bool,
    pub loss: LossFn<'a>,
    pub validate: ValidateFn<'a>,
}

fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn check_phase(asm: &ModelAssembly, cfg: &TrainConfig, allowed: &[Phase]) -> Result<()> {
    if asm.phase() != cfg.phase {
        return Err(Error::Config(format!(
            "assembly built for {} but config requests {}",
            asm.phase(),
            cfg.phase
        )));
    }
    if !allowed.contains(&cfg.phase) {
        return Err(Error::Config(format!("objective cannot run in the {} phase", cfg.phase)));
    }
    Ok(())
}

/// Shared loop: Adam(W) steps, periodic validation, early stopping with
/// restoration of the best parameters, and a final frozen-set check.
pub(crate) fn fit(
    asm: &mut ModelAssembly,
    cfg: &TrainConfig,
    mut obj: Objective<'_>,
    log: &mut MetricsLog,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let trainable = asm.partition().trainable.clone();
    if trainable.is_empty() {
        return Err(Error::Config(format!("nothing to train in the {} phase", asm.phase())));
    }
    let dropout = cfg.dropout.unwrap_or(asm.config().dropout_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let better = |a: f64, b: f64| if obj.higher_is_better { a > b } else { a < b };

    let initial = (obj.validate)(asm)?;
    log.push(0, "valid", obj.metric, initial);
    let mut curve = vec![(0, initial)];
    let mut train_loss = Vec::new();
    let mut best = initial;
    let mut best_step = 0;
    let snapshot = |asm: &ModelAssembly| -> Result<BTreeMap<String, Tensor>> {
        trainable
            .iter()
            .map(|n| Ok((n.clone(), asm.params().get(n)?.clone())))
            .collect()
    };
    let mut best_params = snapshot(asm)?;
    let mut opt: Option<OptimizerState> = None;
    let mut bad_evals = 0;
    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;
    let mut steps = 0;
    let mut stopped_early = false;

    for step in 1..=cfg.max_steps as u64 {
        let grads = {
            let mut tape = Tape::<f32>::new();
            let mut binder = Binder::new(asm.params(), &trainable);
            let mut ctx = ForwardCtx::train(dropout, step_seed(cfg.seed, step));
            let loss = (obj.loss)(&mut tape, &mut binder, asm, &mut rng, &mut ctx)?;
            let lv = tape.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            loss_sum += lv as f64;
            loss_n += 1;
            tape.backward(loss)?;
            binder.grads(&tape)
        };
        if opt.is_none() {
            opt = Some(OptimizerState::for_params(
                cfg.optimizer(),
                asm.params(),
                grads.keys().map(String::as_str),
            )?);
        }
        adam_step(asm.params_mut(), &grads, opt.as_mut().expect("initialised above"))?;
        steps = step;

        if step % cfg.eval_every as u64 == 0 || step == cfg.max_steps as u64 {
            let tl = loss_sum / loss_n as f64;
            log.push(step, "train", "loss", tl);
            train_loss.push((step, tl));
            loss_sum = 0.0;
            loss_n = 0;
            let v = (obj.validate)(asm)?;
            log.push(step, "valid", obj.metric, v);
            curve.push((step, v));
            if better(v, best) {
                best = v;
                best_step = step;
                best_params = snapshot(asm)?;
                bad_evals = 0;
            } else {
                bad_evals += 1;
                if bad_evals >= cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    for (n, t) in best_params {
        *asm.params_mut().get_mut(&n)? = t;
    }
    asm.verify_frozen()?;
    Ok(TrainOutcome {
        metric: obj.metric.to_string(),
        steps,
        initial,
        best,
        best_step,
        curve,
        train_loss,
        stopped_early,
    })
}

/// Splits `0..n` into chunks of `size`.
pub(crate) fn chunks(n: usize, size: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..n).step_by(size.max(1)).map(move |s| s..(s + size.max(1)).min(n))
}
