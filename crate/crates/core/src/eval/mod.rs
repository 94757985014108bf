//! Downstream tasks and their metrics.

pub mod bleu;
pub mod classify;
pub mod cloze;
pub mod report;
pub mod retrieval;
pub mod summarize;

pub use bleu::{bleu_components, smoothed_bleu4, BleuComponents};
pub use classify::{f1, ConfusionCounts, F1Scores};
pub use cloze::{build_cloze_items, cloze_test, ClozeItem, ClozeMode, ClozeResult};
pub use report::{evaluate_suite, EvalData, EvalReport, EvalTask};
pub use retrieval::{map_at_r, mean_map_at_r, RetrievalInstance};
pub use summarize::{summarize, Strategy};
