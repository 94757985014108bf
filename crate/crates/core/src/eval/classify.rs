use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    /// Counts from `(predicted, gold)` pairs.
    pub fn from_predictions(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut c = Self::default();
        for (p, g) in pairs {
            match (p, g) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    /// Set when a denominator was zero and the affected score defaulted to 0.
    pub degenerate: bool,
}

pub fn f1_from(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else if precision == recall {
        precision
    } else {
        2.0 * (precision * recall) / (precision + recall)
    }
}

pub fn f1(c: &ConfusionCounts) -> F1Scores {
    let mut degenerate = false;
    let mut ratio = |num: u64, den: u64| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let accuracy = ratio(c.tp + c.tn, c.total());
    if c.tp == 0 {
        degenerate = true;
    }
    F1Scores {
        precision,
        recall,
        f1: f1_from(precision, recall),
        accuracy,
        degenerate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let s = f1(&ConfusionCounts {
            tp: 1,
            tn: 0,
            fp: 0,
            fn_: 1,
        });
        assert_eq!(s.precision, 1.0);
        assert_eq!(s.recall, 0.5);
        assert_eq!(s.f1, 2.0 / 3.0);
        assert!(!s.degenerate);
    }

    #[test]
    fn no_true_positives_is_flagged() {
        let s = f1(&ConfusionCounts {
            tp: 0,
            tn: 5,
            fp: 2,
            fn_: 3,
        });
        assert_eq!(s.f1, 0.0);
        assert!(s.degenerate);
        assert_eq!(s.accuracy, 0.5);
    }

    #[test]
    fn equal_precision_recall() {
        assert_eq!(f1_from(0.4, 0.4), 0.4);
        assert_eq!(f1_from(0.3, 0.8), f1_from(0.8, 0.3));
    }
}
