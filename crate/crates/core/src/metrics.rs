//! Per-class confusion counts, weighted accuracy and binary F1.

/// Counts for one class. `P = tp + fn_`, `N = tn + fp`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn from_pairs(pred: &[bool], truth: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(truth) {
            c.push(p, t);
        }
        c
    }

    pub fn push(&mut self, pred: bool, truth: bool) {
        match (pred, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }
}

/// `(TP·N/P + TN) / (2N)`; `None` when the class has no positives or no
/// negatives.
pub fn weighted_accuracy(c: &ConfusionCounts) -> Option<f64> {
    let (p, n) = (c.positives() as f64, c.negatives() as f64);
    if p == 0.0 || n == 0.0 {
        return None;
    }
    Some((c.tp as f64 * n / p + c.tn as f64) / (2.0 * n))
}

/// `2TP / (2TP + FP + FN)`, or 0 when that denominator is 0.
pub fn binary_f1(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        log::warn!("F1 undefined (no positives predicted or present); reporting 0");
        return 0.0;
    }
    2.0 * c.tp as f64 / denom as f64
}

/// Macro-averaged metrics over classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub counts: Vec<ConfusionCounts>,
    pub wacc: Vec<Option<f64>>,
    pub f1: Vec<f64>,
}

impl ClassMetrics {
    /// Multi-label predictions: a class is predicted when its logit is
    /// `>= 0`, i.e. `sigmoid >= 0.5`.
    pub fn from_logits(logits: &[Vec<f64>], labels: &[Vec<f64>]) -> Self {
        let classes = labels.first().map_or(0, Vec::len);
        let mut counts = vec![ConfusionCounts::default(); classes];
        for (l, y) in logits.iter().zip(labels) {
            for c in 0..classes {
                counts[c].push(l[c] >= 0.0, y[c] >= 0.5);
            }
        }
        Self::from_counts(counts)
    }

    pub fn from_counts(counts: Vec<ConfusionCounts>) -> Self {
        let wacc = counts.iter().map(weighted_accuracy).collect();
        let f1 = counts.iter().map(binary_f1).collect();
        Self { counts, wacc, f1 }
    }

    /// Mean weighted accuracy over classes where it is defined.
    pub fn mean_wacc(&self) -> Option<f64> {
        let defined: Vec<f64> = self.wacc.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    pub fn mean_f1(&self) -> f64 {
        if self.f1.is_empty() {
            0.0
        } else {
            self.f1.iter().sum::<f64>() / self.f1.len() as f64
        }
    }
}
