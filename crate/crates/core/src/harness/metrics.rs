use serde::{Deserialize, Serialize};

use crate::siamese::{classify, Verdict};

/// Bumped together with the checkpoint format.
pub const SCHEMA_VERSION: u32 = 1;

/// Counts with "different drivers" as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Self::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (classify(s, threshold), y == 1) {
                (Verdict::Different, true) => c.tp += 1,
                (Verdict::Different, false) => c.fp += 1,
                (Verdict::Same, false) => c.tn += 1,
                (Verdict::Same, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    /// 0 when precision and recall are both 0.
    pub f1: f64,
    pub confusion: Confusion,
    pub n_pairs: usize,
    pub threshold: f64,
    pub config_digest: String,
}

impl MetricsReport {
    pub fn from_confusion(c: Confusion, threshold: f64, config_digest: impl Into<String>) -> Self {
        let precision = ratio(c.tp, c.tp + c.fp);
        let recall = ratio(c.tp, c.tp + c.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            schema_version: SCHEMA_VERSION,
            accuracy: ratio(c.tp + c.tn, c.total()),
            precision,
            recall,
            f1,
            confusion: c,
            n_pairs: c.total(),
            threshold,
            config_digest: config_digest.into(),
        }
    }

    pub fn from_scores(scores: &[f64], labels: &[u8], threshold: f64, config_digest: impl Into<String>) -> Self {
        Self::from_confusion(Confusion::from_scores(scores, labels, threshold), threshold, config_digest)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialise")
    }
}
