//! Ranking accuracy: does each of the top-K predicted crops land on one of the
//! top-N annotated crops (IoU ≥ ε)?

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decoder::Prediction;
use crate::geometry::{iou, ScoredCrop};

/// Threshold used for the headline numbers.
pub const DEFAULT_EPSILON: f64 = 0.9;
pub const DEFAULT_SK: [usize; 4] = [1, 2, 3, 4];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("example {example}: K = {k} exceeds {available} predictions")]
    KTooLarge { example: usize, k: usize, available: usize },
    #[error("example {example}: N = {n} exceeds {available} ground truths")]
    NTooLarge { example: usize, n: usize, available: usize },
    #[error("K must be at least 1")]
    ZeroK,
    #[error("N must be at least 1")]
    ZeroN,
    #[error("no examples to evaluate")]
    NoExamples,
    #[error("empty K set")]
    EmptySK,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalExample {
    pub predictions: Vec<Prediction>,
    pub ground_truths: Vec<ScoredCrop>,
}

/// Prediction indices by descending score, ties by ascending index.
pub fn top_k_predictions(preds: &[Prediction], k: usize) -> Result<Vec<usize>, MetricsError> {
    if k > preds.len() {
        return Err(MetricsError::KTooLarge {
            example: 0,
            k,
            available: preds.len(),
        });
    }
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score));
    idx.truncate(k);
    Ok(idx)
}

/// Ground-truth indices of the `n` highest-MOS crops, ties by ascending index.
pub fn top_n_ground_truths(gts: &[ScoredCrop], n: usize) -> Result<Vec<usize>, MetricsError> {
    if n > gts.len() {
        return Err(MetricsError::NTooLarge {
            example: 0,
            n,
            available: gts.len(),
        });
    }
    let mut idx: Vec<usize> = (0..gts.len()).collect();
    idx.sort_by(|&a, &b| gts[b].mos.total_cmp(&gts[a].mos));
    idx.truncate(n);
    Ok(idx)
}

fn hits(ex: &EvalExample, k: usize, n: usize, eps: f64) -> Result<usize, MetricsError> {
    let top = top_k_predictions(&ex.predictions, k)?;
    let best = top_n_ground_truths(&ex.ground_truths, n)?;
    Ok(top
        .iter()
        .filter(|&&j| {
            best.iter()
                .map(|&g| iou(&ex.predictions[j].crop, &ex.ground_truths[g].crop))
                .fold(f64::NEG_INFINITY, f64::max)
                >= eps
        })
        .count())
}

/// `Acc_{K/N}` averaged over examples.
pub fn acc_k_n(examples: &[EvalExample], k: usize, n: usize, eps: f64) -> Result<f64, MetricsError> {
    if k == 0 {
        return Err(MetricsError::ZeroK);
    }
    if n == 0 {
        return Err(MetricsError::ZeroN);
    }
    if examples.is_empty() {
        return Err(MetricsError::NoExamples);
    }
    let mut total = 0usize;
    for (i, ex) in examples.iter().enumerate() {
        total += hits(ex, k, n, eps).map_err(|e| with_example(e, i))?;
    }
    Ok(total as f64 / (examples.len() * k) as f64)
}

/// Mean of `Acc_{K/N}` over `ks`.
pub fn acc_bar_n(examples: &[EvalExample], ks: &[usize], n: usize, eps: f64) -> Result<f64, MetricsError> {
    if ks.is_empty() {
        return Err(MetricsError::EmptySK);
    }
    let mut sum = 0.0;
    for &k in ks {
        sum += acc_k_n(examples, k, n, eps)?;
    }
    Ok(sum / ks.len() as f64)
}

fn with_example(e: MetricsError, example: usize) -> MetricsError {
    match e {
        MetricsError::KTooLarge { k, available, .. } => MetricsError::KTooLarge { example, k, available },
        MetricsError::NTooLarge { n, available, .. } => MetricsError::NTooLarge { example, n, available },
        e => e,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epsilon: f64,
    pub examples: usize,
    pub ks: Vec<usize>,
    pub ns: Vec<usize>,
    /// `acc[N][K]`, keyed by the numbers themselves.
    pub acc: BTreeMap<usize, BTreeMap<usize, f64>>,
    pub acc_bar: BTreeMap<usize, f64>,
}

impl MetricsReport {
    pub fn compute(examples: &[EvalExample], ks: &[usize], ns: &[usize], eps: f64) -> Result<Self, MetricsError> {
        if ks.is_empty() {
            return Err(MetricsError::EmptySK);
        }
        let mut acc = BTreeMap::new();
        let mut acc_bar = BTreeMap::new();
        for &n in ns {
            let mut row = BTreeMap::new();
            for &k in ks {
                row.insert(k, acc_k_n(examples, k, n, eps)?);
            }
            acc_bar.insert(n, row.values().sum::<f64>() / ks.len() as f64);
            acc.insert(n, row);
        }
        Ok(MetricsReport {
            epsilon: eps,
            examples: examples.len(),
            ks: ks.to_vec(),
            ns: ns.to_vec(),
            acc,
            acc_bar,
        })
    }

    /// Default evaluation: K ∈ {1..4}, N ∈ {5, 10}, ε = 0.9.
    pub fn standard(examples: &[EvalExample]) -> Result<Self, MetricsError> {
        Self::compute(examples, &DEFAULT_SK, &[5, 10], DEFAULT_EPSILON)
    }

    pub fn get(&self, k: usize, n: usize) -> Option<f64> {
        self.acc.get(&n)?.get(&k).copied()
    }

    /// One row per model, percentage columns grouped by N, matching the usual
    /// cropping-benchmark layout.
    pub fn table(&self, label: &str) -> String {
        let mut header = format!("{:<16}", "Model");
        let mut line = format!("{:<16}", label);
        for &n in &self.ns {
            for &k in &self.ks {
                let h = format!("Acc{k}/{n}");
                let _ = write!(header, " {:>9}", h);
                let _ = write!(line, " {:>9.1}", 100.0 * self.acc[&n][&k]);
            }
            let h = format!("Acc̄{n}");
            let _ = write!(header, " {:>9}", h);
            let _ = write!(line, " {:>9.1}", 100.0 * self.acc_bar[&n]);
        }
        format!("{header}\n{line}\n")
    }
}
