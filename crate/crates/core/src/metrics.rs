//! Discrimination and decision-rule evaluation.
//!
//! AUROC is the Mann–Whitney statistic with half credit for ties. Confidence
//! intervals come from a percentile bootstrap over the whole scored set.
//! Threshold diagnostics use a symmetric abstention rule: at level `α` a record
//! is called positive when `p ≥ 1 − α`, negative when `p ≤ α`, and left
//! uncovered otherwise.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::SeededRng;

pub const DEFAULT_ALPHAS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const DEFAULT_BOOTSTRAP: usize = 1000;
/// Consecutive single-class resamples tolerated before giving up.
pub const MAX_REDRAWS: usize = 100;

/// Test-set predictions: parallel probabilities, binary labels and ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    probabilities: Vec<f64>,
    labels: Vec<u8>,
    ids: Vec<String>,
}

impl ScoredSet {
    pub fn new(probabilities: Vec<f64>, labels: Vec<u8>, ids: Vec<String>) -> Result<Self> {
        if probabilities.len() != labels.len() || ids.len() != labels.len() {
            return Err(Error::invalid(format!(
                "scored set lengths differ: {} probabilities, {} labels, {} ids",
                probabilities.len(),
                labels.len(),
                ids.len()
            )));
        }
        if labels.len() < 2 {
            return Err(Error::invalid("a scored set needs at least 2 records"));
        }
        if let Some(p) = probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(format!("probability {p} outside [0, 1]")));
        }
        if let Some(y) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::invalid(format!("label {y} is not binary")));
        }
        Ok(Self {
            probabilities,
            labels,
            ids,
        })
    }

    /// Builds a set with positional ids (`"0"`, `"1"`, ...).
    pub fn unnamed(probabilities: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        let ids = (0..labels.len()).map(|i| i.to_string()).collect();
        Self::new(probabilities, labels, ids)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }
}

/// Mann–Whitney AUROC of arbitrary real scores.
pub fn auroc_of(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs at least one positive and one negative".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the rank sum of positives, using mid-ranks for ties; integral.
    let mut twice_rank_sum: u64 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Ranks start+1..=end; twice their mean is start + end + 1.
        let twice_mid = (start + end + 1) as u64;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i] == 1).count() as u64;
        twice_rank_sum += twice_mid * pos_in_group;
        start = end;
    }
    let np = n_pos as u64;
    // 2U = 2R − n_pos(n_pos + 1): the count of correctly ordered pairs in half units.
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

pub fn auroc(set: &ScoredSet) -> Result<f64> {
    auroc_of(&set.probabilities, &set.labels)
}

/// Percentile bootstrap interval (2.5%, 97.5%) for AUROC.
///
/// Resample `b` draws from stream `seed.derive(b)`, so the result does not depend
/// on thread count.
pub fn bootstrap_ci(set: &ScoredSet, resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if resamples == 0 {
        return Err(Error::invalid("bootstrap needs at least one resample"));
    }
    auroc(set)?;
    let base = SeededRng::new(seed);
    let mut stats = (0..resamples)
        .into_par_iter()
        .map(|b| resample_auroc(set, &mut base.derive(b as u64), MAX_REDRAWS))
        .collect::<Result<Vec<f64>>>()?;
    stats.sort_by(f64::total_cmp);
    Ok((percentile(&stats, 0.025), percentile(&stats, 0.975)))
}

/// AUROC of one resample with replacement, redrawing single-class resamples
/// at most `max_redraws` times.
fn resample_auroc(set: &ScoredSet, rng: &mut SeededRng, max_redraws: usize) -> Result<f64> {
    let n = set.len();
    let mut scores = vec![0.0; n];
    let mut labels = vec![0u8; n];
    for _ in 0..=max_redraws {
        for k in 0..n {
            let i = rng.below(n);
            scores[k] = set.probabilities[i];
            labels[k] = set.labels[i];
        }
        match auroc_of(&scores, &labels) {
            Ok(v) => return Ok(v),
            Err(Error::UndefinedMetric(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::DegenerateSet(format!(
        "more than {max_redraws} consecutive single-class resamples"
    )))
}

/// Linear-interpolated quantile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Decision-rule diagnostics at one abstention level. Ratios whose denominator
/// is zero are `None` (serialized as `null`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub alpha: f64,
    pub total: usize,
    pub covered: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub false_negatives: usize,
    pub coverage: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub accuracy: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn threshold_row(set: &ScoredSet, alpha: f64) -> ThresholdRow {
    let (mut tp, mut fp, mut tn, mut fneg) = (0, 0, 0, 0);
    for (&p, &y) in set.probabilities.iter().zip(&set.labels) {
        // Positive is checked first so p = 0.5 at α = 0.5 predicts positive.
        let call = if p >= 1.0 - alpha {
            Some(1)
        } else if p <= alpha {
            Some(0)
        } else {
            None
        };
        match (call, y) {
            (Some(1), 1) => tp += 1,
            (Some(1), _) => fp += 1,
            (Some(_), 0) => tn += 1,
            (Some(_), _) => fneg += 1,
            (None, _) => {}
        }
    }
    let covered = tp + fp + tn + fneg;
    let total = set.len();
    ThresholdRow {
        alpha,
        total,
        covered,
        true_positives: tp,
        false_positives: fp,
        true_negatives: tn,
        false_negatives: fneg,
        coverage: covered as f64 / total as f64,
        sensitivity: ratio(tp, tp + fneg),
        specificity: ratio(tn, tn + fp),
        ppv: ratio(tp, tp + fp),
        npv: ratio(tn, tn + fneg),
        accuracy: ratio(tp + tn, covered),
    }
}

pub fn threshold_diagnostics(set: &ScoredSet, alphas: &[f64]) -> Vec<ThresholdRow> {
    alphas.iter().map(|&a| threshold_row(set, a)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub n_positive: usize,
    pub auroc: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub bootstrap_resamples: usize,
    pub seed: u64,
    pub thresholds: Vec<ThresholdRow>,
}

pub fn evaluate(set: &ScoredSet, resamples: usize, seed: u64) -> Result<EvalReport> {
    let auc = auroc(set)?;
    let (ci_low, ci_high) = bootstrap_ci(set, resamples, seed)?;
    Ok(EvalReport {
        n: set.len(),
        n_positive: set.labels.iter().filter(|&&y| y == 1).count(),
        auroc: auc,
        ci_low,
        ci_high,
        bootstrap_resamples: resamples,
        seed,
        thresholds: threshold_diagnostics(set, &DEFAULT_ALPHAS),
    })
}

pub const THRESHOLD_CSV_HEADER: &str = "alpha,total,covered,coverage,tp,fp,tn,fn,sensitivity,specificity,ppv,npv,accuracy";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV line per threshold row (no header); undefined ratios are empty fields.
pub fn threshold_csv_line(row: &ThresholdRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{}",
        row.alpha,
        row.total,
        row.covered,
        row.coverage,
        row.true_positives,
        row.false_positives,
        row.true_negatives,
        row.false_negatives,
        opt(row.sensitivity),
        opt(row.specificity),
        opt(row.ppv),
        opt(row.npv),
        opt(row.accuracy)
    )
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::invalid(format!("serializing report: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn write_threshold_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut body = String::from(THRESHOLD_CSV_HEADER);
        body.push('\n');
        for row in &self.thresholds {
            body.push_str(&threshold_csv_line(row));
            body.push('\n');
        }
        f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
    }
}
