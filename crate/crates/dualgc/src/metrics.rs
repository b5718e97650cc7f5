//! Clustering evaluation: accuracy and macro-F1 under an optimal
//! Kuhn–Munkres label mapping, normalized mutual information, and the
//! adjusted Rand index, plus multi-seed aggregation.

use std::collections::BTreeMap;

use pathfinding::prelude::{kuhn_munkres, Matrix};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// All four scores for one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub f1: f64,
}

/// Mean, population standard deviation, and the underlying per-seed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            values,
            mean,
            std: var.sqrt(),
        }
    }
}

/// Per-seed metric values aggregated as mean ± std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: MetricSummary,
    pub nmi: MetricSummary,
    pub ari: MetricSummary,
    pub f1: MetricSummary,
}

impl MetricsReport {
    pub fn from_runs(runs: &[Metrics]) -> Self {
        let pick =
            |f: fn(&Metrics) -> f64| MetricSummary::from_values(runs.iter().map(f).collect());
        Self {
            acc: pick(|m| m.acc),
            nmi: pick(|m| m.nmi),
            ari: pick(|m| m.ari),
            f1: pick(|m| m.f1),
        }
    }
}

/// Compute all four metrics for one prediction.
pub fn evaluate(truth: &[usize], pred: &[usize]) -> Result<Metrics> {
    Ok(Metrics {
        acc: clustering_accuracy(truth, pred)?,
        nmi: nmi(truth, pred)?,
        ari: ari(truth, pred)?,
        f1: macro_f1(truth, pred)?,
    })
}

fn check_lengths(truth: &[usize], pred: &[usize]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", truth.len()),
            got: format!("{} labels", pred.len()),
        });
    }
    if truth.is_empty() {
        return Err(Error::InvalidParameter(
            "metrics need at least one label".into(),
        ));
    }
    Ok(())
}

/// Map arbitrary label ids onto 0..k, preserving value order.
fn dense_relabel(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut ids: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        let next = ids.len();
        ids.entry(l).or_insert(next);
    }
    let k = ids.len();
    (labels.iter().map(|l| ids[l]).collect(), k)
}

/// k_t×k_p exact joint counts over densely relabeled inputs.
fn contingency(truth: &[usize], pred: &[usize]) -> (Vec<Vec<i64>>, Vec<usize>, Vec<usize>) {
    let (t, kt) = dense_relabel(truth);
    let (p, kp) = dense_relabel(pred);
    let mut table = vec![vec![0i64; kp]; kt];
    for (a, b) in t.iter().zip(p.iter()) {
        table[*a][*b] += 1;
    }
    (table, t, p)
}

/// Kuhn–Munkres assignment maximizing matched counts on the square-padded
/// contingency table. Returns (matched count, map from dense pred id to
/// dense truth id, dense truth labels, dense pred labels).
fn optimal_map(truth: &[usize], pred: &[usize]) -> (i64, Vec<usize>, Vec<usize>, Vec<usize>) {
    let (table, t, p) = contingency(truth, pred);
    let (kt, kp) = (table.len(), table[0].len());
    let s = kt.max(kp);
    let mut weights = Matrix::new(s, s, 0i64);
    for (i, row) in table.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            weights[(i, j)] = v;
        }
    }
    let (matched, assignment) = kuhn_munkres(&weights);
    let mut pred_to_truth = vec![0usize; s];
    for (ti, &pj) in assignment.iter().enumerate() {
        pred_to_truth[pj] = ti;
    }
    (matched, pred_to_truth, t, p)
}

/// Fraction of nodes whose predicted cluster matches the true class under
/// the best Kuhn–Munkres mapping of cluster ids onto class ids.
pub fn clustering_accuracy(truth: &[usize], pred: &[usize]) -> Result<f64> {
    check_lengths(truth, pred)?;
    let (matched, ..) = optimal_map(truth, pred);
    Ok(matched as f64 / truth.len() as f64)
}

/// Unweighted mean of per-class F1 after applying the same Kuhn–Munkres map
/// as [`clustering_accuracy`]. A class predicted but absent from the truth
/// has zero support and contributes 0, with a warning.
pub fn macro_f1(truth: &[usize], pred: &[usize]) -> Result<f64> {
    check_lengths(truth, pred)?;
    let (_, pred_to_truth, t, p) = optimal_map(truth, pred);
    let mapped: Vec<usize> = p.iter().map(|&j| pred_to_truth[j]).collect();

    let s = pred_to_truth.len();
    let mut tp = vec![0f64; s];
    let mut fp = vec![0f64; s];
    let mut fn_ = vec![0f64; s];
    let mut in_union = vec![false; s];
    let mut support = vec![0usize; s];
    for (&ti, &mi) in t.iter().zip(mapped.iter()) {
        in_union[ti] = true;
        in_union[mi] = true;
        support[ti] += 1;
        if ti == mi {
            tp[ti] += 1.0;
        } else {
            fp[mi] += 1.0;
            fn_[ti] += 1.0;
        }
    }

    let mut total = 0.0;
    let mut classes = 0usize;
    for c in 0..s {
        if !in_union[c] {
            continue;
        }
        classes += 1;
        if support[c] == 0 {
            log::warn!("macro_f1: predicted class has zero support in the truth; scoring 0");
            continue;
        }
        let denom = 2.0 * tp[c] + fp[c] + fn_[c];
        if denom > 0.0 {
            total += 2.0 * tp[c] / denom;
        }
    }
    Ok(total / classes as f64)
}

fn entropy(counts: &[i64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the arithmetic mean of the two label
/// entropies (natural log). Zero when one side is a single block while the
/// other is not; 1 when both are (identical trivial partitions).
pub fn nmi(truth: &[usize], pred: &[usize]) -> Result<f64> {
    check_lengths(truth, pred)?;
    let (table, ..) = contingency(truth, pred);
    let n = truth.len() as f64;
    let row_sums: Vec<i64> = table.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<i64> = (0..table[0].len())
        .map(|j| table.iter().map(|r| r[j]).sum())
        .collect();
    let h_t = entropy(&row_sums, n);
    let h_p = entropy(&col_sums, n);
    if h_t == 0.0 && h_p == 0.0 {
        return Ok(1.0);
    }
    if h_t == 0.0 || h_p == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let joint = c as f64 / n;
                mi += joint * ((c as f64 * n) / (row_sums[i] as f64 * col_sums[j] as f64)).ln();
            }
        }
    }
    Ok((2.0 * mi / (h_t + h_p)).clamp(0.0, 1.0))
}

fn comb2(x: i128) -> i128 {
    x * (x - 1) / 2
}

/// Adjusted Rand index via exact integer pair counts; the ratio is formed
/// only at the end. In the degenerate case Max = Expected the result is 1
/// for identical partitions and 0 otherwise, with a warning.
pub fn ari(truth: &[usize], pred: &[usize]) -> Result<f64> {
    check_lengths(truth, pred)?;
    let (table, ..) = contingency(truth, pred);
    let row_sums: Vec<i128> = table
        .iter()
        .map(|r| r.iter().map(|&v| v as i128).sum())
        .collect();
    let col_sums: Vec<i128> = (0..table[0].len())
        .map(|j| table.iter().map(|r| r[j] as i128).sum())
        .collect();
    let index: i128 = table
        .iter()
        .flat_map(|r| r.iter())
        .map(|&v| comb2(v as i128))
        .sum();
    let a: i128 = row_sums.iter().map(|&v| comb2(v)).sum();
    let b: i128 = col_sums.iter().map(|&v| comb2(v)).sum();
    let pairs = comb2(truth.len() as i128);

    // ARI = (Index − ab/pairs) / ((a+b)/2 − ab/pairs), scaled by 2·pairs to
    // stay in integers.
    let num = 2 * pairs * index - 2 * a * b;
    let den = pairs * (a + b) - 2 * a * b;
    if den == 0 {
        let identical = table
            .iter()
            .all(|r| r.iter().filter(|&&v| v > 0).count() == 1)
            && (0..table[0].len()).all(|j| table.iter().filter(|r| r[j] > 0).count() == 1);
        log::warn!(
            "ari: Max equals Expected; defining result {}",
            if identical { 1.0 } else { 0.0 }
        );
        return Ok(if identical { 1.0 } else { 0.0 });
    }
    Ok(num as f64 / den as f64)
}
