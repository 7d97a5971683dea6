//! Count-based evaluation: standardized activity histograms, per-activity
//! TP/FP/FN, macro precision/recall/F1, perfect prediction score (PPS) and
//! occupancy counting error (OCE).

use std::fmt::Write as _;

use crate::csi::ActivityId;
use crate::error::{Error, Result};

/// Per-activity person counts; index `a - 1` holds activity `a`.
pub type ActivityCounts = Vec<u32>;

/// Histogram of predicted activities; `None` entries (∅) are dropped.
pub fn standardize(pred: &[Option<ActivityId>], n_act: usize) -> Result<ActivityCounts> {
    let mut counts = vec![0; n_act];
    for a in pred.iter().flatten() {
        let a = *a as usize;
        if a == 0 || a > n_act {
            return Err(Error::Invalid(format!(
                "activity id {a} outside 1..={n_act}"
            )));
        }
        counts[a - 1] += 1;
    }
    Ok(counts)
}

pub fn label_counts(labels: &[ActivityId], n_act: usize) -> Result<ActivityCounts> {
    let as_pred: Vec<Option<ActivityId>> = labels.iter().map(|&a| Some(a)).collect();
    standardize(&as_pred, n_act)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u32,
    pub fp: u32,
    pub fn_: u32,
}

/// `TP = min(y, ŷ)`, `FP = max(0, ŷ − y)`, `FN = max(0, y − ŷ)` per activity.
pub fn count_confusion(truth: &[u32], pred: &[u32]) -> Vec<Confusion> {
    truth
        .iter()
        .zip(pred)
        .map(|(&y, &p)| Confusion {
            tp: y.min(p),
            fp: p.saturating_sub(y),
            fn_: y.saturating_sub(p),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub pps: f64,
    pub oce: f64,
    pub samples: usize,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn check(truth: &[ActivityCounts], pred: &[ActivityCounts]) -> Result<()> {
    if truth.is_empty() {
        return Err(Error::Invalid("metrics need at least one sample".into()));
    }
    if truth.len() != pred.len() {
        return Err(Error::Invalid(format!(
            "{} labels vs {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let n_act = truth[0].len();
    if truth.iter().chain(pred).any(|c| c.len() != n_act) {
        return Err(Error::Invalid("count vectors differ in length".into()));
    }
    Ok(())
}

/// Fraction of samples whose whole count vector is exact.
pub fn pps(truth: &[ActivityCounts], pred: &[ActivityCounts]) -> Result<f64> {
    check(truth, pred)?;
    Ok(truth.iter().zip(pred).filter(|(y, p)| y == p).count() as f64 / truth.len() as f64)
}

/// Mean absolute difference of total occupancy.
pub fn oce(truth: &[ActivityCounts], pred: &[ActivityCounts]) -> Result<f64> {
    check(truth, pred)?;
    let total: f64 = truth
        .iter()
        .zip(pred)
        .map(|(y, p)| (y.iter().sum::<u32>() as f64 - p.iter().sum::<u32>() as f64).abs())
        .sum();
    Ok(total / truth.len() as f64)
}

/// Full metric suite. Per-activity rates come from sample-mean TP/FP/FN, with
/// zero denominators giving zero; macro averages cover every activity unless
/// `skip_unsupported` drops those never true and never predicted.
pub fn evaluate(
    truth: &[ActivityCounts],
    pred: &[ActivityCounts],
    skip_unsupported: bool,
) -> Result<MetricReport> {
    check(truth, pred)?;
    let n_act = truth[0].len();
    let n = truth.len() as f64;
    let mut sums = vec![(0u64, 0u64, 0u64); n_act];
    for (y, p) in truth.iter().zip(pred) {
        for (s, c) in sums.iter_mut().zip(count_confusion(y, p)) {
            s.0 += c.tp as u64;
            s.1 += c.fp as u64;
            s.2 += c.fn_ as u64;
        }
    }
    let (mut precision, mut recall, mut f1) = (Vec::new(), Vec::new(), Vec::new());
    for &(tp, fp, fn_) in &sums {
        let (tp, fp, fn_) = (tp as f64 / n, fp as f64 / n, fn_ as f64 / n);
        let p = ratio(tp, tp + fp);
        let r = ratio(tp, tp + fn_);
        precision.push(p);
        recall.push(r);
        f1.push(ratio(2.0 * p * r, p + r));
    }
    let included: Vec<usize> = (0..n_act)
        .filter(|&a| !skip_unsupported || sums[a] != (0, 0, 0))
        .collect();
    let mean = |v: &[f64]| ratio(included.iter().map(|&a| v[a]).sum(), included.len() as f64);
    Ok(MetricReport {
        macro_precision: mean(&precision),
        macro_recall: mean(&recall),
        macro_f1: mean(&f1),
        precision,
        recall,
        f1,
        pps: pps(truth, pred)?,
        oce: oce(truth, pred)?,
        samples: truth.len(),
    })
}

/// Mean and standard error (sample deviation over `sqrt(n)`; 0 for one run).
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedSummary {
    pub name: String,
    pub mean: f64,
    pub stderr: f64,
}

type Field = (&'static str, fn(&MetricReport) -> f64);

/// Aggregates reports of several seeds into macro metrics, PPS and OCE.
pub fn summarize(reports: &[MetricReport]) -> Vec<SeedSummary> {
    let fields: [Field; 5] = [
        ("macro_precision", |r| r.macro_precision),
        ("macro_recall", |r| r.macro_recall),
        ("macro_f1", |r| r.macro_f1),
        ("pps", |r| r.pps),
        ("oce", |r| r.oce),
    ];
    fields
        .iter()
        .map(|(name, get)| {
            let (mean, stderr) = mean_stderr(&reports.iter().map(get).collect::<Vec<_>>());
            SeedSummary {
                name: name.to_string(),
                mean,
                stderr,
            }
        })
        .collect()
}

pub fn render_table(summary: &[SeedSummary], seeds: usize) -> String {
    let mut s = format!(
        "{:<16} {:>10} {:>10}   ({seeds} seed{})\n",
        "metric",
        "mean",
        "stderr",
        if seeds == 1 { "" } else { "s" }
    );
    for m in summary {
        let _ = writeln!(s, "{:<16} {:>10.4} {:>10.4}", m.name, m.mean, m.stderr);
    }
    s
}

/// One `metric=<name> value=<mean> stderr=<stderr>` line per metric.
pub fn render_records(summary: &[SeedSummary]) -> String {
    summary
        .iter()
        .map(|m| format!("metric={} value={} stderr={}\n", m.name, m.mean, m.stderr))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardize_examples() {
        let pred = [Some(3), Some(3), None, None, Some(7), None];
        let c = standardize(&pred, 9).unwrap();
        assert_eq!(c, vec![0, 0, 2, 0, 0, 0, 1, 0, 0]);
        assert_eq!(standardize(&[None; 6], 9).unwrap(), vec![0; 9]);
        assert!(standardize(&[Some(10)], 9).is_err());
    }

    #[test]
    fn worked_confusion() {
        assert_eq!(
            count_confusion(&[3], &[2])[0],
            Confusion {
                tp: 2,
                fp: 0,
                fn_: 1
            }
        );
        assert_eq!(
            count_confusion(&[0], &[4])[0],
            Confusion {
                tp: 0,
                fp: 4,
                fn_: 0
            }
        );
        assert_eq!(
            count_confusion(&[2], &[2])[0],
            Confusion {
                tp: 2,
                fp: 0,
                fn_: 0
            }
        );
    }

    #[test]
    fn perfect_and_zero_rule() {
        let truth = vec![vec![1, 0, 2], vec![0, 0, 1]];
        let r = evaluate(&truth, &truth, false).unwrap();
        assert_eq!((r.pps, r.oce), (1.0, 0.0));
        assert_eq!(r.f1, vec![1.0, 0.0, 1.0]);
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
        let r = evaluate(&truth, &truth, true).unwrap();
        assert_eq!(r.macro_f1, 1.0);
        assert!(evaluate(&[], &[], false).is_err());
    }

    #[test]
    fn pps_and_oce() {
        let truth = vec![vec![3, 0], vec![1, 1]];
        let pred = vec![vec![2, 0], vec![0, 2]];
        assert_eq!(pps(&truth, &pred).unwrap(), 0.0);
        assert_eq!(oce(&truth, &pred).unwrap(), 0.5);
        assert_eq!(pps(&truth, &[vec![3, 0], vec![0, 2]]).unwrap(), 0.5);
    }

    #[test]
    fn single_seed_has_zero_stderr() {
        assert_eq!(mean_stderr(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
