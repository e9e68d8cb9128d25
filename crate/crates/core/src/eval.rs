//! AUC, F1 and run reports.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, dim_err, Error, Result};

/// Decision threshold for F1 on sigmoid outputs.
pub const F1_THRESHOLD: f64 = 0.5;

/// Rank-based AUC; tied scores share their average rank.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(dim_err!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(contract_err!("non-finite score"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// F1 of `score >= threshold` predictions; 0 when precision + recall is 0.
pub fn f1(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(dim_err!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(contract_err!("F1 of an empty input"));
    }
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (s, l) in scores.iter().zip(labels) {
        match (*s >= threshold, *l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fnn == 0 { 0.0 } else { tp as f64 / (tp + fnn) as f64 };
    if precision + recall == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Pooled metrics of one phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub phase: String,
    pub auc: Option<f64>,
    pub f1: f64,
    pub n: usize,
    pub positives: usize,
    pub fingerprint: String,
    pub seed: u64,
}

impl MetricReport {
    /// AUC is `None` when the pooled labels hold a single class.
    pub fn from_predictions(phase: &str, scores: &[f64], labels: &[u8], fingerprint: &str, seed: u64) -> Result<Self> {
        let auc = match auc(scores, labels) {
            Ok(a) => Some(a),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            phase: phase.to_string(),
            auc,
            f1: f1(scores, labels, F1_THRESHOLD)?,
            n: scores.len(),
            positives: labels.iter().filter(|&&l| l == 1).count(),
            fingerprint: fingerprint.to_string(),
            seed,
        })
    }
}

/// CSV with columns `phase,auc,f1,n,positives` after a `# …` provenance line.
pub fn write_report_csv(out: impl Write, reports: &[MetricReport], comment: &str) -> Result<()> {
    let mut out = out;
    writeln!(out, "# {comment}").map_err(|e| Error::io("<report>", e))?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["phase", "auc", "f1", "n", "positives"])?;
    for r in reports {
        w.write_record([
            r.phase.clone(),
            r.auc.map(|a| format!("{a:.6}")).unwrap_or_default(),
            format!("{:.6}", r.f1),
            r.n.to_string(),
            r.positives.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<report>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(scores: &[f64], labels: &[u8]) -> f64 {
        let mut s = 0.0;
        let mut n = 0.0;
        for (i, li) in labels.iter().enumerate() {
            for (j, lj) in labels.iter().enumerate() {
                if *li == 1 && *lj == 0 {
                    n += 1.0;
                    s += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        s / n
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &[1, 0, 1, 0]).unwrap(), 0.5);
        assert_eq!(auc(&[0.8, 0.6, 0.4, 0.2], &[1, 0, 1, 0]).unwrap(), 0.75);
        assert_eq!(brute(&[0.8, 0.6, 0.4, 0.2], &[1, 0, 1, 0]), 0.75);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1(&[0.9, 0.1], &[1, 0], 0.5).unwrap(), 1.0);
        assert_eq!(f1(&[0.1, 0.2], &[1, 0], 0.5).unwrap(), 0.0);
        assert!((f1(&[0.9, 0.4, 0.6], &[1, 0, 0], 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(f1(&[], &[], 0.5).is_err());
    }

    #[test]
    fn csv_columns() {
        let r = MetricReport::from_predictions("cold", &[0.9, 0.1], &[1, 0], "abc", 3).unwrap();
        let mut buf = Vec::new();
        write_report_csv(&mut buf, &[r], "fingerprint=abc seed=3").unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "phase,auc,f1,n,positives");
        assert_eq!(text.lines().nth(2).unwrap(), "cold,1.000000,1.000000,2,1");
    }

    fn cases() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..200).prop_flat_map(|n| {
            (
                prop::collection::vec((0u32..20).prop_map(|v| v as f64 / 20.0), n),
                prop::collection::vec(0u8..2, n),
            )
        })
    }

    proptest! {
        #[test]
        fn rank_auc_matches_pairs((s, l) in cases()) {
            prop_assume!(l.contains(&0) && l.contains(&1));
            prop_assert!((auc(&s, &l).unwrap() - brute(&s, &l)).abs() <= 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_maps((s, l) in cases()) {
            prop_assume!(l.contains(&0) && l.contains(&1));
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(auc(&s, &l).unwrap(), auc(&t, &l).unwrap());
        }

        #[test]
        fn f1_invariant_under_reordering((s, l) in cases(), rot in 0usize..200) {
            let k = rot % s.len();
            let mut s2 = s.clone();
            let mut l2 = l.clone();
            s2.rotate_left(k);
            l2.rotate_left(k);
            prop_assert_eq!(f1(&s, &l, 0.5).unwrap(), f1(&s2, &l2, 0.5).unwrap());
        }
    }
}
