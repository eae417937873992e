//! One-pass tracking metrics: average overlap, success rates and success AUC.

use crate::bbox::{box_iou, BBox};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Success thresholds 0, 0.05, …, 1.
pub fn auc_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Fraction of frames with IoU strictly above `tau`.
///
/// An exact overlap (IoU 1) succeeds at every threshold, including `tau = 1`.
pub fn success_rate(ious: &[f64], tau: f64) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    let hit = |v: f64| v > tau || v >= 1.0;
    ious.iter().filter(|&&v| hit(v)).count() as f64 / ious.len() as f64
}

pub fn average_overlap(ious: &[f64]) -> f64 {
    if ious.is_empty() {
        return 0.0;
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

pub fn success_auc(ious: &[f64]) -> f64 {
    let t = auc_thresholds();
    t.iter().map(|&tau| success_rate(ious, tau)).sum::<f64>() / t.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceTrace {
    pub name: String,
    pub ious: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub ao: f64,
    pub sr_50: f64,
    pub sr_75: f64,
    pub auc: f64,
}

impl Summary {
    pub fn from_ious(ious: &[f64]) -> Self {
        Self {
            ao: average_overlap(ious),
            sr_50: success_rate(ious, 0.5),
            sr_75: success_rate(ious, 0.75),
            auc: success_auc(ious),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ao: f64,
    pub sr_50: f64,
    pub sr_75: f64,
    pub auc: f64,
    pub frames: usize,
    pub sequences: Vec<SequenceTrace>,
}

impl MetricReport {
    /// Aggregates over every frame of every sequence.
    pub fn from_traces(sequences: Vec<SequenceTrace>) -> Self {
        let all: Vec<f64> = sequences.iter().flat_map(|s| s.ious.iter().copied()).collect();
        let s = Summary::from_ious(&all);
        Self {
            ao: s.ao,
            sr_50: s.sr_50,
            sr_75: s.sr_75,
            auc: s.auc,
            frames: all.len(),
            sequences,
        }
    }

    pub fn summary(&self) -> Summary {
        Summary {
            ao: self.ao,
            sr_50: self.sr_50,
            sr_75: self.sr_75,
            auc: self.auc,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per sequence plus a final `all` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,frames,ao,sr_50,sr_75,auc\n");
        for seq in &self.sequences {
            let s = Summary::from_ious(&seq.ious);
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                seq.name,
                seq.ious.len(),
                s.ao,
                s.sr_50,
                s.sr_75,
                s.auc
            );
        }
        let _ = writeln!(
            out,
            "all,{},{},{},{},{}",
            self.frames, self.ao, self.sr_50, self.sr_75, self.auc
        );
        out
    }
}

/// Scores per-frame tracker outputs against ground truth.
pub fn evaluate(outputs: &[Vec<BBox>], gts: &[Vec<BBox>], names: &[String]) -> Result<MetricReport> {
    if outputs.len() != gts.len() || names.len() != gts.len() {
        return Err(Error::contract(format!(
            "{} output sequences, {} ground-truth sequences, {} names",
            outputs.len(),
            gts.len(),
            names.len()
        )));
    }
    let mut traces = Vec::with_capacity(gts.len());
    for ((out, gt), name) in outputs.iter().zip(gts).zip(names) {
        if out.len() != gt.len() {
            return Err(Error::contract(format!(
                "sequence {name}: {} outputs for {} frames",
                out.len(),
                gt.len()
            )));
        }
        traces.push(SequenceTrace {
            name: name.clone(),
            ious: out.iter().zip(gt).map(|(a, b)| box_iou(a, b)).collect(),
        });
    }
    Ok(MetricReport::from_traces(traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(ious: &[f64]) -> Vec<SequenceTrace> {
        vec![SequenceTrace {
            name: "s".into(),
            ious: ious.to_vec(),
        }]
    }

    #[test]
    fn hand_computed_case() {
        let r = MetricReport::from_traces(trace(&[0.6, 0.4, 0.8]));
        assert!((r.ao - 0.6).abs() < 1e-15);
        assert_eq!(r.sr_50, 2.0 / 3.0);
        assert_eq!(r.sr_75, 1.0 / 3.0);
    }

    #[test]
    fn perfect_tracking_scores_one() {
        let b = BBox::new(0.5, 0.4, 0.3, 0.2).unwrap();
        let seqs = vec![vec![b; 5], vec![b; 3]];
        let names = vec!["a".to_string(), "b".to_string()];
        let r = evaluate(&seqs, &seqs, &names).unwrap();
        assert_eq!((r.ao, r.sr_50, r.sr_75, r.auc), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn disjoint_scores_zero_under_strict_threshold() {
        let r = MetricReport::from_traces(trace(&[0.0, 0.0]));
        assert_eq!((r.ao, r.sr_50, r.sr_75, r.auc), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn ao_pools_frames_not_sequences() {
        let r = MetricReport::from_traces(vec![
            SequenceTrace { name: "a".into(), ious: vec![1.0] },
            SequenceTrace { name: "b".into(), ious: vec![0.0, 0.0, 0.0] },
        ]);
        assert_eq!(r.ao, 0.25);
    }

    #[test]
    fn length_mismatch_rejected() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        let err = evaluate(&[vec![b]], &[vec![b, b]], &["x".to_string()]).unwrap_err();
        assert!(err.to_string().contains("sequence x"));
    }

    #[test]
    fn csv_has_aggregate_row() {
        let r = MetricReport::from_traces(trace(&[0.6, 0.4, 0.8]));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().last().unwrap().starts_with("all,3,"));
    }

    proptest! {
        #[test]
        fn rates_monotone_and_auc_bracketed(ious in prop::collection::vec(0.0f64..=1.0, 1..40)) {
            let t = auc_thresholds();
            let rates: Vec<f64> = t.iter().map(|&tau| success_rate(&ious, tau)).collect();
            prop_assert!(rates.windows(2).all(|w| w[1] <= w[0]));
            let auc = success_auc(&ious);
            let lo = rates.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = rates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(auc >= lo - 1e-15 && auc <= hi + 1e-15);
            let s = Summary::from_ious(&ious);
            prop_assert!(s.sr_75 <= s.sr_50);
            prop_assert!((0.0..=1.0).contains(&s.ao));
        }

        #[test]
        fn ao_permutation_invariant(mut ious in prop::collection::vec(0.0f64..=1.0, 1..40), seed in any::<u64>()) {
            let a = average_overlap(&ious);
            let n = ious.len();
            ious.rotate_left((seed as usize) % n);
            ious.reverse();
            prop_assert!((a - average_overlap(&ious)).abs() < 1e-12);
        }
    }
}
