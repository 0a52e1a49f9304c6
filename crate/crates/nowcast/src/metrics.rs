//! Per-threshold CSI and F1 from micro-accumulated confusion counts.
//!
//! An event at threshold i is a rate strictly greater than thresholds[i],
//! the same predicate the ML-Dice loss uses.

use crate::binning::{RainBins, NUM_THRESHOLDS};
use crate::tensor::Tensor;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: pred {pred:?} vs truth {truth:?}")]
    ShapeMismatch { pred: Vec<usize>, truth: Vec<usize> },
    #[error("file list length mismatch: {preds} predictions vs {truths} truths")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("pair {index}: {source}")]
    Pair {
        index: usize,
        #[source]
        source: Box<MetricsError>,
    },
}

/// Per-threshold TP/FP/FN accumulators.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: [u64; NUM_THRESHOLDS],
    pub fp: [u64; NUM_THRESHOLDS],
    pub fn_: [u64; NUM_THRESHOLDS],
    pub pixels: u64,
}

impl ConfusionCounts {
    pub fn merge(&self, other: &ConfusionCounts) -> ConfusionCounts {
        let mut out = *self;
        for i in 0..NUM_THRESHOLDS {
            out.tp[i] += other.tp[i];
            out.fp[i] += other.fp[i];
            out.fn_[i] += other.fn_[i];
        }
        out.pixels += other.pixels;
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub csi: [f64; NUM_THRESHOLDS],
    pub f1: [f64; NUM_THRESHOLDS],
    pub mcsi: f64,
    pub mf1: f64,
    pub pixels: u64,
    pub counts: ConfusionCounts,
}

/// Adds one prediction/truth pair into the counts.
pub fn accumulate(
    counts: &ConfusionCounts,
    pred: &Tensor,
    truth: &Tensor,
    bins: &RainBins,
) -> Result<ConfusionCounts, MetricsError> {
    if pred.shape() != truth.shape() {
        return Err(MetricsError::ShapeMismatch {
            pred: pred.shape().to_vec(),
            truth: truth.shape().to_vec(),
        });
    }
    let mut out = *counts;
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        for i in 0..NUM_THRESHOLDS {
            let pe = bins.exceeds(p, i);
            let te = bins.exceeds(t, i);
            match (pe, te) {
                (true, true) => out.tp[i] += 1,
                (true, false) => out.fp[i] += 1,
                (false, true) => out.fn_[i] += 1,
                (false, false) => {}
            }
        }
    }
    out.pixels += pred.len() as u64;
    Ok(out)
}

/// CSI = tp/(tp+fp+fn), F1 = 2tp/(2tp+fp+fn). A threshold with no events on
/// either side scores 1.0.
pub fn finalize(counts: &ConfusionCounts) -> ScoreReport {
    let mut csi = [0.0f64; NUM_THRESHOLDS];
    let mut f1 = [0.0f64; NUM_THRESHOLDS];
    for i in 0..NUM_THRESHOLDS {
        let (tp, fp, fnn) = (counts.tp[i], counts.fp[i], counts.fn_[i]);
        if tp + fp + fnn == 0 {
            csi[i] = 1.0;
            f1[i] = 1.0;
        } else {
            csi[i] = tp as f64 / (tp + fp + fnn) as f64;
            f1[i] = 2.0 * tp as f64 / (2 * tp + fp + fnn) as f64;
        }
    }
    let mcsi = csi.iter().sum::<f64>() / NUM_THRESHOLDS as f64;
    let mf1 = f1.iter().sum::<f64>() / NUM_THRESHOLDS as f64;
    ScoreReport { csi, f1, mcsi, mf1, pixels: counts.pixels, counts: *counts }
}

/// Pools all pairs into one confusion table, then finalizes.
pub fn evaluate(
    preds: &[Tensor],
    truths: &[Tensor],
    bins: &RainBins,
) -> Result<ScoreReport, MetricsError> {
    if preds.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    let mut counts = ConfusionCounts::default();
    for (i, (p, t)) in preds.iter().zip(truths).enumerate() {
        counts = accumulate(&counts, p, t, bins).map_err(|e| MetricsError::Pair {
            index: i,
            source: Box::new(e),
        })?;
    }
    Ok(finalize(&counts))
}

/// Tab-separated report: one row per threshold with counts and scores, then
/// mCSI and mF1 rows. Floats carry 5 decimals.
pub fn render_tsv(report: &ScoreReport, bins: &RainBins) -> String {
    let mut out = String::from("threshold\ttp\tfp\tfn\tcsi\tf1\n");
    for i in 0..NUM_THRESHOLDS {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.5}\t{:.5}",
            bins.thresholds[i],
            report.counts.tp[i],
            report.counts.fp[i],
            report.counts.fn_[i],
            report.csi[i],
            report.f1[i]
        )
        .unwrap();
    }
    writeln!(out, "mCSI\t\t\t\t{:.5}\t", report.mcsi).unwrap();
    writeln!(out, "mF1\t\t\t\t\t{:.5}", report.mf1).unwrap();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngState;

    fn field(vals: &[f32]) -> Tensor {
        Tensor::new(vec![1, 1, vals.len()], vals.to_vec())
    }

    #[test]
    fn perfect_prediction_no_errors() {
        let bins = RainBins::default();
        let t = field(&[0.0, 0.5, 3.0, 7.0, 12.0, 20.0]);
        let counts = accumulate(&ConfusionCounts::default(), &t, &t, &bins).unwrap();
        for i in 0..NUM_THRESHOLDS {
            assert_eq!(counts.fp[i], 0);
            assert_eq!(counts.fn_[i], 0);
        }
        let report = finalize(&counts);
        assert_eq!(report.mcsi, 1.0);
    }

    #[test]
    fn all_zero_prediction_counts_misses() {
        let bins = RainBins::default();
        let pred = field(&[0.0, 0.0, 0.0]);
        let truth = field(&[0.5, 3.0, 0.0]);
        let counts = accumulate(&ConfusionCounts::default(), &pred, &truth, &bins).unwrap();
        assert_eq!(counts.fn_[0], 2);
        assert_eq!(counts.tp[0], 0);
        assert_eq!(counts.fp[0], 0);
    }

    #[test]
    fn two_pixel_worked_case() {
        let bins = RainBins::default();
        let pred = field(&[3.0, 0.0]);
        let truth = field(&[0.5, 7.0]);
        let counts = accumulate(&ConfusionCounts::default(), &pred, &truth, &bins).unwrap();
        // threshold 0.2: both exceed for pred pixel 0 and truth pixel 0 -> tp;
        // truth pixel 1 missed
        assert_eq!((counts.tp[0], counts.fp[0], counts.fn_[0]), (1, 0, 1));
        assert_eq!((counts.tp[1], counts.fp[1], counts.fn_[1]), (0, 1, 1));
        assert_eq!((counts.tp[2], counts.fp[2], counts.fn_[2]), (0, 0, 1));
        assert_eq!((counts.tp[3], counts.fp[3], counts.fn_[3]), (0, 0, 0));
        assert_eq!((counts.tp[4], counts.fp[4], counts.fn_[4]), (0, 0, 0));
        let report = finalize(&counts);
        assert_eq!(report.csi, [0.5, 0.0, 0.0, 1.0, 1.0]);
        assert!((report.mcsi - 0.5).abs() < 1e-12);
    }

    #[test]
    fn finalize_spot_values() {
        let mut counts = ConfusionCounts::default();
        counts.tp[0] = 1;
        counts.fn_[0] = 1;
        let report = finalize(&counts);
        assert!((report.csi[0] - 0.5).abs() < 1e-12);
        assert!((report.f1[0] - 2.0 / 3.0).abs() < 1e-12);
        // vacuous thresholds score 1
        assert_eq!(report.csi[4], 1.0);
    }

    #[test]
    fn csi_never_exceeds_f1() {
        let mut rng = RngState::from_seed(2);
        for _ in 0..50 {
            let mut counts = ConfusionCounts::default();
            for i in 0..NUM_THRESHOLDS {
                counts.tp[i] = rng.uniform_usize(10) as u64;
                counts.fp[i] = rng.uniform_usize(10) as u64;
                counts.fn_[i] = rng.uniform_usize(10) as u64;
            }
            let report = finalize(&counts);
            for i in 0..NUM_THRESHOLDS {
                assert!(report.csi[i] <= report.f1[i] + 1e-12);
            }
        }
    }

    #[test]
    fn count_additivity() {
        let bins = RainBins::default();
        let mut rng = RngState::from_seed(6);
        let gen = |rng: &mut RngState| {
            field(&(0..12).map(|_| rng.uniform_range(0.0, 20.0)).collect::<Vec<_>>())
        };
        let (p1, t1) = (gen(&mut rng), gen(&mut rng));
        let (p2, t2) = (gen(&mut rng), gen(&mut rng));
        let a = accumulate(&ConfusionCounts::default(), &p1, &t1, &bins).unwrap();
        let b = accumulate(&ConfusionCounts::default(), &p2, &t2, &bins).unwrap();
        let merged = a.merge(&b);
        let sequential = accumulate(&a, &p2, &t2, &bins).unwrap();
        assert_eq!(merged, sequential);
    }

    #[test]
    fn evaluate_split_invariance() {
        let bins = RainBins::default();
        let mut rng = RngState::from_seed(8);
        let mk = |rng: &mut RngState| {
            field(&(0..16).map(|_| rng.uniform_range(0.0, 20.0)).collect::<Vec<_>>())
        };
        let (p1, t1, p2, t2) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let split = evaluate(&[p1.clone(), p2.clone()], &[t1.clone(), t2.clone()], &bins).unwrap();
        let mut cat_p = p1.data().to_vec();
        cat_p.extend_from_slice(p2.data());
        let mut cat_t = t1.data().to_vec();
        cat_t.extend_from_slice(t2.data());
        let joint = evaluate(
            &[Tensor::new(vec![1, 1, 32], cat_p)],
            &[Tensor::new(vec![1, 1, 32], cat_t)],
            &bins,
        )
        .unwrap();
        assert_eq!(split.counts, joint.counts);
    }

    #[test]
    fn evaluate_self_is_perfect() {
        let bins = RainBins::default();
        let t = field(&[0.0, 1.0, 6.0]);
        let report = evaluate(&[t.clone()], &[t], &bins).unwrap();
        assert_eq!(report.mcsi, 1.0);
    }

    #[test]
    fn evaluate_rejects_mismatches() {
        let bins = RainBins::default();
        let a = field(&[0.0]);
        let b = field(&[0.0, 1.0]);
        assert!(matches!(
            evaluate(&[a.clone()], &[a.clone(), b.clone()], &bins),
            Err(MetricsError::LengthMismatch { preds: 1, truths: 2 })
        ));
        let err = evaluate(&[a], &[b], &bins).unwrap_err();
        assert!(matches!(err, MetricsError::Pair { index: 0, .. }));
    }

    #[test]
    fn permutation_invariance() {
        let bins = RainBins::default();
        let pred = field(&[3.0, 0.0, 12.0, 0.4]);
        let truth = field(&[0.5, 7.0, 12.0, 0.0]);
        let fwd = accumulate(&ConfusionCounts::default(), &pred, &truth, &bins).unwrap();
        let rev_p = field(&[0.4, 12.0, 0.0, 3.0]);
        let rev_t = field(&[0.0, 12.0, 7.0, 0.5]);
        let rev = accumulate(&ConfusionCounts::default(), &rev_p, &rev_t, &bins).unwrap();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn tsv_layout() {
        let bins = RainBins::default();
        let t = field(&[0.0, 1.0]);
        let report = evaluate(&[t.clone()], &[t], &bins).unwrap();
        let tsv = render_tsv(&report, &bins);
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 8);
        assert_eq!(lines[0], "threshold\ttp\tfp\tfn\tcsi\tf1");
        assert!(lines[6].starts_with("mCSI\t"));
        assert!(lines[6].contains("1.00000"));
        assert!(lines[7].starts_with("mF1\t"));
    }
}
