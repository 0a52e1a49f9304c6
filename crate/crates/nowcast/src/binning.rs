//! Ordinal rainfall bins: quantization, one-hot targets, exceedance
//! probabilities and argmax decoding.
//!
//! Rates are partitioned by the five thresholds into six half-open bins
//! [0,0.2), [0.2,1), [1,5), [5,10), [10,15), [15,inf). A rate equal to a
//! threshold falls in the upper bin.

use crate::tensor::Tensor;
use thiserror::Error;

pub const NUM_BINS: usize = 6;
pub const NUM_THRESHOLDS: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum BinningError {
    #[error("rate must be finite and >= 0, got {0}")]
    InvalidRate(f32),
    #[error("threshold index {0} out of range 0..{}", NUM_THRESHOLDS)]
    ThresholdOutOfRange(usize),
    #[error("invalid bins: {0}")]
    InvalidBins(String),
    #[error("probability field shape {0:?} is not (T,6,H,W)")]
    BadFieldShape(Vec<usize>),
}

/// The five rainfall thresholds (mm/h) and one representative decode value
/// per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct RainBins {
    pub thresholds: [f32; NUM_THRESHOLDS],
    pub representatives: [f32; NUM_BINS],
}

impl Default for RainBins {
    fn default() -> Self {
        RainBins {
            thresholds: [0.2, 1.0, 5.0, 10.0, 15.0],
            // midpoints of the finite bins; the open top bin decodes to 20
            representatives: [0.1, 0.6, 3.0, 7.5, 12.5, 20.0],
        }
    }
}

impl RainBins {
    pub fn new(
        thresholds: [f32; NUM_THRESHOLDS],
        representatives: [f32; NUM_BINS],
    ) -> Result<Self, BinningError> {
        for w in thresholds.windows(2) {
            if w[0] >= w[1] {
                return Err(BinningError::InvalidBins(format!(
                    "thresholds must be strictly increasing, got {thresholds:?}"
                )));
            }
        }
        if thresholds[0] <= 0.0 {
            return Err(BinningError::InvalidBins(
                "thresholds must be positive".into(),
            ));
        }
        let bins = RainBins { thresholds, representatives };
        for (i, &r) in representatives.iter().enumerate() {
            if bins.quantize(r)? != i {
                return Err(BinningError::InvalidBins(format!(
                    "representative {r} does not lie in bin {i}"
                )));
            }
        }
        Ok(bins)
    }

    /// Bin index of a rate under the half-open convention.
    pub fn quantize(&self, rate: f32) -> Result<usize, BinningError> {
        if !rate.is_finite() || rate < 0.0 {
            return Err(BinningError::InvalidRate(rate));
        }
        let mut bin = 0;
        for &s in &self.thresholds {
            if rate >= s {
                bin += 1;
            }
        }
        Ok(bin)
    }

    /// Strict exceedance predicate shared by the ML-Dice loss and the CSI
    /// metrics: event iff rate > thresholds[i].
    pub fn exceeds(&self, rate: f32, threshold_index: usize) -> bool {
        rate > self.thresholds[threshold_index]
    }
}

/// Per-pixel, per-timestep bin probabilities with shape (T, 6, H, W).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityField {
    probs: Tensor,
}

impl ProbabilityField {
    /// Wraps a (T,6,H,W) tensor, checking range and per-pixel normalization.
    pub fn new(probs: Tensor) -> Result<Self, BinningError> {
        let shape = probs.shape();
        if shape.len() != 4 || shape[1] != NUM_BINS {
            return Err(BinningError::BadFieldShape(shape.to_vec()));
        }
        let (t, _, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let plane = h * w;
        let data = probs.data();
        for ti in 0..t {
            for p in 0..plane {
                let mut sum = 0.0f32;
                for c in 0..NUM_BINS {
                    let v = data[(ti * NUM_BINS + c) * plane + p];
                    if !(0.0..=1.0).contains(&v) {
                        return Err(BinningError::InvalidBins(format!(
                            "probability {v} outside [0,1]"
                        )));
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > 1e-5 {
                    return Err(BinningError::InvalidBins(format!(
                        "bin probabilities sum to {sum} at t={ti}, pixel={p}"
                    )));
                }
            }
        }
        Ok(ProbabilityField { probs })
    }

    /// Skips the normalization scan; for fields produced by `softmax_bins`.
    pub(crate) fn new_unchecked(probs: Tensor) -> Self {
        debug_assert_eq!(probs.shape().len(), 4);
        debug_assert_eq!(probs.shape()[1], NUM_BINS);
        ProbabilityField { probs }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }

    pub fn timesteps(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.probs.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[3]
    }
}

/// One-hot bin membership of a (T,H,W) rate field, shape (T,6,H,W).
pub fn onehot_targets(truth: &Tensor, bins: &RainBins) -> Result<Tensor, BinningError> {
    let shape = truth.shape();
    if shape.len() != 3 {
        return Err(BinningError::BadFieldShape(shape.to_vec()));
    }
    let (t, h, w) = (shape[0], shape[1], shape[2]);
    let plane = h * w;
    let mut out = vec![0.0f32; t * NUM_BINS * plane];
    for ti in 0..t {
        for p in 0..plane {
            let bin = bins.quantize(truth.data()[ti * plane + p])?;
            out[(ti * NUM_BINS + bin) * plane + p] = 1.0;
        }
    }
    Ok(Tensor::new(vec![t, NUM_BINS, h, w], out))
}

/// Probability that the rate strictly exceeds threshold i: the sum of bin
/// channels i+1..=5. Output shape (T,H,W).
pub fn exceedance(
    probs: &ProbabilityField,
    threshold_index: usize,
) -> Result<Tensor, BinningError> {
    if threshold_index >= NUM_THRESHOLDS {
        return Err(BinningError::ThresholdOutOfRange(threshold_index));
    }
    let (t, h, w) = (probs.timesteps(), probs.height(), probs.width());
    let plane = h * w;
    let data = probs.tensor().data();
    let mut out = vec![0.0f32; t * plane];
    for ti in 0..t {
        for c in (threshold_index + 1)..NUM_BINS {
            let base = (ti * NUM_BINS + c) * plane;
            for p in 0..plane {
                out[ti * plane + p] += data[base + p];
            }
        }
    }
    Ok(Tensor::new(vec![t, h, w], out))
}

/// Argmax decode to representative rates, ties toward the lower bin index.
pub fn decode(probs: &ProbabilityField, bins: &RainBins) -> Tensor {
    let (t, h, w) = (probs.timesteps(), probs.height(), probs.width());
    let plane = h * w;
    let data = probs.tensor().data();
    let mut out = vec![0.0f32; t * plane];
    for ti in 0..t {
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_val = data[(ti * NUM_BINS) * plane + p];
            for c in 1..NUM_BINS {
                let v = data[(ti * NUM_BINS + c) * plane + p];
                if v > best_val {
                    best = c;
                    best_val = v;
                }
            }
            out[ti * plane + p] = bins.representatives[best];
        }
    }
    Tensor::new(vec![t, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn onehot_field(t: usize, h: usize, w: usize, bin: usize) -> ProbabilityField {
        let mut data = vec![0.0f32; t * NUM_BINS * h * w];
        let plane = h * w;
        for ti in 0..t {
            for p in 0..plane {
                data[(ti * NUM_BINS + bin) * plane + p] = 1.0;
            }
        }
        ProbabilityField::new(Tensor::new(vec![t, NUM_BINS, h, w], data)).unwrap()
    }

    #[test]
    fn quantize_examples() {
        let bins = RainBins::default();
        assert_eq!(bins.quantize(0.5).unwrap(), 1);
        assert_eq!(bins.quantize(0.0).unwrap(), 0);
        // threshold-equal rates go to the upper bin
        assert_eq!(bins.quantize(15.0).unwrap(), 5);
        assert_eq!(bins.quantize(0.2).unwrap(), 1);
        assert_eq!(bins.quantize(100.0).unwrap(), 5);
    }

    #[test]
    fn quantize_rejects_bad_rates() {
        let bins = RainBins::default();
        assert!(bins.quantize(-0.1).is_err());
        assert!(bins.quantize(f32::NAN).is_err());
        assert!(bins.quantize(f32::INFINITY).is_err());
    }

    #[test]
    fn onehot_single_pixel() {
        let bins = RainBins::default();
        let truth = Tensor::new(vec![1, 1, 1], vec![3.0]);
        let oh = onehot_targets(&truth, &bins).unwrap();
        assert_eq!(oh.data(), &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn onehot_zero_field() {
        let bins = RainBins::default();
        let truth = Tensor::zeros(vec![2, 3, 3]);
        let oh = onehot_targets(&truth, &bins).unwrap();
        let plane = 9;
        for ti in 0..2 {
            for p in 0..plane {
                assert_eq!(oh.data()[(ti * NUM_BINS) * plane + p], 1.0);
                for c in 1..NUM_BINS {
                    assert_eq!(oh.data()[(ti * NUM_BINS + c) * plane + p], 0.0);
                }
            }
        }
    }

    #[test]
    fn onehot_mixed_field() {
        let bins = RainBins::default();
        let truth = Tensor::new(vec![1, 1, 2], vec![0.5, 7.0]);
        let oh = onehot_targets(&truth, &bins).unwrap();
        // pixel 0 -> bin 1, pixel 1 -> bin 3
        assert_eq!(oh.at(&[0, 1, 0, 0]), 1.0);
        assert_eq!(oh.at(&[0, 3, 0, 1]), 1.0);
        let total: f32 = oh.data().iter().sum();
        assert_eq!(total, 2.0);
    }

    #[test]
    fn exceedance_of_onehot() {
        let field = onehot_field(1, 1, 1, 4);
        let vals: Vec<f32> = (0..NUM_THRESHOLDS)
            .map(|i| exceedance(&field, i).unwrap().data()[0])
            .collect();
        assert_eq!(vals, vec![1.0, 1.0, 1.0, 1.0, 0.0]);

        let low = onehot_field(1, 1, 1, 0);
        for i in 0..NUM_THRESHOLDS {
            assert_eq!(exceedance(&low, i).unwrap().data()[0], 0.0);
        }
    }

    #[test]
    fn exceedance_of_uniform() {
        let field = ProbabilityField::new(Tensor::filled(vec![1, 6, 1, 1], 1.0 / 6.0)).unwrap();
        let e0 = exceedance(&field, 0).unwrap().data()[0];
        assert!((e0 - 5.0 / 6.0).abs() < 1e-6);
    }

    #[test]
    fn exceedance_monotone_in_threshold() {
        let probs = vec![0.1, 0.2, 0.25, 0.15, 0.2, 0.1];
        let field =
            ProbabilityField::new(Tensor::new(vec![1, 6, 1, 1], probs)).unwrap();
        let mut prev = f32::INFINITY;
        for i in 0..NUM_THRESHOLDS {
            let e = exceedance(&field, i).unwrap().data()[0];
            assert!(e <= prev + 1e-6);
            prev = e;
        }
    }

    #[test]
    fn exceedance_index_out_of_range() {
        let field = onehot_field(1, 1, 1, 0);
        assert_eq!(
            exceedance(&field, 5).unwrap_err(),
            BinningError::ThresholdOutOfRange(5)
        );
    }

    #[test]
    fn decode_examples() {
        let bins = RainBins::default();
        assert_eq!(decode(&onehot_field(1, 1, 1, 2), &bins).data()[0], 3.0);
        assert_eq!(decode(&onehot_field(1, 1, 1, 5), &bins).data()[0], 20.0);

        let probs = vec![0.4, 0.3, 0.1, 0.1, 0.05, 0.05];
        let field =
            ProbabilityField::new(Tensor::new(vec![1, 6, 1, 1], probs)).unwrap();
        assert_eq!(decode(&field, &bins).data()[0], 0.1);
    }

    #[test]
    fn decode_ties_go_low() {
        let field = ProbabilityField::new(Tensor::filled(vec![1, 6, 1, 1], 1.0 / 6.0)).unwrap();
        let bins = RainBins::default();
        assert_eq!(decode(&field, &bins).data()[0], bins.representatives[0]);
    }

    #[test]
    fn representative_roundtrip() {
        let bins = RainBins::default();
        for (i, &r) in bins.representatives.iter().enumerate() {
            assert_eq!(bins.quantize(r).unwrap(), i);
        }
    }

    #[test]
    fn rejects_out_of_bin_representative() {
        assert!(RainBins::new(
            [0.2, 1.0, 5.0, 10.0, 15.0],
            [0.1, 0.6, 3.0, 7.5, 12.5, 14.0],
        )
        .is_err());
    }

    #[test]
    fn field_invariant_checked() {
        let bad = Tensor::filled(vec![1, 6, 1, 1], 0.5);
        assert!(ProbabilityField::new(bad).is_err());
    }
}
