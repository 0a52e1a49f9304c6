//! Softmax bin head, multi-class Dice loss, Multi-Level Dice loss over
//! threshold exceedances, the logcosh transform, and analytic gradients with
//! a finite-difference checker.
//!
//! All loss arithmetic runs in f64 regardless of the f32 tensor inputs, so
//! gradient checks are meaningful and reductions are stable.

use crate::binning::{ProbabilityField, RainBins, NUM_BINS, NUM_THRESHOLDS};
use crate::tensor::{RngState, Tensor};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite logits")]
    NonFiniteLogits,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Binning(#[from] crate::binning::BinningError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Dice,
    MlDice,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub epsilon: f64,
    /// 2 for the conventional Dice coefficient, 1 for the literal printed
    /// form. With factor 1 even a perfect prediction scores coefficient 0.5.
    pub numerator_factor: u8,
    pub use_logcosh: bool,
    pub loss_kind: LossKind,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon: 1e-6,
            numerator_factor: 2,
            use_logcosh: true,
            loss_kind: LossKind::MlDice,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.epsilon > 0.0) {
            return Err(LossError::InvalidConfig("epsilon must be > 0".into()));
        }
        if self.numerator_factor != 1 && self.numerator_factor != 2 {
            return Err(LossError::InvalidConfig(
                "numerator_factor must be 1 or 2".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grad_logits: Tensor,
}

/// ln(cosh(x)) computed without overflow: |x| + ln((1 + e^{-2|x|}) / 2).
pub fn logcosh_wrap(raw: f64) -> f64 {
    let a = raw.abs();
    a + ((1.0 + (-2.0 * a).exp()) / 2.0).ln()
}

fn check_logits_shape(shape: &[usize]) -> Result<(usize, usize), LossError> {
    if shape.len() != 4 || shape[1] != NUM_BINS {
        return Err(LossError::ShapeMismatch(format!(
            "expected logits shape (T,6,H,W), got {shape:?}"
        )));
    }
    Ok((shape[0], shape[2] * shape[3]))
}

/// Numerically stable softmax over the 6 bin channels at every pixel.
pub fn softmax_bins(logits: &Tensor) -> Result<ProbabilityField, LossError> {
    if logits.data().iter().any(|x| !x.is_finite()) {
        return Err(LossError::NonFiniteLogits);
    }
    let (t, plane) = check_logits_shape(logits.shape())?;
    let l64: Vec<f64> = logits.data().iter().map(|&x| f64::from(x)).collect();
    let probs = softmax_f64(&l64, t, plane);
    let out: Vec<f32> = probs.into_iter().map(|x| x as f32).collect();
    Ok(ProbabilityField::new_unchecked(Tensor::new(
        logits.shape().to_vec(),
        out,
    )))
}

fn softmax_f64(logits: &[f64], t: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; logits.len()];
    for ti in 0..t {
        for p in 0..plane {
            let idx = |c: usize| (ti * NUM_BINS + c) * plane + p;
            let mut mx = f64::NEG_INFINITY;
            for c in 0..NUM_BINS {
                mx = mx.max(logits[idx(c)]);
            }
            let mut sum = 0.0;
            for c in 0..NUM_BINS {
                let e = (logits[idx(c)] - mx).exp();
                out[idx(c)] = e;
                sum += e;
            }
            for c in 0..NUM_BINS {
                out[idx(c)] /= sum;
            }
        }
    }
    out
}

/// Vanilla multi-class Dice over the 6 bins; sums pool every pixel of every
/// timestep. Empty-empty classes score coefficient 1.
pub fn dice_loss(
    probs: &ProbabilityField,
    onehot: &Tensor,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    cfg.validate()?;
    if probs.tensor().shape() != onehot.shape() {
        return Err(LossError::ShapeMismatch(format!(
            "probs {:?} vs onehot {:?}",
            probs.tensor().shape(),
            onehot.shape()
        )));
    }
    let (t, plane) = check_logits_shape(onehot.shape())?;
    let bins_of = onehot_to_bins(onehot, t, plane)?;
    let p64: Vec<f64> = probs.tensor().data().iter().map(|&x| f64::from(x)).collect();
    let (value, _) = dice_value_grad(&p64, &bins_of, t, plane, cfg);
    Ok(value)
}

/// Multi-Level Dice: one Dice coefficient per threshold on exceedance
/// probabilities, averaged over the 5 thresholds.
pub fn ml_dice_loss(
    probs: &ProbabilityField,
    truth_rates: &Tensor,
    bins: &RainBins,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    cfg.validate()?;
    let (t, plane) = check_logits_shape(probs.tensor().shape())?;
    let expected = [probs.timesteps(), probs.height(), probs.width()];
    if truth_rates.shape() != expected {
        return Err(LossError::ShapeMismatch(format!(
            "probs {:?} vs rates {:?}",
            probs.tensor().shape(),
            truth_rates.shape()
        )));
    }
    let exceeds = truth_exceedance(truth_rates, bins)?;
    let p64: Vec<f64> = probs.tensor().data().iter().map(|&x| f64::from(x)).collect();
    let (value, _) = ml_dice_value_grad(&p64, &exceeds, t, plane, cfg);
    Ok(value)
}

fn onehot_to_bins(onehot: &Tensor, t: usize, plane: usize) -> Result<Vec<u8>, LossError> {
    let mut bins_of = vec![0u8; t * plane];
    for ti in 0..t {
        for p in 0..plane {
            let mut found = None;
            for c in 0..NUM_BINS {
                if onehot.data()[(ti * NUM_BINS + c) * plane + p] != 0.0 {
                    if found.is_some() {
                        return Err(LossError::ShapeMismatch(
                            "onehot has multiple set channels".into(),
                        ));
                    }
                    found = Some(c as u8);
                }
            }
            bins_of[ti * plane + p] = found.ok_or_else(|| {
                LossError::ShapeMismatch("onehot has no set channel".into())
            })?;
        }
    }
    Ok(bins_of)
}

/// Per pixel bitmask of strict threshold exceedances of the truth rates;
/// the identical predicate `RainBins::exceeds` used by the metrics.
fn truth_exceedance(rates: &Tensor, bins: &RainBins) -> Result<Vec<[bool; NUM_THRESHOLDS]>, LossError> {
    let mut out = Vec::with_capacity(rates.len());
    for &r in rates.data() {
        if !r.is_finite() || r < 0.0 {
            return Err(LossError::Binning(
                crate::binning::BinningError::InvalidRate(r),
            ));
        }
        let mut e = [false; NUM_THRESHOLDS];
        for (i, slot) in e.iter_mut().enumerate() {
            *slot = bins.exceeds(r, i);
        }
        out.push(e);
    }
    Ok(out)
}

/// Value and d(value)/d(probs), both f64, for the vanilla Dice loss.
fn dice_value_grad(
    probs: &[f64],
    bins_of: &[u8],
    t: usize,
    plane: usize,
    cfg: &LossConfig,
) -> (f64, Vec<f64>) {
    let f = f64::from(cfg.numerator_factor);
    let eps = cfg.epsilon;
    let mut inter = [0.0f64; NUM_BINS];
    let mut card = [0.0f64; NUM_BINS];
    let mut pred = [0.0f64; NUM_BINS];
    for ti in 0..t {
        for p in 0..plane {
            let bin = bins_of[ti * plane + p] as usize;
            card[bin] += 1.0;
            for c in 0..NUM_BINS {
                let v = probs[(ti * NUM_BINS + c) * plane + p];
                pred[c] += v;
                if c == bin {
                    inter[c] += v;
                }
            }
        }
    }
    let mut value = 1.0;
    let mut denom = [0.0f64; NUM_BINS];
    let mut num = [0.0f64; NUM_BINS];
    for c in 0..NUM_BINS {
        denom[c] = card[c] + pred[c] + eps;
        num[c] = f * inter[c] + eps;
        value -= num[c] / denom[c] / NUM_BINS as f64;
    }
    let mut grad = vec![0.0f64; probs.len()];
    for ti in 0..t {
        for p in 0..plane {
            let bin = bins_of[ti * plane + p] as usize;
            for c in 0..NUM_BINS {
                let indicator = if c == bin { 1.0 } else { 0.0 };
                let dcoef = f * indicator / denom[c] - num[c] / (denom[c] * denom[c]);
                grad[(ti * NUM_BINS + c) * plane + p] = -dcoef / NUM_BINS as f64;
            }
        }
    }
    (value, grad)
}

/// Value and d(value)/d(probs) for ML-Dice. The gradient routes through the
/// cumulative-sum structure of the exceedance: dq_i/dp_m = 1 for m >= i+1.
fn ml_dice_value_grad(
    probs: &[f64],
    exceeds: &[[bool; NUM_THRESHOLDS]],
    t: usize,
    plane: usize,
    cfg: &LossConfig,
) -> (f64, Vec<f64>) {
    let f = f64::from(cfg.numerator_factor);
    let eps = cfg.epsilon;
    let mut inter = [0.0f64; NUM_THRESHOLDS];
    let mut card = [0.0f64; NUM_THRESHOLDS];
    let mut pred = [0.0f64; NUM_THRESHOLDS];
    for ti in 0..t {
        for p in 0..plane {
            let e = &exceeds[ti * plane + p];
            // q_i = sum of bins i+1..=5, built as a suffix sum
            let mut q = [0.0f64; NUM_THRESHOLDS];
            let mut tail = 0.0;
            for i in (0..NUM_THRESHOLDS).rev() {
                tail += probs[(ti * NUM_BINS + i + 1) * plane + p];
                q[i] = tail;
            }
            for i in 0..NUM_THRESHOLDS {
                pred[i] += q[i];
                if e[i] {
                    card[i] += 1.0;
                    inter[i] += q[i];
                }
            }
        }
    }
    let mut value = 1.0;
    let mut denom = [0.0f64; NUM_THRESHOLDS];
    let mut num = [0.0f64; NUM_THRESHOLDS];
    for i in 0..NUM_THRESHOLDS {
        denom[i] = card[i] + pred[i] + eps;
        num[i] = f * inter[i] + eps;
        value -= num[i] / denom[i] / NUM_THRESHOLDS as f64;
    }
    let mut grad = vec![0.0f64; probs.len()];
    for ti in 0..t {
        for p in 0..plane {
            let e = &exceeds[ti * plane + p];
            // dL/dq_i, then scatter: p_m receives every i <= m-1
            let mut dq = [0.0f64; NUM_THRESHOLDS];
            for i in 0..NUM_THRESHOLDS {
                let indicator = if e[i] { 1.0 } else { 0.0 };
                let dcoef = f * indicator / denom[i] - num[i] / (denom[i] * denom[i]);
                dq[i] = -dcoef / NUM_THRESHOLDS as f64;
            }
            let mut acc = 0.0;
            for m in 1..NUM_BINS {
                acc += dq[m - 1];
                grad[(ti * NUM_BINS + m) * plane + p] = acc;
            }
        }
    }
    (value, grad)
}

/// f64 core used by both the public f32 API and the gradient checker:
/// logits -> softmax -> dice or ml-dice -> optional logcosh, with the exact
/// analytic gradient with respect to the logits.
fn value_and_grad_f64(
    logits: &[f64],
    t: usize,
    plane: usize,
    truth_bins: &[u8],
    truth_exceeds: &[[bool; NUM_THRESHOLDS]],
    cfg: &LossConfig,
) -> (f64, Vec<f64>) {
    let probs = softmax_f64(logits, t, plane);
    let (raw, grad_probs) = match cfg.loss_kind {
        LossKind::Dice => dice_value_grad(&probs, truth_bins, t, plane, cfg),
        LossKind::MlDice => ml_dice_value_grad(&probs, truth_exceeds, t, plane, cfg),
    };
    let (value, chain) = if cfg.use_logcosh {
        (logcosh_wrap(raw), raw.tanh())
    } else {
        (raw, 1.0)
    };
    // softmax backward: g_c = p_c * (gp_c - sum_k p_k gp_k)
    let mut grad = vec![0.0f64; logits.len()];
    for ti in 0..t {
        for p in 0..plane {
            let idx = |c: usize| (ti * NUM_BINS + c) * plane + p;
            let mut dot = 0.0;
            for c in 0..NUM_BINS {
                dot += probs[idx(c)] * grad_probs[idx(c)];
            }
            for c in 0..NUM_BINS {
                grad[idx(c)] = chain * probs[idx(c)] * (grad_probs[idx(c)] - dot);
            }
        }
    }
    (value, grad)
}

/// Loss value and analytic gradient with respect to the logits.
pub fn loss_with_grad(
    logits: &Tensor,
    truth_rates: &Tensor,
    bins: &RainBins,
    cfg: &LossConfig,
) -> Result<LossResult, LossError> {
    cfg.validate()?;
    if logits.data().iter().any(|x| !x.is_finite()) {
        return Err(LossError::NonFiniteLogits);
    }
    let (t, plane) = check_logits_shape(logits.shape())?;
    let expected = [t, logits.shape()[2], logits.shape()[3]];
    if truth_rates.shape() != expected {
        return Err(LossError::ShapeMismatch(format!(
            "logits {:?} vs rates {:?}",
            logits.shape(),
            truth_rates.shape()
        )));
    }
    let mut truth_bins = Vec::with_capacity(t * plane);
    for &r in truth_rates.data() {
        truth_bins.push(bins.quantize(r)? as u8);
    }
    let truth_exceeds = truth_exceedance(truth_rates, bins)?;
    let l64: Vec<f64> = logits.data().iter().map(|&x| f64::from(x)).collect();
    let (value, grad) = value_and_grad_f64(&l64, t, plane, &truth_bins, &truth_exceeds, cfg);
    Ok(LossResult {
        value,
        grad_logits: Tensor::new(
            logits.shape().to_vec(),
            grad.into_iter().map(|x| x as f32).collect(),
        ),
    })
}

/// Shapes and seed of one gradient-check trial.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckTrial {
    pub timesteps: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for GradCheckTrial {
    fn default() -> Self {
        GradCheckTrial { timesteps: 2, height: 4, width: 4, seed: 0 }
    }
}

/// Central-difference check of the analytic gradient in f64. Returns the
/// max over coordinates of |analytic - numeric| / max(1, |numeric|).
pub fn grad_check(cfg: &LossConfig, trial: &GradCheckTrial) -> f64 {
    grad_check_biased(cfg, trial, 0.0)
}

/// Same check with `bias` added to every analytic derivative, demonstrating
/// that a wrong gradient is flagged rather than silently accepted.
pub fn grad_check_biased(cfg: &LossConfig, trial: &GradCheckTrial, bias: f64) -> f64 {
    let bins = RainBins::default();
    let t = trial.timesteps;
    let plane = trial.height * trial.width;
    let n = t * NUM_BINS * plane;
    let mut rng = RngState::from_seed(trial.seed);
    let logits: Vec<f64> = (0..n).map(|_| f64::from(rng.uniform_range(-2.0, 2.0))).collect();
    // rates spread over all bins so every class/threshold term is exercised
    let rates: Vec<f32> = (0..t * plane)
        .map(|_| bins.representatives[rng.uniform_usize(NUM_BINS)])
        .collect();
    let truth_bins: Vec<u8> = rates
        .iter()
        .map(|&r| bins.quantize(r).unwrap() as u8)
        .collect();
    let truth_exceeds = truth_exceedance(&Tensor::new(vec![t, trial.height, trial.width], rates), &bins)
        .unwrap();

    let (_, analytic) = value_and_grad_f64(&logits, t, plane, &truth_bins, &truth_exceeds, cfg);

    let step = 1e-3;
    let mut max_rel = 0.0f64;
    let mut probe = logits.clone();
    for i in 0..n {
        probe[i] = logits[i] + step;
        let (vp, _) = value_and_grad_f64(&probe, t, plane, &truth_bins, &truth_exceeds, cfg);
        probe[i] = logits[i] - step;
        let (vm, _) = value_and_grad_f64(&probe, t, plane, &truth_bins, &truth_exceeds, cfg);
        probe[i] = logits[i];
        let numeric = (vp - vm) / (2.0 * step);
        let rel = (analytic[i] + bias - numeric).abs() / numeric.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    max_rel
}
