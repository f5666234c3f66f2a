//! Training losses.
//!
//! The total objective is `ce + lambda1 * rate - lambda2 * entropy`:
//! classification cross-entropy, an absolute-deviation penalty steering the
//! mean execution ratio toward a target, and a decision-entropy bonus
//! (subtracted, so higher entropy lowers the total) that keeps routers from
//! saturating.
//!
//! Reported values come from the hard execution path: `r_avg` is the mean of
//! the hard execute decisions, and the entropy term averages the recorded
//! temperature-softened probabilities. Gradient flow for all three terms is
//! the backward module's job.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Trace;
use crate::numeric::log_softmax_at;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub r_target: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 0.01,
            r_target: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.r_target) {
            return Err(Error::invalid(
                "r_target",
                format!("must lie in [0, 1], got {}", self.r_target),
            ));
        }
        Ok(())
    }
}

/// One training step's loss values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub rate: f64,
    pub entropy: f64,
    pub total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub r_avg: f64,
    pub r_target: f64,
}

impl LossBreakdown {
    pub fn assemble(ce: f64, rate: f64, entropy: f64, r_avg: f64, weights: &LossWeights) -> Self {
        LossBreakdown {
            ce,
            rate,
            entropy,
            total: ce + weights.lambda1 * rate - weights.lambda2 * entropy,
            lambda1: weights.lambda1,
            lambda2: weights.lambda2,
            r_avg,
            r_target: weights.r_target,
        }
    }
}

/// Mean negative log-likelihood of the labels under softmax(logits).
pub fn cross_entropy(class_logits: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if class_logits.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "cross_entropy".into(),
            expected: format!("{} labels", class_logits.len()),
            actual: format!("{} labels", labels.len()),
        });
    }
    if class_logits.is_empty() {
        return Err(Error::invalid("class_logits", "cross-entropy over zero tokens"));
    }
    let mut sum = 0.0;
    for (t, (logits, &label)) in class_logits.iter().zip(labels).enumerate() {
        if label >= logits.len() {
            return Err(Error::invalid(
                "labels",
                format!("token {t}: label {label} out of range for {} classes", logits.len()),
            ));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite_at("class logits", t));
        }
        sum -= log_softmax_at(logits, label);
    }
    Ok(sum / class_logits.len() as f64)
}

/// `|r_avg - r_target|` where `r_avg` is the hard execution ratio.
/// Returns `(loss, r_avg)`.
pub fn rate_loss(trace: &Trace, r_target: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&r_target) {
        return Err(Error::invalid(
            "r_target",
            format!("must lie in [0, 1], got {r_target}"),
        ));
    }
    if trace.execute.is_empty() {
        return Err(Error::invalid("trace", "rate loss over an empty trace"));
    }
    let r_avg = trace.execution_ratio();
    Ok(((r_avg - r_target).abs(), r_avg))
}

/// Mean per-decision entropy of the soft decisions, in nats.
/// Bounded by `[0, ln 2]`; requires a training trace.
pub fn entropy_loss(trace: &Trace) -> Result<f64> {
    if trace.soft.is_empty() {
        return Err(Error::invalid(
            "trace",
            "entropy loss requires a training trace with soft decisions",
        ));
    }
    let sum: f64 = trace
        .soft
        .iter()
        .map(|b| -(xlnx(b[0]) + xlnx(b[1])))
        .sum();
    Ok(sum / trace.soft.len() as f64)
}

/// `x ln x` continued by its limit 0 at x = 0.
pub fn xlnx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Assemble the full breakdown from a training forward pass.
pub fn total_loss(
    class_logits: &[Vec<f64>],
    labels: &[usize],
    trace: &Trace,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let ce = cross_entropy(class_logits, labels)?;
    let (rate, r_avg) = rate_loss(trace, weights.r_target)?;
    let entropy = entropy_loss(trace)?;
    Ok(LossBreakdown::assemble(ce, rate, entropy, r_avg, weights))
}
