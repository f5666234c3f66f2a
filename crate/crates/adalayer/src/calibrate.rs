//! Post-training threshold calibration: a deterministic two-phase grid
//! search over the shared execution threshold, scored by accuracy on a
//! held-out calibration set. Ties prefer the larger threshold, which
//! executes fewer layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::model::Model;

/// Upper end of the searched threshold range; candidates live in (0, this].
pub const THETA_MAX: f64 = 0.5;
pub const CALIBRATION_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub coarse_step: f64,
    pub fine_step: f64,
    /// How many calibration samples to score; callers truncate their split
    /// to this size.
    pub calib_size: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            coarse_step: 0.05,
            fine_step: 0.01,
            calib_size: 300,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.coarse_step.is_finite() || !self.fine_step.is_finite() {
            return Err(Error::invalid("search steps", "must be finite"));
        }
        if self.fine_step <= 0.0 {
            return Err(Error::invalid("fine_step", "must be positive"));
        }
        if self.fine_step > self.coarse_step {
            return Err(Error::invalid(
                "fine_step",
                "must not exceed coarse_step",
            ));
        }
        if self.coarse_step > THETA_MAX {
            return Err(Error::invalid(
                "coarse_step",
                format!("must not exceed {THETA_MAX}"),
            ));
        }
        if self.calib_size == 0 {
            return Err(Error::invalid("calib_size", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub theta: f64,
    pub phase: Phase,
    pub accuracy: f64,
    pub exec_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub format_version: u32,
    pub candidates: Vec<Candidate>,
    pub selected_theta: f64,
}

impl CalibrationReport {
    /// The evaluation behind the selected threshold.
    pub fn selected(&self) -> &Candidate {
        self.candidates
            .iter()
            .filter(|c| c.theta == self.selected_theta)
            .max_by(|a, b| a.accuracy.total_cmp(&b.accuracy))
            .expect("selected threshold appears among candidates")
    }
}

/// Thresholds `{step, 2*step, ...}` up to [`THETA_MAX`].
pub fn coarse_grid(coarse_step: f64) -> Vec<f64> {
    let count = (THETA_MAX / coarse_step + 1e-9).floor() as usize;
    (1..=count)
        .map(|i| (i as f64 * coarse_step).min(THETA_MAX))
        .collect()
}

/// Multiples of `fine_step` within one coarse step of `center`, clipped to
/// (0, [`THETA_MAX`]].
pub fn fine_grid(center: f64, coarse_step: f64, fine_step: f64) -> Vec<f64> {
    let lo = ((center - coarse_step) / fine_step - 1e-9).ceil().max(1.0) as usize;
    let hi = ((center + coarse_step) / fine_step + 1e-9).floor() as usize;
    (lo..=hi)
        .map(|j| j as f64 * fine_step)
        .filter(|&theta| theta <= THETA_MAX + 1e-12)
        .map(|theta| theta.min(THETA_MAX))
        .collect()
}

fn score(
    model: &Model,
    inputs: &[&[f32]],
    labels: &[usize],
    theta: f64,
    phase: Phase,
) -> Result<Candidate> {
    let fwd = model.forward_infer(inputs, theta)?;
    Ok(Candidate {
        theta,
        phase,
        accuracy: accuracy(&fwd.predictions(), labels)?,
        exec_ratio: fwd.trace.execution_ratio(),
    })
}

/// Returns true when `challenger` should replace `best`: higher accuracy,
/// or equal accuracy at a larger threshold.
fn improves(challenger: &Candidate, best: &Candidate) -> bool {
    challenger.accuracy > best.accuracy
        || (challenger.accuracy == best.accuracy && challenger.theta > best.theta)
}

/// Two-phase search: score the coarse grid, then a fine grid around the
/// coarse winner; select the best of everything evaluated.
pub fn calibrate_threshold(
    model: &Model,
    inputs: &[&[f32]],
    labels: &[usize],
    cfg: &SearchConfig,
) -> Result<CalibrationReport> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::invalid("calibration set", "must not be empty"));
    }
    if inputs.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "calibration set".into(),
            expected: format!("{} labels", inputs.len()),
            actual: format!("{} labels", labels.len()),
        });
    }

    let mut candidates = Vec::new();
    for theta in coarse_grid(cfg.coarse_step) {
        candidates.push(score(model, inputs, labels, theta, Phase::Coarse)?);
    }
    let coarse_winner = candidates
        .iter()
        .fold(None::<Candidate>, |best, c| match best {
            Some(b) if !improves(c, &b) => Some(b),
            _ => Some(c.clone()),
        })
        .expect("coarse grid is non-empty");

    for theta in fine_grid(coarse_winner.theta, cfg.coarse_step, cfg.fine_step) {
        candidates.push(score(model, inputs, labels, theta, Phase::Fine)?);
    }

    let selected = candidates
        .iter()
        .fold(None::<&Candidate>, |best, c| match best {
            Some(b) if !improves(c, b) => Some(b),
            _ => Some(c),
        })
        .expect("candidate list is non-empty");

    Ok(CalibrationReport {
        format_version: CALIBRATION_VERSION,
        selected_theta: selected.theta,
        candidates,
    })
}
