//! Fine-tuning loop: shuffled minibatches, adaptive-moment updates with
//! global gradient-norm clipping, a JSON-lines training log, and abort-on-
//! divergence that preserves the last finite parameters.
//!
//! Everything is seeded: one root stream per run is split into independent
//! shuffle, noise, and diagnostic streams, so identical configs and datasets
//! reproduce identical parameters bitwise. The only nondeterministic output
//! anywhere is the `wall_clock_ms` field of step records.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backward::backward;
use crate::error::{Error, Result};
use crate::loss::{total_loss, LossBreakdown, LossWeights};
use crate::metrics::{accuracy, flipping_ratio, median_abs_gap};
use crate::model::Model;
use crate::numeric::argmax_pair;
use crate::rng::Stream;
use crate::task::{Dataset, SplitId};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Epoch-end flip diagnostics run on the first `FLIP_EVAL_SAMPLES` training
/// samples with `FLIP_EVAL_DRAWS` fresh Gumbel pairs per decision.
pub const FLIP_EVAL_SAMPLES: usize = 200;
pub const FLIP_EVAL_DRAWS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub r_target: f64,
    pub tau: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Emit a step record every this many steps.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 2e-3,
            lambda1: 0.1,
            lambda2: 0.01,
            r_target: 0.5,
            tau: 1.0,
            clip_norm: 1.0,
            seed: 0,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log_every", "must be >= 1"));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("tau", self.tau),
            ("clip_norm", self.clip_norm),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(name, format!("must be finite and > 0, got {v}")));
            }
        }
        if !(self.r_target > 0.0 && self.r_target < 1.0) {
            return Err(Error::invalid(
                "r_target",
                format!("must lie strictly inside (0, 1), got {}", self.r_target),
            ));
        }
        self.loss_weights().validate()
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            r_target: self.r_target,
        }
    }
}

/// Adaptive-moment estimation with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                context: "optimizer step".into(),
                expected: format!("{} parameters", self.m.len()),
                actual: format!("{} params / {} grads", params.len(), grads.len()),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::non_finite_at("gradient", i));
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let update = lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
            *p = (*p as f64 - update) as f32;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub per_layer_exec: Vec<f64>,
    /// Fraction of this batch's decisions where the Gumbel noise flipped the
    /// noiseless argmax.
    pub noisy_flip_fraction: f64,
    pub grad_norm: f64,
    /// Wall-clock duration of the step. The only nondeterministic field in
    /// the training log.
    pub wall_clock_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub test_accuracy: f64,
    /// Hard execution ratios measured across the epoch's training steps.
    pub train_exec_ratio: f64,
    pub train_per_layer_exec: Vec<f64>,
    /// Argmax-rule inference on the test split at epoch end.
    pub test_exec_ratio: f64,
    pub test_per_layer_exec: Vec<f64>,
    pub median_abs_gap: f64,
    pub flip_ratio: f64,
    pub flip_per_layer: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: u64,
    pub reason: String,
}

/// One line of the JSON-lines training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
    Divergence(Divergence),
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: u64,
    pub epoch_records: Vec<EpochRecord>,
    /// Set when training aborted; the model holds the last finite parameters.
    pub divergence: Option<Divergence>,
}

impl TrainReport {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.epoch_records.last().map(|e| e.test_accuracy)
    }
}

fn check_compatibility(model: &Model, dataset: &Dataset) -> Result<()> {
    let (mc, tc) = (&model.config, &dataset.config);
    if mc.embed_dim != tc.embed_dim {
        return Err(Error::invalid(
            "embed_dim",
            format!("model expects {}, dataset provides {}", mc.embed_dim, tc.embed_dim),
        ));
    }
    if mc.num_classes != tc.num_classes {
        return Err(Error::invalid(
            "num_classes",
            format!("model has {}, dataset has {}", mc.num_classes, tc.num_classes),
        ));
    }
    if let Some(&deepest) = tc.depth_levels.iter().max() {
        if deepest > mc.num_layers {
            return Err(Error::invalid(
                "depth_levels",
                format!(
                    "dataset requires depth {deepest} but the model has only {} layers",
                    mc.num_layers
                ),
            ));
        }
    }
    Ok(())
}

fn write_record(log: &mut dyn Write, record: &LogRecord) -> Result<()> {
    let io_err = |e| Error::Io {
        path: "training log".into(),
        source: e,
    };
    let line = serde_json::to_string(record).map_err(|e| Error::Json {
        path: "training log".into(),
        source: e,
    })?;
    log.write_all(line.as_bytes()).map_err(io_err)?;
    log.write_all(b"\n").map_err(io_err)?;
    Ok(())
}

/// Run the training loop in place. Step and epoch records stream into `log`
/// as JSON lines. On divergence the model keeps the last finite parameters
/// and the report says where and why training stopped.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    config: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    config.validate()?;
    check_compatibility(model, dataset)?;
    let weights = config.loss_weights();
    let layers = model.num_layers();
    let train_view = dataset.split_view(SplitId::Train);
    let test_view = dataset.split_view(SplitId::Test);
    if train_view.inputs.is_empty() {
        return Err(Error::invalid("dataset", "training split is empty"));
    }

    let mut root = Stream::seeded(config.seed);
    let mut shuffle_rng = root.split();
    let mut noise_rng = root.split();
    let mut flip_rng = root.split();

    let mut adam = Adam::new(model.config.param_count());
    let mut report = TrainReport {
        steps: 0,
        epoch_records: Vec::new(),
        divergence: None,
    };
    let flip_tokens =
        train_view.inputs.len().min(FLIP_EVAL_SAMPLES * dataset.config.tokens_per_sample);

    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_view.inputs.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut epoch_exec_counts = vec![0usize; layers];
        let mut epoch_tokens = 0usize;

        for batch in order.chunks(config.batch_size) {
            let started = Instant::now();
            let inputs: Vec<&[f32]> = batch.iter().map(|&i| train_view.inputs[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| train_view.labels[i]).collect();

            let fwd = model.forward_train(&inputs, config.tau, &mut noise_rng)?;
            let loss = total_loss(&fwd.class_logits, &labels, &fwd.trace, &weights)?;
            let mut diverge = |step: u64, reason: String, report: &mut TrainReport| {
                let event = Divergence { step, reason };
                report.divergence = Some(event.clone());
                write_record(log, &LogRecord::Divergence(event))
            };
            if !loss.total.is_finite() {
                diverge(report.steps + 1, "non-finite loss".into(), &mut report)?;
                break 'epochs;
            }
            let (_, grads) = backward(model, &inputs, &labels, &fwd.trace, &weights)?;
            let grad_norm = grads.global_norm();
            if !grad_norm.is_finite() {
                diverge(report.steps + 1, "non-finite gradient norm".into(), &mut report)?;
                break 'epochs;
            }
            let mut flat = grads.flatten();
            if grad_norm > config.clip_norm {
                let scale = config.clip_norm / grad_norm;
                for g in &mut flat {
                    *g *= scale;
                }
            }
            let before = model.flatten_params();
            let mut params = before.clone();
            adam.step(&mut params, &flat, config.learning_rate)?;
            model.load_flat_params(&params)?;
            if let Err(e) = model.check_finite() {
                model.load_flat_params(&before)?;
                diverge(
                    report.steps + 1,
                    format!("update produced non-finite parameters: {e}"),
                    &mut report,
                )?;
                break 'epochs;
            }

            report.steps += 1;
            epoch_tokens += inputs.len();
            let mut flips = 0usize;
            for (i, g) in fwd.trace.logits.iter().enumerate() {
                if fwd.trace.execute[i] {
                    epoch_exec_counts[i % layers] += 1;
                }
                if (argmax_pair(g[0], g[1]) == 0) != fwd.trace.execute[i] {
                    flips += 1;
                }
            }
            if report.steps % config.log_every == 0 {
                write_record(
                    log,
                    &LogRecord::Step(StepRecord {
                        step: report.steps,
                        epoch,
                        loss,
                        per_layer_exec: fwd.trace.per_layer_execution_ratio(),
                        noisy_flip_fraction: flips as f64 / fwd.trace.execute.len() as f64,
                        grad_norm,
                        wall_clock_ms: started.elapsed().as_secs_f64() * 1e3,
                    }),
                )?;
            }
        }

        let infer = model.forward_infer(&test_view.inputs, 0.5)?;
        let test_accuracy = accuracy(&infer.predictions(), &test_view.labels)?;
        let flip = flipping_ratio(model, &train_view.inputs[..flip_tokens], FLIP_EVAL_DRAWS, &mut flip_rng)?;
        let record = EpochRecord {
            epoch,
            test_accuracy,
            train_exec_ratio: epoch_exec_counts.iter().sum::<usize>() as f64
                / (epoch_tokens * layers) as f64,
            train_per_layer_exec: epoch_exec_counts
                .iter()
                .map(|&c| c as f64 / epoch_tokens as f64)
                .collect(),
            test_exec_ratio: infer.trace.execution_ratio(),
            test_per_layer_exec: infer.trace.per_layer_execution_ratio(),
            median_abs_gap: median_abs_gap(&infer.trace)?,
            flip_ratio: flip.overall,
            flip_per_layer: flip.per_layer,
        };
        write_record(log, &LogRecord::Epoch(record.clone()))?;
        report.epoch_records.push(record);
    }

    Ok(report)
}
