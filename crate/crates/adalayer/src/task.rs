//! Synthetic depth-gated classification task.
//!
//! Each token carries a class `c` and a required depth `k`. The input is the
//! class prototype plus isotropic Gaussian noise, pushed through `k`
//! applications of a fixed hidden map (a frozen random rotation followed by
//! a smooth elementwise warp). Each application stretches the noise cloud of
//! a class into a curved sheet, and the sheets of different classes wind
//! past each other; undoing the `k` compositions collapses them back to
//! round, well-separated blobs. Reading a deep token is therefore a
//! composition-inversion problem, while depth-0 tokens sit right on their
//! prototypes when noiseless.
//!
//! The hidden map is derived from the config seed alone, so tests can
//! reconstruct it and decode tokens by explicit inversion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fileio;
use crate::rng::Stream;

/// Fraction of samples assigned to the training split.
pub const TRAIN_FRACTION: f64 = 0.7;
/// Fixed calibration split size, in samples.
pub const CALIB_SAMPLES: usize = 300;

/// Elementwise warp gain and slope: `warp(t) = t + GAIN * tanh(SLOPE * t)`.
/// Strictly increasing (derivative >= 1), smooth, and strongly curved near
/// the origin so that composition depth matters.
const WARP_GAIN: f64 = 1.0;
const WARP_SLOPE: f64 = 2.0;

/// Prototypes are drawn on the sphere of this radius (per sqrt(dim) scale).
/// Kept small so that coordinates sit inside the warp's curved zone
/// (|t| < ~0.75); larger radii push the constellation into the warp's
/// near-affine tails and the depth structure washes out.
const PROTO_RADIUS_PER_SQRT_DIM: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub embed_dim: usize,
    pub num_classes: usize,
    pub depth_levels: Vec<usize>,
    pub tokens_per_sample: usize,
    pub num_samples: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            embed_dim: 16,
            num_classes: 8,
            depth_levels: vec![1, 3, 5],
            tokens_per_sample: 8,
            num_samples: 3000,
            noise_std: 0.3,
            seed: 7,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::invalid("embed_dim", "must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes", "must be >= 2"));
        }
        if self.depth_levels.is_empty() {
            return Err(Error::invalid("depth_levels", "must be non-empty"));
        }
        if self.tokens_per_sample == 0 {
            return Err(Error::invalid("tokens_per_sample", "must be >= 1"));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::invalid(
                "noise_std",
                format!("must be finite and >= 0, got {}", self.noise_std),
            ));
        }
        let (train, test) = (train_count(self.num_samples), self.num_samples);
        if train + CALIB_SAMPLES >= test {
            return Err(Error::invalid(
                "num_samples",
                format!(
                    "must leave room for a {CALIB_SAMPLES}-sample calibration split and a \
                     non-empty test split after the {:.0}% training split; got {}",
                    TRAIN_FRACTION * 100.0,
                    self.num_samples
                ),
            ));
        }
        Ok(())
    }

    pub fn num_tokens(&self) -> usize {
        self.num_samples * self.tokens_per_sample
    }
}

fn train_count(num_samples: usize) -> usize {
    (num_samples as f64 * TRAIN_FRACTION).floor() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    pub calib: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub format_version: u32,
    pub config: TaskConfig,
    /// Token-major: `inputs[t]` has `embed_dim` entries.
    pub inputs: Vec<Vec<f32>>,
    pub labels: Vec<usize>,
    pub required_depth: Vec<usize>,
    /// Sample indices; token `t` belongs to sample `t / tokens_per_sample`.
    pub splits: Splits,
}

/// Borrowed view of one split's tokens.
pub struct SplitView<'a> {
    pub inputs: Vec<&'a [f32]>,
    pub labels: Vec<usize>,
    pub depths: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitId {
    Train,
    Calib,
    Test,
}

impl Dataset {
    pub fn num_tokens(&self) -> usize {
        self.inputs.len()
    }

    pub fn split_samples(&self, id: SplitId) -> &[usize] {
        match id {
            SplitId::Train => &self.splits.train,
            SplitId::Calib => &self.splits.calib,
            SplitId::Test => &self.splits.test,
        }
    }

    /// Tokens of the split, in split order (sample order, then token order).
    pub fn split_view(&self, id: SplitId) -> SplitView<'_> {
        let tps = self.config.tokens_per_sample;
        let samples = self.split_samples(id);
        let mut view = SplitView {
            inputs: Vec::with_capacity(samples.len() * tps),
            labels: Vec::with_capacity(samples.len() * tps),
            depths: Vec::with_capacity(samples.len() * tps),
        };
        for &s in samples {
            for t in s * tps..(s + 1) * tps {
                view.inputs.push(self.inputs[t].as_slice());
                view.labels.push(self.labels[t]);
                view.depths.push(self.required_depth[t]);
            }
        }
        view
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fileio::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let ds: Dataset = fileio::read_json(path)?;
        if ds.format_version != 1 {
            return Err(Error::Artifact {
                path: path.display().to_string(),
                reason: format!("unsupported format_version {}", ds.format_version),
            });
        }
        ds.config.validate()?;
        let n = ds.config.num_tokens();
        if ds.inputs.len() != n || ds.labels.len() != n || ds.required_depth.len() != n {
            return Err(Error::Artifact {
                path: path.display().to_string(),
                reason: format!(
                    "token arrays disagree with config: expected {n} tokens, got inputs={}, \
                     labels={}, required_depth={}",
                    ds.inputs.len(),
                    ds.labels.len(),
                    ds.required_depth.len()
                ),
            });
        }
        Ok(ds)
    }
}

/// The frozen generator internals: prototypes and the hidden map. Derived
/// from the config seed only, so it can be rebuilt independently of the
/// generated arrays (the test-side decoder relies on this).
pub struct HiddenTask {
    pub prototypes: Vec<Vec<f64>>, // num_classes x dim
    rotation: Vec<f64>,            // dim x dim, row-major
    dim: usize,
}

impl HiddenTask {
    pub fn from_config(config: &TaskConfig) -> Result<HiddenTask> {
        config.validate()?;
        let mut streams = DerivedStreams::new(config.seed);
        Ok(HiddenTask::build(config, &mut streams))
    }

    fn build(config: &TaskConfig, streams: &mut DerivedStreams) -> HiddenTask {
        let d = config.embed_dim;
        let radius = PROTO_RADIUS_PER_SQRT_DIM * (d as f64).sqrt();
        let mut prototypes = Vec::with_capacity(config.num_classes);
        for _ in 0..config.num_classes {
            prototypes.push(random_sphere_point(&mut streams.proto, d, radius));
        }
        let rotation = random_orthogonal(&mut streams.rotation, d);
        HiddenTask {
            prototypes,
            rotation,
            dim: d,
        }
    }

    /// One application of the hidden map: rotate, then warp elementwise.
    pub fn apply_once(&self, x: &[f64]) -> Vec<f64> {
        let mut rotated = vec![0.0; self.dim];
        for r in 0..self.dim {
            let row = &self.rotation[r * self.dim..(r + 1) * self.dim];
            rotated[r] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        rotated.iter_mut().for_each(|v| *v = warp(*v));
        rotated
    }

    /// Exact inverse of `apply_once`: unwarp elementwise, then rotate back.
    pub fn invert_once(&self, y: &[f64]) -> Vec<f64> {
        let unwarped: Vec<f64> = y.iter().map(|v| warp_inverse(*v)).collect();
        let mut x = vec![0.0; self.dim];
        for r in 0..self.dim {
            let row = &self.rotation[r * self.dim..(r + 1) * self.dim];
            for (c, slot) in x.iter_mut().enumerate() {
                *slot += row[c] * unwarped[r];
            }
        }
        x
    }

    pub fn forward(&self, class: usize, depth: usize) -> Vec<f64> {
        let mut x = self.prototypes[class].clone();
        for _ in 0..depth {
            x = self.apply_once(&x);
        }
        x
    }

    /// Invert `depth` compositions and return the nearest prototype's class.
    pub fn decode(&self, token: &[f32], depth: usize) -> usize {
        let mut x: Vec<f64> = token.iter().map(|v| *v as f64).collect();
        for _ in 0..depth {
            x = self.invert_once(&x);
        }
        let mut best = 0;
        let mut best_d2 = f64::INFINITY;
        for (c, proto) in self.prototypes.iter().enumerate() {
            let d2: f64 = proto.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best_d2 {
                best_d2 = d2;
                best = c;
            }
        }
        best
    }
}

fn warp(t: f64) -> f64 {
    t + WARP_GAIN * (WARP_SLOPE * t).tanh()
}

/// Solve `warp(t) = y` by bisection. `|warp(t) - t| <= GAIN` brackets the
/// root in `[y - GAIN, y + GAIN]`; ~80 halvings drive the bracket below f64
/// resolution, which monotonicity turns into the exact preimage.
fn warp_inverse(y: f64) -> f64 {
    let mut lo = y - WARP_GAIN;
    let mut hi = y + WARP_GAIN;
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if warp(mid) < y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn random_sphere_point(rng: &mut Stream, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm * radius).collect();
        }
    }
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian rows.
fn random_orthogonal(rng: &mut Stream, dim: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        for q in &rows {
            let dot: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (vi, qi) in v.iter_mut().zip(q) {
                *vi -= dot * qi;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
    let mut flat = Vec::with_capacity(dim * dim);
    for r in rows {
        flat.extend(r);
    }
    flat
}

/// Fixed derivation order for the generator's sub-streams.
struct DerivedStreams {
    proto: Stream,
    rotation: Stream,
    assign: Stream,
    noise: Stream,
    split: Stream,
}

impl DerivedStreams {
    fn new(seed: u64) -> Self {
        let mut parent = Stream::seeded(seed);
        DerivedStreams {
            proto: parent.split(),
            rotation: parent.split(),
            assign: parent.split(),
            noise: parent.split(),
            split: parent.split(),
        }
    }
}

pub fn generate_dataset(config: &TaskConfig) -> Result<Dataset> {
    config.validate()?;
    let mut streams = DerivedStreams::new(config.seed);
    let task = HiddenTask::build(config, &mut streams);

    // Balanced urn over (class, depth) pairs: exact balance up to remainder.
    let n_tokens = config.num_tokens();
    let mut assignment: Vec<(usize, usize)> = Vec::with_capacity(n_tokens);
    'fill: loop {
        for &k in &config.depth_levels {
            for c in 0..config.num_classes {
                if assignment.len() == n_tokens {
                    break 'fill;
                }
                assignment.push((c, k));
            }
        }
    }
    streams.assign.shuffle(&mut assignment);

    let mut inputs = Vec::with_capacity(n_tokens);
    let mut labels = Vec::with_capacity(n_tokens);
    let mut required_depth = Vec::with_capacity(n_tokens);
    for &(c, k) in &assignment {
        let mut x: Vec<f64> = task.prototypes[c]
            .iter()
            .map(|p| p + config.noise_std * streams.noise.normal())
            .collect();
        for _ in 0..k {
            x = task.apply_once(&x);
        }
        inputs.push(x.iter().map(|v| *v as f32).collect());
        labels.push(c);
        required_depth.push(k);
    }

    let mut order: Vec<usize> = (0..config.num_samples).collect();
    streams.split.shuffle(&mut order);
    let n_train = train_count(config.num_samples);
    let splits = Splits {
        train: order[..n_train].to_vec(),
        calib: order[n_train..n_train + CALIB_SAMPLES].to_vec(),
        test: order[n_train + CALIB_SAMPLES..].to_vec(),
    };

    Ok(Dataset {
        format_version: 1,
        config: config.clone(),
        inputs,
        labels,
        required_depth,
        splits,
    })
}
