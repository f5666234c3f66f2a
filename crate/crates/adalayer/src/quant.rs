//! Post-training weight perturbations: groupwise asymmetric round-to-nearest
//! quantization (optionally mixed per-layer bit widths) and unstructured
//! magnitude pruning. Both operate on block weight matrices only; routers,
//! embedding, head, and all biases stay full-precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Matrix;

pub const DEFAULT_GROUP_SIZE: usize = 128;
/// Sentinel bit width meaning "leave the tensor untouched".
pub const NOOP_BITS: u8 = 16;
pub const MANIFEST_VERSION: u32 = 1;

const SUPPORTED_BITS: [u8; 4] = [2, 3, 4, 8];

/// Bit widths accepted where an actual code grid is required.
pub fn validate_code_bits(bits: u8) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::invalid("bits", "supported widths are 2, 3, 4, and 8"))
    }
}

/// Bit widths accepted in a schedule, where 16 marks a skipped layer.
fn validate_schedule_bits(bits: u8) -> Result<()> {
    if bits == NOOP_BITS {
        Ok(())
    } else {
        validate_code_bits(bits)
    }
}

/// One contiguous run of weights sharing a scale and zero-point.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGroup {
    pub scale: f64,
    pub zero: i64,
    pub codes: Vec<u16>,
}

impl QuantizedGroup {
    pub fn dequantize_into(&self, out: &mut Vec<f32>) {
        let zero = self.zero as f64;
        out.extend(
            self.codes
                .iter()
                .map(|&q| (self.scale * (f64::from(q) - zero)) as f32),
        );
    }
}

/// A matrix stored as low-bit codes, grouped along each row.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub bits: u8,
    pub group_size: usize,
    pub groups: Vec<QuantizedGroup>,
}

impl QuantizedTensor {
    pub fn dequantize(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.rows * self.cols);
        for group in &self.groups {
            group.dequantize_into(&mut data);
        }
        Matrix::from_vec(self.rows, self.cols, data)
            .expect("group layout covers the tensor")
    }
}

/// Quantize one group: scale from the min-max range, zero-point from the
/// minimum, round-to-nearest codes clamped to the grid. A flat group (max =
/// min) falls back to scale |value| (or 1 at zero) so its single level is
/// reproduced exactly.
pub fn quantize_group(values: &[f32], bits: u8) -> Result<QuantizedGroup> {
    validate_code_bits(bits)?;
    if values.is_empty() {
        return Err(Error::invalid("group", "must contain at least one weight"));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::non_finite_at("weight group", i));
        }
        min = min.min(v as f64);
        max = max.max(v as f64);
    }
    let levels = f64::from((1u32 << bits) - 1);
    let scale = if max > min {
        (max - min) / levels
    } else if max == 0.0 {
        1.0
    } else {
        max.abs()
    };
    let zero = (-min / scale).round();
    let codes = values
        .iter()
        .map(|&v| ((v as f64 / scale).round() + zero).clamp(0.0, levels) as u16)
        .collect();
    Ok(QuantizedGroup {
        scale,
        zero: zero as i64,
        codes,
    })
}

/// Quantize a matrix in contiguous groups of `group_size` along each row;
/// the last group of a row may be short.
pub fn quantize_tensor(w: &Matrix, bits: u8, group_size: usize) -> Result<QuantizedTensor> {
    if group_size == 0 {
        return Err(Error::invalid("group_size", "must be at least 1"));
    }
    let mut groups = Vec::with_capacity(w.rows() * w.cols().div_ceil(group_size));
    for r in 0..w.rows() {
        for group in w.row(r).chunks(group_size) {
            groups.push(quantize_group(group, bits)?);
        }
    }
    Ok(QuantizedTensor {
        rows: w.rows(),
        cols: w.cols(),
        bits,
        group_size,
        groups,
    })
}

/// Largest absolute element-wise error and mean squared error between a
/// tensor and its reconstruction.
pub fn round_trip_stats(original: &Matrix, restored: &Matrix) -> (f64, f64) {
    debug_assert_eq!(original.data().len(), restored.data().len());
    let mut max_abs = 0f64;
    let mut sq_sum = 0f64;
    for (&a, &b) in original.data().iter().zip(restored.data()) {
        let err = (a as f64 - b as f64).abs();
        max_abs = max_abs.max(err);
        sq_sum += err * err;
    }
    let n = original.data().len().max(1) as f64;
    (max_abs, sq_sum / n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantScope {
    /// Block weight matrices only; routers, embedding, and head untouched.
    #[default]
    Blocks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantConfig {
    pub bits: u8,
    pub group_size: usize,
    /// Full-length per-layer override of `bits`; entries of 16 skip a layer.
    pub per_layer_bits: Option<Vec<u8>>,
    pub scope: QuantScope,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            group_size: DEFAULT_GROUP_SIZE,
            per_layer_bits: None,
            scope: QuantScope::Blocks,
        }
    }
}

impl QuantConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        validate_schedule_bits(self.bits)?;
        if self.group_size == 0 {
            return Err(Error::invalid("group_size", "must be at least 1"));
        }
        if let Some(schedule) = &self.per_layer_bits {
            if schedule.len() != num_layers {
                return Err(Error::invalid(
                    "per_layer_bits",
                    "must list one bit width per layer",
                ));
            }
            for &bits in schedule {
                validate_schedule_bits(bits)?;
            }
        }
        Ok(())
    }
}

/// On-disk form of a mixed-precision layer schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitsSchedule {
    pub format_version: u32,
    pub per_layer_bits: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorQuantStats {
    pub name: String,
    pub bits: u8,
    pub group_size: usize,
    pub num_groups: usize,
    pub max_abs_error: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantManifest {
    pub format_version: u32,
    pub tensors: Vec<TensorQuantStats>,
}

/// Replace block weights with their dequantized low-bit reconstruction and
/// report per-tensor error statistics. Layers scheduled at the 16-bit
/// sentinel are left untouched and omitted from the manifest.
pub fn quantize_model(model: &Model, cfg: &QuantConfig) -> Result<(Model, QuantManifest)> {
    cfg.validate(model.config.num_layers)?;
    let mut out = model.clone();
    let mut tensors = Vec::new();
    for (layer, block) in out.blocks.iter_mut().enumerate() {
        let bits = cfg
            .per_layer_bits
            .as_ref()
            .map_or(cfg.bits, |schedule| schedule[layer]);
        if bits == NOOP_BITS {
            continue;
        }
        for (suffix, affine) in [("w1", &mut block.lin1), ("w2", &mut block.lin2)] {
            let name = format!("block{layer:02}/{suffix}");
            affine.w.check_finite(&name)?;
            let qt = quantize_tensor(&affine.w, bits, cfg.group_size)?;
            let restored = qt.dequantize();
            let (max_abs_error, mse) = round_trip_stats(&affine.w, &restored);
            tensors.push(TensorQuantStats {
                name,
                bits,
                group_size: cfg.group_size,
                num_groups: qt.groups.len(),
                max_abs_error,
                mse,
            });
            affine.w = restored;
        }
    }
    Ok((out, QuantManifest {
        format_version: MANIFEST_VERSION,
        tensors,
    }))
}

/// Zero the `floor(sparsity * n)` smallest-magnitude entries, breaking ties
/// by flat index. Returns how many entries were zeroed.
pub fn magnitude_prune_matrix(w: &mut Matrix, sparsity: f64) -> Result<usize> {
    if !sparsity.is_finite() || !(0.0..1.0).contains(&sparsity) {
        return Err(Error::invalid("sparsity", "must lie in [0, 1)"));
    }
    let data = w.data_mut();
    let count = (sparsity * data.len() as f64).floor() as usize;
    if count == 0 {
        return Ok(0);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        data[a].abs().total_cmp(&data[b].abs()).then(a.cmp(&b))
    });
    for &i in &order[..count] {
        data[i] = 0.0;
    }
    Ok(count)
}

/// Apply magnitude pruning to every block weight matrix.
pub fn prune_model(model: &Model, sparsity: f64) -> Result<Model> {
    let mut out = model.clone();
    for block in &mut out.blocks {
        magnitude_prune_matrix(&mut block.lin1.w, sparsity)?;
        magnitude_prune_matrix(&mut block.lin2.w, sparsity)?;
    }
    Ok(out)
}
