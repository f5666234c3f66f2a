//! Diagnostics: accuracy, per-layer execution ratios, noise-induced decision
//! flipping, logit-gap histograms, path comparison between two runs, and an
//! exact FLOPs cost model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Trace};
use crate::numeric::{argmax_pair, median};
use crate::rng::Stream;

/// Histogram bin count used by [`evaluate_model`].
pub const DEFAULT_GAP_BINS: usize = 32;

/// Fraction of predictions equal to their labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "accuracy".into(),
            expected: format!("{} labels", predictions.len()),
            actual: format!("{} labels", labels.len()),
        });
    }
    if predictions.is_empty() {
        return Err(Error::invalid("predictions", "accuracy over zero tokens"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// How often fresh Gumbel noise flips router decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipStats {
    pub overall: f64,
    pub per_layer: Vec<f64>,
    pub n_draws: usize,
}

/// Measure decision flipping at the states of a noiseless argmax forward
/// pass: for every (token, layer) the recorded logits `g` are compared
/// against `g + noise` for `n_draws` fresh Gumbel pairs. The stream itself is
/// never re-run, so each decision is probed in isolation. Draw order is
/// decision-major (all draws for one decision before the next), which pins
/// the result for a given `rng` state.
pub fn flipping_ratio(
    model: &Model,
    inputs: &[&[f32]],
    n_draws: usize,
    rng: &mut Stream,
) -> Result<FlipStats> {
    if n_draws == 0 {
        return Err(Error::invalid("n_draws", "must be >= 1"));
    }
    let trace = model.forward_infer(inputs, 0.5)?.trace;
    flipping_ratio_from_trace(&trace, n_draws, rng)
}

/// Same measurement over an existing noiseless trace.
pub fn flipping_ratio_from_trace(
    trace: &Trace,
    n_draws: usize,
    rng: &mut Stream,
) -> Result<FlipStats> {
    if n_draws == 0 {
        return Err(Error::invalid("n_draws", "must be >= 1"));
    }
    if trace.logits.is_empty() {
        return Err(Error::invalid("trace", "flipping ratio over an empty trace"));
    }
    let layers = trace.num_layers;
    let tokens = trace.num_tokens();
    let mut flips = vec![0usize; layers];
    for t in 0..tokens {
        for l in 0..layers {
            let g = trace.logits[trace.idx(t, l)];
            let base = argmax_pair(g[0], g[1]);
            for _ in 0..n_draws {
                let noisy = argmax_pair(g[0] + rng.gumbel(), g[1] + rng.gumbel());
                if noisy != base {
                    flips[l] += 1;
                }
            }
        }
    }
    let per_layer: Vec<f64> = flips
        .iter()
        .map(|&f| f as f64 / (tokens * n_draws) as f64)
        .collect();
    let overall = flips.iter().sum::<usize>() as f64 / (tokens * layers * n_draws) as f64;
    Ok(FlipStats {
        overall,
        per_layer,
        n_draws,
    })
}

/// Probability that a fresh Gumbel pair flips the argmax of a two-logit gap:
/// the difference of two Gumbel draws is logistic, so the flip chance is
/// `sigmoid(-|gap|)`.
pub fn expected_flip_rate(gap: f64) -> f64 {
    crate::numeric::sigmoid(-gap.abs())
}

/// Disagreement between two hard execution traces over the same tokens.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathChange {
    /// Fraction of tokens whose decision vector differs at any layer.
    pub token_fraction: f64,
    /// Fraction of individual (token, layer) decisions that differ.
    pub decision_fraction: f64,
}

pub fn path_change_rate(a: &Trace, b: &Trace) -> Result<PathChange> {
    if a.num_layers != b.num_layers || a.execute.len() != b.execute.len() {
        return Err(Error::ShapeMismatch {
            context: "path change traces".into(),
            expected: format!("{} layers x {} decisions", a.num_layers, a.execute.len()),
            actual: format!("{} layers x {} decisions", b.num_layers, b.execute.len()),
        });
    }
    if a.execute.is_empty() {
        return Err(Error::invalid("traces", "path change over empty traces"));
    }
    let tokens = a.num_tokens();
    let layers = a.num_layers;
    let mut changed_tokens = 0usize;
    let mut changed_decisions = 0usize;
    for t in 0..tokens {
        let mut any = false;
        for l in 0..layers {
            if a.execute[t * layers + l] != b.execute[t * layers + l] {
                changed_decisions += 1;
                any = true;
            }
        }
        if any {
            changed_tokens += 1;
        }
    }
    Ok(PathChange {
        token_fraction: changed_tokens as f64 / tokens as f64,
        decision_fraction: changed_decisions as f64 / (tokens * layers) as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `len() == counts.len() + 1`; bin `i` covers `[edges[i], edges[i+1])`,
    /// except the last bin which is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Uniform-width histogram over the sample range. A constant sample gets one
/// unit-wide bin centered on the value.
pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::invalid("bins", "must be >= 1"));
    }
    if values.is_empty() {
        return Err(Error::invalid("values", "histogram over an empty sample"));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::non_finite_at("histogram values", i));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
    Ok(Histogram { edges, counts })
}

/// Execute-minus-bypass gap histograms, pooled and per layer, plus the
/// median absolute gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub median_abs_gap: f64,
    pub pooled: Histogram,
    pub per_layer: Vec<Histogram>,
}

pub fn gap_summary(trace: &Trace, bins: usize) -> Result<GapSummary> {
    let gaps = trace.logit_gaps();
    if gaps.is_empty() {
        return Err(Error::invalid("trace", "gap summary over an empty trace"));
    }
    let pooled = histogram(&gaps, bins)?;
    let layers = trace.num_layers;
    let tokens = trace.num_tokens();
    let mut per_layer = Vec::with_capacity(layers);
    for l in 0..layers {
        let layer_gaps: Vec<f64> = (0..tokens).map(|t| gaps[trace.idx(t, l)]).collect();
        per_layer.push(histogram(&layer_gaps, bins)?);
    }
    let abs: Vec<f64> = gaps.iter().map(|g| g.abs()).collect();
    Ok(GapSummary {
        median_abs_gap: median(&abs),
        pooled,
        per_layer,
    })
}

pub fn median_abs_gap(trace: &Trace) -> Result<f64> {
    if trace.logits.is_empty() {
        return Err(Error::invalid("trace", "median gap over an empty trace"));
    }
    let abs: Vec<f64> = trace.logits.iter().map(|g| (g[0] - g[1]).abs()).collect();
    Ok(median(&abs))
}

/// Multiply-add count of one affine map: each output row costs `in` multiplies
/// plus `in` additions plus one bias add, so `out * (2*in + 1)`.
pub fn affine_flops(out_dim: usize, in_dim: usize) -> f64 {
    (out_dim * (2 * in_dim + 1)) as f64
}

pub fn block_flops(cfg: &ModelConfig) -> f64 {
    affine_flops(cfg.block_hidden, cfg.embed_dim) + affine_flops(cfg.embed_dim, cfg.block_hidden)
}

pub fn router_flops(cfg: &ModelConfig) -> f64 {
    affine_flops(cfg.router_hidden, cfg.embed_dim) + affine_flops(2, cfg.router_hidden)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub per_token_full: f64,
    pub per_token_adaptive: f64,
    pub full: f64,
    pub adaptive: f64,
    /// `adaptive / full`.
    pub normalized: f64,
}

/// Cost model: activations are free; every affine map costs
/// [`affine_flops`]. The full model always runs embed, every block, every
/// router, and the head. The adaptive model charges each block by its
/// measured execution ratio but always pays for routers, embed, and head.
pub fn flops_estimate(
    cfg: &ModelConfig,
    per_layer_ratios: &[f64],
    tokens: usize,
) -> Result<FlopsEstimate> {
    if per_layer_ratios.len() != cfg.num_layers {
        return Err(Error::ShapeMismatch {
            context: "flops_estimate ratios".into(),
            expected: format!("{} layers", cfg.num_layers),
            actual: format!("{} ratios", per_layer_ratios.len()),
        });
    }
    for (l, r) in per_layer_ratios.iter().enumerate() {
        if !(0.0..=1.0).contains(r) {
            return Err(Error::invalid(
                "per_layer_ratios",
                format!("layer {l}: ratio {r} outside [0, 1]"),
            ));
        }
    }
    let fixed = affine_flops(cfg.embed_dim, cfg.embed_dim)
        + affine_flops(cfg.num_classes, cfg.embed_dim);
    let block = block_flops(cfg);
    let router = router_flops(cfg);
    let per_token_full = fixed + cfg.num_layers as f64 * (block + router);
    let executed: f64 = per_layer_ratios.iter().sum();
    let per_token_adaptive = fixed + cfg.num_layers as f64 * router + executed * block;
    Ok(FlopsEstimate {
        per_token_full,
        per_token_adaptive,
        full: per_token_full * tokens as f64,
        adaptive: per_token_adaptive * tokens as f64,
        normalized: per_token_adaptive / per_token_full,
    })
}

/// Everything the `eval` command reports for one checkpoint at one threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format_version: u32,
    pub theta: f64,
    pub accuracy: f64,
    pub avg_exec_ratio: f64,
    pub per_layer_exec_ratio: Vec<f64>,
    pub flip: FlipStats,
    pub gaps: GapSummary,
    /// Disagreement between this threshold's paths and the argmax rule
    /// (theta = 0.5) on the same tokens; zero when theta = 0.5.
    pub path_change_vs_argmax: PathChange,
    pub flops: FlopsEstimate,
}

pub fn evaluate_model(
    model: &Model,
    inputs: &[&[f32]],
    labels: &[usize],
    theta: f64,
    flip_draws: usize,
    flip_rng: &mut Stream,
) -> Result<MetricsReport> {
    let fwd = model.forward_infer(inputs, theta)?;
    let acc = accuracy(&fwd.predictions(), labels)?;
    let per_layer = fwd.trace.per_layer_execution_ratio();
    let argmax_trace = if theta == 0.5 {
        None
    } else {
        Some(model.forward_infer(inputs, 0.5)?.trace)
    };
    let reference = argmax_trace.as_ref().unwrap_or(&fwd.trace);
    let path_change = path_change_rate(&fwd.trace, reference)?;
    let flip = flipping_ratio_from_trace(reference, flip_draws, flip_rng)?;
    let flops = flops_estimate(&model.config, &per_layer, inputs.len())?;
    Ok(MetricsReport {
        format_version: 1,
        theta,
        accuracy: acc,
        avg_exec_ratio: fwd.trace.execution_ratio(),
        per_layer_exec_ratio: per_layer,
        flip,
        gaps: gap_summary(&fwd.trace, DEFAULT_GAP_BINS)?,
        path_change_vs_argmax: path_change,
        flops,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelConfig};
    use crate::numeric::sigmoid;

    /// A model whose routers ignore their input: logits come straight from
    /// the output biases, so every token sees the same per-layer gap.
    fn constant_gap_model(gaps: &[f64]) -> Model {
        let config = ModelConfig {
            num_layers: gaps.len(),
            embed_dim: 4,
            block_hidden: 5,
            router_hidden: 3,
            num_classes: 3,
            activation: Activation::Tanh,
        };
        let mut model = Model::init(&config, &mut Stream::seeded(0)).unwrap();
        for (router, gap) in model.routers.iter_mut().zip(gaps) {
            router.lin1.w.data_mut().fill(0.0);
            router.lin2.w.data_mut().fill(0.0);
            router.lin2.b[0] = (*gap / 2.0) as f32;
            router.lin2.b[1] = (-*gap / 2.0) as f32;
        }
        model
    }

    fn random_tokens(rng: &mut Stream, n: usize, dim: usize) -> Vec<Vec<f32>> {
        (0..n)
            .map(|_| (0..dim).map(|_| rng.normal() as f32).collect())
            .collect()
    }

    fn as_refs(tokens: &[Vec<f32>]) -> Vec<&[f32]> {
        tokens.iter().map(|t| t.as_slice()).collect()
    }

    fn dummy_trace(execute: Vec<bool>, layers: usize) -> Trace {
        let n = execute.len();
        Trace {
            num_layers: layers,
            tau: None,
            logits: vec![[0.0, 0.0]; n],
            probs: vec![[0.5, 0.5]; n],
            execute,
            soft: Vec::new(),
            noise: Vec::new(),
        }
    }

    #[test]
    fn accuracy_counts_exact_matches() {
        assert_eq!(accuracy(&[0, 1, 2, 1], &[0, 1, 0, 1]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn zero_gap_decisions_flip_half_the_time() {
        let model = constant_gap_model(&[0.0, 0.0]);
        let mut rng = Stream::seeded(5);
        let tokens = random_tokens(&mut rng, 50, 4);
        let stats = flipping_ratio(&model, &as_refs(&tokens), 1200, &mut rng).unwrap();
        // 50 tokens x 1200 draws = 6e4 samples per layer.
        for (l, r) in stats.per_layer.iter().enumerate() {
            assert!((r - 0.5).abs() < 0.01, "layer {l}: flip ratio {r}");
        }
    }

    #[test]
    fn flip_ratio_follows_the_logistic_law() {
        let gaps = [0.5, -1.0, 2.0];
        let model = constant_gap_model(&gaps);
        let mut rng = Stream::seeded(9);
        let tokens = random_tokens(&mut rng, 40, 4);
        let stats = flipping_ratio(&model, &as_refs(&tokens), 500, &mut rng).unwrap();
        for (l, (r, gap)) in stats.per_layer.iter().zip(&gaps).enumerate() {
            let expected = expected_flip_rate(*gap);
            assert!(
                (r - expected).abs() < 0.02,
                "layer {l}: measured {r} vs logistic {expected}"
            );
            assert!((expected - sigmoid(-gap.abs())).abs() < 1e-15);
        }
    }

    #[test]
    fn huge_gaps_essentially_never_flip() {
        let model = constant_gap_model(&[50.0, 50.0]);
        let mut rng = Stream::seeded(13);
        let tokens = random_tokens(&mut rng, 20, 4);
        let stats = flipping_ratio(&model, &as_refs(&tokens), 500, &mut rng).unwrap();
        assert!(stats.overall < 1e-5, "got {}", stats.overall);
    }

    #[test]
    fn flipping_is_deterministic_given_the_stream() {
        let model = constant_gap_model(&[0.7, -0.3]);
        let tokens = random_tokens(&mut Stream::seeded(1), 10, 4);
        let a = flipping_ratio(&model, &as_refs(&tokens), 64, &mut Stream::seeded(4)).unwrap();
        let b = flipping_ratio(&model, &as_refs(&tokens), 64, &mut Stream::seeded(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn path_change_counts_tokens_and_decisions() {
        // 4 tokens x 2 layers; token 2 differs at one layer.
        let a = dummy_trace(vec![true; 8], 2);
        let mut flipped = vec![true; 8];
        flipped[5] = false;
        let b = dummy_trace(flipped, 2);
        let change = path_change_rate(&a, &b).unwrap();
        assert_eq!(change.token_fraction, 0.25);
        assert_eq!(change.decision_fraction, 1.0 / 8.0);
        // Pseudometric basics.
        assert_eq!(path_change_rate(&b, &a).unwrap(), change);
        let zero = path_change_rate(&a, &a).unwrap();
        assert_eq!(zero.token_fraction, 0.0);
        assert_eq!(zero.decision_fraction, 0.0);
    }

    #[test]
    fn path_change_rejects_mismatched_shapes() {
        let a = dummy_trace(vec![true; 8], 2);
        let b = dummy_trace(vec![true; 6], 2);
        assert!(path_change_rate(&a, &b).is_err());
    }

    #[test]
    fn histogram_conserves_counts_and_handles_constant_samples() {
        let values = vec![1.5; 12];
        let h = histogram(&values, 5).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 12);
        assert_eq!(h.counts.iter().filter(|&&c| c > 0).count(), 1);
        let nonzero_bin = h.counts.iter().position(|&c| c > 0).unwrap();
        assert!(h.edges[nonzero_bin] <= 1.5 && 1.5 <= h.edges[nonzero_bin + 1]);

        let spread: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let h = histogram(&spread, 10).unwrap();
        assert_eq!(h.counts, vec![10; 10]);
        assert_eq!(h.edges.len(), 11);
        assert!(histogram(&spread, 0).is_err());
        assert!(histogram(&[], 4).is_err());
    }

    #[test]
    fn gap_summary_pools_all_decisions() {
        let model = constant_gap_model(&[1.0, -2.0]);
        let tokens = random_tokens(&mut Stream::seeded(3), 30, 4);
        let trace = model.forward_infer(&as_refs(&tokens), 0.5).unwrap().trace;
        let summary = gap_summary(&trace, 8).unwrap();
        assert_eq!(summary.pooled.counts.iter().sum::<usize>(), 60);
        assert_eq!(summary.per_layer.len(), 2);
        for h in &summary.per_layer {
            assert_eq!(h.counts.iter().sum::<usize>(), 30);
        }
        // Gaps are exactly +1 and -2, so the median |gap| is 1.5.
        assert!((summary.median_abs_gap - 1.5).abs() < 1e-9);
    }

    #[test]
    fn flops_match_a_hand_count_for_one_layer() {
        let cfg = ModelConfig {
            num_layers: 2,
            embed_dim: 3,
            block_hidden: 4,
            router_hidden: 2,
            num_classes: 5,
            activation: Activation::Tanh,
        };
        // embed 3*(2*3+1) = 21, head 5*7 = 35,
        // block 4*7 + 3*9 = 55, router 2*7 + 2*5 = 24.
        assert_eq!(affine_flops(3, 3), 21.0);
        assert_eq!(block_flops(&cfg), 55.0);
        assert_eq!(router_flops(&cfg), 24.0);
        let est = flops_estimate(&cfg, &[1.0, 1.0], 10).unwrap();
        assert_eq!(est.per_token_full, 21.0 + 35.0 + 2.0 * (55.0 + 24.0));
        assert_eq!(est.per_token_adaptive, est.per_token_full);
        assert_eq!(est.full, est.per_token_full * 10.0);

        let idle = flops_estimate(&cfg, &[0.0, 0.0], 1).unwrap();
        assert_eq!(idle.per_token_adaptive, 21.0 + 35.0 + 2.0 * 24.0);
    }

    #[test]
    fn uniform_half_ratio_splits_block_cost_exactly() {
        let cfg = ModelConfig::default();
        let est = flops_estimate(&cfg, &vec![0.5; cfg.num_layers], 1).unwrap();
        let overhead = affine_flops(cfg.embed_dim, cfg.embed_dim)
            + affine_flops(cfg.num_classes, cfg.embed_dim)
            + cfg.num_layers as f64 * router_flops(&cfg);
        let expected = 0.5 * est.per_token_full + 0.5 * overhead;
        assert!((est.per_token_adaptive - expected).abs() < 1e-9);
        assert!(est.normalized > 0.5 && est.normalized < 1.0);
    }

    #[test]
    fn flops_validate_ratio_shape_and_range() {
        let cfg = ModelConfig::default();
        assert!(flops_estimate(&cfg, &[0.5; 3], 1).is_err());
        let mut ratios = vec![0.5; cfg.num_layers];
        ratios[2] = 1.5;
        let err = flops_estimate(&cfg, &ratios, 1).unwrap_err();
        assert!(err.to_string().contains("layer 2"), "got: {err}");
    }

    #[test]
    fn evaluate_model_is_internally_consistent() {
        let model = constant_gap_model(&[0.8, -0.8, 0.2]);
        let mut rng = Stream::seeded(41);
        let tokens = random_tokens(&mut rng, 40, 4);
        let refs = as_refs(&tokens);
        let labels = vec![0; 40];
        let report =
            evaluate_model(&model, &refs, &labels, 0.5, 8, &mut Stream::seeded(2)).unwrap();
        assert_eq!(report.format_version, 1);
        let mean: f64 =
            report.per_layer_exec_ratio.iter().sum::<f64>() / report.per_layer_exec_ratio.len() as f64;
        assert!((report.avg_exec_ratio - mean).abs() < 1e-12);
        assert_eq!(report.gaps.pooled.counts.iter().sum::<usize>(), 40 * 3);
        assert_eq!(report.path_change_vs_argmax.token_fraction, 0.0);
        assert!(report.flops.normalized <= 1.0);

        // At a stricter threshold the 0.2-gap layer (p0 ~ 0.55) shuts off.
        let report2 =
            evaluate_model(&model, &refs, &labels, 0.6, 8, &mut Stream::seeded(2)).unwrap();
        assert!(report2.avg_exec_ratio < report.avg_exec_ratio);
        assert!(report2.path_change_vs_argmax.token_fraction > 0.0);
    }
}
