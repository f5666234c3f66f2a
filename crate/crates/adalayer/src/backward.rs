//! Exact gradients for a softened training objective.
//!
//! The hard forward value is piecewise constant in the router parameters, so
//! training differentiates a smooth surrogate that reuses the forward pass's
//! Gumbel noise. In the surrogate every residual update is scaled by the soft
//! execute probability instead of being gated by the argmax:
//!
//! `x_{l+1} = x_l + beta_l * f_l(x_l)`, `beta_l = softmax((g_l + noise)/tau)[0]`
//!
//! and the objective is
//!
//! `ce + lambda1 * sign(r_hard - r_target) * (r_soft - r_target) - lambda2 * entropy`
//!
//! with `ce`, `r_soft`, and `entropy` computed on the soft stream while the
//! sign comes from the hard execution ratio, matching the direction the
//! reported `|r_hard - r_target|` penalty pushes. [`backward`] returns the
//! exact gradient of this surrogate; [`surrogate_objective`] evaluates the
//! same scalar standalone so the gradient can be finite-difference checked.
//!
//! Bypassed layers keep a nonzero `beta`, so classification gradient still
//! reaches their blocks and their decisions stay revisable.

use crate::error::{Error, Result};
use crate::loss::{xlnx, LossWeights};
use crate::model::{Affine, Model, Trace};
use crate::numeric::{log_softmax_at, softmax, softmax_pair};

/// Scalar pieces of the surrogate objective for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateParts {
    /// Cross-entropy of the soft stream's class logits.
    pub ce: f64,
    /// Mean soft execute probability over all (token, layer) decisions.
    pub soft_exec_ratio: f64,
    /// Mean soft decision entropy, nats.
    pub entropy: f64,
    /// Hard execution ratio the sign was taken from.
    pub hard_exec_ratio: f64,
    /// `sign(hard_exec_ratio - r_target)`: -1, 0, or +1.
    pub rate_sign: f64,
    pub objective: f64,
}

/// Gradient of one affine map, f64, same layout as the parameters
/// (weights row-major, then bias).
#[derive(Debug, Clone)]
pub struct AffineGrad {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl AffineGrad {
    fn zeros_like(a: &Affine) -> Self {
        AffineGrad {
            w: vec![0.0; a.w.rows() * a.w.cols()],
            b: vec![0.0; a.b.len()],
        }
    }

    /// Rank-one update `dW += dy x^T`, `db += dy`.
    fn accumulate(&mut self, dy: &[f64], x: &[f64]) {
        debug_assert_eq!(dy.len() * x.len(), self.w.len());
        for (i, dyi) in dy.iter().enumerate() {
            let row = &mut self.w[i * x.len()..(i + 1) * x.len()];
            for (wj, xj) in row.iter_mut().zip(x) {
                *wj += dyi * xj;
            }
            self.b[i] += dyi;
        }
    }
}

/// Full-model gradient, mirroring the model's parameter layout.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub embed: AffineGrad,
    /// Per layer `(lin1, lin2)`.
    pub blocks: Vec<(AffineGrad, AffineGrad)>,
    pub routers: Vec<(AffineGrad, AffineGrad)>,
    pub head: AffineGrad,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Gradients {
            embed: AffineGrad::zeros_like(&model.embed),
            blocks: model
                .blocks
                .iter()
                .map(|b| (AffineGrad::zeros_like(&b.lin1), AffineGrad::zeros_like(&b.lin2)))
                .collect(),
            routers: model
                .routers
                .iter()
                .map(|r| (AffineGrad::zeros_like(&r.lin1), AffineGrad::zeros_like(&r.lin2)))
                .collect(),
            head: AffineGrad::zeros_like(&model.head),
        }
    }

    fn ordered(&self) -> Vec<&AffineGrad> {
        let mut out = vec![&self.embed];
        for (block, router) in self.blocks.iter().zip(&self.routers) {
            out.extend([&block.0, &block.1, &router.0, &router.1]);
        }
        out.push(&self.head);
        out
    }

    /// Flat gradient vector in the order of [`Model::flatten_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in self.ordered() {
            out.extend_from_slice(&g.w);
            out.extend_from_slice(&g.b);
        }
        out
    }

    /// L2 norm over every coordinate, used for clipping and divergence checks.
    pub fn global_norm(&self) -> f64 {
        self.ordered()
            .iter()
            .flat_map(|g| g.w.iter().chain(&g.b))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

fn rate_sign(r_hard: f64, r_target: f64) -> f64 {
    if r_hard > r_target {
        1.0
    } else if r_hard < r_target {
        -1.0
    } else {
        0.0
    }
}

fn check_batch(inputs: &[&[f32]], labels: &[usize], num_classes: usize) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::invalid("inputs", "batch must contain at least one token"));
    }
    if labels.len() != inputs.len() {
        return Err(Error::ShapeMismatch {
            context: "batch labels".into(),
            expected: format!("{} labels", inputs.len()),
            actual: format!("{} labels", labels.len()),
        });
    }
    for (t, &label) in labels.iter().enumerate() {
        if label >= num_classes {
            return Err(Error::invalid(
                "labels",
                format!("token {t}: label {label} out of range for {num_classes} classes"),
            ));
        }
    }
    Ok(())
}

/// Everything the backward pass needs from one token's soft stream.
struct TokenCache {
    /// Residual states; `states[l]` feeds layer `l`, `states[L]` feeds the head.
    states: Vec<Vec<f64>>,
    block_pre: Vec<Vec<f64>>,
    block_act: Vec<Vec<f64>>,
    block_out: Vec<Vec<f64>>,
    router_pre: Vec<Vec<f64>>,
    router_act: Vec<Vec<f64>>,
    beta: Vec<f64>,
    head_logits: Vec<f64>,
}

fn soft_token_pass(model: &Model, input: &[f32], noise: &[[f64; 2]], tau: f64) -> TokenCache {
    let cfg = &model.config;
    let act = cfg.activation;
    let layers = cfg.num_layers;
    let wide: Vec<f64> = input.iter().map(|v| *v as f64).collect();
    let mut x = vec![0.0; cfg.embed_dim];
    model.embed.forward(&wide, &mut x);

    let mut states = Vec::with_capacity(layers + 1);
    let mut block_pre = Vec::with_capacity(layers);
    let mut block_act = Vec::with_capacity(layers);
    let mut block_out = Vec::with_capacity(layers);
    let mut router_pre = Vec::with_capacity(layers);
    let mut router_act = Vec::with_capacity(layers);
    let mut beta = Vec::with_capacity(layers);

    for l in 0..layers {
        states.push(x.clone());
        let router = &model.routers[l];
        let mut rpre = vec![0.0; cfg.router_hidden];
        router.lin1.forward(&x, &mut rpre);
        let ract: Vec<f64> = rpre.iter().map(|v| act.apply(*v)).collect();
        let mut g = [0.0; 2];
        router.lin2.forward(&ract, &mut g);
        let b = softmax_pair(g[0] + noise[l][0], g[1] + noise[l][1], tau).0;

        let block = &model.blocks[l];
        let mut bpre = vec![0.0; cfg.block_hidden];
        block.lin1.forward(&x, &mut bpre);
        let bact: Vec<f64> = bpre.iter().map(|v| act.apply(*v)).collect();
        let mut f = vec![0.0; cfg.embed_dim];
        block.lin2.forward(&bact, &mut f);
        for (xi, fi) in x.iter_mut().zip(&f) {
            *xi += b * *fi;
        }

        router_pre.push(rpre);
        router_act.push(ract);
        block_pre.push(bpre);
        block_act.push(bact);
        block_out.push(f);
        beta.push(b);
    }

    let mut head_logits = vec![0.0; cfg.num_classes];
    model.head.forward(&x, &mut head_logits);
    states.push(x);

    TokenCache {
        states,
        block_pre,
        block_act,
        block_out,
        router_pre,
        router_act,
        beta,
        head_logits,
    }
}

fn assemble_parts(
    ce_sum: f64,
    r_soft_sum: f64,
    ent_sum: f64,
    tokens: usize,
    decisions: usize,
    r_hard: f64,
    weights: &LossWeights,
) -> SurrogateParts {
    let ce = ce_sum / tokens as f64;
    let soft_exec_ratio = r_soft_sum / decisions as f64;
    let entropy = ent_sum / decisions as f64;
    let sign = rate_sign(r_hard, weights.r_target);
    SurrogateParts {
        ce,
        soft_exec_ratio,
        entropy,
        hard_exec_ratio: r_hard,
        rate_sign: sign,
        objective: ce + weights.lambda1 * sign * (soft_exec_ratio - weights.r_target)
            - weights.lambda2 * entropy,
    }
}

/// Evaluate the surrogate objective as a pure function of the parameters,
/// holding the noise grid fixed. This is the scalar whose exact gradient
/// [`backward`] computes, exposed for finite-difference verification.
pub fn surrogate_objective(
    model: &Model,
    inputs: &[&[f32]],
    labels: &[usize],
    tau: f64,
    noise: &[[f64; 2]],
    weights: &LossWeights,
) -> Result<SurrogateParts> {
    weights.validate()?;
    check_batch(inputs, labels, model.config.num_classes)?;
    let layers = model.num_layers();
    let hard = model.forward_train_with_noise(inputs, tau, noise)?;
    let r_hard = hard.trace.execution_ratio();

    let (mut ce_sum, mut r_soft_sum, mut ent_sum) = (0.0, 0.0, 0.0);
    for (t, input) in inputs.iter().enumerate() {
        let cache = soft_token_pass(model, input, &noise[t * layers..(t + 1) * layers], tau);
        ce_sum -= log_softmax_at(&cache.head_logits, labels[t]);
        for &b in &cache.beta {
            r_soft_sum += b;
            ent_sum -= xlnx(b) + xlnx(1.0 - b);
        }
    }
    Ok(assemble_parts(
        ce_sum,
        r_soft_sum,
        ent_sum,
        inputs.len(),
        inputs.len() * layers,
        r_hard,
        weights,
    ))
}

/// Exact gradient of the surrogate objective. `trace` must come from a
/// training forward pass of `model` on these `inputs`; it supplies the noise
/// grid, the temperature, and the hard execution ratio.
pub fn backward(
    model: &Model,
    inputs: &[&[f32]],
    labels: &[usize],
    trace: &Trace,
    weights: &LossWeights,
) -> Result<(SurrogateParts, Gradients)> {
    weights.validate()?;
    check_batch(inputs, labels, model.config.num_classes)?;
    let tau = trace.tau.ok_or_else(|| {
        Error::invalid("trace", "gradients need a training trace; inference traces have no temperature")
    })?;
    let layers = model.num_layers();
    if trace.noise.len() != inputs.len() * layers {
        return Err(Error::ShapeMismatch {
            context: "backward noise grid".into(),
            expected: format!("{} pairs", inputs.len() * layers),
            actual: format!("{} pairs", trace.noise.len()),
        });
    }
    let cfg = &model.config;
    let act = cfg.activation;
    let tokens = inputs.len() as f64;
    let decisions = (inputs.len() * layers) as f64;
    let r_hard = trace.execution_ratio();
    let rate_coeff = weights.lambda1 * rate_sign(r_hard, weights.r_target) / decisions;
    let ent_coeff = weights.lambda2 / decisions;

    let mut grads = Gradients::zeros_like(model);
    let (mut ce_sum, mut r_soft_sum, mut ent_sum) = (0.0, 0.0, 0.0);

    for (t, input) in inputs.iter().enumerate() {
        let cache = soft_token_pass(model, input, &trace.noise[t * layers..(t + 1) * layers], tau);
        ce_sum -= log_softmax_at(&cache.head_logits, labels[t]);
        for &b in &cache.beta {
            r_soft_sum += b;
            ent_sum -= xlnx(b) + xlnx(1.0 - b);
        }

        // Head: d(ce)/d(logits) = (softmax - onehot) / tokens.
        let mut dz = softmax(&cache.head_logits, 1.0)?;
        dz[labels[t]] -= 1.0;
        for v in &mut dz {
            *v /= tokens;
        }
        grads.head.accumulate(&dz, &cache.states[layers]);
        let mut dx = vec![0.0; cfg.embed_dim];
        model.head.w.matvec_t(&dz, &mut dx);

        for l in (0..layers).rev() {
            let beta = cache.beta[l];
            let comp = 1.0 - beta;
            let x_l = &cache.states[l];

            // Decision gradient through the temperature softmax, written so
            // beta -> 0 or 1 yields exact zeros instead of 0 * ln 0.
            let stream: f64 = dx.iter().zip(&cache.block_out[l]).map(|(d, f)| d * f).sum();
            let t0 = beta * (stream + rate_coeff) + ent_coeff * (xlnx(beta) + beta);
            let t1 = ent_coeff * (xlnx(comp) + comp);
            let tsum = t0 + t1;
            let dy = [(t0 - beta * tsum) / tau, (t1 - comp * tsum) / tau];

            // Block path: the soft stream forwarded beta * f_l(x_l).
            let block = &model.blocks[l];
            let df: Vec<f64> = dx.iter().map(|v| beta * v).collect();
            grads.blocks[l].1.accumulate(&df, &cache.block_act[l]);
            let mut dh = vec![0.0; cfg.block_hidden];
            block.lin2.w.matvec_t(&df, &mut dh);
            for (dhi, pre) in dh.iter_mut().zip(&cache.block_pre[l]) {
                *dhi *= act.derivative(*pre);
            }
            grads.blocks[l].0.accumulate(&dh, x_l);
            let mut dx_block = vec![0.0; cfg.embed_dim];
            block.lin1.w.matvec_t(&dh, &mut dx_block);

            // Router path.
            let router = &model.routers[l];
            grads.routers[l].1.accumulate(&dy, &cache.router_act[l]);
            let mut dr = vec![0.0; cfg.router_hidden];
            router.lin2.w.matvec_t(&dy, &mut dr);
            for (dri, pre) in dr.iter_mut().zip(&cache.router_pre[l]) {
                *dri *= act.derivative(*pre);
            }
            grads.routers[l].0.accumulate(&dr, x_l);
            let mut dx_router = vec![0.0; cfg.embed_dim];
            router.lin1.w.matvec_t(&dr, &mut dx_router);

            // Residual: identity plus both branch sensitivities.
            for ((di, bi), ri) in dx.iter_mut().zip(&dx_block).zip(&dx_router) {
                *di += bi + ri;
            }
        }

        let wide: Vec<f64> = input.iter().map(|v| *v as f64).collect();
        grads.embed.accumulate(&dx, &wide);
    }

    let parts = assemble_parts(
        ce_sum,
        r_soft_sum,
        ent_sum,
        inputs.len(),
        inputs.len() * layers,
        r_hard,
        weights,
    );
    Ok((parts, grads))
}
