//! Routed residual MLP.
//!
//! The stack is `x_{l+1} = x_l + f_l(x_l)` when layer `l` executes and
//! `x_{l+1} = x_l` when it is bypassed. Each layer owns a two-logit router
//! `g_l(x_l) = [execute, bypass]` that reads the *current* residual state, so
//! gradients reach routers through the states they route.
//!
//! Inference thresholds the router probability: execute iff
//! `softmax(g_l)[0] >= theta`. At `theta = 0.5` this is exactly the argmax
//! rule. Training adds one pair of Gumbel draws per (token, layer), takes the
//! hard argmax of the noisy logits for the forward value, and records the
//! temperature-softened probabilities the backward pass differentiates.
//!
//! Parameters are stored in f32; all arithmetic runs in f64.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{argmax_pair, softmax_pair};
use crate::rng::Stream;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + gelu_inner(x).tanh()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = gelu_inner(x);
                let t = u.tanh();
                let sech2 = 1.0 - t * t;
                0.5 * (1.0 + t) + 0.5 * x * sech2 * gelu_inner_derivative(x)
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044_715;

fn gelu_inner(x: f64) -> f64 {
    GELU_C * (x + GELU_CUBIC * x * x * x)
}

fn gelu_inner_derivative(x: f64) -> f64 {
    GELU_C * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
        };
        f.write_str(name)
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::invalid(
                "activation",
                format!("unknown activation `{other}`; expected one of: tanh, relu, gelu"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub block_hidden: usize,
    pub router_hidden: usize,
    pub num_classes: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 6,
            embed_dim: 16,
            block_hidden: 96,
            router_hidden: 8,
            num_classes: 8,
            activation: Activation::Tanh,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::invalid(
                "num_layers",
                "must be >= 2 for routing to have any choices",
            ));
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("block_hidden", self.block_hidden),
            ("router_hidden", self.router_hidden),
        ] {
            if v == 0 {
                return Err(Error::invalid(name, "must be >= 1"));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes", "must be >= 2"));
        }
        Ok(())
    }

    /// Exact parameter count:
    /// embed `d(d+1)`, per layer block `h(d+1) + d(h+1)` and router
    /// `r(d+1) + 2(r+1)`, head `C(d+1)`.
    pub fn param_count(&self) -> usize {
        let (d, h, r, c, l) = (
            self.embed_dim,
            self.block_hidden,
            self.router_hidden,
            self.num_classes,
            self.num_layers,
        );
        d * (d + 1) + l * (h * (d + 1) + d * (h + 1) + r * (d + 1) + 2 * (r + 1)) + c * (d + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: Matrix,
    pub b: Vec<f32>,
}

impl Affine {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Affine {
            w: Matrix::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
        }
    }

    fn glorot(out_dim: usize, in_dim: usize, rng: &mut Stream) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut w = Matrix::zeros(out_dim, in_dim);
        for v in w.data_mut() {
            *v = rng.uniform_in(-limit, limit) as f32;
        }
        Affine {
            w,
            b: vec![0.0; out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn forward(&self, x: &[f64], out: &mut [f64]) {
        self.w.matvec(x, out);
        for (o, b) in out.iter_mut().zip(&self.b) {
            *o += *b as f64;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub lin1: Affine,
    pub lin2: Affine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    pub lin1: Affine,
    pub lin2: Affine,
}

/// Gap between the execute and bypass logits at a zero router input, set at
/// initialization so fresh models execute everything.
pub const INIT_ROUTER_LOGIT_GAP: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Affine,
    pub blocks: Vec<Block>,
    pub routers: Vec<Router>,
    pub head: Affine,
}

impl Model {
    /// Glorot-uniform block and hidden-router weights, zero biases. Router
    /// output layers start at zero weights with bias `[+gap/2, -gap/2]`, so
    /// the execute logit exceeds the bypass logit by exactly
    /// [`INIT_ROUTER_LOGIT_GAP`] for every input and the initial execution
    /// ratio is 1.
    pub fn init(config: &ModelConfig, rng: &mut Stream) -> Result<Model> {
        config.validate()?;
        let (d, h, r) = (config.embed_dim, config.block_hidden, config.router_hidden);
        let embed = Affine::glorot(d, d, rng);
        let mut blocks = Vec::with_capacity(config.num_layers);
        let mut routers = Vec::with_capacity(config.num_layers);
        for _ in 0..config.num_layers {
            blocks.push(Block {
                lin1: Affine::glorot(h, d, rng),
                lin2: Affine::glorot(d, h, rng),
            });
            let mut out = Affine::zeros(2, r);
            out.b[0] = (INIT_ROUTER_LOGIT_GAP / 2.0) as f32;
            out.b[1] = -(INIT_ROUTER_LOGIT_GAP / 2.0) as f32;
            routers.push(Router {
                lin1: Affine::glorot(r, d, rng),
                lin2: out,
            });
        }
        let head = Affine::glorot(config.num_classes, d, rng);
        Ok(Model {
            config: config.clone(),
            embed,
            blocks,
            routers,
            head,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    /// Checkpoint naming: each affine contributes `{prefix}/w{suffix}` and
    /// `{prefix}/b{suffix}` tensors. Layer indices are zero-padded so
    /// lexicographic key order follows layer order.
    pub fn named_affines(&self) -> Vec<(String, String, &Affine)> {
        let mut out = vec![("embed".to_string(), String::new(), &self.embed)];
        for (l, (block, router)) in self.blocks.iter().zip(&self.routers).enumerate() {
            out.push((format!("block{l:02}"), "1".to_string(), &block.lin1));
            out.push((format!("block{l:02}"), "2".to_string(), &block.lin2));
            out.push((format!("router{l:02}"), "1".to_string(), &router.lin1));
            out.push((format!("router{l:02}"), "2".to_string(), &router.lin2));
        }
        out.push(("head".to_string(), String::new(), &self.head));
        out
    }

    pub fn named_affines_mut(&mut self) -> Vec<(String, String, &mut Affine)> {
        let mut out = vec![("embed".to_string(), String::new(), &mut self.embed)];
        for (l, (block, router)) in self
            .blocks
            .iter_mut()
            .zip(self.routers.iter_mut())
            .enumerate()
        {
            out.push((format!("block{l:02}"), "1".to_string(), &mut block.lin1));
            out.push((format!("block{l:02}"), "2".to_string(), &mut block.lin2));
            out.push((format!("router{l:02}"), "1".to_string(), &mut router.lin1));
            out.push((format!("router{l:02}"), "2".to_string(), &mut router.lin2));
        }
        out.push(("head".to_string(), String::new(), &mut self.head));
        out
    }

    fn affines(&self) -> Vec<&Affine> {
        let mut out = vec![&self.embed];
        for (block, router) in self.blocks.iter().zip(&self.routers) {
            out.extend([&block.lin1, &block.lin2, &router.lin1, &router.lin2]);
        }
        out.push(&self.head);
        out
    }

    fn affines_mut(&mut self) -> Vec<&mut Affine> {
        let mut out = vec![&mut self.embed];
        for (block, router) in self.blocks.iter_mut().zip(self.routers.iter_mut()) {
            out.extend([
                &mut block.lin1,
                &mut block.lin2,
                &mut router.lin1,
                &mut router.lin2,
            ]);
        }
        out.push(&mut self.head);
        out
    }

    /// Flat parameter vector: affine by affine, weights row-major then bias.
    pub fn flatten_params(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.config.param_count());
        for a in self.affines() {
            out.extend_from_slice(a.w.data());
            out.extend_from_slice(&a.b);
        }
        out
    }

    pub fn load_flat_params(&mut self, flat: &[f32]) -> Result<()> {
        let expected = self.config.param_count();
        if flat.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "load_flat_params".into(),
                expected: format!("{expected} values"),
                actual: format!("{} values", flat.len()),
            });
        }
        let mut offset = 0;
        for a in self.affines_mut() {
            let wn = a.w.rows() * a.w.cols();
            a.w.data_mut().copy_from_slice(&flat[offset..offset + wn]);
            offset += wn;
            let bn = a.b.len();
            a.b.copy_from_slice(&flat[offset..offset + bn]);
            offset += bn;
        }
        debug_assert_eq!(offset, expected);
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        for (prefix, suffix, a) in self.named_affines() {
            a.w.check_finite(&format!("{prefix}/w{suffix}"))?;
            if let Some(i) = a.b.iter().position(|v| !v.is_finite()) {
                return Err(Error::non_finite_at(format!("{prefix}/b{suffix}"), i));
            }
        }
        Ok(())
    }

    fn check_inputs(&self, inputs: &[&[f32]]) -> Result<()> {
        for (t, x) in inputs.iter().enumerate() {
            if x.len() != self.config.embed_dim {
                return Err(Error::ShapeMismatch {
                    context: format!("forward input, token {t}"),
                    expected: format!("{} dims", self.config.embed_dim),
                    actual: format!("{} dims", x.len()),
                });
            }
        }
        Ok(())
    }

    /// Threshold-rule forward: execute layer `l` iff `softmax(g_l)[0] >= theta`.
    pub fn forward_infer(&self, inputs: &[&[f32]], theta: f64) -> Result<Forward> {
        if !(theta > 0.0 && theta < 1.0) {
            return Err(Error::invalid(
                "theta",
                format!("must lie strictly inside (0, 1), got {theta}"),
            ));
        }
        self.check_inputs(inputs)?;
        let layers = self.num_layers();
        let mut fwd = Forward::with_capacity(inputs.len(), layers, None);
        let mut scratch = Scratch::new(&self.config);
        for input in inputs {
            let mut x = scratch.embed_input(self, input);
            for l in 0..layers {
                let g = scratch.router_logits(self, l, &x);
                let p = softmax_pair(g[0], g[1], 1.0);
                let execute = p.0 >= theta;
                if execute {
                    let f = scratch.block_output(self, l, &x);
                    for (xi, fi) in x.iter_mut().zip(f) {
                        *xi += fi;
                    }
                }
                fwd.trace.logits.push(g);
                fwd.trace.probs.push([p.0, p.1]);
                fwd.trace.execute.push(execute);
            }
            fwd.class_logits.push(scratch.head_logits(self, &x));
        }
        Ok(fwd)
    }

    /// Noisy hard forward for training. Draws one Gumbel pair per
    /// (token, layer) from `rng` in token-major, layer-minor order.
    pub fn forward_train(&self, inputs: &[&[f32]], tau: f64, rng: &mut Stream) -> Result<Forward> {
        let n = inputs.len() * self.num_layers();
        let noise: Vec<[f64; 2]> = (0..n).map(|_| [rng.gumbel(), rng.gumbel()]).collect();
        self.forward_train_with_noise(inputs, tau, &noise)
    }

    /// Hard decisions come from `argmax(g + noise)`; the recorded soft
    /// decisions are `softmax((g + noise) / tau)`. The residual stream itself
    /// advances with the hard decision, which is what makes a zero noise grid
    /// coincide with `forward_infer` at `theta = 0.5`.
    pub fn forward_train_with_noise(
        &self,
        inputs: &[&[f32]],
        tau: f64,
        noise: &[[f64; 2]],
    ) -> Result<Forward> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::invalid("tau", format!("must be > 0, got {tau}")));
        }
        self.check_inputs(inputs)?;
        let layers = self.num_layers();
        if noise.len() != inputs.len() * layers {
            return Err(Error::ShapeMismatch {
                context: "forward_train noise grid".into(),
                expected: format!("{} pairs", inputs.len() * layers),
                actual: format!("{} pairs", noise.len()),
            });
        }
        let mut fwd = Forward::with_capacity(inputs.len(), layers, Some(tau));
        let mut scratch = Scratch::new(&self.config);
        for (t, input) in inputs.iter().enumerate() {
            let mut x = scratch.embed_input(self, input);
            for l in 0..layers {
                let g = scratch.router_logits(self, l, &x);
                let p = softmax_pair(g[0], g[1], 1.0);
                let pi = noise[t * layers + l];
                let y = [g[0] + pi[0], g[1] + pi[1]];
                let execute = argmax_pair(y[0], y[1]) == 0;
                let soft = softmax_pair(y[0], y[1], tau);
                if execute {
                    let f = scratch.block_output(self, l, &x);
                    for (xi, fi) in x.iter_mut().zip(f) {
                        *xi += fi;
                    }
                }
                fwd.trace.logits.push(g);
                fwd.trace.probs.push([p.0, p.1]);
                fwd.trace.execute.push(execute);
                fwd.trace.soft.push([soft.0, soft.1]);
                fwd.trace.noise.push(pi);
            }
            fwd.class_logits.push(scratch.head_logits(self, &x));
        }
        Ok(fwd)
    }
}

/// Reusable f64 buffers for single-token forward passes.
struct Scratch {
    block_hidden: Vec<f64>,
    block_out: Vec<f64>,
    router_hidden: Vec<f64>,
    activation: Activation,
}

impl Scratch {
    fn new(config: &ModelConfig) -> Self {
        Scratch {
            block_hidden: vec![0.0; config.block_hidden],
            block_out: vec![0.0; config.embed_dim],
            router_hidden: vec![0.0; config.router_hidden],
            activation: config.activation,
        }
    }

    fn embed_input(&mut self, model: &Model, input: &[f32]) -> Vec<f64> {
        let wide: Vec<f64> = input.iter().map(|v| *v as f64).collect();
        let mut x = vec![0.0; model.config.embed_dim];
        model.embed.forward(&wide, &mut x);
        x
    }

    fn router_logits(&mut self, model: &Model, layer: usize, x: &[f64]) -> [f64; 2] {
        let router = &model.routers[layer];
        router.lin1.forward(x, &mut self.router_hidden);
        self.router_hidden
            .iter_mut()
            .for_each(|h| *h = self.activation.apply(*h));
        let mut g = [0.0; 2];
        router.lin2.forward(&self.router_hidden, &mut g);
        g
    }

    fn block_output(&mut self, model: &Model, layer: usize, x: &[f64]) -> &[f64] {
        let block = &model.blocks[layer];
        block.lin1.forward(x, &mut self.block_hidden);
        self.block_hidden
            .iter_mut()
            .for_each(|h| *h = self.activation.apply(*h));
        block.lin2.forward(&self.block_hidden, &mut self.block_out);
        &self.block_out
    }

    fn head_logits(&mut self, model: &Model, x: &[f64]) -> Vec<f64> {
        let mut logits = vec![0.0; model.config.num_classes];
        model.head.forward(x, &mut logits);
        logits
    }
}

/// Per-token, per-layer routing record plus final class logits.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Token-major class logits from the hard execution path.
    pub class_logits: Vec<Vec<f64>>,
    pub trace: Trace,
}

impl Forward {
    fn with_capacity(tokens: usize, layers: usize, tau: Option<f64>) -> Self {
        let n = tokens * layers;
        Forward {
            class_logits: Vec::with_capacity(tokens),
            trace: Trace {
                num_layers: layers,
                tau,
                logits: Vec::with_capacity(n),
                probs: Vec::with_capacity(n),
                execute: Vec::with_capacity(n),
                soft: if tau.is_some() { Vec::with_capacity(n) } else { Vec::new() },
                noise: if tau.is_some() { Vec::with_capacity(n) } else { Vec::new() },
            },
        }
    }

    /// Predicted class per token (argmax of logits, ties to lower index).
    pub fn predictions(&self) -> Vec<usize> {
        self.class_logits
            .iter()
            .map(|logits| {
                let mut best = 0;
                for (i, v) in logits.iter().enumerate() {
                    if *v > logits[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Trace {
    pub num_layers: usize,
    /// Temperature of the recorded soft decisions; `None` for inference traces.
    pub tau: Option<f64>,
    /// Router logits `[execute, bypass]`, index `t * num_layers + l`.
    pub logits: Vec<[f64; 2]>,
    /// `softmax(logits)` at temperature 1.
    pub probs: Vec<[f64; 2]>,
    /// Hard decision: true = execute.
    pub execute: Vec<bool>,
    /// Training only: `softmax((logits + noise) / tau)`.
    pub soft: Vec<[f64; 2]>,
    /// Training only: the Gumbel pair added at each decision.
    pub noise: Vec<[f64; 2]>,
}

impl Trace {
    pub fn num_tokens(&self) -> usize {
        if self.num_layers == 0 {
            0
        } else {
            self.execute.len() / self.num_layers
        }
    }

    pub fn idx(&self, token: usize, layer: usize) -> usize {
        token * self.num_layers + layer
    }

    /// Fraction of executed decisions over all (token, layer) pairs.
    pub fn execution_ratio(&self) -> f64 {
        if self.execute.is_empty() {
            return 0.0;
        }
        self.execute.iter().filter(|&&e| e).count() as f64 / self.execute.len() as f64
    }

    /// Execution ratio of each layer across tokens.
    pub fn per_layer_execution_ratio(&self) -> Vec<f64> {
        let tokens = self.num_tokens();
        let mut counts = vec![0usize; self.num_layers];
        for t in 0..tokens {
            for l in 0..self.num_layers {
                if self.execute[self.idx(t, l)] {
                    counts[l] += 1;
                }
            }
        }
        counts
            .into_iter()
            .map(|c| if tokens == 0 { 0.0 } else { c as f64 / tokens as f64 })
            .collect()
    }

    /// Execute-minus-bypass logit gap per decision.
    pub fn logit_gaps(&self) -> Vec<f64> {
        self.logits.iter().map(|g| g[0] - g[1]).collect()
    }

    /// Per-layer execution ratio that a threshold `theta` would induce on
    /// this trace's recorded probabilities. Thresholding a fixed trace is
    /// weakly monotone in `theta` by construction; re-running the forward at
    /// a different `theta` is not, because earlier decisions shift the
    /// states later routers see.
    pub fn per_layer_ratio_at_threshold(&self, theta: f64) -> Vec<f64> {
        let tokens = self.num_tokens();
        let mut counts = vec![0usize; self.num_layers];
        for t in 0..tokens {
            for l in 0..self.num_layers {
                if self.probs[self.idx(t, l)][0] >= theta {
                    counts[l] += 1;
                }
            }
        }
        counts
            .into_iter()
            .map(|c| if tokens == 0 { 0.0 } else { c as f64 / tokens as f64 })
            .collect()
    }

    /// Per-token execution bit-vectors, token-major.
    pub fn token_paths(&self) -> Vec<&[bool]> {
        (0..self.num_tokens())
            .map(|t| &self.execute[t * self.num_layers..(t + 1) * self.num_layers])
            .collect()
    }
}
