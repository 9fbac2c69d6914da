//! Neural building blocks: linear layers, layer norm, multi-head attention,
//! feed-forward/transformer blocks, the Adam optimizer and sinusoidal time
//! embeddings.
//!
//! Blocks are plain parameter containers. A forward pass first binds the
//! parameters onto a [`Tape`] (trainably or as frozen constants) and then
//! composes tape ops on the returned variable handles, so the same weights
//! can be trained on one tape and used read-only on many others.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};
use rand::Rng;
use std::collections::HashMap;

/// Uniform traversal over named parameters; drives the optimizer, the
/// checkpoint writer/loader and the freezing checksums.
pub trait ParamContainer<F> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>));
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>));
}

/// Collect `(name, shape)` pairs of a container, in canonical order.
pub fn param_names<F: Real>(c: &dyn ParamContainer<F>, prefix: &str) -> Vec<String> {
    let mut names = Vec::new();
    c.for_each_param(prefix, &mut |name, _| names.push(name));
    names
}

// ── Linear ──────────────────────────────────────────────────────────────

/// Fully connected layer storing `weight` as [out, in].
#[derive(Clone, Debug)]
pub struct LinearLayer<F> {
    pub weight: Tensor<F>,
    pub bias: Option<Tensor<F>>,
}

impl<F: Real> LinearLayer<F> {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) init for weight and bias.
    pub fn new<R: Rng>(in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = Tensor::uniform(vec![out_dim, in_dim], -bound, bound, rng);
        let bias = bias.then(|| Tensor::uniform(vec![out_dim], -bound, bound, rng));
        LinearLayer { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn bind(&self, tape: &mut Tape<F>, prefix: &str, trainable: bool) -> LinearVars {
        let w = if trainable {
            tape.param(format!("{prefix}.w"), &self.weight)
        } else {
            tape.constant(&self.weight)
        };
        let b = self.bias.as_ref().map(|bias| {
            if trainable {
                tape.param(format!("{prefix}.b"), bias)
            } else {
                tape.constant(bias)
            }
        });
        LinearVars { w, b }
    }
}

impl<F: Real> ParamContainer<F> for LinearLayer<F> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        f(format!("{prefix}.w"), &self.weight);
        if let Some(b) = &self.bias {
            f(format!("{prefix}.b"), b);
        }
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        f(format!("{prefix}.w"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(format!("{prefix}.b"), b);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Option<Var>,
}

/// x[n,in] -> x . W^T (+ bias).
pub fn linear_forward<F: Real>(tape: &mut Tape<F>, vars: &LinearVars, x: Var) -> Result<Var> {
    let wt = tape.transpose_last_two(vars.w)?;
    let y = tape.matmul(x, wt)?;
    match vars.b {
        Some(b) => tape.add_row_bias(y, b),
        None => Ok(y),
    }
}

// ── LayerNorm ───────────────────────────────────────────────────────────

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm<F> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Tensor::full(vec![dim], F::one()),
            beta: Tensor::zeros(vec![dim]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>, prefix: &str, trainable: bool) -> LayerNormVars {
        let (g, b) = if trainable {
            (
                tape.param(format!("{prefix}.g"), &self.gamma),
                tape.param(format!("{prefix}.b"), &self.beta),
            )
        } else {
            (tape.constant(&self.gamma), tape.constant(&self.beta))
        };
        LayerNormVars { g, b }
    }
}

impl<F: Real> ParamContainer<F> for LayerNorm<F> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        f(format!("{prefix}.g"), &self.gamma);
        f(format!("{prefix}.b"), &self.beta);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        f(format!("{prefix}.g"), &mut self.gamma);
        f(format!("{prefix}.b"), &mut self.beta);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormVars {
    pub g: Var,
    pub b: Var,
}

pub fn layer_norm_forward<F: Real>(
    tape: &mut Tape<F>,
    vars: &LayerNormVars,
    x: Var,
) -> Result<Var> {
    tape.layer_norm(x, vars.g, vars.b, F::from_f64(LAYER_NORM_EPS))
}

// ── Attention ───────────────────────────────────────────────────────────

/// Multi-head scaled-dot-product cross attention. Queries come from one
/// stream, keys/values from a context stream; projections carry no bias so
/// branch outputs compose additively.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock<F> {
    pub heads: usize,
    pub head_dim: usize,
    pub q_proj: LinearLayer<F>,
    pub k_proj: LinearLayer<F>,
    pub v_proj: LinearLayer<F>,
    pub out_proj: LinearLayer<F>,
}

impl<F: Real> CrossAttentionBlock<F> {
    pub fn new<R: Rng>(model_dim: usize, ctx_dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(model_dim % heads == 0, "model_dim must divide into heads");
        CrossAttentionBlock {
            heads,
            head_dim: model_dim / heads,
            q_proj: LinearLayer::new(model_dim, model_dim, false, rng),
            k_proj: LinearLayer::new(ctx_dim, model_dim, false, rng),
            v_proj: LinearLayer::new(ctx_dim, model_dim, false, rng),
            out_proj: LinearLayer::new(model_dim, model_dim, false, rng),
        }
    }

    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn bind(&self, tape: &mut Tape<F>, prefix: &str, trainable: bool) -> CrossAttentionVars {
        CrossAttentionVars {
            heads: self.heads,
            head_dim: self.head_dim,
            q: self.q_proj.bind(tape, &format!("{prefix}.q"), trainable),
            k: self.k_proj.bind(tape, &format!("{prefix}.k"), trainable),
            v: self.v_proj.bind(tape, &format!("{prefix}.v"), trainable),
            o: self.out_proj.bind(tape, &format!("{prefix}.o"), trainable),
        }
    }
}

impl<F: Real> ParamContainer<F> for CrossAttentionBlock<F> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.q_proj.for_each_param(&format!("{prefix}.q"), f);
        self.k_proj.for_each_param(&format!("{prefix}.k"), f);
        self.v_proj.for_each_param(&format!("{prefix}.v"), f);
        self.out_proj.for_each_param(&format!("{prefix}.o"), f);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.q_proj.for_each_param_mut(&format!("{prefix}.q"), f);
        self.k_proj.for_each_param_mut(&format!("{prefix}.k"), f);
        self.v_proj.for_each_param_mut(&format!("{prefix}.v"), f);
        self.out_proj.for_each_param_mut(&format!("{prefix}.o"), f);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CrossAttentionVars {
    pub heads: usize,
    pub head_dim: usize,
    pub q: LinearVars,
    pub k: LinearVars,
    pub v: LinearVars,
    pub o: LinearVars,
}

/// Head-split scaled-dot-product attention on already projected q/k/v
/// matrices, heads concatenated back on the feature axis. `mask` is an
/// additive bias on the [n_q, n_c] score matrix.
pub fn attention_core<F: Real>(
    tape: &mut Tape<F>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    head_dim: usize,
    mask: Option<&Tensor<F>>,
) -> Result<Var> {
    let scale = F::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let kt = tape.transpose_last_two(kh)?;
        let mut scores = tape.matmul(qh, kt)?;
        scores = tape.scale(scores, scale);
        if let Some(m) = mask {
            scores = tape.add_const(scores, m)?;
        }
        let attn = tape.softmax_lastdim(scores)?;
        outs.push(tape.matmul(attn, vh)?);
    }
    tape.concat(&outs, 1)
}

/// Full cross attention: project queries/context, attend, out-project.
pub fn cross_attention<F: Real>(
    tape: &mut Tape<F>,
    vars: &CrossAttentionVars,
    queries: Var,
    context: Var,
    mask: Option<&Tensor<F>>,
) -> Result<Var> {
    let model_dim = vars.heads * vars.head_dim;
    if tape.shape(queries).len() != 2 || tape.shape(queries)[1] != model_dim {
        return Err(Error::Dimension(format!(
            "cross_attention: query shape {:?} vs model dim {model_dim}",
            tape.shape(queries)
        )));
    }
    let q = linear_forward(tape, &vars.q, queries)?;
    let k = linear_forward(tape, &vars.k, context)?;
    let v = linear_forward(tape, &vars.v, context)?;
    let merged = attention_core(tape, q, k, v, vars.heads, vars.head_dim, mask)?;
    linear_forward(tape, &vars.o, merged)
}

// ── Feed-forward and transformer block ──────────────────────────────────

#[derive(Clone, Debug)]
pub struct FeedForward<F> {
    pub fc1: LinearLayer<F>,
    pub fc2: LinearLayer<F>,
}

impl<F: Real> FeedForward<F> {
    pub fn new<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForward {
            fc1: LinearLayer::new(dim, hidden, true, rng),
            fc2: LinearLayer::new(hidden, dim, true, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>, prefix: &str, trainable: bool) -> FeedForwardVars {
        FeedForwardVars {
            fc1: self.fc1.bind(tape, &format!("{prefix}.fc1"), trainable),
            fc2: self.fc2.bind(tape, &format!("{prefix}.fc2"), trainable),
        }
    }
}

impl<F: Real> ParamContainer<F> for FeedForward<F> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.fc1.for_each_param(&format!("{prefix}.fc1"), f);
        self.fc2.for_each_param(&format!("{prefix}.fc2"), f);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.fc1.for_each_param_mut(&format!("{prefix}.fc1"), f);
        self.fc2.for_each_param_mut(&format!("{prefix}.fc2"), f);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardVars {
    pub fc1: LinearVars,
    pub fc2: LinearVars,
}

pub fn feed_forward<F: Real>(tape: &mut Tape<F>, vars: &FeedForwardVars, x: Var) -> Result<Var> {
    let h = linear_forward(tape, &vars.fc1, x)?;
    let h = tape.gelu(h);
    linear_forward(tape, &vars.fc2, h)
}

/// Pre-norm transformer encoder block: self attention then feed-forward,
/// each with a residual connection.
#[derive(Clone, Debug)]
pub struct TransformerBlock<F> {
    pub ln1: LayerNorm<F>,
    pub attn: CrossAttentionBlock<F>,
    pub ln2: LayerNorm<F>,
    pub ff: FeedForward<F>,
}

impl<F: Real> TransformerBlock<F> {
    pub fn new<R: Rng>(dim: usize, heads: usize, ff_hidden: usize, rng: &mut R) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(dim),
            attn: CrossAttentionBlock::new(dim, dim, heads, rng),
            ln2: LayerNorm::new(dim),
            ff: FeedForward::new(dim, ff_hidden, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>, prefix: &str, trainable: bool) -> TransformerVars {
        TransformerVars {
            ln1: self.ln1.bind(tape, &format!("{prefix}.ln1"), trainable),
            attn: self.attn.bind(tape, &format!("{prefix}.attn"), trainable),
            ln2: self.ln2.bind(tape, &format!("{prefix}.ln2"), trainable),
            ff: self.ff.bind(tape, &format!("{prefix}.ff"), trainable),
        }
    }
}

impl<F: Real> ParamContainer<F> for TransformerBlock<F> {
    fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<F>)) {
        self.ln1.for_each_param(&format!("{prefix}.ln1"), f);
        self.attn.for_each_param(&format!("{prefix}.attn"), f);
        self.ln2.for_each_param(&format!("{prefix}.ln2"), f);
        self.ff.for_each_param(&format!("{prefix}.ff"), f);
    }
    fn for_each_param_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<F>)) {
        self.ln1.for_each_param_mut(&format!("{prefix}.ln1"), f);
        self.attn.for_each_param_mut(&format!("{prefix}.attn"), f);
        self.ln2.for_each_param_mut(&format!("{prefix}.ln2"), f);
        self.ff.for_each_param_mut(&format!("{prefix}.ff"), f);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TransformerVars {
    pub ln1: LayerNormVars,
    pub attn: CrossAttentionVars,
    pub ln2: LayerNormVars,
    pub ff: FeedForwardVars,
}

/// Self-attention transformer step; `mask` is the additive key mask shared
/// by all query positions.
pub fn transformer_forward<F: Real>(
    tape: &mut Tape<F>,
    vars: &TransformerVars,
    x: Var,
    mask: Option<&Tensor<F>>,
) -> Result<Var> {
    let normed = layer_norm_forward(tape, &vars.ln1, x)?;
    let attn = cross_attention(tape, &vars.attn, normed, normed, mask)?;
    let x = tape.add(x, attn)?;
    let normed = layer_norm_forward(tape, &vars.ln2, x)?;
    let ff = feed_forward(tape, &vars.ff, normed)?;
    tape.add(x, ff)
}

// ── Adam ────────────────────────────────────────────────────────────────

/// Adam with bias correction, moments keyed by parameter name.
pub struct Adam<F> {
    pub lr: F,
    pub beta1: F,
    pub beta2: F,
    pub eps: F,
    step: u64,
    m: HashMap<String, Vec<F>>,
    v: HashMap<String, Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(lr: F) -> Self {
        Adam {
            lr,
            beta1: F::from_f64(0.9),
            beta2: F::from_f64(0.999),
            eps: F::from_f64(1e-8),
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter of `model`, consuming `grads`.
    /// A parameter without a gradient entry is a broken contract.
    pub fn step<M: ParamContainer<F>>(
        &mut self,
        model: &mut M,
        prefix: &str,
        grads: &HashMap<String, Vec<F>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let bc1 = F::one() - self.beta1.powi(t as i32);
        let bc2 = F::one() - self.beta2.powi(t as i32);
        let mut missing: Option<String> = None;
        let (beta1, beta2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        let (m_map, v_map) = (&mut self.m, &mut self.v);
        model.for_each_param_mut(prefix, &mut |name, tensor| {
            let Some(g) = grads.get(&name) else {
                if missing.is_none() {
                    missing = Some(name);
                }
                return;
            };
            let n = tensor.data.len();
            let m = m_map.entry(name.clone()).or_insert_with(|| vec![F::zero(); n]);
            let v = v_map.entry(name).or_insert_with(|| vec![F::zero(); n]);
            for i in 0..n {
                m[i] = beta1 * m[i] + (F::one() - beta1) * g[i];
                v[i] = beta2 * v[i] + (F::one() - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        if let Some(name) = missing {
            return Err(Error::Contract(format!(
                "missing gradient for parameter {name}"
            )));
        }
        Ok(())
    }
}

// ── Time embedding ──────────────────────────────────────────────────────

/// Sinusoidal timestep embedding: first half sine, second half cosine, so
/// t = 0 maps to all-zero sines and all-one cosines. Deterministic in t.
pub fn time_embedding<F: Real>(t: usize, total_steps: usize, dim: usize) -> Result<Tensor<F>> {
    if t >= total_steps {
        return Err(Error::Contract(format!(
            "timestep {t} out of range 0..{total_steps}"
        )));
    }
    if dim % 2 != 0 {
        return Err(Error::Contract(format!(
            "time embedding dim must be even, got {dim}"
        )));
    }
    let half = dim / 2;
    let mut data = vec![F::zero(); dim];
    for i in 0..half {
        let freq = (-(i as f64) * (10000f64).ln() / half as f64).exp();
        let angle = t as f64 * freq;
        data[i] = F::from_f64(angle.sin());
        data[half + i] = F::from_f64(angle.cos());
    }
    Tensor::new(vec![dim], data)
}
