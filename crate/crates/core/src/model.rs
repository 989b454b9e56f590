//! Pre-LN transformer encoder with a masked-language-model head.
//!
//! Blocks can be skipped per step through a [`LayerPlan`]; kept blocks scale
//! their residual branches by the plan's `1/p`. [`stack_model`] doubles depth
//! by appending a copy of the block list.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, Tape, Var};
use crate::data::MaskedBatch;
use crate::error::{Error, Result};
use crate::optim::OptimizerState;
use crate::params::ParamTree;
use crate::scalar::Scalar;
use crate::tensor::{Tensor, row_nll};

pub const INIT_STD: f64 = 0.02;

// Per-block tensor slots.
pub const LN1_GAIN: usize = 0;
pub const LN1_BIAS: usize = 1;
pub const WQ: usize = 2;
pub const BQ: usize = 3;
// No key bias: softmax is invariant to it, so its gradient is identically zero.
pub const WK: usize = 4;
pub const WV: usize = 5;
pub const BV: usize = 6;
pub const WO: usize = 7;
pub const BO: usize = 8;
pub const LN2_GAIN: usize = 9;
pub const LN2_BIAS: usize = 10;
pub const W1: usize = 11;
pub const B1: usize = 12;
pub const W2: usize = 13;
pub const B2: usize = 14;
pub const TENSORS_PER_BLOCK: usize = 15;

const BLOCK_NAMES: [&str; TENSORS_PER_BLOCK] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.wv", "attn.bv", "attn.wo", "attn.bo", "ln2.gain",
    "ln2.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];
const PREFIX_NAMES: [&str; 2] = ["tok_emb", "pos_emb"];
const SUFFIX_NAMES: [&str; 4] = ["ln_f.gain", "ln_f.bias", "head.w", "head.b"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 8,
            d_model: 64,
            n_heads: 2,
            d_ff: 256,
            vocab_size: 80,
            seq_len: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.vocab_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn with_layers(mut self, num_layers: usize) -> Self {
        self.num_layers = num_layers;
        self
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    fn block_shapes(&self) -> [Vec<usize>; TENSORS_PER_BLOCK] {
        let (d, f) = (self.d_model, self.d_ff);
        [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![d, f],
            vec![f],
            vec![f, d],
            vec![d],
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<S> {
    pub config: ModelConfig,
    pub tensors: ParamTree<Tensor<S>>,
}

#[derive(Clone, Copy)]
enum Fill {
    Normal,
    Ones,
    Zeros,
}

fn fill_for(name: &str) -> Fill {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    if leaf == "gain" {
        Fill::Ones
    } else if leaf.starts_with('b') {
        Fill::Zeros
    } else {
        Fill::Normal
    }
}

/// Tensor shapes of a model, in parameter layout.
pub fn init_layout(config: &ModelConfig) -> Result<ParamTree<Vec<usize>>> {
    config.validate()?;
    let (d, v, s) = (config.d_model, config.vocab_size, config.seq_len);
    Ok(ParamTree {
        prefix: vec![vec![v, d], vec![s, d]],
        blocks: (0..config.num_layers).map(|_| config.block_shapes().to_vec()).collect(),
        suffix: vec![vec![d], vec![d], vec![d, v], vec![v]],
    })
}

/// Draws weights from N(0, 0.02²); layernorm gains 1, biases 0.
pub fn init_model<S: Scalar, R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<ModelParams<S>> {
    let layout = init_layout(config)?;
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let names = layout_names(config.num_layers);
    let shapes: Vec<Vec<usize>> = layout.iter().cloned().collect();
    let tensors = names.iter().zip(shapes).map(|(name, shape)| match fill_for(name) {
        Fill::Ones => Tensor::full(&shape, S::one()),
        Fill::Zeros => Tensor::zeros(&shape),
        Fill::Normal => {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| S::of(normal.sample(rng))).collect();
            Tensor::new(shape, data).expect("shape product")
        }
    });
    let tensors = layout.with_layout_of(tensors.collect::<Vec<_>>()).expect("same layout");
    Ok(ModelParams {
        config: *config,
        tensors,
    })
}

fn layout_names(blocks: usize) -> Vec<String> {
    let mut out: Vec<String> = PREFIX_NAMES.iter().map(|s| s.to_string()).collect();
    for i in 0..blocks {
        out.extend(BLOCK_NAMES.iter().map(|n| format!("blocks.{i}.{n}")));
    }
    out.extend(SUFFIX_NAMES.iter().map(|s| s.to_string()));
    out
}

impl<S: Scalar> ModelParams<S> {
    pub fn num_blocks(&self) -> usize {
        self.tensors.blocks.len()
    }

    /// Canonical tensor names in flat order.
    pub fn names(&self) -> Vec<String> {
        layout_names(self.num_blocks())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn block_parameter_count(&self) -> usize {
        self.tensors.blocks.iter().flatten().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Checks tensor count and shapes against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.num_blocks() != self.config.num_layers {
            return Err(Error::Contract(format!(
                "{} blocks but config says {} layers",
                self.num_blocks(),
                self.config.num_layers
            )));
        }
        let c = &self.config;
        let expect_prefix = [vec![c.vocab_size, c.d_model], vec![c.seq_len, c.d_model]];
        let expect_suffix = [
            vec![c.d_model],
            vec![c.d_model],
            vec![c.d_model, c.vocab_size],
            vec![c.vocab_size],
        ];
        let ok = self.tensors.prefix.len() == 2
            && self.tensors.suffix.len() == 4
            && self
                .tensors
                .prefix
                .iter()
                .zip(&expect_prefix)
                .all(|(t, s)| t.shape() == s.as_slice())
            && self
                .tensors
                .suffix
                .iter()
                .zip(&expect_suffix)
                .all(|(t, s)| t.shape() == s.as_slice())
            && self.tensors.blocks.iter().all(|b| {
                b.len() == TENSORS_PER_BLOCK && b.iter().zip(c.block_shapes()).all(|(t, s)| t.shape() == s.as_slice())
            });
        if !ok {
            return Err(Error::Contract("parameter shapes do not match the model config".into()));
        }
        Ok(())
    }
}

/// Per-block keep flags and residual scales for one forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub keep: Vec<bool>,
    pub scale: Vec<f64>,
}

impl LayerPlan {
    /// Every block kept with unit scale; the evaluation plan.
    pub fn all(n: usize) -> Self {
        Self {
            keep: vec![true; n],
            scale: vec![1.0; n],
        }
    }

    /// Keeps exactly the listed flags, unit scale.
    pub fn from_keep(keep: Vec<bool>) -> Self {
        let n = keep.len();
        Self {
            keep,
            scale: vec![1.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn active(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Loss of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmOutput<S> {
    /// Mean cross-entropy over all masked positions of the batch.
    pub loss: S,
    /// Mean cross-entropy over each example's masked positions.
    pub per_example: Vec<S>,
}

/// A recorded forward pass, ready for backward.
pub struct ForwardGraph<S> {
    pub tape: Tape<S>,
    pub logits: Var,
    pub loss: Var,
}

pub(crate) fn check_batch<S: Scalar>(params: &ModelParams<S>, batch: &MaskedBatch, plan: &LayerPlan) -> Result<()> {
    let c = &params.config;
    if plan.len() != params.num_blocks() {
        return Err(Error::Contract(format!(
            "layer plan has {} entries for {} blocks",
            plan.len(),
            params.num_blocks()
        )));
    }
    if plan.scale.iter().any(|&s| !(s >= 1.0) || !s.is_finite()) {
        return Err(Error::Contract("layer plan scales must be finite and >= 1".into()));
    }
    if batch.seq_len != c.seq_len {
        return Err(Error::shape(
            "forward_mlm",
            format!("batch seq_len {} vs model seq_len {}", batch.seq_len, c.seq_len),
        ));
    }
    let n = batch.batch_size * batch.seq_len;
    if batch.inputs.len() != n || batch.targets.len() != n || batch.mask.len() != n || batch.batch_size == 0 {
        return Err(Error::shape(
            "forward_mlm",
            "batch arrays do not match batch_size x seq_len",
        ));
    }
    if let Some(&bad) = batch.inputs.iter().chain(&batch.targets).find(|&&t| t >= c.vocab_size) {
        return Err(Error::shape(
            "forward_mlm",
            format!("token id {bad} >= vocab {}", c.vocab_size),
        ));
    }
    if (0..batch.batch_size).any(|i| batch.example_masked_count(i) == 0) {
        return Err(Error::NoMaskedPositions);
    }
    Ok(())
}

/// Records the forward pass up to `[B*S, vocab]` logits and the MLM loss.
pub fn record_forward<S: Scalar>(
    params: &ModelParams<S>,
    batch: &MaskedBatch,
    plan: &LayerPlan,
) -> Result<ForwardGraph<S>> {
    check_batch(params, batch, plan)?;
    let mut tape = Tape::new();
    let logits = record_logits(&mut tape, params, batch, plan)?;
    let loss = tape.masked_cross_entropy(logits, &batch.targets, &batch.mask)?;
    Ok(ForwardGraph { tape, logits, loss })
}

/// Records the forward pass to logits only; every parameter is registered on
/// the tape under its flat index.
pub fn record_logits<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    batch: &MaskedBatch,
    plan: &LayerPlan,
) -> Result<Var> {
    let mut ids = 0usize;
    let mut reg = |tape: &mut Tape<S>, t: &Tensor<S>| {
        let v = tape.param(ParamId(ids), t.clone());
        ids += 1;
        v
    };
    let prefix: Vec<Var> = params.tensors.prefix.iter().map(|t| reg(tape, t)).collect();
    let blocks: Vec<Vec<Var>> = params
        .tensors
        .blocks
        .iter()
        .map(|b| b.iter().map(|t| reg(tape, t)).collect())
        .collect();
    let suffix: Vec<Var> = params.tensors.suffix.iter().map(|t| reg(tape, t)).collect();
    record_logits_with(tape, &params.config, &prefix, &blocks, &suffix, batch, plan)
}

/// Forward over already-registered parameter handles.
pub fn record_logits_with<S: Scalar>(
    tape: &mut Tape<S>,
    config: &ModelConfig,
    prefix: &[Var],
    blocks: &[Vec<Var>],
    suffix: &[Var],
    batch: &MaskedBatch,
    plan: &LayerPlan,
) -> Result<Var> {
    let (b, s, d, h) = (batch.batch_size, batch.seq_len, config.d_model, config.n_heads);
    let dh = config.head_dim();
    let positions: Vec<usize> = (0..b).flat_map(|_| 0..s).collect();
    let tok = tape.embed_lookup(prefix[0], &batch.inputs)?;
    let pos = tape.embed_lookup(prefix[1], &positions)?;
    let mut x = tape.add(tok, pos)?;
    let att_scale = S::of(1.0 / (dh as f64).sqrt());

    for (i, w) in blocks.iter().enumerate() {
        if !plan.keep[i] {
            continue;
        }
        let residual_scale = S::of(plan.scale[i]);
        let scaled = |tape: &mut Tape<S>, v: Var| {
            if plan.scale[i] == 1.0 {
                v
            } else {
                tape.scale(v, residual_scale)
            }
        };

        let ln1 = tape.layernorm(x, w[LN1_GAIN], w[LN1_BIAS])?;
        let heads = |tape: &mut Tape<S>, wi: usize, bi: Option<usize>| -> Result<Var> {
            let mut p = tape.matmul(ln1, w[wi])?;
            if let Some(bi) = bi {
                p = tape.add_bias(p, w[bi])?;
            }
            let p = tape.reshape(p, &[b, s, h, dh])?;
            let p = tape.swap_axes12(p)?;
            tape.reshape(p, &[b * h, s, dh])
        };
        let q = heads(tape, WQ, Some(BQ))?;
        let k = heads(tape, WK, None)?;
        let v = heads(tape, WV, Some(BV))?;
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, att_scale);
        let att = tape.softmax(scores);
        let ctx = tape.batch_matmul(att, v, false)?;
        let ctx = tape.reshape(ctx, &[b, h, s, dh])?;
        let ctx = tape.swap_axes12(ctx)?;
        let ctx = tape.reshape(ctx, &[b * s, d])?;
        let o = tape.matmul(ctx, w[WO])?;
        let o = tape.add_bias(o, w[BO])?;
        let o = scaled(tape, o);
        let x_mid = tape.add(x, o)?;

        let ln2 = tape.layernorm(x_mid, w[LN2_GAIN], w[LN2_BIAS])?;
        let f = tape.matmul(ln2, w[W1])?;
        let f = tape.add_bias(f, w[B1])?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, w[W2])?;
        let f = tape.add_bias(f, w[B2])?;
        let f = scaled(tape, f);
        x = tape.add(x_mid, f)?;
    }

    let xf = tape.layernorm(x, suffix[0], suffix[1])?;
    let logits = tape.matmul(xf, suffix[2])?;
    tape.add_bias(logits, suffix[3])
}

/// Mean loss per example from `[B*S, V]` logits.
pub fn per_example_losses<S: Scalar>(logits: &Tensor<S>, batch: &MaskedBatch) -> Vec<S> {
    let v = logits.last_dim();
    let s = batch.seq_len;
    (0..batch.batch_size)
        .map(|i| {
            let mut total = S::zero();
            let mut count = 0usize;
            for r in i * s..(i + 1) * s {
                if batch.mask[r] {
                    total += row_nll(&logits.data()[r * v..(r + 1) * v], batch.targets[r]);
                    count += 1;
                }
            }
            total / S::of(count.max(1) as f64)
        })
        .collect()
}

/// Forward pass without gradients.
pub fn forward_mlm<S: Scalar>(params: &ModelParams<S>, batch: &MaskedBatch, plan: &LayerPlan) -> Result<MlmOutput<S>> {
    let g = record_forward(params, batch, plan)?;
    Ok(MlmOutput {
        loss: g.tape.value(g.loss).item(),
        per_example: per_example_losses(g.tape.value(g.logits), batch),
    })
}

/// `[B*S, V]` logits for a batch.
pub fn logits<S: Scalar>(params: &ModelParams<S>, batch: &MaskedBatch, plan: &LayerPlan) -> Result<Tensor<S>> {
    let g = record_forward(params, batch, plan)?;
    Ok(g.tape.value(g.logits).clone())
}

/// Forward and backward; gradients come back in the parameter layout.
pub fn loss_and_grads<S: Scalar>(
    params: &ModelParams<S>,
    batch: &MaskedBatch,
    plan: &LayerPlan,
) -> Result<(MlmOutput<S>, ParamTree<Tensor<S>>)> {
    let g = record_forward(params, batch, plan)?;
    let grads = g.tape.backward(g.loss)?;
    let out = MlmOutput {
        loss: g.tape.value(g.loss).item(),
        per_example: per_example_losses(g.tape.value(g.logits), batch),
    };
    let tree = params
        .tensors
        .with_layout_of(grads.into_map().into_values())
        .ok_or_else(|| Error::Contract("gradient count does not match parameter count".into()))?;
    Ok((out, tree))
}

/// Doubles depth: the block list becomes itself followed by a copy, and the
/// optimizer buffers for blocks are duplicated the same way.
pub fn stack_model<S: Scalar>(
    params: &ModelParams<S>,
    state: &OptimizerState<S>,
) -> (ModelParams<S>, OptimizerState<S>) {
    let config = params.config.with_layers(params.num_blocks() * 2);
    (
        ModelParams {
            config,
            tensors: params.tensors.stacked(),
        },
        state.stacked(),
    )
}
