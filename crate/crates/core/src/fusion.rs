//! Cross-modal fusion: per-frame feature concatenation of the two masked
//! embedding streams, an MLP down to width D, a positional encoding, and a
//! pre-norm transformer stack with full bidirectional self-attention.
//!
//! Residual output projections (attention out-projection and the second
//! feed-forward matrix) start at zero, so a freshly initialized block is an
//! exact identity and training moves away from it smoothly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{linear, staged_param, BufId, ParameterSet, Staged, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionalKind {
    /// Grouped same-padded convolution over time, added to the input.
    Conv,
    /// Fixed sine/cosine table added to the input.
    Sinusoidal,
    /// No positional information; the stack is permutation-equivariant.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub n_blocks: usize,
    /// Embedding and attention width D.
    pub dim: usize,
    pub ff_dim: usize,
    pub n_heads: usize,
    /// Hidden units of the post-concatenation MLP.
    pub mlp_hidden: usize,
    pub positional: PositionalKind,
    pub positional_kernel: usize,
    pub positional_groups: usize,
    pub dropout: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig::desk()
    }
}

impl FusionConfig {
    pub fn desk() -> Self {
        FusionConfig {
            n_blocks: 2,
            dim: 32,
            ff_dim: 64,
            n_heads: 4,
            mlp_hidden: 64,
            positional: PositionalKind::Conv,
            positional_kernel: 5,
            positional_groups: 4,
            dropout: 0.1,
        }
    }

    pub fn full_scale() -> Self {
        FusionConfig {
            n_blocks: 12,
            dim: 512,
            ff_dim: 2048,
            n_heads: 8,
            mlp_hidden: 2048,
            positional: PositionalKind::Conv,
            positional_kernel: 127,
            positional_groups: 16,
            dropout: 0.1,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.ff_dim == 0 || self.mlp_hidden == 0 {
            return Err(Error::config("fusion widths must be >= 1"));
        }
        if self.n_heads == 0 || self.dim % self.n_heads != 0 {
            return Err(Error::config(format!(
                "attention dim {} not divisible by {} heads",
                self.dim, self.n_heads
            )));
        }
        match self.positional {
            PositionalKind::Conv => {
                if self.positional_kernel % 2 == 0 || self.positional_kernel == 0 {
                    return Err(Error::config(format!(
                        "positional kernel {} must be odd",
                        self.positional_kernel
                    )));
                }
                if self.positional_groups == 0 || self.dim % self.positional_groups != 0 {
                    return Err(Error::config(format!(
                        "positional groups {} do not divide dim {}",
                        self.positional_groups, self.dim
                    )));
                }
            }
            PositionalKind::Sinusoidal => {
                if self.dim % 2 != 0 {
                    return Err(Error::config(
                        "sinusoidal positional encoding needs an even dim",
                    ));
                }
            }
            PositionalKind::None => {}
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Addresses the dropout masks of one forward pass. Masks are a pure
/// function of this key, so replaying a pass (gradient checking, gradient
/// accumulation, resume) sees bitwise identical masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub step: u64,
    pub utterance: u64,
}

fn dropout(
    tape: &mut Tape,
    x: BufId,
    p: f64,
    key: Option<&DropoutKey>,
    block: u64,
    site: u64,
) -> Result<BufId> {
    let Some(key) = key else { return Ok(x) };
    if p == 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let numel = tape.value(x).numel();
    let mut r = rng::stream(key.seed, "dropout", &[key.step, key.utterance, block, site]);
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..numel)
        .map(|_| if r.random_range(0.0..1.0) < p { 0.0 } else { keep })
        .collect();
    let m = tape.leaf(Tensor::new(shape, mask)?)?;
    tape.mul(x, m)
}

fn layer_norm(tape: &mut Tape, staged: &Staged, path: &str, x: BufId) -> Result<BufId> {
    let gain = staged_param(staged, &format!("{path}.norm_gain"))?;
    let bias = staged_param(staged, &format!("{path}.norm_bias"))?;
    tape.layer_norm_rows(x, gain, bias)
}

/// One pre-norm transformer block's output plus its per-head attention
/// matrices (each `[T, T]`, rows summing to 1).
pub struct BlockOutput {
    pub out: BufId,
    pub attention: Vec<BufId>,
}

pub fn transformer_block(
    tape: &mut Tape,
    staged: &Staged,
    prefix: &str,
    cfg: &FusionConfig,
    x: BufId,
    block: usize,
    key: Option<&DropoutKey>,
) -> Result<BlockOutput> {
    let path = format!("{prefix}.block{block}");
    let dh = cfg.head_dim();

    let normed = layer_norm(tape, staged, &format!("{path}.attn"), x)?;
    let q = linear(tape, staged, &format!("{path}.attn.q"), normed)?;
    let k = linear(tape, staged, &format!("{path}.attn.k"), normed)?;
    let v = linear(tape, staged, &format!("{path}.attn.v"), normed)?;

    let mut attention = Vec::with_capacity(cfg.n_heads);
    let mut contexts = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let scores = tape.matmul_transpose_b(qh, kh)?;
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = tape.softmax_rows(scaled)?;
        attention.push(weights);
        contexts.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&contexts)?;
    let projected = linear(tape, staged, &format!("{path}.attn.out"), merged)?;
    let dropped = dropout(tape, projected, cfg.dropout, key, block as u64, 0)?;
    let h_mid = tape.add(x, dropped)?;

    let normed = layer_norm(tape, staged, &format!("{path}.ff"), h_mid)?;
    let inner = linear(tape, staged, &format!("{path}.ff.in"), normed)?;
    let act = tape.gelu(inner)?;
    let outer = linear(tape, staged, &format!("{path}.ff.out"), act)?;
    let dropped = dropout(tape, outer, cfg.dropout, key, block as u64, 1)?;
    let out = tape.add(h_mid, dropped)?;
    Ok(BlockOutput { out, attention })
}

fn sinusoidal_table(frames: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; frames * dim];
    for t in 0..frames {
        for i in 0..dim / 2 {
            let rate = (10_000.0f64).powf(2.0 * i as f64 / dim as f64);
            data[t * dim + 2 * i] = (t as f64 / rate).sin();
            data[t * dim + 2 * i + 1] = (t as f64 / rate).cos();
        }
    }
    Tensor::new(vec![frames, dim], data).expect("table shape is consistent")
}

fn add_positional(
    tape: &mut Tape,
    staged: &Staged,
    prefix: &str,
    cfg: &FusionConfig,
    x: BufId,
) -> Result<BufId> {
    match cfg.positional {
        PositionalKind::None => Ok(x),
        PositionalKind::Sinusoidal => {
            let frames = tape.value(x).shape()[0];
            let table = tape.leaf(sinusoidal_table(frames, cfg.dim))?;
            tape.add(x, table)
        }
        PositionalKind::Conv => {
            let w = staged_param(staged, &format!("{prefix}.pos.weight"))?;
            let b = staged_param(staged, &format!("{prefix}.pos.bias"))?;
            let half = (cfg.positional_kernel - 1) / 2;
            let conv = tape.conv1d(x, w, b, 1, half, half, cfg.positional_groups)?;
            let act = tape.gelu(conv)?;
            tape.add(x, act)
        }
    }
}

/// Fuses the two masked streams: `[T, D] x [T, D]` -> concat `[T, 2D]` ->
/// MLP -> positional encoding -> transformer stack -> final layer norm.
/// Every output frame can attend to the whole sequence.
pub fn fuse(
    tape: &mut Tape,
    staged: &Staged,
    prefix: &str,
    cfg: &FusionConfig,
    audio: BufId,
    visual: BufId,
    key: Option<&DropoutKey>,
) -> Result<BufId> {
    cfg.validate()?;
    let a_shape = tape.value(audio).shape().to_vec();
    let v_shape = tape.value(visual).shape().to_vec();
    if a_shape != v_shape {
        return Err(Error::shape(format!(
            "cannot fuse audio {a_shape:?} with visual {v_shape:?}"
        )));
    }
    if a_shape.len() != 2 || a_shape[1] != cfg.dim {
        return Err(Error::shape(format!(
            "fusion expects [T, {}] inputs, got {a_shape:?}",
            cfg.dim
        )));
    }
    let concat = tape.concat_cols(&[audio, visual])?;
    let hidden = linear(tape, staged, &format!("{prefix}.mlp.in"), concat)?;
    let act = tape.gelu(hidden)?;
    let mut x = linear(tape, staged, &format!("{prefix}.mlp.out"), act)?;
    x = add_positional(tape, staged, prefix, cfg, x)?;
    for b in 0..cfg.n_blocks {
        x = transformer_block(tape, staged, prefix, cfg, x, b, key)?.out;
    }
    layer_norm(tape, staged, &format!("{prefix}.final"), x)
}

fn uniform(set: &mut ParameterSet, seed: u64, path: &str, shape: &[usize], fan_in: usize) -> Result<()> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut r = rng::stream(seed, path, &[]);
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| r.random_range(-bound..bound)).collect();
    set.insert(path, Tensor::new(shape.to_vec(), data)?)
}

fn linear_init(
    set: &mut ParameterSet,
    seed: u64,
    path: &str,
    d_in: usize,
    d_out: usize,
    zero: bool,
) -> Result<()> {
    if zero {
        set.insert(format!("{path}.weight"), Tensor::zeros(vec![d_in, d_out]))?;
    } else {
        uniform(set, seed, &format!("{path}.weight"), &[d_in, d_out], d_in)?;
    }
    set.insert(format!("{path}.bias"), Tensor::zeros(vec![d_out]))
}

fn norm_init(set: &mut ParameterSet, path: &str, dim: usize) -> Result<()> {
    set.insert(
        format!("{path}.norm_gain"),
        Tensor::new(vec![dim], vec![1.0; dim])?,
    )?;
    set.insert(format!("{path}.norm_bias"), Tensor::zeros(vec![dim]))
}

pub fn init_fusion_params(
    cfg: &FusionConfig,
    prefix: &str,
    seed: u64,
    set: &mut ParameterSet,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.dim;
    linear_init(set, seed, &format!("{prefix}.mlp.in"), 2 * d, cfg.mlp_hidden, false)?;
    linear_init(set, seed, &format!("{prefix}.mlp.out"), cfg.mlp_hidden, d, false)?;
    if cfg.positional == PositionalKind::Conv {
        let per_group = d / cfg.positional_groups;
        uniform(
            set,
            seed,
            &format!("{prefix}.pos.weight"),
            &[d, per_group, cfg.positional_kernel],
            per_group * cfg.positional_kernel,
        )?;
        set.insert(format!("{prefix}.pos.bias"), Tensor::zeros(vec![d]))?;
    }
    for b in 0..cfg.n_blocks {
        let path = format!("{prefix}.block{b}");
        norm_init(set, &format!("{path}.attn"), d)?;
        linear_init(set, seed, &format!("{path}.attn.q"), d, d, false)?;
        linear_init(set, seed, &format!("{path}.attn.k"), d, d, false)?;
        linear_init(set, seed, &format!("{path}.attn.v"), d, d, false)?;
        linear_init(set, seed, &format!("{path}.attn.out"), d, d, true)?;
        norm_init(set, &format!("{path}.ff"), d)?;
        linear_init(set, seed, &format!("{path}.ff.in"), d, cfg.ff_dim, false)?;
        linear_init(set, seed, &format!("{path}.ff.out"), cfg.ff_dim, d, true)?;
    }
    norm_init(set, &format!("{prefix}.final"), d)
}
