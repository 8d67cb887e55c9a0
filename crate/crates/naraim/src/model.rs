//! The vision transformer: patch embedding, pre-norm blocks, the
//! next-patch prediction head, and the attentive classification probe.
//!
//! Forward passes are built on a [`Tape`] so the same code serves training
//! (gradients through every parameter leaf) and frozen evaluation
//! (features inserted as constants).

use std::collections::BTreeMap;

use crate::embed::{self, EmbedMode};
use crate::error::{Error, Result};
use crate::imaging::TokenSequence;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamTree, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub patch_size: usize,
    pub embed_mode: EmbedMode,
    /// Apply a gelu after the fractional embedding's affine maps.
    pub frac_gelu: bool,
}

impl BackboneConfig {
    /// Small preset sized for CPU experiments.
    pub fn desk(embed_mode: EmbedMode) -> Self {
        BackboneConfig {
            layers: 4,
            heads: 4,
            d_model: 64,
            d_hidden: 256,
            patch_size: 8,
            embed_mode,
            frac_gelu: false,
        }
    }

    /// Full-scale preset matching the reference backbone (ViT-B/14).
    pub fn paper(embed_mode: EmbedMode) -> Self {
        BackboneConfig {
            layers: 12,
            heads: 12,
            d_model: 768,
            d_hidden: 3072,
            patch_size: 14,
            embed_mode,
            frac_gelu: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_hidden == 0 {
            return Err(Error::config("backbone dims must all be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.embed_mode == EmbedMode::Absolute && self.d_model % 4 != 0 {
            return Err(Error::config(format!(
                "absolute positional embeddings need d_model divisible by 4, got {}",
                self.d_model
            )));
        }
        Ok(())
    }

    /// Flattened patch dimension: P x P x 3.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

fn block_prefix(b: usize) -> String {
    format!("block{b:02}")
}

fn push_linear(out: &mut Vec<(String, Tensor)>, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) {
    let w: Vec<f64> = (0..d_in * d_out).map(|_| rng.normal_scaled(0.02)).collect();
    out.push((format!("{name}.weight"), Tensor::new(vec![d_in, d_out], w).unwrap()));
    out.push((format!("{name}.bias"), Tensor::zeros(&[d_out])));
}

fn push_layer_norm(out: &mut Vec<(String, Tensor)>, name: &str, d: usize) {
    out.push((format!("{name}.scale"), Tensor::filled(&[d], 1.0)));
    out.push((format!("{name}.offset"), Tensor::zeros(&[d])));
}

/// Backbone parameters: patch embedding, L pre-norm blocks, final norm,
/// plus the fractional embedding maps when that mode is selected.
/// Weights draw from N(0, 0.02^2); biases and norm offsets start at zero,
/// norm scales at one. Draw order is fixed, so a seed pins every value.
pub fn init_backbone_params(cfg: &BackboneConfig, rng: &mut Rng) -> Result<ParamTree> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut out = Vec::new();
    push_linear(&mut out, "patch_embed", cfg.patch_dim(), d, rng);
    if cfg.embed_mode == EmbedMode::Fractional {
        out.extend(embed::init_fractional_params(d, rng));
    }
    for b in 0..cfg.layers {
        let p = block_prefix(b);
        push_layer_norm(&mut out, &format!("{p}.ln1"), d);
        for proj in ["q", "k", "v", "o"] {
            push_linear(&mut out, &format!("{p}.attn.{proj}"), d, d, rng);
        }
        push_layer_norm(&mut out, &format!("{p}.ln2"), d);
        push_linear(&mut out, &format!("{p}.mlp.fc1"), d, cfg.d_hidden, rng);
        push_linear(&mut out, &format!("{p}.mlp.fc2"), cfg.d_hidden, d, rng);
    }
    push_layer_norm(&mut out, "final_ln", d);
    Ok(out.into_iter().collect())
}

/// Next-patch prediction head: d_model -> d_hidden -> patch_dim with a
/// gelu between.
pub fn init_head_params(cfg: &BackboneConfig, rng: &mut Rng) -> ParamTree {
    let mut out = Vec::new();
    push_linear(&mut out, "head.fc1", cfg.d_model, cfg.d_hidden, rng);
    push_linear(&mut out, "head.fc2", cfg.d_hidden, cfg.patch_dim(), rng);
    out.into_iter().collect()
}

/// Attentive probe: a learned query pooled by multi-head cross-attention
/// over the (frozen) features, then an affine classifier.
pub fn init_probe_params(cfg: &BackboneConfig, classes: usize, rng: &mut Rng) -> ParamTree {
    let d = cfg.d_model;
    let mut out = Vec::new();
    let q: Vec<f64> = (0..d).map(|_| rng.normal_scaled(0.02)).collect();
    out.push(("probe.query".to_string(), Tensor::new(vec![1, d], q).unwrap()));
    push_linear(&mut out, "probe.k", d, d, rng);
    push_linear(&mut out, "probe.v", d, d, rng);
    push_linear(&mut out, "probe.o", d, d, rng);
    push_linear(&mut out, "probe.classifier", d, classes, rng);
    out.into_iter().collect()
}

fn var(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::contract(format!("missing parameter {name}")))
}

fn linear(tape: &mut Tape, vars: &BTreeMap<String, Var>, name: &str, x: Var) -> Result<Var> {
    let w = var(vars, &format!("{name}.weight"))?;
    let b = var(vars, &format!("{name}.bias"))?;
    let projected = tape.matmul(x, w)?;
    tape.add(projected, b)
}

fn layer_norm_affine(tape: &mut Tape, vars: &BTreeMap<String, Var>, name: &str, x: Var) -> Result<Var> {
    let normed = tape.layer_norm_last_dim(x);
    let scale = var(vars, &format!("{name}.scale"))?;
    let offset = var(vars, &format!("{name}.offset"))?;
    let scaled = tape.mul(normed, scale)?;
    tape.add(scaled, offset)
}

/// Multi-head self-attention over [N, d] with a row-major N*N fill mask
/// (true = blocked). Heads are contiguous slices of the projected width.
fn self_attention(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    prefix: &str,
    cfg: &BackboneConfig,
    x: Var,
    fill_mask: &[bool],
) -> Result<Var> {
    let q = linear(tape, vars, &format!("{prefix}.attn.q"), x)?;
    let k = linear(tape, vars, &format!("{prefix}.attn.k"), x)?;
    let v = linear(tape, vars, &format!("{prefix}.attn.v"), x)?;
    let dh = cfg.d_model / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut contexts = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice(q, 1, h * dh, dh)?;
        let kh = tape.slice(k, 1, h * dh, dh)?;
        let vh = tape.slice(v, 1, h * dh, dh)?;
        let kt = tape.transpose_last_two(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let scaled = tape.scale(logits, scale);
        let masked = tape.masked_fill(scaled, fill_mask, f64::NEG_INFINITY)?;
        let attn = tape.softmax_last_dim(masked);
        contexts.push(tape.matmul(attn, vh)?);
    }
    let ctx = tape.concat_last_dim(&contexts)?;
    linear(tape, vars, &format!("{prefix}.attn.o"), ctx)
}

/// Embed a token sequence and run the pre-norm transformer stack.
/// `visible` is the N*N attention mask (true = may attend). Returns
/// features [N, d_model] after the final layer norm.
pub fn backbone_forward(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &BackboneConfig,
    seq: &TokenSequence,
    visible: &[bool],
) -> Result<Var> {
    let n = seq.len();
    let pd = cfg.patch_dim();
    if seq.tokens.iter().any(|t| t.len() != pd) {
        return Err(Error::contract(format!(
            "token dim {} does not match patch dim {pd}",
            seq.tokens.first().map_or(0, Vec::len)
        )));
    }
    if visible.len() != n * n {
        return Err(Error::contract(format!(
            "attention mask has {} entries for {n} tokens",
            visible.len()
        )));
    }
    let mut flat = Vec::with_capacity(n * pd);
    for t in &seq.tokens {
        flat.extend_from_slice(t);
    }
    let tokens = tape.constant(Tensor::new(vec![n, pd], flat)?);
    let mut x = linear(tape, vars, "patch_embed", tokens)?;
    let pos = match cfg.embed_mode {
        EmbedMode::Absolute => {
            let m = embed::absolute_embed_matrix(&seq.coords, cfg.d_model)?;
            tape.constant(m)
        }
        EmbedMode::Fractional => {
            embed::fractional_embed_on_tape(tape, &seq.coords, vars, cfg.frac_gelu)?
        }
    };
    x = tape.add(x, pos)?;

    let fill: Vec<bool> = visible.iter().map(|&v| !v).collect();
    for b in 0..cfg.layers {
        let p = block_prefix(b);
        let normed = layer_norm_affine(tape, vars, &format!("{p}.ln1"), x)?;
        let attn = self_attention(tape, vars, &p, cfg, normed, &fill)?;
        x = tape.add(x, attn)?;
        let normed2 = layer_norm_affine(tape, vars, &format!("{p}.ln2"), x)?;
        let hidden = linear(tape, vars, &format!("{p}.mlp.fc1"), normed2)?;
        let act = tape.gelu(hidden);
        let mlp = linear(tape, vars, &format!("{p}.mlp.fc2"), act)?;
        x = tape.add(x, mlp)?;
        if !tape.value(x).all_finite() {
            return Err(Error::numeric(format!("non-finite activations after block {b}")));
        }
    }
    layer_norm_affine(tape, vars, "final_ln", x)
}

/// Per-position next-patch predictions, [N, patch_dim].
pub fn pretrain_head(tape: &mut Tape, vars: &BTreeMap<String, Var>, features: Var) -> Result<Var> {
    let hidden = linear(tape, vars, "head.fc1", features)?;
    let act = tape.gelu(hidden);
    linear(tape, vars, "head.fc2", act)
}

/// Pool features with the learned query and classify: logits [1, classes].
pub fn attentive_probe(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &BackboneConfig,
    features: Var,
    pad_mask: &[bool],
) -> Result<Var> {
    let n = tape.value(features).dims()[0];
    if pad_mask.len() != n {
        return Err(Error::contract(format!(
            "pad mask has {} entries for {n} tokens",
            pad_mask.len()
        )));
    }
    if !pad_mask.iter().any(|&m| m) {
        return Err(Error::contract("attentive probe needs at least one real token"));
    }
    let k = linear(tape, vars, "probe.k", features)?;
    let v = linear(tape, vars, "probe.v", features)?;
    let query = var(vars, "probe.query")?;
    let dh = cfg.d_model / cfg.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let fill: Vec<bool> = pad_mask.iter().map(|&m| !m).collect();
    let mut contexts = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice(query, 1, h * dh, dh)?;
        let kh = tape.slice(k, 1, h * dh, dh)?;
        let vh = tape.slice(v, 1, h * dh, dh)?;
        let kt = tape.transpose_last_two(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let scaled = tape.scale(logits, scale);
        let masked = tape.masked_fill(scaled, &fill, f64::NEG_INFINITY)?;
        let attn = tape.softmax_last_dim(masked);
        contexts.push(tape.matmul(attn, vh)?);
    }
    let ctx = tape.concat_last_dim(&contexts)?;
    let pooled = linear(tape, vars, "probe.o", ctx)?;
    linear(tape, vars, "probe.classifier", pooled)
}

/// Full pre-training parameter set: backbone plus prediction head.
pub fn init_pretrain_params(cfg: &BackboneConfig, rng: &mut Rng) -> Result<ParamTree> {
    let mut params = init_backbone_params(cfg, rng)?;
    for (k, v) in init_head_params(cfg, rng).iter() {
        params.insert(k.clone(), v.clone());
    }
    Ok(params)
}
