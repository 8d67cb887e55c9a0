//! Positional embeddings and attention/loss mask construction.
//!
//! Two embedding modes: a fixed sinusoidal table keyed on absolute patch
//! coordinates, and a learned pair of affine maps over fractional
//! coordinates (h/H, w/W) that adapts to varying grid shapes. Masks cover
//! prefix-causal pre-training, bidirectional fine-tuning, and padding.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::imaging::TokenCoord;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedMode {
    Absolute,
    Fractional,
}

/// Attention geometry for one sequence: which tokens are real and, during
/// pre-training, how long the bidirectional prefix is.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    /// Bidirectional prefix length in tokens; `None` (or 0/1) is pure causal.
    pub prefix_n: Option<usize>,
    /// True for real tokens. Real tokens form a prefix of the sequence.
    pub pad_mask: Vec<bool>,
}

impl AttentionSpec {
    pub fn len(&self) -> usize {
        self.pad_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pad_mask.is_empty()
    }

    pub fn real_count(&self) -> usize {
        self.pad_mask.iter().filter(|&&m| m).count()
    }
}

/// Interleaved sinusoid: slot 2i = sin(pos / 10000^(2i/d)),
/// slot 2i+1 = cos of the same angle.
fn sinusoid(pos: f64, d: usize, out: &mut Vec<f64>) {
    for i in 0..d / 2 {
        let angle = pos / 10000f64.powf(2.0 * i as f64 / d as f64);
        out.push(angle.sin());
        out.push(angle.cos());
    }
}

/// Concatenated sinusoids of the two absolute patch coordinates, each over
/// half the model width.
pub fn absolute_pos_embed(h: usize, w: usize, d_model: usize) -> Result<Vec<f64>> {
    if d_model % 4 != 0 {
        return Err(Error::config(format!(
            "absolute positional embeddings interleave sin/cos over two halves; d_model {d_model} must be divisible by 4"
        )));
    }
    let d = d_model / 2;
    let mut out = Vec::with_capacity(d_model);
    sinusoid(h as f64, d, &mut out);
    sinusoid(w as f64, d, &mut out);
    Ok(out)
}

/// Absolute embeddings for a whole token sequence, as an [N, d_model]
/// tensor (a constant: nothing here is trained).
pub fn absolute_embed_matrix(coords: &[TokenCoord], d_model: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(coords.len() * d_model);
    for c in coords {
        data.extend(absolute_pos_embed(c.row, c.col, d_model)?);
    }
    Tensor::new(vec![coords.len(), d_model], data)
}

pub const FRAC_F_WEIGHT: &str = "embed.frac.f.weight";
pub const FRAC_F_BIAS: &str = "embed.frac.f.bias";
pub const FRAC_G_WEIGHT: &str = "embed.frac.g.weight";
pub const FRAC_G_BIAS: &str = "embed.frac.g.bias";

/// Learned fractional embedding parameters: two affine maps from a scalar
/// proportion to d_model, weights ~ N(0, 0.02^2), biases zero.
pub fn init_fractional_params(d_model: usize, rng: &mut Rng) -> Vec<(String, Tensor)> {
    let mut draw = |n: usize| -> Tensor {
        Tensor::from_vec((0..n).map(|_| rng.normal_scaled(0.02)).collect())
    };
    vec![
        (FRAC_F_WEIGHT.into(), crate::tensor::reshape(&draw(d_model), &[1, d_model]).unwrap()),
        (FRAC_F_BIAS.into(), Tensor::zeros(&[d_model])),
        (FRAC_G_WEIGHT.into(), crate::tensor::reshape(&draw(d_model), &[1, d_model]).unwrap()),
        (FRAC_G_BIAS.into(), Tensor::zeros(&[d_model])),
    ]
}

/// f(h/H) + g(w/W) for a single position, outside any gradient tracking.
pub fn fractional_pos_embed(
    coord: TokenCoord,
    f_weight: &[f64],
    f_bias: &[f64],
    g_weight: &[f64],
    g_bias: &[f64],
    gelu: bool,
) -> Vec<f64> {
    let hf = coord.row as f64 / coord.grid_h as f64;
    let wf = coord.col as f64 / coord.grid_w as f64;
    let act = |v: f64| if gelu { crate::tensor::gelu_scalar(v) } else { v };
    f_weight
        .iter()
        .zip(f_bias)
        .zip(g_weight.iter().zip(g_bias))
        .map(|((&fw, &fb), (&gw, &gb))| act(fw * hf + fb) + act(gw * wf + gb))
        .collect()
}

/// Fractional embeddings for a whole sequence on the tape, [N, d_model],
/// differentiable in the four parameter leaves.
pub fn fractional_embed_on_tape(
    tape: &mut Tape,
    coords: &[TokenCoord],
    vars: &BTreeMap<String, Var>,
    gelu: bool,
) -> Result<Var> {
    let n = coords.len();
    let h_frac: Vec<f64> = coords.iter().map(|c| c.row as f64 / c.grid_h as f64).collect();
    let w_frac: Vec<f64> = coords.iter().map(|c| c.col as f64 / c.grid_w as f64).collect();
    let h_col = tape.constant(Tensor::new(vec![n, 1], h_frac)?);
    let w_col = tape.constant(Tensor::new(vec![n, 1], w_frac)?);

    let mut affine = |x: Var, weight: &str, bias: &str| -> Result<Var> {
        let scaled = tape.matmul(x, vars[weight])?;
        let shifted = tape.add(scaled, vars[bias])?;
        Ok(if gelu { tape.gelu(shifted) } else { shifted })
    };
    let f = affine(h_col, FRAC_F_WEIGHT, FRAC_F_BIAS)?;
    let g = affine(w_col, FRAC_G_WEIGHT, FRAC_G_BIAS)?;
    tape.add(f, g)
}

/// Uniform prefix length in {1, ..., real_tokens - 1}; degenerate
/// single-token sequences get 0 (pure causal).
pub fn sample_prefix_length(real_tokens: usize, rng: &mut Rng) -> usize {
    if real_tokens < 2 {
        return 0;
    }
    1 + rng.below(real_tokens - 1)
}

/// N*N row-major visibility matrix: entry [i, j] is true when position i
/// may attend to position j.
///
/// Pre-training uses a prefix-causal pattern: the first n tokens attend
/// mutually, later tokens attend causally. Fine-tuning is bidirectional
/// over real tokens. Padding neither attends nor is attended to.
pub fn build_mask(spec: &AttentionSpec, phase: Phase) -> Vec<bool> {
    let n_tokens = spec.len();
    let prefix = match phase {
        Phase::Pretrain => spec.prefix_n.unwrap_or(0),
        Phase::Finetune => 0,
    };
    let mut mask = vec![false; n_tokens * n_tokens];
    for i in 0..n_tokens {
        if !spec.pad_mask[i] {
            continue;
        }
        for j in 0..n_tokens {
            if !spec.pad_mask[j] {
                continue;
            }
            let visible = match phase {
                Phase::Pretrain => (i < prefix && j < prefix) || j <= i,
                Phase::Finetune => true,
            };
            mask[i * n_tokens + j] = visible;
        }
    }
    mask
}

/// N booleans: position i is scored by the next-patch loss iff it predicts
/// a real token outside the bidirectional prefix. Fine-tuning scores
/// nothing here (it uses a classification head instead).
pub fn build_loss_mask(spec: &AttentionSpec, phase: Phase) -> Vec<bool> {
    let n_tokens = spec.len();
    let real = spec.real_count();
    let prefix = spec.prefix_n.unwrap_or(0);
    let mut mask = vec![false; n_tokens];
    if phase == Phase::Finetune {
        return mask;
    }
    for (i, slot) in mask.iter_mut().enumerate() {
        // position i predicts token i+1; the first prefix tokens are
        // inputs, so the earliest scored prediction is of token prefix+1,
        // made at position prefix-1
        *slot = i + 1 >= prefix.max(1) && i + 1 < real;
    }
    mask
}
