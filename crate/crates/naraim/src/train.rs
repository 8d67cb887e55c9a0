//! Losses, the AdamW optimizer, learning-rate schedules, and the
//! pre-training / fine-tuning loops.
//!
//! Both loops are deterministic given the config seed: every random choice
//! is drawn from a generator derived from (seed, stream, step, slot), so a
//! run resumed from step k is bitwise identical to one that never stopped.

use std::io::Write;

use crate::embed::{
    build_loss_mask, build_mask, sample_prefix_length, AttentionSpec, Phase,
};
use crate::error::{Error, Result};
use crate::imaging::{
    pad_to_sequence, patch_normalize_target, patchify, prepare_image, Image, PipelineConfig,
    ResizePolicy, TokenSequence, TARGET_NORM_EPS,
};
use crate::model::{self, BackboneConfig};
use crate::rng::{stream, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::{ParamTree, Tensor};

/// Whether next-patch regression targets are standardized per patch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Normalized,
    Raw,
}

/// Optimizer and schedule settings for one training phase.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub loss_mode: LossMode,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub warmup_iters: u64,
    pub cooldown_iters: u64,
    pub total_iters: u64,
    pub decay_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub augment: bool,
}

impl TrainConfig {
    /// Reference pre-training settings.
    pub fn pretrain() -> Self {
        TrainConfig {
            phase: Phase::Pretrain,
            loss_mode: LossMode::Normalized,
            peak_lr: 1e-3,
            min_lr: 0.0,
            weight_decay: 0.01,
            batch_size: 512,
            grad_clip: 1.0,
            warmup_iters: 5_000,
            cooldown_iters: 10_000,
            total_iters: 500_000,
            decay_rate: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            seed: 0,
            augment: true,
        }
    }

    /// Reference fine-tuning settings (attentive probe over frozen features).
    pub fn finetune() -> Self {
        TrainConfig {
            phase: Phase::Finetune,
            loss_mode: LossMode::Normalized,
            peak_lr: 1e-3,
            min_lr: 1e-5,
            weight_decay: 0.1,
            batch_size: 512,
            grad_clip: 3.0,
            warmup_iters: 500,
            cooldown_iters: 0,
            total_iters: 50_000,
            decay_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            augment: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.total_iters == 0 {
            return Err(Error::config("total_iters must be at least 1"));
        }
        if self.warmup_iters + self.cooldown_iters > self.total_iters {
            return Err(Error::config(format!(
                "warmup ({}) plus cooldown ({}) exceed total iters ({})",
                self.warmup_iters, self.cooldown_iters, self.total_iters
            )));
        }
        if !(self.peak_lr > 0.0) || !(self.min_lr >= 0.0) || self.min_lr > self.peak_lr {
            return Err(Error::config(format!(
                "learning rates must satisfy 0 <= min ({}) <= peak ({}) with peak > 0",
                self.min_lr, self.peak_lr
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("grad_clip must be positive"));
        }
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {beta}")));
            }
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::config(format!(
                "decay_rate must lie in (0, 1], got {}",
                self.decay_rate
            )));
        }
        Ok(())
    }
}

/// Learning rate at an optimization step.
///
/// Pre-training: linear warmup to the peak, exponential decay reaching
/// peak * decay_rate exactly when the cooldown begins, then linear cooldown
/// to the minimum. Fine-tuning: linear warmup followed by cosine decay to
/// the minimum. Steps past the configured total are a contract violation.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> Result<f64> {
    cfg.validate()?;
    if step > cfg.total_iters {
        return Err(Error::contract(format!(
            "step {step} is past the schedule end ({})",
            cfg.total_iters
        )));
    }
    let warmup = cfg.warmup_iters;
    if warmup > 0 && step <= warmup {
        return Ok(cfg.peak_lr * step as f64 / warmup as f64);
    }
    match cfg.phase {
        Phase::Pretrain => {
            let decay_end = cfg.total_iters - cfg.cooldown_iters;
            let floor = cfg.peak_lr * cfg.decay_rate;
            if step >= decay_end {
                if cfg.total_iters == decay_end {
                    return Ok(floor);
                }
                let t = (step - decay_end) as f64 / (cfg.total_iters - decay_end) as f64;
                Ok(floor + (cfg.min_lr - floor) * t)
            } else if decay_end == warmup {
                Ok(cfg.peak_lr)
            } else {
                // Exponent linear in the step, so the curve is a straight
                // line in log space from peak down to peak * decay_rate.
                let t = (step - warmup) as f64 / (decay_end - warmup) as f64;
                Ok(cfg.peak_lr * cfg.decay_rate.powf(t))
            }
        }
        Phase::Finetune => {
            if cfg.total_iters == warmup {
                return Ok(cfg.peak_lr);
            }
            let t = (step - warmup) as f64 / (cfg.total_iters - warmup) as f64;
            Ok(cfg.min_lr
                + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * t).cos()))
        }
    }
}

pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, keyed like the parameter tree.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: ParamTree,
    pub v: ParamTree,
}

impl OptimizerState {
    pub fn new() -> Self {
        OptimizerState::default()
    }
}

/// Whether weight decay applies to a parameter. Only weight matrices decay;
/// biases, norm affines, the probe query, and positional parameters do not.
pub fn decays(name: &str) -> bool {
    name.ends_with(".weight") && !name.starts_with("embed.frac.")
}

/// One AdamW update: bias-corrected moments, decoupled weight decay applied
/// only where [`decays`] says so. Parameters without a gradient entry are
/// left untouched.
pub fn adamw_step(
    params: &mut ParamTree,
    grads: &ParamTree,
    state: &mut OptimizerState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (name, grad) in grads.iter() {
        let param = params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("gradient for unknown parameter {name}")))?;
        if param.dims() != grad.dims() {
            return Err(Error::Shape {
                op: "adamw_step",
                lhs: param.dims().to_vec(),
                rhs: grad.dims().to_vec(),
            });
        }
        if !state.m.contains(name) {
            state.m.insert(name.clone(), Tensor::zeros(param.dims()));
            state.v.insert(name.clone(), Tensor::zeros(param.dims()));
        }
        let decay = if decays(name) { cfg.weight_decay } else { 0.0 };
        let m = state.m.get_mut(name).unwrap().data_mut();
        let v = state.v.get_mut(name).unwrap().data_mut();
        let p = param.data_mut();
        let g = grad.data();
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * decay * p[i];
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Euclidean norm over every element of every gradient tensor.
pub fn global_grad_norm(grads: &ParamTree) -> f64 {
    grads
        .iter()
        .map(|(_, g)| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scale all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut ParamTree, max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// Regression targets for next-patch prediction: row i holds patch i + 1,
/// standardized when the mode says so. Unscored rows are zero.
pub fn next_patch_targets(
    seq: &TokenSequence,
    loss_mask: &[bool],
    mode: LossMode,
) -> Result<Tensor> {
    let n = seq.len();
    if loss_mask.len() != n {
        return Err(Error::contract(format!(
            "loss mask has {} entries for {n} tokens",
            loss_mask.len()
        )));
    }
    let pd = seq.tokens.first().map_or(0, Vec::len);
    let mut flat = vec![0.0; n * pd];
    for (i, &scored) in loss_mask.iter().enumerate() {
        if !scored {
            continue;
        }
        if i + 1 >= n {
            return Err(Error::contract(format!(
                "position {i} is scored but has no successor patch"
            )));
        }
        let next = &seq.tokens[i + 1];
        let row = match mode {
            LossMode::Raw => next.clone(),
            LossMode::Normalized => patch_normalize_target(next, TARGET_NORM_EPS),
        };
        flat[i * pd..(i + 1) * pd].copy_from_slice(&row);
    }
    Tensor::new(vec![n, pd], flat)
}

/// Mean over scored positions of the per-patch mean squared error between
/// predictions and targets. At least one position must be scored.
pub fn next_patch_mse(
    tape: &mut Tape,
    preds: Var,
    targets: &Tensor,
    loss_mask: &[bool],
) -> Result<Var> {
    let dims = tape.value(preds).dims().to_vec();
    if dims.len() != 2 {
        return Err(Error::contract(format!(
            "next_patch_mse expects [tokens, patch_dim] predictions, got {dims:?}"
        )));
    }
    let (n, pd) = (dims[0], dims[1]);
    if targets.dims() != [n, pd] {
        return Err(Error::Shape {
            op: "next_patch_mse",
            lhs: dims,
            rhs: targets.dims().to_vec(),
        });
    }
    if loss_mask.len() != n {
        return Err(Error::contract(format!(
            "loss mask has {} entries for {n} tokens",
            loss_mask.len()
        )));
    }
    let scored = loss_mask.iter().filter(|&&b| b).count();
    if scored == 0 {
        return Err(Error::contract(
            "next-patch loss needs at least one scored position",
        ));
    }
    let mut weights = vec![0.0; n * pd];
    for (i, &keep) in loss_mask.iter().enumerate() {
        if keep {
            weights[i * pd..(i + 1) * pd].fill(1.0);
        }
    }
    let t = tape.constant(targets.clone());
    let w = tape.constant(Tensor::new(vec![n, pd], weights)?);
    let diff = tape.sub(preds, t)?;
    let sq = tape.mul(diff, diff)?;
    let masked = tape.mul(sq, w)?;
    let total = tape.sum_all(masked);
    Ok(tape.scale(total, 1.0 / (scored as f64 * pd as f64)))
}

/// Negative log-likelihood of the label under a softmax over the last axis
/// of a single logit row.
pub fn cross_entropy(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let dims = tape.value(logits).dims().to_vec();
    let classes = *dims.last().unwrap();
    let rows: usize = dims[..dims.len() - 1].iter().product();
    if rows != 1 {
        return Err(Error::contract(format!(
            "cross_entropy expects one logit row, got shape {dims:?}"
        )));
    }
    if label >= classes {
        return Err(Error::contract(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    let probs = tape.softmax_last_dim(logits);
    let picked = tape.slice(probs, dims.len() - 1, label, 1)?;
    let log_p = tape.log(picked);
    let summed = tape.sum_all(log_p);
    Ok(tape.scale(summed, -1.0))
}

/// One recorded training step.
#[derive(Clone, Copy, Debug)]
pub struct LogPoint {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// What a training run did: every step's loss plus the logged lines.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub history: Vec<LogPoint>,
}

impl TrainReport {
    pub fn first_loss(&self) -> Option<f64> {
        self.history.first().map(|p| p.loss)
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.history.last().map(|p| p.loss)
    }
}

/// Loop plumbing: how many steps to run now and how often to log/checkpoint.
pub struct LoopOptions<'a> {
    /// Number of optimization steps to take in this call.
    pub steps: u64,
    /// Emit a metrics line every this many steps (0 disables the writer).
    pub log_every: u64,
    /// Snapshot cadence; a final snapshot is always taken. 0 disables the
    /// periodic ones.
    pub checkpoint_every: u64,
    pub log: Option<&'a mut dyn Write>,
}

impl Default for LoopOptions<'_> {
    fn default() -> Self {
        LoopOptions {
            steps: 0,
            log_every: 100,
            checkpoint_every: 1000,
            log: None,
        }
    }
}

/// Callback invoked with (step, params, optimizer state) whenever a
/// snapshot should be persisted.
pub type CheckpointFn<'a> = dyn FnMut(u64, &ParamTree, &OptimizerState) -> Result<()> + 'a;

fn write_log(
    log: &mut Option<&mut dyn Write>,
    point: &LogPoint,
) -> Result<()> {
    if let Some(w) = log {
        let mut line = format!("{}\t{:.6e}\t{:.6}", point.step, point.lr, point.loss);
        if let Some(acc) = point.accuracy {
            line.push_str(&format!("\t{acc:.4}"));
        }
        writeln!(w, "{line}").map_err(|e| Error::io("metrics log", e))?;
    }
    Ok(())
}

/// Abort path for a non-finite loss or gradient: persist the last good
/// state, then surface the failure.
fn abort_non_finite(
    what: &str,
    step: u64,
    params: &ParamTree,
    opt: &OptimizerState,
    on_checkpoint: &mut CheckpointFn,
) -> Error {
    let keep = opt.step;
    if let Err(e) = on_checkpoint(keep, params, opt) {
        return e;
    }
    Error::numeric(format!(
        "non-finite {what} at step {step}; stopped with the step-{keep} state checkpointed"
    ))
}

fn accumulate(sum: &mut Option<ParamTree>, delta: ParamTree) -> Result<()> {
    match sum {
        None => *sum = Some(delta),
        Some(acc) => {
            for (name, g) in delta.iter() {
                let dst = acc.get_mut(name).ok_or_else(|| {
                    Error::contract(format!("gradient key {name} missing from accumulator"))
                })?;
                for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
    }
    Ok(())
}

fn scale_tree(tree: &mut ParamTree, s: f64) {
    for (_, t) in tree.iter_mut() {
        for x in t.data_mut() {
            *x *= s;
        }
    }
}

/// Autoregressive pre-training over raw images. Each step samples a batch
/// (with replacement), augments and patchifies each image under the given
/// resize policy, samples a prefix length, and takes one AdamW step on the
/// next-patch loss. Returns the per-step history.
#[allow(clippy::too_many_arguments)]
pub fn run_pretrain(
    tcfg: &TrainConfig,
    bcfg: &BackboneConfig,
    pipe: &PipelineConfig,
    policy: ResizePolicy,
    images: &[Image],
    params: &mut ParamTree,
    opt: &mut OptimizerState,
    opts: &mut LoopOptions,
    on_checkpoint: &mut CheckpointFn,
) -> Result<TrainReport> {
    tcfg.validate()?;
    bcfg.validate()?;
    if tcfg.phase != Phase::Pretrain {
        return Err(Error::contract("run_pretrain requires a pre-training config"));
    }
    if images.is_empty() {
        return Err(Error::contract("cannot train on an empty image set"));
    }
    let mut report = TrainReport::default();
    let mut last_checkpointed = None;
    for _ in 0..opts.steps {
        let step = opt.step + 1;
        let lr = lr_at(tcfg, step)?;

        let mut batch_grads: Option<ParamTree> = None;
        let mut batch_loss = 0.0;
        let mut used = 0usize;
        for slot in 0..tcfg.batch_size {
            let mut pick = Rng::derive(tcfg.seed, &[stream::BATCH, step, slot as u64]);
            let idx = pick.below(images.len());
            let mut sample_rng = Rng::derive(tcfg.seed, &[stream::SAMPLE, step, slot as u64]);
            let prepared =
                prepare_image(&images[idx], pipe, policy, tcfg.augment, &mut sample_rng)?;
            let grid = patchify(&prepared, pipe)?;
            let seq = pad_to_sequence(&grid, pipe)?;
            let real = seq.real_count();
            if real < 2 {
                // A single-patch image has nothing to predict.
                continue;
            }
            let prefix = sample_prefix_length(real, &mut sample_rng);
            let spec = AttentionSpec {
                prefix_n: (prefix > 0).then_some(prefix),
                pad_mask: seq.pad_mask.clone(),
            };
            let visible = build_mask(&spec, Phase::Pretrain);
            let loss_mask = build_loss_mask(&spec, Phase::Pretrain);
            let targets = next_patch_targets(&seq, &loss_mask, tcfg.loss_mode)?;

            let mut tape = Tape::new();
            let vars = tape.register(params);
            let feats = model::backbone_forward(&mut tape, &vars, bcfg, &seq, &visible)?;
            let preds = model::pretrain_head(&mut tape, &vars, feats)?;
            let loss = next_patch_mse(&mut tape, preds, &targets, &loss_mask)?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(abort_non_finite("loss", step, params, opt, on_checkpoint));
            }
            let grads = tape.gradient(loss, &vars)?;
            batch_loss += loss_value;
            used += 1;
            accumulate(&mut batch_grads, grads)?;
        }
        if used == 0 {
            return Err(Error::contract(format!(
                "no sample in the step-{step} batch had at least two patches"
            )));
        }
        let mut grads = batch_grads.unwrap();
        scale_tree(&mut grads, 1.0 / used as f64);
        batch_loss /= used as f64;
        if !grads.all_finite() {
            return Err(abort_non_finite("gradient", step, params, opt, on_checkpoint));
        }
        clip_gradients(&mut grads, tcfg.grad_clip);
        adamw_step(params, &grads, opt, tcfg, lr)?;

        let point = LogPoint {
            step,
            lr,
            loss: batch_loss,
            accuracy: None,
        };
        report.history.push(point);
        if opts.log_every > 0 && step % opts.log_every == 0 {
            write_log(&mut opts.log, &point)?;
        }
        if opts.checkpoint_every > 0 && step % opts.checkpoint_every == 0 {
            on_checkpoint(step, params, opt)?;
            last_checkpointed = Some(step);
        }
    }
    if last_checkpointed != Some(opt.step) {
        on_checkpoint(opt.step, params, opt)?;
    }
    Ok(report)
}

/// Classification logits for one prepared sequence from frozen features.
/// The backbone runs on a scratch tape; only probe parameters join the
/// differentiated graph.
fn frozen_probe_logits(
    tape: &mut Tape,
    probe_vars: &std::collections::BTreeMap<String, Var>,
    backbone: &ParamTree,
    bcfg: &BackboneConfig,
    seq: &TokenSequence,
) -> Result<Var> {
    let spec = AttentionSpec {
        prefix_n: None,
        pad_mask: seq.pad_mask.clone(),
    };
    let visible = build_mask(&spec, Phase::Finetune);
    let mut scratch = Tape::new();
    let frozen_vars = scratch.register(backbone);
    let feats = model::backbone_forward(&mut scratch, &frozen_vars, bcfg, seq, &visible)?;
    let features = scratch.value(feats).clone();
    let features = tape.constant(features);
    model::attentive_probe(tape, probe_vars, bcfg, features, &seq.pad_mask)
}

/// Attentive-probe fine-tuning on frozen backbone features. Only the probe
/// parameters receive gradients or updates; the backbone tree is read-only.
#[allow(clippy::too_many_arguments)]
pub fn run_finetune(
    tcfg: &TrainConfig,
    bcfg: &BackboneConfig,
    pipe: &PipelineConfig,
    policy: ResizePolicy,
    images: &[Image],
    labels: &[usize],
    classes: usize,
    backbone: &ParamTree,
    probe: &mut ParamTree,
    opt: &mut OptimizerState,
    opts: &mut LoopOptions,
    on_checkpoint: &mut CheckpointFn,
) -> Result<TrainReport> {
    tcfg.validate()?;
    bcfg.validate()?;
    if tcfg.phase != Phase::Finetune {
        return Err(Error::contract("run_finetune requires a fine-tuning config"));
    }
    if images.is_empty() {
        return Err(Error::contract("cannot train on an empty image set"));
    }
    if labels.len() != images.len() {
        return Err(Error::contract(format!(
            "{} labels for {} images",
            labels.len(),
            images.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut report = TrainReport::default();
    let mut last_checkpointed = None;
    for _ in 0..opts.steps {
        let step = opt.step + 1;
        let lr = lr_at(tcfg, step)?;

        let mut batch_grads: Option<ParamTree> = None;
        let mut batch_loss = 0.0;
        let mut correct = 0usize;
        for slot in 0..tcfg.batch_size {
            let mut pick = Rng::derive(tcfg.seed, &[stream::BATCH, step, slot as u64]);
            let idx = pick.below(images.len());
            let mut sample_rng = Rng::derive(tcfg.seed, &[stream::SAMPLE, step, slot as u64]);
            let prepared =
                prepare_image(&images[idx], pipe, policy, tcfg.augment, &mut sample_rng)?;
            let grid = patchify(&prepared, pipe)?;
            let seq = pad_to_sequence(&grid, pipe)?;

            let mut tape = Tape::new();
            let probe_vars = tape.register(probe);
            let logits = frozen_probe_logits(&mut tape, &probe_vars, backbone, bcfg, &seq)?;
            let loss = cross_entropy(&mut tape, logits, labels[idx])?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(abort_non_finite("loss", step, probe, opt, on_checkpoint));
            }
            let row = tape.value(logits).data();
            let predicted = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            if predicted == labels[idx] {
                correct += 1;
            }
            let grads = tape.gradient(loss, &probe_vars)?;
            batch_loss += loss_value;
            accumulate(&mut batch_grads, grads)?;
        }
        let mut grads = batch_grads.unwrap();
        scale_tree(&mut grads, 1.0 / tcfg.batch_size as f64);
        batch_loss /= tcfg.batch_size as f64;
        if !grads.all_finite() {
            return Err(abort_non_finite("gradient", step, probe, opt, on_checkpoint));
        }
        clip_gradients(&mut grads, tcfg.grad_clip);
        adamw_step(probe, &grads, opt, tcfg, lr)?;

        let point = LogPoint {
            step,
            lr,
            loss: batch_loss,
            accuracy: Some(correct as f64 / tcfg.batch_size as f64),
        };
        report.history.push(point);
        if opts.log_every > 0 && step % opts.log_every == 0 {
            write_log(&mut opts.log, &point)?;
        }
        if opts.checkpoint_every > 0 && step % opts.checkpoint_every == 0 {
            on_checkpoint(step, probe, opt)?;
            last_checkpointed = Some(step);
        }
    }
    if last_checkpointed != Some(opt.step) {
        on_checkpoint(opt.step, probe, opt)?;
    }
    Ok(report)
}
