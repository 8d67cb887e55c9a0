//! Gradient verification by central finite differences.
//!
//! A loss is expressed as a closure that rebuilds its graph from registered
//! parameter leaves; it is re-run from scratch for every probe, so it must
//! be deterministic in the parameter values.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{ParamTree, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Builds the scalar loss from parameter leaves already on the tape.
pub trait LossFn {
    fn loss(&mut self, tape: &mut Tape, vars: &BTreeMap<String, Var>) -> Result<Var>;
}

impl<F> LossFn for F
where
    F: FnMut(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
{
    fn loss(&mut self, tape: &mut Tape, vars: &BTreeMap<String, Var>) -> Result<Var> {
        self(tape, vars)
    }
}

pub fn loss_value(f: &mut dyn LossFn, params: &ParamTree) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = tape.register(params);
    let loss = f.loss(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Run the loss once and return autodiff gradients for every parameter.
pub fn autodiff_gradient(f: &mut dyn LossFn, params: &ParamTree) -> Result<ParamTree> {
    let mut tape = Tape::new();
    let vars = tape.register(params);
    let loss = f.loss(&mut tape, &vars)?;
    tape.gradient(loss, &vars)
}

fn perturbed(params: &ParamTree, key: &str, index: usize, delta: f64) -> ParamTree {
    params
        .iter()
        .map(|(k, v)| {
            if k == key {
                let mut data = v.data().to_vec();
                data[index] += delta;
                (k.clone(), Tensor::new(v.dims().to_vec(), data).unwrap())
            } else {
                (k.clone(), v.clone())
            }
        })
        .collect()
}

fn central_difference(
    f: &mut dyn LossFn,
    params: &ParamTree,
    key: &str,
    index: usize,
    h: f64,
) -> Result<f64> {
    let up = loss_value(f, &perturbed(params, key, index, h))?;
    let down = loss_value(f, &perturbed(params, key, index, -h))?;
    Ok((up - down) / (2.0 * h))
}

/// Central differences (f(x+h) - f(x-h)) / 2h for every scalar parameter.
pub fn finite_difference_gradient(
    mut f: impl LossFn,
    params: &ParamTree,
    h: f64,
) -> Result<ParamTree> {
    let mut out = ParamTree::new();
    for (key, value) in params.iter() {
        let mut grad = vec![0.0; value.numel()];
        for (i, slot) in grad.iter_mut().enumerate() {
            *slot = central_difference(&mut f, params, key, i, h)?;
        }
        out.insert(key.clone(), Tensor::new(value.dims().to_vec(), grad).unwrap());
    }
    Ok(out)
}

/// |a - b| / max(|a|, |b|, 1e-4): relative where the numbers are large,
/// absolute near zero. The floor absorbs central-difference rounding noise
/// (about |loss| * 5e-12 at the default step) on gradients that are
/// genuinely zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

/// Largest relative error between two gradient trees with identical keys.
pub fn max_relative_error(a: &ParamTree, b: &ParamTree) -> f64 {
    let mut worst = 0.0f64;
    for (key, av) in a.iter() {
        let bv = b.get(key).expect("gradient trees must share keys");
        for (&x, &y) in av.data().iter().zip(bv.data()) {
            worst = worst.max(relative_error(x, y));
        }
    }
    worst
}

#[derive(Clone, Debug)]
pub struct SampledCheck {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameter key and flat index of the worst disagreement.
    pub worst: Option<(String, usize)>,
}

/// Compare autodiff gradients against finite differences on a deterministic
/// random subset of elements, covering every tensor in the tree. Keeps
/// whole-model checks affordable while still probing each parameter.
pub fn sampled_gradient_check(
    mut f: impl LossFn,
    params: &ParamTree,
    h: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<SampledCheck> {
    let autodiff = autodiff_gradient(&mut f, params)?;
    let mut rng = Rng::derive(seed, &[0x67726164]);
    let mut report = SampledCheck {
        max_relative_error: 0.0,
        checked: 0,
        worst: None,
    };
    for (key, value) in params.iter() {
        let n = value.numel();
        let take = per_tensor.min(n);
        let mut indices: Vec<usize> = (0..n).collect();
        for i in 0..take {
            let j = i + rng.below(n - i);
            indices.swap(i, j);
        }
        indices.truncate(take);
        indices.sort_unstable();
        let ad = autodiff.get(key).unwrap();
        for i in indices {
            let fd = central_difference(&mut f, params, key, i, h)?;
            let err = relative_error(ad.data()[i], fd);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst = Some((key.clone(), i));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
