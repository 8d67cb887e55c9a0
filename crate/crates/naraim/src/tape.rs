//! Reverse-mode automatic differentiation on an explicit tape.
//!
//! Every operation appends a node holding its forward value and the
//! information needed for its vector-Jacobian product. [`Tape::gradient`]
//! walks the nodes in reverse from a scalar target and accumulates
//! gradients for named leaves. Node order is the order of recording, so
//! identical programs replay identically.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Broadcast, ParamTree, Tensor};

/// Handle to a tape node. Only meaningful for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Matmul { a: usize, b: usize, shared_rhs: bool },
    Transpose { a: usize },
    Reshape { a: usize },
    Concat { parts: Vec<usize> },
    Softmax { a: usize },
    LayerNorm { a: usize },
    Gelu { a: usize },
    Sin { a: usize },
    Cos { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Sqrt { a: usize },
    MeanLastDim { a: usize },
    SumAll { a: usize },
    Slice { a: usize, axis: usize, start: usize },
    MaskedFill { a: usize, mask: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Insert a value as a leaf. Whether it is trained is decided by the
    /// caller when asking for gradients.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    /// Insert every tensor of a parameter tree as a leaf, in key order.
    pub fn register(&mut self, tree: &ParamTree) -> BTreeMap<String, Var> {
        tree.iter()
            .map(|(k, v)| (k.clone(), self.leaf(v.clone())))
            .collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::sub(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = tensor::div(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Div { a: a.0, b: b.0 }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shared_rhs = bv.rank() == 2 && av.rank() > 2;
        let v = tensor::matmul(av, bv)?;
        Ok(self.push(v, Op::Matmul { a: a.0, b: b.0, shared_rhs }))
    }

    pub fn transpose_last_two(&mut self, a: Var) -> Result<Var> {
        let v = tensor::transpose_last_two(self.value(a))?;
        Ok(self.push(v, Op::Transpose { a: a.0 }))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let v = tensor::reshape(self.value(a), dims)?;
        Ok(self.push(v, Op::Reshape { a: a.0 }))
    }

    pub fn concat_last_dim(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = tensor::concat_last_dim(&tensors)?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    pub fn softmax_last_dim(&mut self, a: Var) -> Var {
        let v = tensor::softmax_last_dim(self.value(a));
        self.push(v, Op::Softmax { a: a.0 })
    }

    pub fn layer_norm_last_dim(&mut self, a: Var) -> Var {
        let v = tensor::layer_norm_last_dim(self.value(a));
        self.push(v, Op::LayerNorm { a: a.0 })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = tensor::gelu(self.value(a));
        self.push(v, Op::Gelu { a: a.0 })
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = tensor::sin(self.value(a));
        self.push(v, Op::Sin { a: a.0 })
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = tensor::cos(self.value(a));
        self.push(v, Op::Cos { a: a.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = tensor::exp(self.value(a));
        self.push(v, Op::Exp { a: a.0 })
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = tensor::log(self.value(a));
        self.push(v, Op::Log { a: a.0 })
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = tensor::sqrt(self.value(a));
        self.push(v, Op::Sqrt { a: a.0 })
    }

    pub fn mean_last_dim(&mut self, a: Var) -> Var {
        let v = tensor::mean_last_dim(self.value(a));
        self.push(v, Op::MeanLastDim { a: a.0 })
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = tensor::sum_all(self.value(a));
        self.push(v, Op::SumAll { a: a.0 })
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = tensor::slice(self.value(a), axis, start, len)?;
        Ok(self.push(v, Op::Slice { a: a.0, axis, start }))
    }

    pub fn masked_fill(&mut self, a: Var, mask: &[bool], value: f64) -> Result<Var> {
        let v = tensor::masked_fill(self.value(a), mask, value)?;
        Ok(self.push(
            v,
            Op::MaskedFill {
                a: a.0,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Multiply by a constant scalar.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let s = self.scalar(c);
        self.mul(a, s).unwrap()
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Mean of every element, as a scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Gradients of a scalar target with respect to the named leaves.
    /// Leaves absent from the graph below `loss` get zero gradients.
    pub fn gradient(&self, loss: Var, params: &BTreeMap<String, Var>) -> Result<ParamTree> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward target must be a scalar, got dims {:?}",
                lv.dims()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::new(lv.dims().to_vec(), vec![1.0]).unwrap());
        let mut leaf_grads: BTreeMap<usize, Tensor> = BTreeMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    leaf_grads.insert(i, g);
                }
                &Op::Add { a, b } => {
                    let kind = self.bcast(a, b);
                    accum(&mut grads[b], tensor::reduce_broadcast(&g, kind, self.dims(b)));
                    accum(&mut grads[a], g);
                }
                &Op::Sub { a, b } => {
                    let kind = self.bcast(a, b);
                    let gb = tensor::reduce_broadcast(&g, kind, self.dims(b));
                    accum(&mut grads[b], neg(&gb));
                    accum(&mut grads[a], g);
                }
                &Op::Mul { a, b } => {
                    let kind = self.bcast(a, b);
                    let da = tensor::mul(&g, self.val(b)).unwrap();
                    let db_full = tensor::mul(&g, self.val(a)).unwrap();
                    accum(&mut grads[b], tensor::reduce_broadcast(&db_full, kind, self.dims(b)));
                    accum(&mut grads[a], da);
                }
                &Op::Div { a, b } => {
                    let kind = self.bcast(a, b);
                    let da = tensor::div(&g, self.val(b)).unwrap();
                    let ga = tensor::mul(&g, self.val(a)).unwrap();
                    let b2 = tensor::mul(self.val(b), self.val(b)).unwrap();
                    let db_full = neg(&tensor::div(&ga, &b2).unwrap());
                    accum(&mut grads[b], tensor::reduce_broadcast(&db_full, kind, self.dims(b)));
                    accum(&mut grads[a], da);
                }
                &Op::Matmul { a, b, shared_rhs } => {
                    let bt = tensor::transpose_last_two(self.val(b)).unwrap();
                    let da = tensor::matmul(&g, &bt).unwrap();
                    let at = tensor::transpose_last_two(self.val(a)).unwrap();
                    let db_full = tensor::matmul(&at, &g).unwrap();
                    let db = if shared_rhs {
                        sum_leading_batches(&db_full, self.dims(b))
                    } else {
                        db_full
                    };
                    accum(&mut grads[a], da);
                    accum(&mut grads[b], db);
                }
                &Op::Transpose { a } => {
                    accum(&mut grads[a], tensor::transpose_last_two(&g).unwrap());
                }
                &Op::Reshape { a } => {
                    accum(&mut grads[a], tensor::reshape(&g, self.dims(a)).unwrap());
                }
                Op::Concat { parts } => {
                    let axis = g.rank() - 1;
                    let mut off = 0;
                    for &p in parts {
                        let w = self.val(p).last_dim();
                        let gp = tensor::slice(&g, axis, off, w).unwrap();
                        accum(&mut grads[p], gp);
                        off += w;
                    }
                }
                &Op::Softmax { a } => {
                    accum(&mut grads[a], softmax_vjp(&self.nodes[i].value, &g));
                }
                &Op::LayerNorm { a } => {
                    accum(&mut grads[a], layer_norm_vjp(self.val(a), &self.nodes[i].value, &g));
                }
                &Op::Gelu { a } => {
                    let dx = self.val(a).data().iter().map(|&x| tensor::gelu_derivative(x));
                    accum(&mut grads[a], zip_mul(&g, dx));
                }
                &Op::Sin { a } => {
                    let dx = self.val(a).data().iter().map(|&x| x.cos());
                    accum(&mut grads[a], zip_mul(&g, dx));
                }
                &Op::Cos { a } => {
                    let dx = self.val(a).data().iter().map(|&x| -x.sin());
                    accum(&mut grads[a], zip_mul(&g, dx));
                }
                &Op::Exp { a } => {
                    let y = self.nodes[i].value.data().iter().copied();
                    accum(&mut grads[a], zip_mul(&g, y));
                }
                &Op::Log { a } => {
                    let dx = self.val(a).data().iter().map(|&x| 1.0 / x);
                    accum(&mut grads[a], zip_mul(&g, dx));
                }
                &Op::Sqrt { a } => {
                    let dx = self.nodes[i].value.data().iter().map(|&y| 0.5 / y);
                    accum(&mut grads[a], zip_mul(&g, dx));
                }
                &Op::MeanLastDim { a } => {
                    let n = self.val(a).last_dim();
                    let mut data = Vec::with_capacity(self.val(a).numel());
                    for &gr in g.data() {
                        data.extend(std::iter::repeat(gr / n as f64).take(n));
                    }
                    accum(&mut grads[a], Tensor::new(self.dims(a).to_vec(), data).unwrap());
                }
                &Op::SumAll { a } => {
                    accum(&mut grads[a], Tensor::filled(self.dims(a), g.item()));
                }
                &Op::Slice { a, axis, start } => {
                    accum(&mut grads[a], tensor::unslice(&g, self.dims(a), axis, start));
                }
                Op::MaskedFill { a, mask } => {
                    let da = tensor::masked_fill(&g, mask, 0.0).unwrap();
                    accum(&mut grads[*a], da);
                }
            }
        }

        let mut out = ParamTree::new();
        for (name, var) in params {
            let g = leaf_grads
                .get(&var.0)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.dims(var.0)));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    fn dims(&self, i: usize) -> &[usize] {
        self.nodes[i].value.dims()
    }

    fn bcast(&self, a: usize, b: usize) -> Broadcast {
        tensor::broadcast_kind("vjp", self.val(a), self.val(b)).unwrap()
    }
}

fn accum(slot: &mut Option<Tensor>, delta: Tensor) {
    *slot = Some(match slot.take() {
        None => delta,
        Some(cur) => tensor::add(&cur, &delta).unwrap(),
    });
}

fn neg(t: &Tensor) -> Tensor {
    Tensor::new(t.dims().to_vec(), t.data().iter().map(|v| -v).collect()).unwrap()
}

fn zip_mul(g: &Tensor, factors: impl Iterator<Item = f64>) -> Tensor {
    let data = g.data().iter().zip(factors).map(|(&a, b)| a * b).collect();
    Tensor::new(g.dims().to_vec(), data).unwrap()
}

/// dx_i = y_i * (g_i - sum_j g_j y_j), rowwise. Fully masked rows have
/// y = 0 and therefore a zero gradient.
fn softmax_vjp(y: &Tensor, g: &Tensor) -> Tensor {
    let n = y.last_dim();
    let mut out = vec![0.0; y.numel()];
    for ((yr, gr), or) in y
        .data()
        .chunks_exact(n)
        .zip(g.data().chunks_exact(n))
        .zip(out.chunks_exact_mut(n))
    {
        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &gv) in or.iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
    Tensor::new(y.dims().to_vec(), out).unwrap()
}

/// dx = (g - mean(g) - y * mean(g . y)) / sqrt(var + eps), rowwise.
fn layer_norm_vjp(x: &Tensor, y: &Tensor, g: &Tensor) -> Tensor {
    let n = x.last_dim();
    let nf = n as f64;
    let mut out = vec![0.0; x.numel()];
    for (((xr, yr), gr), or) in x
        .data()
        .chunks_exact(n)
        .zip(y.data().chunks_exact(n))
        .zip(g.data().chunks_exact(n))
        .zip(out.chunks_exact_mut(n))
    {
        let mean = xr.iter().sum::<f64>() / nf;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / nf;
        let denom = (var + tensor::LAYER_NORM_EPS).sqrt();
        let g_mean = gr.iter().sum::<f64>() / nf;
        let gy_mean = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<f64>() / nf;
        for ((o, &gv), &yv) in or.iter_mut().zip(gr).zip(yr) {
            *o = (gv - g_mean - yv * gy_mean) / denom;
        }
    }
    Tensor::new(x.dims().to_vec(), out).unwrap()
}

/// Sum the leading batch dims of `full` down to rank-2 `target_dims`.
fn sum_leading_batches(full: &Tensor, target_dims: &[usize]) -> Tensor {
    let chunk: usize = target_dims.iter().product();
    let mut out = vec![0.0; chunk];
    for block in full.data().chunks_exact(chunk) {
        for (o, &v) in out.iter_mut().zip(block) {
            *o += v;
        }
    }
    Tensor::new(target_dims.to_vec(), out).unwrap()
}
