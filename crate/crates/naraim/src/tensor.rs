//! Dense f64 tensors with row-major flat storage.
//!
//! These are the value kernels. Gradient tracking lives in [`crate::tape`],
//! which records applications of these operations and replays them in
//! reverse. Tensor values are immutable once constructed.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Coefficient of the cubic term in the tanh gelu approximation.
const GELU_CUBIC: f64 = 0.044715;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::contract("tensor dims must be non-empty"));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!("tensor dims must be positive: {dims:?}")));
        }
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "dims {dims:?} imply {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let numel: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let numel: usize = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; numel],
        }
    }

    /// A scalar is a rank-1 tensor with a single element.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// In-place element access for optimizers; the shape stays fixed.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn last_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn unary(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: lhs.dims().to_vec(),
        rhs: rhs.dims().to_vec(),
    }
}

/// How the right operand of an elementwise op lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    /// Same dims on both sides.
    Same,
    /// Right operand is a single element applied everywhere.
    Scalar,
    /// Right operand's dims equal a suffix of the left's; it repeats over
    /// the leading dims.
    Suffix,
}

pub fn broadcast_kind(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Result<Broadcast> {
    if lhs.dims == rhs.dims {
        Ok(Broadcast::Same)
    } else if rhs.numel() == 1 {
        Ok(Broadcast::Scalar)
    } else if rhs.rank() < lhs.rank() && lhs.dims.ends_with(&rhs.dims) {
        Ok(Broadcast::Suffix)
    } else {
        Err(shape_err(op, lhs, rhs))
    }
}

fn binary(op: &'static str, lhs: &Tensor, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    let kind = broadcast_kind(op, lhs, rhs)?;
    let mut data = Vec::with_capacity(lhs.numel());
    match kind {
        Broadcast::Same => {
            data.extend(lhs.data.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)));
        }
        Broadcast::Scalar => {
            let b = rhs.data[0];
            data.extend(lhs.data.iter().map(|&a| f(a, b)));
        }
        Broadcast::Suffix => {
            let chunk = rhs.numel();
            for block in lhs.data.chunks_exact(chunk) {
                data.extend(block.iter().zip(&rhs.data).map(|(&a, &b)| f(a, b)));
            }
        }
    }
    Ok(Tensor {
        dims: lhs.dims.clone(),
        data,
    })
}

/// Sum a gradient of `full` dims down to the broadcasted operand's dims.
pub fn reduce_broadcast(grad: &Tensor, kind: Broadcast, rhs_dims: &[usize]) -> Tensor {
    match kind {
        Broadcast::Same => grad.clone(),
        Broadcast::Scalar => Tensor::new(rhs_dims.to_vec(), vec![grad.data.iter().sum()]).unwrap(),
        Broadcast::Suffix => {
            let chunk: usize = rhs_dims.iter().product();
            let mut out = vec![0.0; chunk];
            for block in grad.data.chunks_exact(chunk) {
                for (o, &g) in out.iter_mut().zip(block) {
                    *o += g;
                }
            }
            Tensor::new(rhs_dims.to_vec(), out).unwrap()
        }
    }
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("mul", a, b, |x, y| x * y)
}

pub fn div(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    binary("div", a, b, |x, y| x / y)
}

/// Matrix product over the last two dims.
///
/// Either both operands have identical leading (batch) dims, or the right
/// operand is rank 2 and is shared across the left's batches.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(shape_err("matmul", a, b));
    }
    let (m, k) = (a.dims[a.rank() - 2], a.dims[a.rank() - 1]);
    let (kb, n) = (b.dims[b.rank() - 2], b.dims[b.rank() - 1]);
    let shared_rhs = b.rank() == 2 && a.rank() > 2;
    let batch_ok = shared_rhs || a.dims[..a.rank() - 2] == b.dims[..b.rank() - 2];
    if k != kb || !batch_ok {
        return Err(shape_err("matmul", a, b));
    }
    let batches: usize = a.dims[..a.rank() - 2].iter().product();
    let mut out_dims = a.dims[..a.rank() - 2].to_vec();
    out_dims.push(m);
    out_dims.push(n);
    let mut out = vec![0.0; batches * m * n];
    for t in 0..batches {
        let a_off = t * m * k;
        let b_off = if shared_rhs { 0 } else { t * k * n };
        let c_off = t * m * n;
        for i in 0..m {
            let c_row = &mut out[c_off + i * n..c_off + (i + 1) * n];
            for kk in 0..k {
                let aik = a.data[a_off + i * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let b_row = &b.data[b_off + kk * n..b_off + (kk + 1) * n];
                for (c, &bv) in c_row.iter_mut().zip(b_row) {
                    *c += aik * bv;
                }
            }
        }
    }
    Tensor::new(out_dims, out)
}

pub fn transpose_last_two(a: &Tensor) -> Result<Tensor> {
    if a.rank() < 2 {
        return Err(Error::Shape {
            op: "transpose-last-two",
            lhs: a.dims().to_vec(),
            rhs: vec![],
        });
    }
    let (m, n) = (a.dims[a.rank() - 2], a.dims[a.rank() - 1]);
    let batches: usize = a.dims[..a.rank() - 2].iter().product();
    let mut dims = a.dims.clone();
    let r = dims.len();
    dims.swap(r - 2, r - 1);
    let mut out = vec![0.0; a.numel()];
    for t in 0..batches {
        let off = t * m * n;
        for i in 0..m {
            for j in 0..n {
                out[off + j * m + i] = a.data[off + i * n + j];
            }
        }
    }
    Tensor::new(dims, out)
}

pub fn reshape(a: &Tensor, dims: &[usize]) -> Result<Tensor> {
    let numel: usize = dims.iter().product();
    if numel != a.numel() || dims.is_empty() {
        return Err(Error::Shape {
            op: "reshape",
            lhs: a.dims().to_vec(),
            rhs: dims.to_vec(),
        });
    }
    Tensor::new(dims.to_vec(), a.data.clone())
}

pub fn concat_last_dim(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::contract("concat-last-dim needs at least one tensor"));
    }
    let lead = &parts[0].dims[..parts[0].rank() - 1];
    for p in parts {
        if p.rank() != parts[0].rank() || &p.dims[..p.rank() - 1] != lead {
            return Err(shape_err("concat-last-dim", parts[0], p));
        }
    }
    let rows: usize = lead.iter().product();
    let widths: Vec<usize> = parts.iter().map(|p| p.last_dim()).collect();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data[r * w..(r + 1) * w]);
        }
    }
    let mut dims = lead.to_vec();
    dims.push(total);
    Tensor::new(dims, out)
}

/// Numerically stable softmax over the last dim.
///
/// A row whose maximum is -inf (fully masked) comes back all zero instead
/// of NaN; downstream matmuls then see it as contributing nothing.
pub fn softmax_last_dim(a: &Tensor) -> Tensor {
    let n = a.last_dim();
    let mut out = vec![0.0; a.numel()];
    for (row_in, row_out) in a.data.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let m = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            continue;
        }
        let mut sum = 0.0;
        for (o, &x) in row_out.iter_mut().zip(row_in) {
            let e = (x - m).exp();
            *o = e;
            sum += e;
        }
        for o in row_out.iter_mut() {
            *o /= sum;
        }
    }
    Tensor {
        dims: a.dims.clone(),
        data: out,
    }
}

/// Per-row standardization over the last dim with population variance and
/// epsilon inside the square root.
pub fn layer_norm_last_dim(a: &Tensor) -> Tensor {
    let n = a.last_dim();
    let mut out = vec![0.0; a.numel()];
    for (row_in, row_out) in a.data.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let mean = row_in.iter().sum::<f64>() / n as f64;
        let var = row_in.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let denom = (var + LAYER_NORM_EPS).sqrt();
        for (o, &x) in row_out.iter_mut().zip(row_in) {
            *o = (x - mean) / denom;
        }
    }
    Tensor {
        dims: a.dims.clone(),
        data: out,
    }
}

pub fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub fn gelu(a: &Tensor) -> Tensor {
    a.unary(gelu_scalar)
}

pub fn sin(a: &Tensor) -> Tensor {
    a.unary(f64::sin)
}

pub fn cos(a: &Tensor) -> Tensor {
    a.unary(f64::cos)
}

pub fn exp(a: &Tensor) -> Tensor {
    a.unary(f64::exp)
}

pub fn log(a: &Tensor) -> Tensor {
    a.unary(f64::ln)
}

pub fn sqrt(a: &Tensor) -> Tensor {
    a.unary(f64::sqrt)
}

/// Mean over the last dim, dropping it (a rank-1 input becomes a scalar).
pub fn mean_last_dim(a: &Tensor) -> Tensor {
    let n = a.last_dim();
    let rows = a.numel() / n;
    let mut out = Vec::with_capacity(rows);
    for row in a.data.chunks_exact(n) {
        out.push(row.iter().sum::<f64>() / n as f64);
    }
    let dims = if a.rank() == 1 {
        vec![1]
    } else {
        a.dims[..a.rank() - 1].to_vec()
    };
    Tensor::new(dims, out).unwrap()
}

/// Sum of every element, as a scalar tensor.
pub fn sum_all(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data.iter().sum())
}

/// Contiguous slice along one axis.
pub fn slice(a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= a.rank() || start + len > a.dims[axis] || len == 0 {
        return Err(Error::contract(format!(
            "slice axis {axis} [{start}, {}) out of range for dims {:?}",
            start + len,
            a.dims
        )));
    }
    let outer: usize = a.dims[..axis].iter().product();
    let mid = a.dims[axis];
    let inner: usize = a.dims[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * mid + start) * inner;
        out.extend_from_slice(&a.data[base..base + len * inner]);
    }
    let mut dims = a.dims.clone();
    dims[axis] = len;
    Tensor::new(dims, out)
}

/// Scatter a slice gradient back into a zero tensor of the input's dims.
pub fn unslice(grad: &Tensor, src_dims: &[usize], axis: usize, start: usize) -> Tensor {
    let len = grad.dims()[axis];
    let outer: usize = src_dims[..axis].iter().product();
    let mid = src_dims[axis];
    let inner: usize = src_dims[axis + 1..].iter().product();
    let mut out = vec![0.0; src_dims.iter().product()];
    for o in 0..outer {
        let dst = (o * mid + start) * inner;
        let src = o * len * inner;
        out[dst..dst + len * inner].copy_from_slice(&grad.data()[src..src + len * inner]);
    }
    Tensor::new(src_dims.to_vec(), out).unwrap()
}

/// Replace elements where `mask` is true with `value`.
pub fn masked_fill(a: &Tensor, mask: &[bool], value: f64) -> Result<Tensor> {
    if mask.len() != a.numel() {
        return Err(Error::contract(format!(
            "masked-fill mask has {} entries for {} elements",
            mask.len(),
            a.numel()
        )));
    }
    let data = a
        .data
        .iter()
        .zip(mask)
        .map(|(&x, &m)| if m { value } else { x })
        .collect();
    Ok(Tensor {
        dims: a.dims.clone(),
        data,
    })
}

/// Named parameter collection with deterministic (sorted) iteration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTree {
    map: BTreeMap<String, Tensor>,
}

impl ParamTree {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, value: Tensor) {
        self.map.insert(key.into(), value);
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.map.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor> {
        self.map.get_mut(key)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    pub fn remove(&mut self, key: &str) -> Option<Tensor> {
        self.map.remove(key)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn zeros_like(&self) -> ParamTree {
        let map = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.dims())))
            .collect();
        ParamTree { map }
    }

    pub fn total_elements(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(Tensor::all_finite)
    }
}

impl FromIterator<(String, Tensor)> for ParamTree {
    fn from_iter<T: IntoIterator<Item = (String, Tensor)>>(iter: T) -> Self {
        ParamTree {
            map: iter.into_iter().collect(),
        }
    }
}
