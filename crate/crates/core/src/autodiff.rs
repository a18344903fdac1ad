//! Tensor-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive as a node holding its output value and
//! the information its vector-Jacobian product needs. Nodes are appended in
//! evaluation order, so walking the node list backwards is a reverse
//! topological order and each node is visited exactly once.
//!
//! Learnable tensors live in a [`ParamStore`]. Reading one onto a tape with
//! [`Tape::param`] records the link; [`Tape::backward`] adds the gradient of
//! the loss into [`Parameter::grad`]. Gradients accumulate across calls until
//! [`ParamStore::zero_grads`].
//!
//! Matrices are tensors whose trailing axis is the column axis; all leading
//! axes are flattened into rows.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, HpdtError, Result};
use crate::tensor::{kernels, NdTensor};

/// `sqrt(2/pi)`, the tanh-approximation GELU scale.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh-approximation GELU.
pub const GELU_CUBIC: f64 = 0.044_715;
/// Variance epsilon used by [`Tape::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: NdTensor,
    pub grad: NdTensor,
}

/// Named learnable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: NdTensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return invalid(format!("duplicate parameter name {name:?}"));
        }
        let grad = NdTensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst {
        x: Var,
        factors: Vec<f64>,
    },
    ScaleRows {
        x: Var,
        factors: Vec<f64>,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Gather {
        parts: Vec<Var>,
        index: Vec<(u32, u32)>,
    },
    GroupMean {
        x: Var,
        offsets: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Time2Vec {
        omega: Var,
        phi: Var,
        tau: Vec<f64>,
    },
    MaskedMse {
        pred: Var,
        target: Var,
        mask: Vec<f64>,
        denom: f64,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: NdTensor,
    op: Op,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

fn same_shape(a: &NdTensor, b: &NdTensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
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

    fn push(&mut self, value: NdTensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &NdTensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: NdTensor) -> Var {
        self.push(value, Op::Constant)
    }

    /// Reads a parameter onto the tape; repeated reads return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id));
        self.param_nodes.insert(id, v);
        v
    }

    /// `x · w (+ b)` with `x: [.., in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x), self.value(w));
        if ws.shape().len() != 2 {
            return shape_err(format!("linear weight must be 2-D, got {:?}", ws.shape()));
        }
        let (k, m) = (ws.shape()[0], ws.shape()[1]);
        if xs.cols() != k {
            return shape_err(format!(
                "linear: input width {} does not match weight rows {k} (weight {:?})",
                xs.cols(),
                ws.shape()
            ));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [m] {
                return shape_err(format!(
                    "linear: bias shape {:?} does not match output width {m}",
                    self.value(b).shape()
                ));
            }
        }
        let n = xs.rows();
        let mut out = vec![0.0; n * m];
        kernels::matmul(xs.data(), ws.data(), &mut out, n, k, m);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_exact_mut(m) {
                for (o, bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        let value = NdTensor::new(shape, out)?;
        Ok(self.push(value, Op::Linear { x, w, b }))
    }

    fn zip_op(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<NdTensor> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, what)?;
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        NdTensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_op(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_op(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_op(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * c).collect();
        let v = NdTensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(v, Op::Scale(a, c))
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if factors.len() != xv.len() {
            return shape_err(format!("mul_const: {} factors for {} values", factors.len(), xv.len()));
        }
        let data = xv.data().iter().zip(&factors).map(|(a, f)| a * f).collect();
        let v = NdTensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(v, Op::MulConst { x, factors }))
    }

    /// Multiplies each row by a constant factor.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if factors.len() != xv.rows() {
            return shape_err(format!("scale_rows: {} factors for {} rows", factors.len(), xv.rows()));
        }
        let c = xv.cols();
        let data = xv
            .data()
            .chunks_exact(c)
            .zip(&factors)
            .flat_map(|(r, f)| r.iter().map(move |v| v * f))
            .collect();
        let v = NdTensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(v, Op::ScaleRows { x, factors }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_scalar(v)).collect();
        let v = NdTensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(v, Op::Gelu(x))
    }

    /// Per-row standardization (ε = 1e-5 inside the square root) followed by `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if self.value(gain).shape() != [n] || self.value(bias).shape() != [n] {
            return shape_err(format!(
                "layer_norm: gain/bias {:?}/{:?} do not match width {n}",
                self.value(gain).shape(),
                self.value(bias).shape()
            ));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let v = NdTensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax over the trailing axis, max-subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        let v = NdTensor::new(xv.shape().to_vec(), out).expect("same shape");
        self.push(v, Op::Softmax(x))
    }

    /// Multi-head scaled dot-product attention with a causal mask.
    ///
    /// `q`, `k`, `v` are `[batch * len, width]` with sequences stored
    /// contiguously; head `h` owns columns `h*dh..(h+1)*dh`. Position `i`
    /// attends to positions `0..=i` of its own sequence.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, len: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        same_shape(qv, kv, "attention q/k")?;
        same_shape(qv, vv, "attention q/v")?;
        let width = qv.cols();
        if qv.rows() != batch * len {
            return shape_err(format!("attention: {} rows for batch {batch} x len {len}", qv.rows()));
        }
        if heads == 0 || width % heads != 0 {
            return shape_err(format!("attention: width {width} not divisible by {heads} heads"));
        }
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; batch * len * width];
        let mut probs = vec![0.0; batch * heads * len * len];
        let mut scores = vec![0.0; len];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * len * len;
                for i in 0..len {
                    let qi = &qd[(b * len + i) * width + h * dh..][..dh];
                    for j in 0..=i {
                        let kj = &kd[(b * len + j) * width + h * dh..][..dh];
                        scores[j] = qi.iter().zip(kj).map(|(a, c)| a * c).sum::<f64>() * scale;
                    }
                    softmax_in_place(&mut scores[..=i]);
                    let oi = &mut out[(b * len + i) * width + h * dh..][..dh];
                    for j in 0..=i {
                        let p = scores[j];
                        probs[pbase + i * len + j] = p;
                        let vj = &vd[(b * len + j) * width + h * dh..][..dh];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let value = NdTensor::new(qv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                len,
                heads,
                probs,
            },
        ))
    }

    /// Builds a matrix whose row `r` is row `index[r].1` of `parts[index[r].0]`.
    ///
    /// All parts must share the column count. Used for interleaving token
    /// streams, prepending prefix tokens and reading out positions.
    pub fn gather_rows(&mut self, parts: &[Var], index: Vec<(u32, u32)>) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("gather_rows: no parts");
        };
        let c = self.value(first).cols();
        for &p in parts {
            if self.value(p).cols() != c {
                return shape_err(format!(
                    "gather_rows: part widths differ ({} vs {c})",
                    self.value(p).cols()
                ));
            }
        }
        if index.is_empty() {
            return shape_err("gather_rows: empty index");
        }
        let mut out = Vec::with_capacity(index.len() * c);
        for &(p, r) in &index {
            let Some(&part) = parts.get(p as usize) else {
                return shape_err(format!("gather_rows: part {p} out of range"));
            };
            let pv = self.value(part);
            if r as usize >= pv.rows() {
                return shape_err(format!("gather_rows: row {r} out of range for part {p} ({} rows)", pv.rows()));
            }
            out.extend_from_slice(pv.row(r as usize));
        }
        let value = NdTensor::matrix(index.len(), c, out)?;
        Ok(self.push(
            value,
            Op::Gather {
                parts: parts.to_vec(),
                index,
            },
        ))
    }

    /// Averages consecutive row groups: group `g` covers rows `offsets[g]..offsets[g+1]`.
    pub fn group_mean(&mut self, x: Var, offsets: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != xv.rows() {
            return shape_err(format!("group_mean: offsets must span 0..{}", xv.rows()));
        }
        if offsets.windows(2).any(|w| w[1] <= w[0]) {
            return shape_err("group_mean: empty or decreasing group");
        }
        let groups = offsets.len() - 1;
        let mut out = vec![0.0; groups * c];
        for g in 0..groups {
            let (s, e) = (offsets[g], offsets[g + 1]);
            let o = &mut out[g * c..(g + 1) * c];
            for r in s..e {
                for (acc, v) in o.iter_mut().zip(xv.row(r)) {
                    *acc += v;
                }
            }
            let inv = 1.0 / (e - s) as f64;
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let value = NdTensor::matrix(groups, c, out)?;
        Ok(self.push(value, Op::GroupMean { x, offsets }))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if start >= end || end > c {
            return shape_err(format!("slice_cols: {start}..{end} out of 0..{c}"));
        }
        let data = xv
            .data()
            .chunks_exact(c)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let value = NdTensor::matrix(xv.rows(), end - start, data)?;
        Ok(self.push(value, Op::SliceCols { x, start }))
    }

    /// Time2Vec rows for the scaled times `tau`: channel 0 is `ω₀τ + φ₀`,
    /// channels `i ≥ 1` are `sin(ω_i τ + φ_i)`.
    pub fn time2vec(&mut self, omega: Var, phi: Var, tau: Vec<f64>) -> Result<Var> {
        let (w, p) = (self.value(omega), self.value(phi));
        same_shape(w, p, "time2vec omega/phi")?;
        let h = w.len();
        if h < 2 {
            return shape_err("time2vec needs at least 2 channels");
        }
        if tau.is_empty() {
            return shape_err("time2vec: no time steps");
        }
        let (wd, pd) = (w.data(), p.data());
        let mut out = Vec::with_capacity(tau.len() * h);
        for &t in &tau {
            out.push(wd[0] * t + pd[0]);
            for i in 1..h {
                out.push((wd[i] * t + pd[i]).sin());
            }
        }
        let value = NdTensor::matrix(tau.len(), h, out)?;
        Ok(self.push(value, Op::Time2Vec { omega, phi, tau }))
    }

    /// `Σ mask (pred − target)² / Σ mask`, a scalar.
    pub fn masked_mse(&mut self, pred: Var, target: Var, mask: Vec<f64>) -> Result<Var> {
        let (pv, tv) = (self.value(pred), self.value(target));
        same_shape(pv, tv, "mse pred/target")?;
        if mask.len() != pv.len() {
            return shape_err(format!("mse: mask has {} entries for {} values", mask.len(), pv.len()));
        }
        if mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return invalid("mse: mask entries must be 0 or 1");
        }
        let denom: f64 = mask.iter().sum();
        if denom == 0.0 {
            return invalid("mse: mask is all zero (no supervised positions)");
        }
        let num: f64 = pv
            .data()
            .iter()
            .zip(tv.data())
            .zip(&mask)
            .map(|((p, t), m)| m * (p - t) * (p - t))
            .sum();
        Ok(self.push(
            NdTensor::scalar(num / denom),
            Op::MaskedMse {
                pred,
                target,
                mask,
                denom,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(NdTensor::scalar(s), Op::Sum(x))
    }

    /// Back-propagates from a scalar `loss`, accumulating parameter gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(HpdtError::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads, store);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>], store: &mut ParamStore) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                for (d, s) in store.get_mut(*id).grad.data_mut().iter_mut().zip(g) {
                    *d += s;
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (k, m) = (wv.shape()[0], wv.shape()[1]);
                let n = xv.rows();
                acc(*x, &mut |dx| kernels::matmul_grad_x(g, wv.data(), dx, n, k, m));
                acc(*w, &mut |dw| kernels::matmul_grad_w(xv.data(), g, dw, n, k, m));
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for row in g.chunks_exact(m) {
                            for (d, s) in db.iter_mut().zip(row) {
                                *d += s;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, s)| *x -= s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for ((x, s), y) in d.iter_mut().zip(g).zip(bv) {
                        *x += s * y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((x, s), y) in d.iter_mut().zip(g).zip(av) {
                        *x += s * y;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, s)| *x += s * c)),
            Op::MulConst { x, factors } => acc(*x, &mut |d| {
                for ((x, s), f) in d.iter_mut().zip(g).zip(factors) {
                    *x += s * f;
                }
            }),
            Op::ScaleRows { x, factors } => {
                let c = node.value.cols();
                acc(*x, &mut |d| {
                    for ((dr, gr), f) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(factors) {
                        for (x, s) in dr.iter_mut().zip(gr) {
                            *x += s * f;
                        }
                    }
                })
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |d| {
                    for ((dx, s), v) in d.iter_mut().zip(g).zip(xv) {
                        *dx += s * gelu_grad_scalar(*v);
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.cols();
                let gv = self.value(*gain).data();
                acc(*gain, &mut |d| {
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            d[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for gr in g.chunks_exact(n) {
                        add_into(d, gr);
                    }
                });
                acc(*x, &mut |d| {
                    let mut dh = vec![0.0; n];
                    for (r, ((dr, gr), hr)) in d
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(xhat.chunks_exact(n))
                        .enumerate()
                    {
                        for j in 0..n {
                            dh[j] = gr[j] * gv[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            dr[j] += inv_std[r] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(y.chunks_exact(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                })
            }
            Op::CausalAttention {
                q,
                k,
                v,
                batch,
                len,
                heads,
                probs,
            } => {
                let (batch, len, heads) = (*batch, *len, *heads);
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let width = node.value.cols();
                let dh = width / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let total = batch * len * width;
                let mut dq = vec![0.0; total];
                let mut dk = vec![0.0; total];
                let mut dv = vec![0.0; total];
                let mut dp = vec![0.0; len];
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * len * len;
                        for i in 0..len {
                            let gi = &g[(b * len + i) * width + h * dh..][..dh];
                            let prow = &probs[pbase + i * len..][..=i];
                            for j in 0..=i {
                                let vj = &vd[(b * len + j) * width + h * dh..][..dh];
                                dp[j] = gi.iter().zip(vj).map(|(a, c)| a * c).sum();
                                let dvj = &mut dv[(b * len + j) * width + h * dh..][..dh];
                                for (d, s) in dvj.iter_mut().zip(gi) {
                                    *d += prow[j] * s;
                                }
                            }
                            let dot: f64 = (0..=i).map(|j| prow[j] * dp[j]).sum();
                            let qi_off = (b * len + i) * width + h * dh;
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj_off = (b * len + j) * width + h * dh;
                                for c in 0..dh {
                                    dq[qi_off + c] += ds * kd[kj_off + c];
                                    dk[kj_off + c] += ds * qd[qi_off + c];
                                }
                            }
                        }
                    }
                }
                acc(*q, &mut |d| add_into(d, &dq));
                acc(*k, &mut |d| add_into(d, &dk));
                acc(*v, &mut |d| add_into(d, &dv));
            }
            Op::Gather { parts, index } => {
                let c = node.value.cols();
                for (pi, &part) in parts.iter().enumerate() {
                    acc(part, &mut |d| {
                        for (r, &(p, src)) in index.iter().enumerate() {
                            if p as usize == pi {
                                let src = src as usize;
                                add_into(&mut d[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                            }
                        }
                    });
                }
            }
            Op::GroupMean { x, offsets } => {
                let c = node.value.cols();
                acc(*x, &mut |d| {
                    for (gi, w) in offsets.windows(2).enumerate() {
                        let inv = 1.0 / (w[1] - w[0]) as f64;
                        let gr = &g[gi * c..(gi + 1) * c];
                        for r in w[0]..w[1] {
                            for (x, s) in d[r * c..(r + 1) * c].iter_mut().zip(gr) {
                                *x += s * inv;
                            }
                        }
                    }
                })
            }
            Op::SliceCols { x, start } => {
                let c_in = self.value(*x).cols();
                let c_out = node.value.cols();
                acc(*x, &mut |d| {
                    for (dr, gr) in d.chunks_exact_mut(c_in).zip(g.chunks_exact(c_out)) {
                        add_into(&mut dr[*start..*start + c_out], gr);
                    }
                })
            }
            Op::Time2Vec { omega, phi, tau } => {
                let wd = self.value(*omega).data();
                let pd = self.value(*phi).data();
                let h = wd.len();
                let mut dw = vec![0.0; h];
                let mut dphi = vec![0.0; h];
                for (gr, &t) in g.chunks_exact(h).zip(tau) {
                    dw[0] += gr[0] * t;
                    dphi[0] += gr[0];
                    for i in 1..h {
                        let c = (wd[i] * t + pd[i]).cos();
                        dw[i] += gr[i] * c * t;
                        dphi[i] += gr[i] * c;
                    }
                }
                acc(*omega, &mut |d| add_into(d, &dw));
                acc(*phi, &mut |d| add_into(d, &dphi));
            }
            Op::MaskedMse {
                pred,
                target,
                mask,
                denom,
            } => {
                let s = g[0] * 2.0 / denom;
                let (pv, tv) = (self.value(*pred).data(), self.value(*target).data());
                acc(*pred, &mut |d| {
                    for (i, x) in d.iter_mut().enumerate() {
                        *x += s * mask[i] * (pv[i] - tv[i]);
                    }
                });
                acc(*target, &mut |d| {
                    for (i, x) in d.iter_mut().enumerate() {
                        *x -= s * mask[i] * (pv[i] - tv[i]);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
        }
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (a, b) in d.iter_mut().zip(g) {
        *a += b;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}
