//! Eager tape for reverse-mode differentiation.
//!
//! Every op computes its value immediately and records how to propagate
//! gradients. Node indices are a topological order, so `backward` walks the
//! tape once in reverse.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::ops::Deref;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::substrate::gemm::{gemm, Operand};
use crate::substrate::{ParamId, ParamStore, StoreId, Tensor};

/// Additive variance guard inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Additive logit used to mask attention keys.
pub const MASK_LOGIT: f64 = -1e9;
/// Frames whose direction vector is shorter than this project to zero.
pub const PROJECTION_MIN_NORM: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value {
    Owned(Tensor),
    Shared(Arc<Tensor>),
}

impl Deref for Value {
    type Target = Tensor;
    fn deref(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Shared(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Param(StoreId, ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    MaskedMeanRows {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Im2Col {
        x: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    ProjectRows {
        beta: Var,
        alpha: Var,
        coef: Vec<f64>,
        guarded: Vec<bool>,
    },
    Norm2(Var),
    PairwiseGauss {
        x: Var,
        mu: Var,
        logvar: Var,
        spans: Vec<(usize, usize)>,
    },
    SmoothedNll {
        logp: Var,
        targets: Vec<usize>,
        eps: f64,
    },
    Jsd(Var, Var),
    Select {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param(..) => vec![],
            MatMul(a, b) | MatMulNT(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b)
            | Jsd(a, b) => vec![*a, *b],
            Scale(x, _) | Relu(x) | Gelu(x) | Tanh(x) | Exp(x) | Clamp(x, ..) | Softmax(x)
            | LogSoftmax(x) | Sum(x) | Mean(x) | Norm2(x) | Reshape(x) => vec![*x],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            MaskedMeanRows { x, .. }
            | SliceCols { x, .. }
            | SliceRows { x, .. }
            | Im2Col { x, .. }
            | Select { x, .. } => vec![*x],
            ConcatCols(vs) | ConcatRows(vs) => vs.clone(),
            GatherRows { table, .. } => vec![*table],
            ProjectRows { beta, alpha, .. } => vec![*beta, *alpha],
            PairwiseGauss { x, mu, logvar, .. } => vec![*x, *mu, *logvar],
            SmoothedNll { logp, .. } => vec![*logp],
        }
    }
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<(StoreId, ParamId), Tensor>,
}

impl Gradients {
    pub fn get(&self, store: &ParamStore, id: ParamId) -> Option<&Tensor> {
        self.map.get(&(store.id(), id))
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    /// Whether any gradient belongs to `store`.
    pub fn touches(&self, store: &ParamStore) -> bool {
        self.map.keys().any(|(s, _)| *s == store.id())
    }

    /// L2 norm over all gradients of `store`.
    pub fn global_norm(&self, store: &ParamStore) -> f64 {
        self.map
            .iter()
            .filter(|((s, _), _)| *s == store.id())
            .flat_map(|(_, t)| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.map.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
    }
}

/// Recording of op applications over parameter and constant leaves.
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<(StoreId, ParamId), Var>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch<T>(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<T> {
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// Graph whose parameter leaves never require gradients (inference).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v`'s value as a gradient-free leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.id(), id);
        if let Some(v) = self.param_vars.get(&key) {
            return *v;
        }
        self.nodes.push(Node {
            value: Value::Shared(store.shared(id)),
            op: Op::Param(store.id(), id),
            needs_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(key, v);
        v
    }

    /// Parameter leaf that is read but never differentiated.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Value::Shared(store.shared(id)),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return mismatch("matmul", self.shape(a), self.shape(b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            Operand::plain(self.value(a).data(), m, k),
            Operand::plain(self.value(b).data(), k, n),
            &mut out,
            false,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.dims(a), self.dims(b));
        if k != k2 {
            return mismatch("matmul_nt", self.shape(a), self.shape(b));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            Operand::plain(self.value(a).data(), m, k),
            Operand::t(self.value(b).data(), n, k),
            &mut out,
            false,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), "matmul_nt")
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return mismatch(name, self.shape(a), self.shape(b));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data)?, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x: [m,n] + row: [1,n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(row) != (1, n) {
            return mismatch("add_row", self.shape(x), self.shape(row));
        }
        let r = self.value(row).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, data)?, Op::AddRow(x, row), "add_row")
    }

    fn map(&mut self, x: Var, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| f(*v)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::new(shape, data)?, op, name)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, "scale", |v| v * c, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, "relu", |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, "gelu", |v| gelu_parts(v).0, Op::Gelu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, "tanh", f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, "exp", f64::exp, Op::Exp(x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map(x, "clamp", |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                s += e;
            }
            out[i * n..(i + 1) * n].iter_mut().for_each(|v| *v /= s);
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, Op::Softmax(x), "softmax")
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(Tensor::new(shape, out)?, Op::LogSoftmax(x), "log_softmax")
    }

    /// Row-wise layer normalization with affine `gamma`, `beta: [1,n]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.dims(gamma) != (1, n) || self.dims(beta) != (1, n) {
            return mismatch("layer_norm", self.shape(x), self.shape(gamma));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return invalid("mean of an empty tensor");
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Mean over the rows whose mask entry is true; `[T,d] -> [1,d]`.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (m, n) = self.dims(x);
        if mask.len() != m {
            return mismatch("masked_mean_rows", self.shape(x), &[mask.len()]);
        }
        let count = mask.iter().filter(|b| **b).count();
        if count == 0 {
            return invalid("masked_mean_rows: every position is masked");
        }
        let src = self.value(x).data();
        let mut acc = vec![0.0; n];
        for (i, keep) in mask.iter().enumerate() {
            if *keep {
                for j in 0..n {
                    acc[j] += src[i * n + j];
                }
            }
        }
        acc.iter_mut().for_each(|v| *v /= count as f64);
        self.push(
            Tensor::new(vec![1, n], acc)?,
            Op::MaskedMeanRows {
                x,
                mask: mask.to_vec(),
                count,
            },
            "masked_mean_rows",
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > n {
            return mismatch("slice_cols", self.shape(x), &[start, len]);
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + start + len]);
        }
        self.push(
            Tensor::new(vec![m, len], out)?,
            Op::SliceCols { x, start },
            "slice_cols",
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return invalid("concat_cols of nothing");
        };
        let m = self.dims(*first).0;
        let mut total = 0;
        for p in parts {
            let (pm, pn) = self.dims(*p);
            if pm != m {
                return mismatch("concat_cols", self.shape(*first), self.shape(*p));
            }
            total += pn;
        }
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for p in parts {
            let (_, pn) = self.dims(*p);
            let src = self.value(*p).data();
            for i in 0..m {
                out[i * total + off..i * total + off + pn].copy_from_slice(&src[i * pn..(i + 1) * pn]);
            }
            off += pn;
        }
        self.push(
            Tensor::new(vec![m, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            "concat_cols",
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start + len > m {
            return mismatch("slice_rows", self.shape(x), &[start, len]);
        }
        let out = self.value(x).data()[start * n..(start + len) * n].to_vec();
        self.push(
            Tensor::new(vec![len, n], out)?,
            Op::SliceRows { x, start },
            "slice_rows",
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return invalid("concat_rows of nothing");
        };
        let n = self.dims(*first).1;
        let mut out = Vec::new();
        let mut m = 0;
        for p in parts {
            let (pm, pn) = self.dims(*p);
            if pn != n {
                return mismatch("concat_rows", self.shape(*first), self.shape(*p));
            }
            out.extend_from_slice(self.value(*p).data());
            m += pm;
        }
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::ConcatRows(parts.to_vec()),
            "concat_rows",
        )
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(table);
        if let Some(bad) = ids.iter().find(|i| **i >= m) {
            return invalid(format!("gather_rows: id {bad} outside table of {m} rows"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        self.push(
            Tensor::new(vec![ids.len(), n], out)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            "gather_rows",
        )
    }

    /// Output length of a 1-D convolution window scan.
    pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = len + 2 * pad;
        if padded < kernel || stride == 0 {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    /// Unfolds `x: [T,C]` into convolution windows `[T_out, kernel*C]`
    /// with zero padding of `pad` rows on both ends.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (t, c) = self.dims(x);
        let Some(t_out) = Self::conv_out_len(t, kernel, stride, pad) else {
            return invalid(format!(
                "im2col: input of {t} frames is shorter than kernel {kernel} (pad {pad})"
            ));
        };
        let src = self.value(x).data();
        let w = kernel * c;
        let mut out = vec![0.0; t_out * w];
        for o in 0..t_out {
            for j in 0..kernel {
                let r = (o * stride + j) as isize - pad as isize;
                if r >= 0 && (r as usize) < t {
                    let r = r as usize;
                    out[o * w + j * c..o * w + (j + 1) * c].copy_from_slice(&src[r * c..(r + 1) * c]);
                }
            }
        }
        self.push(
            Tensor::new(vec![t_out, w], out)?,
            Op::Im2Col {
                x,
                kernel,
                stride,
                pad,
            },
            "im2col",
        )
    }

    /// Per-row projection of `beta` onto the direction of `alpha`:
    /// `(<b,a>/<a,a>) a`, or zero where `|a| < PROJECTION_MIN_NORM`.
    pub fn project_rows(&mut self, beta: Var, alpha: Var) -> Result<Var> {
        if self.shape(beta) != self.shape(alpha) {
            return mismatch("project_rows", self.shape(beta), self.shape(alpha));
        }
        let (m, n) = self.dims(beta);
        let b = self.value(beta).data();
        let a = self.value(alpha).data();
        let mut out = vec![0.0; m * n];
        let mut coef = vec![0.0; m];
        let mut guarded = vec![false; m];
        for i in 0..m {
            let ar = &a[i * n..(i + 1) * n];
            let br = &b[i * n..(i + 1) * n];
            let aa: f64 = ar.iter().map(|v| v * v).sum();
            if aa.sqrt() < PROJECTION_MIN_NORM {
                guarded[i] = true;
                continue;
            }
            let ab: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            let s = ab / aa;
            coef[i] = s;
            for j in 0..n {
                out[i * n + j] = s * ar[j];
            }
        }
        let shape = self.shape(beta).to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::ProjectRows {
                beta,
                alpha,
                coef,
                guarded,
            },
            "project_rows",
        )
    }

    /// Euclidean norm of all entries, as a scalar.
    pub fn norm2(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(Tensor::scalar(s), Op::Norm2(x), "norm2")
    }

    /// Diagonal-Gaussian log densities between all sample pairs.
    ///
    /// `x`, `mu`, `logvar` stack the frames of N samples, sample `i` owning
    /// rows `spans[i] = (start, len)`. Entry `[i, j]` is the mean over
    /// `t < min(len_i, len_j)` of `log N(x_j[t]; mu_i[t], exp(logvar_i[t]))`.
    pub fn pairwise_gaussian_log_density(
        &mut self,
        x: Var,
        mu: Var,
        logvar: Var,
        spans: &[(usize, usize)],
    ) -> Result<Var> {
        if self.shape(x) != self.shape(mu) || self.shape(x) != self.shape(logvar) {
            return mismatch("pairwise_gaussian_log_density", self.shape(x), self.shape(mu));
        }
        let (rows, d) = self.dims(x);
        for &(s, l) in spans {
            if l == 0 || s + l > rows {
                return invalid("pairwise_gaussian_log_density: span outside frames");
            }
        }
        let n = spans.len();
        let (xv, mv, lv) = (
            self.value(x).data(),
            self.value(mu).data(),
            self.value(logvar).data(),
        );
        let mut out = vec![0.0; n * n];
        for (i, &(si, li)) in spans.iter().enumerate() {
            for (j, &(sj, lj)) in spans.iter().enumerate() {
                let len = li.min(lj);
                let mut acc = 0.0;
                for t in 0..len {
                    let xr = &xv[(sj + t) * d..(sj + t + 1) * d];
                    let mr = &mv[(si + t) * d..(si + t + 1) * d];
                    let lr = &lv[(si + t) * d..(si + t + 1) * d];
                    for k in 0..d {
                        let diff = xr[k] - mr[k];
                        acc += diff * diff * (-lr[k]).exp() + lr[k] + LN_2PI;
                    }
                }
                out[i * n + j] = -0.5 * acc / len as f64;
            }
        }
        self.push(
            Tensor::new(vec![n, n], out)?,
            Op::PairwiseGauss {
                x,
                mu,
                logvar,
                spans: spans.to_vec(),
            },
            "pairwise_gaussian_log_density",
        )
    }

    /// Label-smoothed negative log-likelihood summed over rows of the
    /// log-probabilities `logp: [T,V]`, targeting `(1-eps)·onehot + eps/V`.
    pub fn smoothed_nll(&mut self, logp: Var, targets: &[usize], eps: f64) -> Result<Var> {
        let (m, v) = self.dims(logp);
        if targets.len() != m {
            return mismatch("smoothed_nll", self.shape(logp), &[targets.len()]);
        }
        if let Some(bad) = targets.iter().find(|t| **t >= v) {
            return invalid(format!("smoothed_nll: target {bad} outside {v} classes"));
        }
        let lp = self.value(logp).data();
        let mut loss = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            let row = &lp[i * v..(i + 1) * v];
            let uniform: f64 = row.iter().sum::<f64>() / v as f64;
            loss -= (1.0 - eps) * row[y] + eps * uniform;
        }
        self.push(
            Tensor::scalar(loss),
            Op::SmoothedNll {
                logp,
                targets: targets.to_vec(),
                eps,
            },
            "smoothed_nll",
        )
    }

    /// Jensen-Shannon divergence (natural log) between rows of two
    /// log-probability tensors, summed over rows.
    pub fn jsd(&mut self, logp: Var, logq: Var) -> Result<Var> {
        if self.shape(logp) != self.shape(logq) {
            return mismatch("jsd", self.shape(logp), self.shape(logq));
        }
        let a = self.value(logp).data();
        let b = self.value(logq).data();
        let mut total = 0.0;
        for (x, y) in a.iter().zip(b) {
            let lm = log_add_exp(*x, *y) - std::f64::consts::LN_2;
            let p = x.exp();
            let q = y.exp();
            if p > 0.0 {
                total += 0.5 * p * (x - lm);
            }
            if q > 0.0 {
                total += 0.5 * q * (y - lm);
            }
        }
        self.push(Tensor::scalar(total), Op::Jsd(logp, logq), "jsd")
    }

    /// Flat-index gather into a `[1, idx.len()]` row.
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if let Some(bad) = idx.iter().find(|i| **i >= t.len()) {
            return invalid(format!("select: index {bad} outside {} values", t.len()));
        }
        let out = idx.iter().map(|i| t.data()[*i]).collect();
        self.push(
            Tensor::new(vec![1, idx.len()], out)?,
            Op::Select {
                x,
                idx: idx.to_vec(),
            },
            "select",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x), "reshape")
    }

    /// Reverse pass from a scalar `loss`; returns gradients for every
    /// parameter leaf that influenced it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let n = node.value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) -> Result<()> {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(store, id) => {
                let shape = node.value.shape().to_vec();
                let entry = out
                    .map
                    .entry((*store, *id))
                    .or_insert_with(|| Tensor::zeros(&shape));
                entry.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(Operand::plain(g, m, n), Operand::t(bv, k, n), ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(Operand::t(av, m, k), Operand::plain(g, m, n), gb, true);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(Operand::plain(g, m, n), Operand::plain(bv, n, k), ga, true);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(Operand::t(g, m, n), Operand::plain(av, m, k), gb, true);
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, d)| *x += d);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(x, row) => {
                let n = self.dims(*row).1;
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, d)| *a += d);
                }
                if let Some(gr) = self.acc(grads, *row) {
                    for (i, d) in g.iter().enumerate() {
                        gr[i % n] += d;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, d)| *a += c * d);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_parts(xv[i]).1;
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i];
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        if xv[i] > *lo && xv[i] < *hi {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let (m, n) = self.dims(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                        for j in r {
                            gx[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let (m, n) = self.dims(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let s: f64 = g[r.clone()].iter().sum();
                        for j in r {
                            gx[j] += g[j] - y[j].exp() * s;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.dims(*x);
                let gv = self.value(*gamma).data();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for i in 0..m * n {
                        gg[i % n] += g[i] * xhat[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for i in 0..m * n {
                        gb[i % n] += g[i];
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0; n];
                    for i in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let d = g[i * n + j] * gv[j];
                            dxhat[j] = d;
                            mean_d += d;
                            mean_dx += d * xhat[i * n + j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            gx[i * n + j] += rstd[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let n = gx.len() as f64;
                    gx.iter_mut().for_each(|a| *a += g[0] / n);
                }
            }
            Op::MaskedMeanRows { x, mask, count } => {
                let n = self.dims(*x).1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, keep) in mask.iter().enumerate() {
                        if *keep {
                            for j in 0..n {
                                gx[i * n + j] += g[j] / *count as f64;
                            }
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims(*x);
                let len = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..m {
                        for j in 0..len {
                            gx[i * n + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut off = 0;
                for p in parts {
                    let pn = self.dims(*p).1;
                    if let Some(gp) = self.acc(grads, *p) {
                        for i in 0..m {
                            for j in 0..pn {
                                gp[i * pn + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += pn;
                }
            }
            Op::SliceRows { x, start } => {
                let n = self.dims(*x).1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (k, d) in g.iter().enumerate() {
                        gx[start * n + k] += d;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(gp) = self.acc(grads, *p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(a, d)| *a += d);
                    }
                    off += len;
                }
            }
            Op::GatherRows { table, ids } => {
                let n = self.dims(*table).1;
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..n {
                            gt[id * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::Im2Col {
                x,
                kernel,
                stride,
                pad,
            } => {
                let (t, c) = self.dims(*x);
                let t_out = node.value.rows();
                let w = kernel * c;
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..t_out {
                        for j in 0..*kernel {
                            let r = (o * stride + j) as isize - *pad as isize;
                            if r >= 0 && (r as usize) < t {
                                let r = r as usize;
                                for k in 0..c {
                                    gx[r * c + k] += g[o * w + j * c + k];
                                }
                            }
                        }
                    }
                }
            }
            Op::ProjectRows {
                beta,
                alpha,
                coef,
                guarded,
            } => {
                let (m, n) = self.dims(*beta);
                let av = self.value(*alpha).data();
                let bv = self.value(*beta).data();
                // ds = <g, a>; d beta = ds/aa · a; d alpha = s·g + ds·(b - 2 s a)/aa
                let mut ds = vec![0.0; m];
                let mut aa = vec![0.0; m];
                for i in 0..m {
                    if guarded[i] {
                        continue;
                    }
                    let r = i * n..(i + 1) * n;
                    ds[i] = g[r.clone()].iter().zip(&av[r.clone()]).map(|(x, y)| x * y).sum();
                    aa[i] = av[r].iter().map(|v| v * v).sum();
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for i in 0..m {
                        if guarded[i] {
                            continue;
                        }
                        for j in 0..n {
                            gb[i * n + j] += ds[i] / aa[i] * av[i * n + j];
                        }
                    }
                }
                if let Some(ga) = self.acc(grads, *alpha) {
                    for i in 0..m {
                        if guarded[i] {
                            continue;
                        }
                        let s = coef[i];
                        for j in 0..n {
                            let k = i * n + j;
                            ga[k] += s * g[k] + ds[i] * (bv[k] - 2.0 * s * av[k]) / aa[i];
                        }
                    }
                }
            }
            Op::Norm2(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    if y[0] > 0.0 {
                        for i in 0..xv.len() {
                            gx[i] += g[0] * xv[i] / y[0];
                        }
                    }
                }
            }
            Op::PairwiseGauss {
                x,
                mu,
                logvar,
                spans,
            } => {
                let d = self.dims(*x).1;
                let n = spans.len();
                let (xv, mv, lv) = (
                    self.value(*x).data(),
                    self.value(*mu).data(),
                    self.value(*logvar).data(),
                );
                let rows = self.dims(*x).0;
                let mut gx = vec![0.0; rows * d];
                let mut gm = vec![0.0; rows * d];
                let mut gl = vec![0.0; rows * d];
                for (i, &(si, li)) in spans.iter().enumerate() {
                    for (j, &(sj, lj)) in spans.iter().enumerate() {
                        let w = g[i * n + j];
                        if w == 0.0 {
                            continue;
                        }
                        let len = li.min(lj);
                        let w = w / len as f64;
                        for t in 0..len {
                            for k in 0..d {
                                let xi = (sj + t) * d + k;
                                let pi = (si + t) * d + k;
                                let iv = (-lv[pi]).exp();
                                let diff = xv[xi] - mv[pi];
                                gx[xi] -= w * diff * iv;
                                gm[pi] += w * diff * iv;
                                gl[pi] -= 0.5 * w * (1.0 - diff * diff * iv);
                            }
                        }
                    }
                }
                for (v, buf) in [(*x, gx), (*mu, gm), (*logvar, gl)] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::SmoothedNll { logp, targets, eps } => {
                let v = self.dims(*logp).1;
                if let Some(gl) = self.acc(grads, *logp) {
                    let u = eps / v as f64;
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            gl[i * v + j] -= g[0] * u;
                        }
                        gl[i * v + t] -= g[0] * (1.0 - eps);
                    }
                }
            }
            Op::Jsd(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let lm: Vec<f64> = av
                    .iter()
                    .zip(bv)
                    .map(|(x, y)| log_add_exp(*x, *y) - std::f64::consts::LN_2)
                    .collect();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..av.len() {
                        let p = av[i].exp();
                        if p > 0.0 {
                            ga[i] += g[0] * 0.5 * p * (av[i] - lm[i]);
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..bv.len() {
                        let q = bv[i].exp();
                        if q > 0.0 {
                            gb[i] += g[0] * 0.5 * q * (bv[i] - lm[i]);
                        }
                    }
                }
            }
            Op::Select { x, idx } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (k, &i) in idx.iter().enumerate() {
                        gx[i] += g[k];
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, d)| *a += d);
                }
            }
        }
        Ok(())
    }
}

/// Log density of `x` under a diagonal Gaussian, summed over dimensions.
pub fn diag_gaussian_log_density(x: &[f64], mean: &[f64], logvar: &[f64]) -> f64 {
    -0.5 * x
        .iter()
        .zip(mean)
        .zip(logvar)
        .map(|((x, m), lv)| (x - m) * (x - m) * (-lv).exp() + lv + (2.0 * PI).ln())
        .sum::<f64>()
}
