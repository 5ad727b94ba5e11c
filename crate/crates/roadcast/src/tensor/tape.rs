//! Wengert-list reverse-mode automatic differentiation.
//!
//! Ops execute eagerly and append one node each to the tape, so the node
//! sequence is topologically ordered by construction. [`Tape::backward`]
//! sweeps the list once in reverse and adds gradients into the
//! [`ParameterStore`] entries the tape's leaves were bound to (accumulate
//! semantics: call [`ParameterStore::zero_grads`] between steps).

use std::collections::BTreeMap;
use std::io::Write;

use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Tensor};

/// Inputs to `exp`/`sigmoid` are clamped to this magnitude before
/// exponentiation; the clamp region back-propagates a zero gradient.
pub const EXP_CLAMP: f64 = 40.0;

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Matmul(Var, Var),
    BatchMatmul(Var, Var),
    Transpose(Var),
    TransposeLast2(Var),
    SwapAxes01(Var),
    Reshape(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Softplus(Var),
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    SumAxis { input: Var, axis: usize },
    MeanAxis { input: Var, axis: usize },
    SumAll(Var),
    MeanAll(Var),
    ConcatLast(Vec<Var>),
    SliceLast { input: Var, start: usize },
    AddRowBias(Var, Var),
    MulRowGate(Var, Var),
    AddTimeBias(Var, Var),
    MulTimeGate(Var, Var),
    MulExpandLast(Var, Var),
    PermuteRows { input: Var, perm: Vec<usize> },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Vec<f64>,
    needs_grad: bool,
    param: Option<String>,
}

/// Append-only record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// ── dense 2-D kernels ────────────────────────────────────────────────

/// c[m,n] = a[m,k] · b[k,n]
pub(crate) fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let b_row = &b[p * n..(p + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += av * bv;
                }
            }
        }
    }
    c
}

/// c[m,k] = a[m,n] · b[k,n]ᵀ
fn matmul_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            c[i * k + p] = s;
        }
    }
    c
}

/// c[k,n] = a[m,k]ᵀ · b[m,n]
fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let c_row = &mut c[p * n..(p + 1) * n];
                for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                    *cv += av * bv;
                }
            }
        }
    }
    c
}

/// Decomposes `shape` around `axis` into (outer, len, inner) extents.
fn lane_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            shape,
            data,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── leaves ───────────────────────────────────────────────────────

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        let data = t.data().to_vec();
        self.push(Op::Leaf, shape, data, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, vec![], vec![value], false)
    }

    /// Binds a store parameter as a differentiable leaf. `backward` adds the
    /// leaf's gradient into the store entry of the same name.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        let t = store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        let v = self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad);
        self.nodes[v.0].param = Some(name.to_string());
        Ok(v)
    }

    /// Binds every store parameter, in lexicographic name order.
    pub fn bind_all(&mut self, store: &ParameterStore) -> BTreeMap<String, Var> {
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let mut map = BTreeMap::new();
        for name in names {
            let v = self.param(store, &name).expect("name taken from store");
            map.insert(name, v);
        }
        map
    }

    // ── accessors ────────────────────────────────────────────────────

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn item(&self, v: Var) -> f64 {
        assert_eq!(self.numel(v), 1, "item() on non-scalar");
        self.nodes[v.0].data[0]
    }

    /// Copies a tape value out as a plain tensor.
    pub fn value(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.data(v).to_vec()).expect("node shape consistent")
    }

    // ── elementwise binary ───────────────────────────────────────────

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?}", self.shape(a)),
                format!("{:?}", self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), self.nodes[a.0].shape.clone(), data, needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), self.nodes[a.0].shape.clone(), data, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), self.nodes[a.0].shape.clone(), data, needs))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| x + c).collect();
        let needs = self.needs(a);
        self.push(Op::AddScalar(a), self.nodes[a.0].shape.clone(), data, needs)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let needs = self.needs(a);
        self.push(Op::MulScalar(a, c), self.nodes[a.0].shape.clone(), data, needs)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(
                "matmul",
                format!("[m,k]·[k,n], lhs {:?}", sa),
                format!("rhs {:?}", sb),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_2d(self.data(a), self.data(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), vec![m, n], data, needs))
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim(
                "batch_matmul",
                format!("[B,m,k]·[B,k,n], lhs {:?}", sa),
                format!("rhs {:?}", sb),
            ));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0; bs * m * n];
        for i in 0..bs {
            let out = matmul_2d(
                &self.data(a)[i * m * k..(i + 1) * m * k],
                &self.data(b)[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            );
            data[i * m * n..(i + 1) * m * n].copy_from_slice(&out);
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::BatchMatmul(a, b), vec![bs, m, n], data, needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::dim("transpose", "rank-2", format!("{:?}", sa)));
        }
        let (m, n) = (sa[0], sa[1]);
        let src = self.data(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::Transpose(a), vec![n, m], data, needs))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 3 {
            return Err(Error::dim("transpose_last2", "rank-3", format!("{:?}", sa)));
        }
        let (bs, m, n) = (sa[0], sa[1], sa[2]);
        let src = self.data(a);
        let mut data = vec![0.0; bs * m * n];
        for b in 0..bs {
            for i in 0..m {
                for j in 0..n {
                    data[b * m * n + j * m + i] = src[b * m * n + i * n + j];
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::TransposeLast2(a), vec![bs, n, m], data, needs))
    }

    pub fn swap_axes01(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 3 {
            return Err(Error::dim("swap_axes01", "rank-3", format!("{:?}", sa)));
        }
        let (p, q, r) = (sa[0], sa[1], sa[2]);
        let src = self.data(a);
        let mut data = vec![0.0; p * q * r];
        for i in 0..p {
            for j in 0..q {
                let from = (i * q + j) * r;
                let to = (j * p + i) * r;
                data[to..to + r].copy_from_slice(&src[from..from + r]);
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::SwapAxes01(a), vec![q, p, r], data, needs))
    }

    pub fn reshape(&mut self, a: Var, new_shape: Vec<usize>) -> Result<Var> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel(a) {
            return Err(Error::dim(
                "reshape",
                format!("{} elements for {:?}", self.numel(a), self.shape(a)),
                format!("{} elements for {:?}", numel, new_shape),
            ));
        }
        let data = self.data(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(Op::Reshape(a), new_shape, data, needs))
    }

    // ── elementwise unary ────────────────────────────────────────────

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let needs = self.needs(a);
        self.push(Op::Relu(a), self.nodes[a.0].shape.clone(), data, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self
            .data(a)
            .iter()
            .map(|&x| stable_sigmoid(x.clamp(-EXP_CLAMP, EXP_CLAMP)))
            .collect();
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a), self.nodes[a.0].shape.clone(), data, needs)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self
            .data(a)
            .iter()
            .map(|&x| x.clamp(-EXP_CLAMP, EXP_CLAMP).exp())
            .collect();
        let needs = self.needs(a);
        self.push(Op::Exp(a), self.nodes[a.0].shape.clone(), data, needs)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::Numeric("log of a non-positive value".into()));
        }
        let data = self.data(a).iter().map(|x| x.ln()).collect();
        let needs = self.needs(a);
        Ok(self.push(Op::Log(a), self.nodes[a.0].shape.clone(), data, needs))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|x| x.abs()).collect();
        let needs = self.needs(a);
        self.push(Op::Abs(a), self.nodes[a.0].shape.clone(), data, needs)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let data = self
            .data(a)
            .iter()
            .map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p())
            .collect();
        let needs = self.needs(a);
        self.push(Op::Softplus(a), self.nodes[a.0].shape.clone(), data, needs)
    }

    // ── softmax family ───────────────────────────────────────────────

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::dim(
                op,
                format!("axis < {}", self.shape(a).len()),
                format!("axis {}", axis),
            ));
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let shape = self.nodes[a.0].shape.clone();
        let (outer, len, inner) = lane_dims(&shape, axis);
        let src = self.data(a);
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(src[at(l)]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    data[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    data[at(l)] /= sum;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::Softmax { input: a, axis }, shape, data, needs))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let shape = self.nodes[a.0].shape.clone();
        let (outer, len, inner) = lane_dims(&shape, axis);
        let src = self.data(a);
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for l in 0..len {
                    max = max.max(src[at(l)]);
                }
                let mut sum = 0.0;
                for l in 0..len {
                    sum += (src[at(l)] - max).exp();
                }
                let lse = max + sum.ln();
                for l in 0..len {
                    data[at(l)] = src[at(l)] - lse;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Op::LogSoftmax { input: a, axis }, shape, data, needs))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("sum_axis", a, axis)?;
        let shape = self.nodes[a.0].shape.clone();
        let (outer, len, inner) = lane_dims(&shape, axis);
        let src = self.data(a);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += src[(o * len + l) * inner + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let needs = self.needs(a);
        Ok(self.push(Op::SumAxis { input: a, axis }, out_shape, data, needs))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", a, axis)?;
        let shape = self.nodes[a.0].shape.clone();
        let (outer, len, inner) = lane_dims(&shape, axis);
        let src = self.data(a);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += src[(o * len + l) * inner + i];
                }
            }
        }
        for v in &mut data {
            *v /= len as f64;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let needs = self.needs(a);
        Ok(self.push(Op::MeanAxis { input: a, axis }, out_shape, data, needs))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.push(Op::SumAll(a), vec![], vec![s], needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.numel(a) as f64;
        let s: f64 = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.push(Op::MeanAll(a), vec![], vec![s / n], needs)
    }

    // ── concatenation and slicing (last axis) ────────────────────────

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_last of zero tensors".into()));
        }
        let lead = self.shape(parts[0])[..self.shape(parts[0]).len() - 1].to_vec();
        let mut total_last = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.is_empty() || sp[..sp.len() - 1] != lead[..] {
                return Err(Error::dim(
                    "concat_last",
                    format!("leading dims {:?}", lead),
                    format!("{:?}", sp),
                ));
            }
            total_last += sp[sp.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = vec![0.0; rows * total_last];
        let mut offset = 0;
        for &p in parts {
            let last = *self.shape(p).last().unwrap();
            let src = self.data(p);
            for r in 0..rows {
                data[r * total_last + offset..r * total_last + offset + last]
                    .copy_from_slice(&src[r * last..(r + 1) * last]);
            }
            offset += last;
        }
        let mut out_shape = lead;
        out_shape.push(total_last);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatLast(parts.to_vec()), out_shape, data, needs))
    }

    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sa = self.shape(a);
        if sa.is_empty() {
            return Err(Error::dim("slice_last", "rank >= 1", "rank 0"));
        }
        let last = *sa.last().unwrap();
        if start + len > last || len == 0 {
            return Err(Error::dim(
                "slice_last",
                format!("range within last extent {}", last),
                format!("{}..{}", start, start + len),
            ));
        }
        let rows = self.numel(a) / last;
        let src = self.data(a);
        let mut data = vec![0.0; rows * len];
        for r in 0..rows {
            data[r * len..(r + 1) * len].copy_from_slice(&src[r * last + start..r * last + start + len]);
        }
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = len;
        let needs = self.needs(a);
        Ok(self.push(Op::SliceLast { input: a, start }, out_shape, data, needs))
    }

    // ── broadcast helpers tailored to the model's shapes ─────────────

    /// x[..., j] + b[j]
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || sx.is_empty() || *sx.last().unwrap() != sb[0] {
            return Err(Error::dim(
                "add_row_bias",
                format!("x [..,d] with bias [d], x {:?}", sx),
                format!("bias {:?}", sb),
            ));
        }
        let d = sb[0];
        let bias = self.data(b);
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias[i % d])
            .collect();
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(Op::AddRowBias(x, b), sx.to_vec(), data, needs))
    }

    /// x[..., j] * w[j]
    pub fn mul_row_gate(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.len() != 1 || sx.is_empty() || *sx.last().unwrap() != sw[0] {
            return Err(Error::dim(
                "mul_row_gate",
                format!("x [..,d] with gate [d], x {:?}", sx),
                format!("gate {:?}", sw),
            ));
        }
        let d = sw[0];
        let gate = self.data(w);
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * gate[i % d])
            .collect();
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(Op::MulRowGate(x, w), sx.to_vec(), data, needs))
    }

    /// x[t,n,:] + p[t,:] — broadcast over the middle axis.
    pub fn add_time_bias(&mut self, x: Var, p: Var) -> Result<Var> {
        let (sx, sp) = (self.shape(x), self.shape(p));
        if sx.len() != 3 || sp.len() != 2 || sp[0] != sx[0] || sp[1] != sx[2] {
            return Err(Error::dim(
                "add_time_bias",
                format!("x [T,N,d] with p [T,d], x {:?}", sx),
                format!("p {:?}", sp),
            ));
        }
        let (t_len, n_len, d) = (sx[0], sx[1], sx[2]);
        let px = self.data(p);
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        for t in 0..t_len {
            for n in 0..n_len {
                for j in 0..d {
                    let idx = (t * n_len + n) * d + j;
                    data[idx] = src[idx] + px[t * d + j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(p);
        Ok(self.push(Op::AddTimeBias(x, p), sx.to_vec(), data, needs))
    }

    /// x[t,n,:] * z[t,:] — broadcast over the middle axis.
    pub fn mul_time_gate(&mut self, x: Var, z: Var) -> Result<Var> {
        let (sx, sz) = (self.shape(x), self.shape(z));
        if sx.len() != 3 || sz.len() != 2 || sz[0] != sx[0] || sz[1] != sx[2] {
            return Err(Error::dim(
                "mul_time_gate",
                format!("x [T,N,d] with z [T,d], x {:?}", sx),
                format!("z {:?}", sz),
            ));
        }
        let (t_len, n_len, d) = (sx[0], sx[1], sx[2]);
        let zx = self.data(z);
        let src = self.data(x);
        let mut data = vec![0.0; src.len()];
        for t in 0..t_len {
            for n in 0..n_len {
                for j in 0..d {
                    let idx = (t * n_len + n) * d + j;
                    data[idx] = src[idx] * zx[t * d + j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(z);
        Ok(self.push(Op::MulTimeGate(x, z), sx.to_vec(), data, needs))
    }

    /// x[..., j] * u[...] — `u` matches `x` minus the last axis.
    pub fn mul_expand_last(&mut self, x: Var, u: Var) -> Result<Var> {
        let (sx, su) = (self.shape(x), self.shape(u));
        if sx.is_empty() || su != &sx[..sx.len() - 1] {
            return Err(Error::dim(
                "mul_expand_last",
                format!("u matching leading dims of x {:?}", sx),
                format!("u {:?}", su),
            ));
        }
        let d = *sx.last().unwrap();
        let ux = self.data(u);
        let data: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * ux[i / d])
            .collect();
        let needs = self.needs(x) || self.needs(u);
        Ok(self.push(Op::MulExpandLast(x, u), sx.to_vec(), data, needs))
    }

    /// out[i, :] = a[perm[i], :]
    pub fn permute_rows(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(Error::dim("permute_rows", "rank-2", format!("{:?}", sa)));
        }
        let (m, n) = (sa[0], sa[1]);
        if perm.len() != m || {
            let mut seen = vec![false; m];
            perm.iter().any(|&p| p >= m || std::mem::replace(&mut seen[p], true))
        } {
            return Err(Error::Contract(format!(
                "permute_rows: {:?} is not a permutation of 0..{}",
                perm, m
            )));
        }
        let src = self.data(a);
        let mut data = vec![0.0; m * n];
        for (i, &p) in perm.iter().enumerate() {
            data[i * n..(i + 1) * n].copy_from_slice(&src[p * n..(p + 1) * n]);
        }
        let needs = self.needs(a);
        Ok(self.push(
            Op::PermuteRows {
                input: a,
                perm: perm.to_vec(),
            },
            sa.to_vec(),
            data,
            needs,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; visits each node at most once and
    /// adds leaf gradients into the bound store entries.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            if let Some(name) = &node.param {
                store.accumulate_grad(name, &g)?;
            }
            self.backprop_node(id, &g, &mut grads);
        }
        Ok(())
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.numel(v)]);
        f(slot);
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |ga| {
                    for (gi, gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
                self.accum(grads, *b, |gb| {
                    for (gi, gv) in gb.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |ga| {
                    for (gi, gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
                self.accum(grads, *b, |gb| {
                    for (gi, gv) in gb.iter_mut().zip(g) {
                        *gi -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.accum(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * db[i];
                    }
                });
                self.accum(grads, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * da[i];
                    }
                });
            }
            Op::AddScalar(a) => {
                self.accum(grads, *a, |ga| {
                    for (gi, gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
            }
            Op::MulScalar(a, c) => {
                let c = *c;
                self.accum(grads, *a, |ga| {
                    for (gi, gv) in ga.iter_mut().zip(g) {
                        *gi += c * gv;
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.data(*a), self.data(*b));
                self.accum(grads, *a, |ga| {
                    let contrib = matmul_bt(g, db, m, n, k);
                    for (gi, cv) in ga.iter_mut().zip(&contrib) {
                        *gi += cv;
                    }
                });
                self.accum(grads, *b, |gb| {
                    let contrib = matmul_at(da, g, m, k, n);
                    for (gi, cv) in gb.iter_mut().zip(&contrib) {
                        *gi += cv;
                    }
                });
            }
            Op::BatchMatmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (da, db) = (self.data(*a), self.data(*b));
                self.accum(grads, *a, |ga| {
                    for i in 0..bs {
                        let contrib =
                            matmul_bt(&g[i * m * n..(i + 1) * m * n], &db[i * k * n..(i + 1) * k * n], m, n, k);
                        for (gi, cv) in ga[i * m * k..(i + 1) * m * k].iter_mut().zip(&contrib) {
                            *gi += cv;
                        }
                    }
                });
                self.accum(grads, *b, |gb| {
                    for i in 0..bs {
                        let contrib =
                            matmul_at(&da[i * m * k..(i + 1) * m * k], &g[i * m * n..(i + 1) * m * n], m, k, n);
                        for (gi, cv) in gb[i * k * n..(i + 1) * k * n].iter_mut().zip(&contrib) {
                            *gi += cv;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let sa = self.shape(*a);
                let (m, n) = (sa[0], sa[1]);
                self.accum(grads, *a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::TransposeLast2(a) => {
                let sa = self.shape(*a);
                let (bs, m, n) = (sa[0], sa[1], sa[2]);
                self.accum(grads, *a, |ga| {
                    for b in 0..bs {
                        for i in 0..m {
                            for j in 0..n {
                                ga[b * m * n + i * n + j] += g[b * m * n + j * m + i];
                            }
                        }
                    }
                });
            }
            Op::SwapAxes01(a) => {
                let sa = self.shape(*a);
                let (p, q, r) = (sa[0], sa[1], sa[2]);
                self.accum(grads, *a, |ga| {
                    for i in 0..p {
                        for j in 0..q {
                            let src = (j * p + i) * r;
                            let dst = (i * q + j) * r;
                            for l in 0..r {
                                ga[dst + l] += g[src + l];
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accum(grads, *a, |ga| {
                    for (gi, gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
            }
            Op::Relu(a) => {
                let da = self.data(*a);
                self.accum(grads, *a, |ga| {
                    for i in 0..g.len() {
                        if da[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let da = self.data(*a);
                let y = &node.data;
                self.accum(grads, *a, |ga| {
                    for i in 0..g.len() {
                        if da[i].abs() <= EXP_CLAMP {
                            ga[i] += g[i] * y[i] * (1.0 - y[i]);
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let da = self.data(*a);
                let y = &node.data;
                self.accum(grads, *a, |ga| {
                    for i in 0..g.len() {
                        if da[i].abs() <= EXP_CLAMP {
                            ga[i] += g[i] * y[i];
                        }
                    }
                });
            }
            Op::Log(a) => {
                let da = self.data(*a);
                self.accum(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] / da[i];
                    }
                });
            }
            Op::Abs(a) => {
                let da = self.data(*a);
                self.accum(grads, *a, |ga| {
                    for i in 0..g.len() {
                        // subgradient convention: sign(0) = 0
                        if da[i] > 0.0 {
                            ga[i] += g[i];
                        } else if da[i] < 0.0 {
                            ga[i] -= g[i];
                        }
                    }
                });
            }
            Op::Softplus(a) => {
                let da = self.data(*a);
                self.accum(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * stable_sigmoid(da[i]);
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let shape = &node.shape;
                let (outer, len, inner) = lane_dims(shape, *axis);
                let s = &node.data;
                self.accum(grads, *input, |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let mut dot = 0.0;
                            for l in 0..len {
                                dot += g[at(l)] * s[at(l)];
                            }
                            for l in 0..len {
                                ga[at(l)] += s[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax { input, axis } => {
                let shape = &node.shape;
                let (outer, len, inner) = lane_dims(shape, *axis);
                let y = &node.data;
                self.accum(grads, *input, |ga| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let mut gsum = 0.0;
                            for l in 0..len {
                                gsum += g[at(l)];
                            }
                            for l in 0..len {
                                ga[at(l)] += g[at(l)] - y[at(l)].exp() * gsum;
                            }
                        }
                    }
                });
            }
            Op::SumAxis { input, axis } => {
                let shape = self.shape(*input);
                let (outer, len, inner) = lane_dims(shape, *axis);
                self.accum(grads, *input, |ga| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                ga[(o * len + l) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                });
            }
            Op::MeanAxis { input, axis } => {
                let shape = self.shape(*input);
                let (outer, len, inner) = lane_dims(shape, *axis);
                let scale = 1.0 / len as f64;
                self.accum(grads, *input, |ga| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                ga[(o * len + l) * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                self.accum(grads, *a, |ga| {
                    for gi in ga.iter_mut() {
                        *gi += g[0];
                    }
                });
            }
            Op::MeanAll(a) => {
                let scale = 1.0 / self.numel(*a) as f64;
                self.accum(grads, *a, |ga| {
                    for gi in ga.iter_mut() {
                        *gi += g[0] * scale;
                    }
                });
            }
            Op::ConcatLast(parts) => {
                let total_last = *node.shape.last().unwrap();
                let rows = node.data.len() / total_last;
                let mut offset = 0;
                for &p in parts {
                    let last = *self.shape(p).last().unwrap();
                    self.accum(grads, p, |gp| {
                        for r in 0..rows {
                            for j in 0..last {
                                gp[r * last + j] += g[r * total_last + offset + j];
                            }
                        }
                    });
                    offset += last;
                }
            }
            Op::SliceLast { input, start } => {
                let last = *self.shape(*input).last().unwrap();
                let len = *node.shape.last().unwrap();
                let rows = node.data.len() / len;
                let start = *start;
                self.accum(grads, *input, |ga| {
                    for r in 0..rows {
                        for j in 0..len {
                            ga[r * last + start + j] += g[r * len + j];
                        }
                    }
                });
            }
            Op::AddRowBias(x, b) => {
                let d = self.shape(*b)[0];
                self.accum(grads, *x, |gx| {
                    for (gi, gv) in gx.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
                self.accum(grads, *b, |gb| {
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % d] += gv;
                    }
                });
            }
            Op::MulRowGate(x, w) => {
                let d = self.shape(*w)[0];
                let (dx, dw) = (self.data(*x), self.data(*w));
                self.accum(grads, *x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * dw[i % d];
                    }
                });
                self.accum(grads, *w, |gw| {
                    for i in 0..g.len() {
                        gw[i % d] += g[i] * dx[i];
                    }
                });
            }
            Op::AddTimeBias(x, p) => {
                let sx = self.shape(*x);
                let (t_len, n_len, d) = (sx[0], sx[1], sx[2]);
                self.accum(grads, *x, |gx| {
                    for (gi, gv) in gx.iter_mut().zip(g) {
                        *gi += gv;
                    }
                });
                self.accum(grads, *p, |gp| {
                    for t in 0..t_len {
                        for n in 0..n_len {
                            for j in 0..d {
                                gp[t * d + j] += g[(t * n_len + n) * d + j];
                            }
                        }
                    }
                });
            }
            Op::MulTimeGate(x, z) => {
                let sx = self.shape(*x);
                let (t_len, n_len, d) = (sx[0], sx[1], sx[2]);
                let (dx, dz) = (self.data(*x), self.data(*z));
                self.accum(grads, *x, |gx| {
                    for t in 0..t_len {
                        for n in 0..n_len {
                            for j in 0..d {
                                let idx = (t * n_len + n) * d + j;
                                gx[idx] += g[idx] * dz[t * d + j];
                            }
                        }
                    }
                });
                self.accum(grads, *z, |gz| {
                    for t in 0..t_len {
                        for n in 0..n_len {
                            for j in 0..d {
                                let idx = (t * n_len + n) * d + j;
                                gz[t * d + j] += g[idx] * dx[idx];
                            }
                        }
                    }
                });
            }
            Op::MulExpandLast(x, u) => {
                let d = *self.shape(*x).last().unwrap();
                let (dx, du) = (self.data(*x), self.data(*u));
                self.accum(grads, *x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * du[i / d];
                    }
                });
                self.accum(grads, *u, |gu| {
                    for i in 0..g.len() {
                        gu[i / d] += g[i] * dx[i];
                    }
                });
            }
            Op::PermuteRows { input, perm } => {
                let n = node.shape[1];
                self.accum(grads, *input, |ga| {
                    for (i, &p) in perm.iter().enumerate() {
                        for j in 0..n {
                            ga[p * n + j] += g[i * n + j];
                        }
                    }
                });
            }
        }
    }

    /// Line-oriented debug dump: `op input_ids -> output_id shape`.
    pub fn dump(&self, w: &mut impl Write) -> std::io::Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            let (name, inputs) = describe_op(&node.op);
            let ids: Vec<String> = inputs.iter().map(|v| v.0.to_string()).collect();
            writeln!(w, "{} {} -> {} {:?}", name, ids.join(","), id, node.shape)?;
        }
        Ok(())
    }
}

fn describe_op(op: &Op) -> (&'static str, Vec<Var>) {
    match op {
        Op::Leaf => ("leaf", vec![]),
        Op::Add(a, b) => ("add", vec![*a, *b]),
        Op::Sub(a, b) => ("sub", vec![*a, *b]),
        Op::Mul(a, b) => ("mul", vec![*a, *b]),
        Op::AddScalar(a) => ("add_scalar", vec![*a]),
        Op::MulScalar(a, _) => ("mul_scalar", vec![*a]),
        Op::Matmul(a, b) => ("matmul", vec![*a, *b]),
        Op::BatchMatmul(a, b) => ("batch_matmul", vec![*a, *b]),
        Op::Transpose(a) => ("transpose", vec![*a]),
        Op::TransposeLast2(a) => ("transpose_last2", vec![*a]),
        Op::SwapAxes01(a) => ("swap_axes01", vec![*a]),
        Op::Reshape(a) => ("reshape", vec![*a]),
        Op::Relu(a) => ("relu", vec![*a]),
        Op::Sigmoid(a) => ("sigmoid", vec![*a]),
        Op::Exp(a) => ("exp", vec![*a]),
        Op::Log(a) => ("log", vec![*a]),
        Op::Abs(a) => ("abs", vec![*a]),
        Op::Softplus(a) => ("softplus", vec![*a]),
        Op::Softmax { input, .. } => ("softmax", vec![*input]),
        Op::LogSoftmax { input, .. } => ("log_softmax", vec![*input]),
        Op::SumAxis { input, .. } => ("sum_axis", vec![*input]),
        Op::MeanAxis { input, .. } => ("mean_axis", vec![*input]),
        Op::SumAll(a) => ("sum_all", vec![*a]),
        Op::MeanAll(a) => ("mean_all", vec![*a]),
        Op::ConcatLast(parts) => ("concat_last", parts.clone()),
        Op::SliceLast { input, .. } => ("slice_last", vec![*input]),
        Op::AddRowBias(x, b) => ("add_row_bias", vec![*x, *b]),
        Op::MulRowGate(x, w) => ("mul_row_gate", vec![*x, *w]),
        Op::AddTimeBias(x, p) => ("add_time_bias", vec![*x, *p]),
        Op::MulTimeGate(x, z) => ("mul_time_gate", vec![*x, *z]),
        Op::MulExpandLast(x, u) => ("mul_expand_last", vec![*x, *u]),
        Op::PermuteRows { input, .. } => ("permute_rows", vec![*input]),
    }
}
