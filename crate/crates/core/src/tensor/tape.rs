use super::{gemm, Activation, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::sync::Arc;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Index lists for [`Tape::pair_outer_sum`].
///
/// Pair `p` contributes `weight[p] · phi[phi_row[p]] ⊗ v[v_row[p]]` to output row `out_row[p]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairIndex {
    pub phi_row: Vec<usize>,
    pub v_row: Vec<usize>,
    pub out_row: Vec<usize>,
    pub weight: Vec<f64>,
    pub n_out: usize,
}

impl PairIndex {
    pub fn len(&self) -> usize {
        self.out_row.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out_row.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    None,
    /// rhs repeats along the leading axes of lhs
    Rhs,
    /// lhs repeats along the leading axes of rhs
    Lhs,
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Act(Var, Activation),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    Sum(Var),
    Reshape(Var),
    GatherRows(Var, Arc<[usize]>),
    GatherCols(Var, Arc<[usize]>),
    ConcatCols(Vec<Var>),
    SegmentSum {
        x: Var,
        seg: Arc<[usize]>,
        weight: Arc<[f64]>,
    },
    ReplaceRows {
        base: Var,
        rows: Arc<[usize]>,
        values: Var,
    },
    RowMatVec(Var, Var),
    PairOuter {
        phi: Var,
        v: Var,
        pairs: Arc<PairIndex>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Wengert list for one forward pass. Consumed by a single [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    consumed: bool,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Grads {
    adjoints: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `var`, if it was reached.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.adjoints.get(var.0).and_then(|a| a.as_deref())
    }

    /// Add the parameter gradients into `store`. Parameters recorded on the
    /// tape but unreachable from the loss receive zeros.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(pid, var) in &self.params {
            let t = store.get_mut(pid);
            match self.wrt(var) {
                Some(g) => t.accumulate_grad(g),
                None => {
                    if t.grad().is_none() {
                        t.zero_grad();
                    }
                }
            }
        }
    }
}

fn bcast(lhs: &[usize], rhs: &[usize]) -> Option<(Vec<usize>, Bcast)> {
    if lhs == rhs {
        return Some((lhs.to_vec(), Bcast::None));
    }
    let is_suffix =
        |long: &[usize], short: &[usize]| short.len() <= long.len() && long[long.len() - short.len()..] == *short;
    if is_suffix(lhs, rhs) {
        Some((lhs.to_vec(), Bcast::Rhs))
    } else if is_suffix(rhs, lhs) {
        Some((rhs.to_vec(), Bcast::Lhs))
    } else {
        None
    }
}

fn as_matrix(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

/// Sum `g` (length `long`) down onto a repeated operand of length `short`.
fn reduce_repeats(g: &[f64], short: usize) -> Vec<f64> {
    let mut out = vec![0.0; short];
    if short == 0 {
        return out;
    }
    for chunk in g.chunks_exact(short) {
        out.iter_mut().zip(chunk).for_each(|(o, x)| *o += x);
    }
    out
}

fn slot<'a>(adj: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
    let len = nodes[v.0].value.len();
    adj[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copy a recorded value out as a detached tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded shapes are consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a constant (or, with `requires_grad`, a differentiable leaf).
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input, t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.input(&t))
    }

    /// Record a parameter leaf. Repeated calls for the same id reuse one node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param, t.requires_grad);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let ((m, k), (k2, n)) = match (as_matrix(sa), as_matrix(sb)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>, Bcast)> {
        let (shape, mode) =
            bcast(self.shape(a), self.shape(b)).ok_or_else(|| Error::shape(name, self.shape(a), self.shape(b)))?;
        let va = self.value(a);
        let vb = self.value(b);
        let out = match mode {
            Bcast::None => va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect(),
            Bcast::Rhs => {
                let nb = vb.len().max(1);
                va.iter().enumerate().map(|(i, x)| f(*x, vb[i % nb])).collect()
            }
            Bcast::Lhs => {
                let na = va.len().max(1);
                vb.iter().enumerate().map(|(i, y)| f(va[i % na], *y)).collect()
            }
        };
        Ok((shape, out, mode))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out, mode) = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, out, Op::Add(a, b, mode), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out, mode) = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, out, Op::Sub(a, b, mode), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out, mode) = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(shape, out, Op::Mul(a, b, mode), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), ng)
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return a;
        }
        let out = self.value(a).iter().map(|&x| act.apply(x)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Act(a, act), ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, op, ng)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, f64::sin, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, f64::cos, Op::Cos(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![], vec![s], Op::Sum(a), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), &shape));
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape, out, Op::Reshape(a), ng))
    }

    /// `out[i] = x[idx[i]]` over rows of a matrix.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let (n, c) = as_matrix(self.shape(x)).ok_or_else(|| Error::shape("gather_rows", self.shape(x), &[]))?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!("gather_rows index {bad} out of {n} rows")));
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            out.extend_from_slice(&v[i * c..(i + 1) * c]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![idx.len(), c], out, Op::GatherRows(x, idx), ng))
    }

    /// `out[r, j] = x[r, idx[j]]`.
    pub fn gather_cols(&mut self, x: Var, idx: Arc<[usize]>) -> Result<Var> {
        let (n, c) = as_matrix(self.shape(x)).ok_or_else(|| Error::shape("gather_cols", self.shape(x), &[]))?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(Error::Contract(format!("gather_cols index {bad} out of {c} columns")));
        }
        let v = self.value(x);
        let w = idx.len();
        let mut out = vec![0.0; n * w];
        for r in 0..n {
            for (j, &src) in idx.iter().enumerate() {
                out[r * w + j] = v[r * c + src];
            }
        }
        let ng = self.ng(x);
        Ok(self.push(vec![n, w], out, Op::GatherCols(x, idx), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (n, _) = as_matrix(self.shape(first)).ok_or_else(|| Error::shape("concat_cols", self.shape(first), &[]))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match as_matrix(self.shape(p)) {
                Some((rows, c)) if rows == n => widths.push(c),
                _ => return Err(Error::shape("concat_cols", self.shape(first), self.shape(p))),
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &c) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for r in 0..n {
                out[r * total + off..r * total + off + c].copy_from_slice(&v[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![n, total], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// `out[seg[e]] += weight[e] · x[e]`, with `n_out` output rows.
    pub fn segment_sum(&mut self, x: Var, seg: Arc<[usize]>, weight: Arc<[f64]>, n_out: usize) -> Result<Var> {
        let (e, c) = as_matrix(self.shape(x)).ok_or_else(|| Error::shape("segment_sum", self.shape(x), &[]))?;
        if seg.len() != e || weight.len() != e {
            return Err(Error::shape("segment_sum", &[e], &[seg.len(), weight.len()]));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= n_out) {
            return Err(Error::Contract(format!("segment id {bad} out of {n_out}")));
        }
        let v = self.value(x);
        let mut out = vec![0.0; n_out * c];
        for (i, (&s, &w)) in seg.iter().zip(weight.iter()).enumerate() {
            let row = &v[i * c..(i + 1) * c];
            out[s * c..(s + 1) * c]
                .iter_mut()
                .zip(row)
                .for_each(|(o, x)| *o += w * x);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![n_out, c], out, Op::SegmentSum { x, seg, weight }, ng))
    }

    /// Copy of `base` with rows `rows[i]` replaced by `values[i]`. Rows must be distinct.
    pub fn replace_rows(&mut self, base: Var, rows: Arc<[usize]>, values: Var) -> Result<Var> {
        let (n, c) = as_matrix(self.shape(base)).ok_or_else(|| Error::shape("replace_rows", self.shape(base), &[]))?;
        if self.shape(values) != [rows.len(), c] {
            return Err(Error::shape("replace_rows", &[rows.len(), c], self.shape(values)));
        }
        let mut seen = vec![false; n];
        for &r in rows.iter() {
            if r >= n || std::mem::replace(&mut seen[r], true) {
                return Err(Error::Contract(format!("replace_rows: bad or repeated row {r}")));
            }
        }
        let mut out = self.value(base).to_vec();
        let vals = self.value(values);
        for (i, &r) in rows.iter().enumerate() {
            out[r * c..(r + 1) * c].copy_from_slice(&vals[i * c..(i + 1) * c]);
        }
        let ng = self.ng(base) || self.ng(values);
        Ok(self.push(vec![n, c], out, Op::ReplaceRows { base, rows, values }, ng))
    }

    /// Per-row matrix-vector product: `k` is `E × (d·d)` (row-major `d×d` blocks), `v` is `E × d`.
    pub fn row_matvec(&mut self, k: Var, v: Var) -> Result<Var> {
        let (e, dd) =
            as_matrix(self.shape(k)).ok_or_else(|| Error::shape("row_matvec", self.shape(k), self.shape(v)))?;
        let (e2, d) =
            as_matrix(self.shape(v)).ok_or_else(|| Error::shape("row_matvec", self.shape(k), self.shape(v)))?;
        if e != e2 || d * d != dd {
            return Err(Error::shape("row_matvec", self.shape(k), self.shape(v)));
        }
        let kv = self.value(k);
        let vv = self.value(v);
        let mut out = vec![0.0; e * d];
        for r in 0..e {
            let km = &kv[r * dd..(r + 1) * dd];
            let vr = &vv[r * d..(r + 1) * d];
            for a in 0..d {
                out[r * d + a] = km[a * d..(a + 1) * d].iter().zip(vr).map(|(x, y)| x * y).sum();
            }
        }
        let ng = self.ng(k) || self.ng(v);
        Ok(self.push(vec![e, d], out, Op::RowMatVec(k, v), ng))
    }

    /// Weighted sum of outer products `phi[pr] ⊗ v[vr]` into `n_out × (H·d)` rows.
    pub fn pair_outer_sum(&mut self, phi: Var, v: Var, pairs: Arc<PairIndex>) -> Result<Var> {
        let (nphi, h) =
            as_matrix(self.shape(phi)).ok_or_else(|| Error::shape("pair_outer_sum", self.shape(phi), self.shape(v)))?;
        let (nv, d) =
            as_matrix(self.shape(v)).ok_or_else(|| Error::shape("pair_outer_sum", self.shape(phi), self.shape(v)))?;
        let np = pairs.len();
        if pairs.phi_row.len() != np || pairs.v_row.len() != np || pairs.weight.len() != np {
            return Err(Error::Contract("pair index lists differ in length".into()));
        }
        if pairs.phi_row.iter().any(|&r| r >= nphi)
            || pairs.v_row.iter().any(|&r| r >= nv)
            || pairs.out_row.iter().any(|&r| r >= pairs.n_out)
        {
            return Err(Error::Contract("pair index out of range".into()));
        }
        let pv = self.value(phi);
        let vv = self.value(v);
        let w = h * d;
        let mut out = vec![0.0; pairs.n_out * w];
        for p in 0..np {
            let wt = pairs.weight[p];
            let fr = &pv[pairs.phi_row[p] * h..(pairs.phi_row[p] + 1) * h];
            let vr = &vv[pairs.v_row[p] * d..(pairs.v_row[p] + 1) * d];
            let o = &mut out[pairs.out_row[p] * w..(pairs.out_row[p] + 1) * w];
            for (hi, &f) in fr.iter().enumerate() {
                let s = wt * f;
                o[hi * d..(hi + 1) * d]
                    .iter_mut()
                    .zip(vr)
                    .for_each(|(x, y)| *x += s * y);
            }
        }
        let ng = self.ng(phi) || self.ng(v);
        Ok(self.push(vec![pairs.n_out, w], out, Op::PairOuter { phi, v, pairs }, ng))
    }

    /// Reverse sweep from a scalar `loss`. A tape supports exactly one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if self.consumed {
            return Err(Error::Contract(
                "tape already consumed by an earlier backward pass".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        let mut adj: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut adj);
            }
            adj[i] = Some(g);
        }

        let mut params: Vec<(ParamId, Var)> = self.param_vars.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort();
        Ok(Grads { adjoints: adj, params })
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.as_slice();
        let needs = |v: Var| nodes[v.0].needs_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(adj, nodes, $v)
            };
        }

        match &nodes[i].op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(&nodes[a.0].shape).unwrap();
                let n = nodes[b.0].shape[1];
                if needs(*a) {
                    gemm(m, n, k, g, false, val(*b), true, acc!(*a), true);
                }
                if needs(*b) {
                    gemm(k, m, n, val(*a), true, g, false, acc!(*b), true);
                }
            }
            Op::Add(a, b, mode) | Op::Sub(a, b, mode) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let la = nodes[a.0].value.len();
                let lb = nodes[b.0].value.len();
                if needs(*a) {
                    let ga = if *mode == Bcast::Lhs {
                        reduce_repeats(g, la)
                    } else {
                        g.to_vec()
                    };
                    add_into(acc!(*a), &ga);
                }
                if needs(*b) {
                    let mut gb = if *mode == Bcast::Rhs {
                        reduce_repeats(g, lb)
                    } else {
                        g.to_vec()
                    };
                    if sign < 0.0 {
                        gb.iter_mut().for_each(|x| *x = -*x);
                    }
                    add_into(acc!(*b), &gb);
                }
            }
            Op::Mul(a, b, mode) => {
                let va = val(*a);
                let vb = val(*b);
                let (na, nb) = (va.len().max(1), vb.len().max(1));
                if needs(*a) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(j, gj)| gj * vb[j % nb]).collect();
                    let ga = if *mode == Bcast::Lhs {
                        reduce_repeats(&full, va.len())
                    } else {
                        full
                    };
                    add_into(acc!(*a), &ga);
                }
                if needs(*b) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(j, gj)| gj * va[j % na]).collect();
                    let gb = if *mode == Bcast::Rhs {
                        reduce_repeats(&full, vb.len())
                    } else {
                        full
                    };
                    add_into(acc!(*b), &gb);
                }
            }
            Op::Scale(a, s) => {
                let d = acc!(*a);
                d.iter_mut().zip(g).for_each(|(x, gj)| *x += s * gj);
            }
            Op::Act(a, act) => {
                let x = val(*a);
                let d = acc!(*a);
                for j in 0..g.len() {
                    d[j] += g[j] * act.derivative(x[j]);
                }
            }
            Op::Sin(a) => {
                let x = val(*a);
                let d = acc!(*a);
                for j in 0..g.len() {
                    d[j] += g[j] * x[j].cos();
                }
            }
            Op::Cos(a) => {
                let x = val(*a);
                let d = acc!(*a);
                for j in 0..g.len() {
                    d[j] -= g[j] * x[j].sin();
                }
            }
            Op::Abs(a) => {
                let x = val(*a);
                let d = acc!(*a);
                for j in 0..g.len() {
                    let s = if x[j] > 0.0 {
                        1.0
                    } else if x[j] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    d[j] += g[j] * s;
                }
            }
            Op::Sum(a) => {
                let d = acc!(*a);
                d.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Reshape(a) => add_into(acc!(*a), g),
            Op::GatherRows(x, idx) => {
                let c = nodes[x.0].shape[1];
                let d = acc!(*x);
                for (r, &src) in idx.iter().enumerate() {
                    add_into(&mut d[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
            Op::GatherCols(x, idx) => {
                let (n, c) = as_matrix(&nodes[x.0].shape).unwrap();
                let w = idx.len();
                let d = acc!(*x);
                for r in 0..n {
                    for (j, &src) in idx.iter().enumerate() {
                        d[r * c + src] += g[r * w + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (n, total) = as_matrix(&nodes[i].shape).unwrap();
                let mut off = 0;
                for p in parts {
                    let c = nodes[p.0].shape[1];
                    if needs(*p) {
                        let d = acc!(*p);
                        for r in 0..n {
                            add_into(&mut d[r * c..(r + 1) * c], &g[r * total + off..r * total + off + c]);
                        }
                    }
                    off += c;
                }
            }
            Op::SegmentSum { x, seg, weight } => {
                let c = nodes[x.0].shape[1];
                let d = acc!(*x);
                for (e, (&s, &w)) in seg.iter().zip(weight.iter()).enumerate() {
                    let gs = &g[s * c..(s + 1) * c];
                    d[e * c..(e + 1) * c]
                        .iter_mut()
                        .zip(gs)
                        .for_each(|(o, gj)| *o += w * gj);
                }
            }
            Op::ReplaceRows { base, rows, values } => {
                let c = nodes[base.0].shape[1];
                if needs(*base) {
                    let mut gb = g.to_vec();
                    for &r in rows.iter() {
                        gb[r * c..(r + 1) * c].iter_mut().for_each(|x| *x = 0.0);
                    }
                    add_into(acc!(*base), &gb);
                }
                if needs(*values) {
                    let d = acc!(*values);
                    for (j, &r) in rows.iter().enumerate() {
                        add_into(&mut d[j * c..(j + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::RowMatVec(k, v) => {
                let (e, d) = as_matrix(&nodes[v.0].shape).unwrap();
                let dd = d * d;
                let kv = val(*k);
                let vv = val(*v);
                if needs(*k) {
                    let dk = acc!(*k);
                    for r in 0..e {
                        for a in 0..d {
                            let ga = g[r * d + a];
                            if ga == 0.0 {
                                continue;
                            }
                            let row = &mut dk[r * dd + a * d..r * dd + (a + 1) * d];
                            row.iter_mut()
                                .zip(&vv[r * d..(r + 1) * d])
                                .for_each(|(x, y)| *x += ga * y);
                        }
                    }
                }
                if needs(*v) {
                    let dv = acc!(*v);
                    for r in 0..e {
                        for a in 0..d {
                            let ga = g[r * d + a];
                            if ga == 0.0 {
                                continue;
                            }
                            dv[r * d..(r + 1) * d]
                                .iter_mut()
                                .zip(&kv[r * dd + a * d..r * dd + (a + 1) * d])
                                .for_each(|(x, y)| *x += ga * y);
                        }
                    }
                }
            }
            Op::PairOuter { phi, v, pairs } => {
                let h = nodes[phi.0].shape[1];
                let d = nodes[v.0].shape[1];
                let w = h * d;
                let pv = val(*phi);
                let vv = val(*v);
                if needs(*phi) {
                    let dphi = acc!(*phi);
                    for p in 0..pairs.len() {
                        let wt = pairs.weight[p];
                        let go = &g[pairs.out_row[p] * w..(pairs.out_row[p] + 1) * w];
                        let vr = &vv[pairs.v_row[p] * d..(pairs.v_row[p] + 1) * d];
                        let dst = &mut dphi[pairs.phi_row[p] * h..(pairs.phi_row[p] + 1) * h];
                        for (hi, o) in dst.iter_mut().enumerate() {
                            let s: f64 = go[hi * d..(hi + 1) * d].iter().zip(vr).map(|(a, b)| a * b).sum();
                            *o += wt * s;
                        }
                    }
                }
                if needs(*v) {
                    let dv = acc!(*v);
                    for p in 0..pairs.len() {
                        let wt = pairs.weight[p];
                        let go = &g[pairs.out_row[p] * w..(pairs.out_row[p] + 1) * w];
                        let fr = &pv[pairs.phi_row[p] * h..(pairs.phi_row[p] + 1) * h];
                        let dst = &mut dv[pairs.v_row[p] * d..(pairs.v_row[p] + 1) * d];
                        for (hi, &f) in fr.iter().enumerate() {
                            let s = wt * f;
                            dst.iter_mut()
                                .zip(&go[hi * d..(hi + 1) * d])
                                .for_each(|(x, y)| *x += s * y);
                        }
                    }
                }
            }
        }
    }
}
