use std::sync::Arc;

use super::kernels::{dot, gemm_nn, gemm_nt, gemm_tn};
use super::storage::{numel, Tensor};
use super::{GELU_COEFF, SQRT_2_OVER_PI};
use crate::error::{Error, Result};
use crate::rng::DetRng;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulBt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, s: f64 },
    Gelu { a: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        outer: usize,
        len: usize,
        inner: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { a: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Dropout { a: Var, mask: Vec<f64> },
    Sum { a: Var },
    Attention {
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
        mask: Option<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Arc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Execution trace for reverse-mode differentiation.
///
/// Nodes are appended in execution order, which is a topological order of
/// the computation graph; [`Tape::backward`] walks it in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dim_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

/// Split a shape around `axis` into (outer, len, inner) extents.
fn axis_extents(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err(op, shape, &[axis]));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
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

    /// Record a tensor as a leaf, sharing its storage. Gradients are tracked
    /// when the tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_unchecked(t.shape().to_vec(), Arc::clone(t.shared()), Op::Leaf, t.requires_grad())
    }

    /// Record a tensor as a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_unchecked(t.shape().to_vec(), Arc::clone(t.shared()), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_shared(n.shape.clone(), Arc::clone(&n.value))
    }

    /// Gradient of the last `backward` loss with respect to `v`. `None` for
    /// values that do not depend on any gradient-tracking leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn push_unchecked(&mut self, shape: Vec<usize>, value: Arc<Vec<f64>>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::Overflow { op: name });
        }
        let rg = self.requires(inputs);
        Ok(self.push_unchecked(shape, Arc::new(value), op, rg))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(dim_err(op, s, &[])),
        }
    }

    /// `a[m,k] · b[k,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let out = gemm_nn(self.value(a), self.value(b), m, k, n);
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// `a[m,k] · b[n,k]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul_bt", a)?;
        let (n, k2) = self.matrix_dims("matmul_bt", b)?;
        if k != k2 {
            return Err(dim_err("matmul_bt", self.shape(a), self.shape(b)));
        }
        let out = gemm_nt(self.value(a), self.value(b), m, k, n);
        self.push("matmul_bt", vec![m, n], out, Op::MatMulBt { a, b, m, k, n }, &[a, b])
    }

    /// Order operands so the second one's shape is a trailing suffix of the
    /// first's.
    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.ends_with(sb) {
            Ok((a, b))
        } else if sb.ends_with(sa) {
            Ok((b, a))
        } else {
            Err(dim_err(op, sa, sb))
        }
    }

    /// Elementwise sum; the smaller operand broadcasts over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small) = self.broadcast_pair("add", a, b)?;
        let s = self.value(small);
        let out: Vec<f64> = self
            .value(big)
            .chunks(s.len())
            .flat_map(|c| c.iter().zip(s).map(|(x, y)| x + y))
            .collect();
        let shape = self.shape(big).to_vec();
        self.push("add", shape, out, Op::Add { a: big, b: small }, &[a, b])
    }

    /// Elementwise product; the smaller operand broadcasts over leading axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small) = self.broadcast_pair("mul", a, b)?;
        let s = self.value(small);
        let out: Vec<f64> = self
            .value(big)
            .chunks(s.len())
            .flat_map(|c| c.iter().zip(s).map(|(x, y)| x * y))
            .collect();
        let shape = self.shape(big).to_vec();
        self.push("mul", shape, out, Op::Mul { a: big, b: small }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push("scale", shape, out, Op::Scale { a, s }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh()))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push("gelu", shape, out, Op::Gelu { a }, &[a])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_extents("softmax", self.shape(a), axis)?;
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| o * len * inner + i * inner + r;
                let max = (0..len).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..len {
                    let e = (x[at(i)] - max).exp();
                    out[at(i)] = e;
                    sum += e;
                }
                for i in 0..len {
                    out[at(i)] /= sum;
                }
            }
        }
        let shape = self.shape(a).to_vec();
        self.push("softmax", shape, out, Op::Softmax { a, outer, len, inner }, &[a])
    }

    /// Layer normalization along `axis` with per-position `gain` and `bias`
    /// of shape `[shape[axis]]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (outer, len, inner) = axis_extents("layer_norm", self.shape(x), axis)?;
        for p in [gain, bias] {
            if self.shape(p) != [len] {
                return Err(dim_err("layer_norm", self.shape(x), self.shape(p)));
            }
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; outer * inner];
        for o in 0..outer {
            for r in 0..inner {
                let at = |i: usize| o * len * inner + i * inner + r;
                let mean = (0..len).map(|i| xv[at(i)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|i| (xv[at(i)] - mean).powi(2)).sum::<f64>() / len as f64;
                let rs = 1.0 / (var + eps).sqrt();
                rstd[o * inner + r] = rs;
                for i in 0..len {
                    let h = (xv[at(i)] - mean) * rs;
                    xhat[at(i)] = h;
                    out[at(i)] = h * g[i] + b[i];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let op = Op::LayerNorm { x, gain, bias, outer, len, inner, xhat, rstd };
        self.push("layer_norm", shape, out, op, &[x, gain, bias])
    }

    /// Rows of `table[V,d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims("embedding", table)?;
        if ids.is_empty() {
            return Err(Error::Input("embedding lookup with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Range { id: bad, limit: v });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let op = Op::Embedding { table, ids: ids.to_vec() };
        self.push("embedding", vec![ids.len(), d], out, op, &[table])
    }

    /// Rows of a matrix, in the given order.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix_dims("gather_rows", a)?;
        if rows.is_empty() {
            return Err(Error::Input("gather_rows with no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Range { id: bad, limit: n });
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&x[r * d..(r + 1) * d]);
        }
        let op = Op::GatherRows { a, rows: rows.to_vec() };
        self.push("gather_rows", vec![rows.len(), d], out, op, &[a])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[N,V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t: Vec<Option<usize>> = targets.iter().map(|&t| Some(t)).collect();
        self.masked_cross_entropy(logits, &t)
    }

    /// Cross-entropy where `None` targets are excluded from both the loss
    /// and its gradient. The mean is taken over the counted positions.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, v) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(dim_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Range { id: *bad, limit: v });
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Input("cross_entropy with every position masked".into()));
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; n * v];
        let mut nll = Vec::with_capacity(count);
        for (i, target) in targets.iter().enumerate() {
            let row = &x[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            let lse = max + sum.ln();
            if let Some(t) = *target {
                nll.push(lse - row[t]);
                for (p, &z) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                    *p = (z - lse).exp();
                }
            }
        }
        // Shifted mean: exact when every row has the same loss.
        let base = nll[0];
        let loss = base + nll.iter().map(|&l| l - base).sum::<f64>() / count as f64;
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count };
        self.push("cross_entropy", vec![], vec![loss], op, &[logits])
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1/(1-p)`. Identity when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0,1)")));
        }
        if p == 0.0 {
            return Ok(a);
        }
        let mask = dropout_mask(self.value(a).len(), p, seed);
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        self.push("dropout", shape, out, Op::Dropout { a, mask }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push("sum", vec![], vec![s], Op::Sum { a }, &[a])
    }

    /// Causal multi-head self-attention over packed projections.
    ///
    /// `qkv` is `[batch*seq, 3*d]` holding queries, keys and values side by
    /// side; head `h` owns columns `h*d/heads..(h+1)*d/heads` of each. Scores
    /// are scaled by `1/sqrt(d/heads)`, positions after the query are masked
    /// out before the softmax, and `dropout` (with its seed) applies to the
    /// attention weights. Output is `[batch*seq, d]`.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        dropout: Option<(f64, u64)>,
    ) -> Result<Var> {
        let (rows, width) = self.matrix_dims("attention", qkv)?;
        if rows != batch * seq || width % 3 != 0 || heads == 0 || (width / 3) % heads != 0 {
            return Err(dim_err("attention", self.shape(qkv), &[batch, seq, heads]));
        }
        let d = width / 3;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let x = self.value(qkv);
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let q = &x[(b * seq + i) * width + h * hd..][..hd];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let k = &x[(b * seq + j) * width + d + h * hd..][..hd];
                        scores[j] = dot(q, k) * scale;
                        max = max.max(scores[j]);
                    }
                    let mut sum = 0.0;
                    for s in scores.iter_mut().take(i + 1) {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    for j in 0..=i {
                        probs[base + i * seq + j] = scores[j] / sum;
                    }
                }
            }
        }
        let mask = match dropout {
            Some((p, seed)) if p > 0.0 => {
                if p >= 1.0 {
                    return Err(Error::Config(format!("dropout probability {p} outside [0,1)")));
                }
                Some(dropout_mask(probs.len(), p, seed))
            }
            _ => None,
        };
        for b in 0..batch {
            for h in 0..heads {
                let base = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let o = &mut out[(b * seq + i) * d + h * hd..][..hd];
                    for j in 0..=i {
                        let mut w = probs[base + i * seq + j];
                        if let Some(m) = &mask {
                            w *= m[base + i * seq + j];
                        }
                        if w == 0.0 {
                            continue;
                        }
                        let v = &x[(b * seq + j) * width + 2 * d + h * hd..][..hd];
                        for (ov, vv) in o.iter_mut().zip(v) {
                            *ov += w * vv;
                        }
                    }
                }
            }
        }
        let op = Op::Attention { qkv, batch, seq, heads, probs, mask };
        self.push("attention", vec![rows, d], out, op, &[qkv])
    }

    /// Populate gradients of the scalar `loss` on every node that depends on
    /// a gradient-tracking leaf. Leaves that track gradients but do not reach
    /// the loss receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            self.zero_unreached_leaves();
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else { continue };
            if !matches!(self.nodes[idx].op, Op::Leaf) {
                self.propagate(idx, &g);
            }
            self.nodes[idx].grad = Some(g);
        }
        self.zero_unreached_leaves();
        Ok(())
    }

    fn zero_unreached_leaves(&mut self) {
        for node in &mut self.nodes {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
    }

    fn accumulate(&mut self, v: Var, delta: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            None => node.grad = Some(delta),
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Temporarily move the op out so the tape can be mutated.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.rg(a) {
                    let da = gemm_nt(g, self.value(b), m, n, k);
                    self.accumulate(a, da);
                }
                if self.rg(b) {
                    let db = gemm_tn(self.value(a), g, m, k, n);
                    self.accumulate(b, db);
                }
            }
            &Op::MatMulBt { a, b, m, k, n } => {
                if self.rg(a) {
                    let da = gemm_nn(g, self.value(b), m, n, k);
                    self.accumulate(a, da);
                }
                if self.rg(b) {
                    let db = gemm_tn(g, self.value(a), m, n, k);
                    self.accumulate(b, db);
                }
            }
            &Op::Add { a, b } => {
                if self.rg(a) {
                    self.accumulate(a, g.to_vec());
                }
                if self.rg(b) {
                    let len = self.value(b).len();
                    let mut db = vec![0.0; len];
                    for c in g.chunks(len) {
                        db.iter_mut().zip(c).for_each(|(d, x)| *d += x);
                    }
                    self.accumulate(b, db);
                }
            }
            &Op::Mul { a, b } => {
                let len = self.value(b).len();
                if self.rg(a) {
                    let bv = self.value(b);
                    let da = g
                        .chunks(len)
                        .flat_map(|c| c.iter().zip(bv).map(|(x, y)| x * y))
                        .collect();
                    self.accumulate(a, da);
                }
                if self.rg(b) {
                    let av = self.value(a);
                    let mut db = vec![0.0; len];
                    for (gc, ac) in g.chunks(len).zip(av.chunks(len)) {
                        for ((d, x), y) in db.iter_mut().zip(gc).zip(ac) {
                            *d += x * y;
                        }
                    }
                    self.accumulate(b, db);
                }
            }
            &Op::Scale { a, s } => {
                self.accumulate(a, g.iter().map(|x| x * s).collect());
            }
            &Op::Gelu { a } => {
                let da = self
                    .value(a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| {
                        let u = SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x);
                        let t = u.tanh();
                        let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * x * x);
                        gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(a, da);
            }
            &Op::Softmax { a, outer, len, inner } => {
                let y = &self.nodes[idx].value;
                let mut da = vec![0.0; y.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |i: usize| o * len * inner + i * inner + r;
                        let s: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            da[at(i)] = y[at(i)] * (g[at(i)] - s);
                        }
                    }
                }
                self.accumulate(a, da);
            }
            Op::LayerNorm { x, gain, bias, outer, len, inner, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (outer, len, inner) = (*outer, *len, *inner);
                let gv = self.value(gain).to_vec();
                let mut dx = vec![0.0; g.len()];
                let mut dg = vec![0.0; len];
                let mut db = vec![0.0; len];
                for o in 0..outer {
                    for r in 0..inner {
                        let at = |i: usize| o * len * inner + i * inner + r;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for i in 0..len {
                            let d = g[at(i)] * gv[i];
                            mean_d += d;
                            mean_dx += d * xhat[at(i)];
                            dg[i] += g[at(i)] * xhat[at(i)];
                            db[i] += g[at(i)];
                        }
                        mean_d /= len as f64;
                        mean_dx /= len as f64;
                        let rs = rstd[o * inner + r];
                        for i in 0..len {
                            let d = g[at(i)] * gv[i];
                            dx[at(i)] = rs * (d - mean_d - xhat[at(i)] * mean_dx);
                        }
                    }
                }
                self.accumulate(x, dx);
                self.accumulate(gain, dg);
                self.accumulate(bias, db);
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                if self.rg(table) {
                    let d = self.shape(table)[1];
                    let mut dt = vec![0.0; self.value(table).len()];
                    for (row, &i) in ids.iter().enumerate() {
                        for (t, x) in dt[i * d..(i + 1) * d].iter_mut().zip(&g[row * d..(row + 1) * d]) {
                            *t += x;
                        }
                    }
                    self.accumulate(table, dt);
                }
            }
            Op::GatherRows { a, rows } => {
                let a = *a;
                let d = self.shape(a)[1];
                let mut da = vec![0.0; self.value(a).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for (t, x) in da[r * d..(r + 1) * d].iter_mut().zip(&g[k * d..(k + 1) * d]) {
                        *t += x;
                    }
                }
                self.accumulate(a, da);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (i, target) in targets.iter().enumerate() {
                    if let Some(t) = *target {
                        for (d, p) in dl[i * v..(i + 1) * v].iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                            *d = p * scale;
                        }
                        dl[i * v + t] -= scale;
                    }
                }
                self.accumulate(*logits, dl);
            }
            Op::Dropout { a, mask } => {
                self.accumulate(*a, g.iter().zip(mask).map(|(x, m)| x * m).collect());
            }
            &Op::Sum { a } => {
                let n = self.value(a).len();
                self.accumulate(a, vec![g[0]; n]);
            }
            Op::Attention { qkv, batch, seq, heads, probs, mask } => {
                let dqkv = attention_backward(self.value(*qkv), g, *batch, *seq, *heads, probs, mask.as_deref());
                self.accumulate(*qkv, dqkv);
            }
        }
        self.nodes[idx].op = op;
    }
}

fn attention_backward(
    x: &[f64],
    g: &[f64],
    batch: usize,
    seq: usize,
    heads: usize,
    probs: &[f64],
    mask: Option<&[f64]>,
) -> Vec<f64> {
    let width = x.len() / (batch * seq);
    let d = width / 3;
    let hd = d / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut dx = vec![0.0; x.len()];
    let mut dp = vec![0.0; seq];
    for b in 0..batch {
        for h in 0..heads {
            let base = (b * heads + h) * seq * seq;
            for i in 0..seq {
                let go = &g[(b * seq + i) * d + h * hd..][..hd];
                // dP' = go · v_j ; dv_j += P'_ij go
                for j in 0..=i {
                    let vrow = (b * seq + j) * width + 2 * d + h * hd;
                    let keep = mask.map_or(1.0, |m| m[base + i * seq + j]);
                    let w = probs[base + i * seq + j] * keep;
                    dp[j] = dot(go, &x[vrow..vrow + hd]) * keep;
                    if w != 0.0 {
                        for (dv, gv) in dx[vrow..vrow + hd].iter_mut().zip(go) {
                            *dv += w * gv;
                        }
                    }
                }
                let p = &probs[base + i * seq..base + i * seq + i + 1];
                let s: f64 = p.iter().zip(&dp[..=i]).map(|(a, b)| a * b).sum();
                let qrow = (b * seq + i) * width + h * hd;
                for j in 0..=i {
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = (b * seq + j) * width + d + h * hd;
                    for t in 0..hd {
                        dx[qrow + t] += ds * x[krow + t];
                        dx[krow + t] += ds * x[qrow + t];
                    }
                }
            }
        }
    }
    dx
}

fn dropout_mask(n: usize, p: f64, seed: u64) -> Vec<f64> {
    let mut rng = DetRng::new(seed);
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.uniform() < p { 0.0 } else { keep })
        .collect()
}
