use std::sync::atomic::{AtomicU64, Ordering};

use super::ops::{gelu_grad_scalar, gemm};
use super::{EngineError, Result, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    ScaleCols(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Sum(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Attention {
        qkv: usize,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive operations in execution order and replays them in
/// reverse to accumulate gradients.
///
/// Nodes are appended after their inputs, so index order is a topological
/// order and `backward` visits every node once.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    backpropagated: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            backpropagated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(EngineError::DanglingNode(v.idx));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    /// Records an input (parameter or constant). Every node accumulates a
    /// gradient; constants simply have theirs ignored.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// Gradient of the last backward pass w.r.t. `v`. `None` when `v` did not
    /// influence the loss or backward has not run.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        let i = self.idx(v).ok()?;
        self.grads.get(i).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. `v`, or zeros shaped like `v` when it had no influence.
    pub fn grad_or_zeros(&self, v: Var) -> Result<Tensor> {
        let i = self.idx(v)?;
        Ok(match self.grads.get(i).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[i].value.shape()),
        })
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backpropagated = false;
    }

    fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> EngineError {
        EngineError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let out = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        self.push(out, Op::MatMul(ia, ib), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(Self::mismatch("add", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(out, Op::Add(ia, ib), "add")
    }

    /// `a[n, m] + bias[m]`, broadcasting the bias over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(bias)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (_, m) = va.dims2("add_row")?;
        if vb.shape() != [m] {
            return Err(Self::mismatch("add_row", va, vb));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(m) {
            for (x, b) in row.iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(out, Op::AddRow(ia, ib), "add_row")
    }

    /// Elementwise product of same-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(Self::mismatch("mul", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(out, Op::Mul(ia, ib), "mul")
    }

    /// `a[n, m] * s[m]`: scales every column `j` by `s[j]`.
    pub fn scale_cols(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ia, is) = (self.idx(a)?, self.idx(s)?);
        let (va, vs) = (&self.nodes[ia].value, &self.nodes[is].value);
        let (_, m) = va.dims2("scale_cols")?;
        if vs.shape() != [m] {
            return Err(Self::mismatch("scale_cols", va, vs));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(m) {
            for (x, s) in row.iter_mut().zip(vs.data()) {
                *x *= s;
            }
        }
        let out = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(out, Op::ScaleCols(ia, is), "scale_cols")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let out = Tensor::from_parts(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect());
        self.push(out, Op::Scale(ia, c), "scale")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.gelu();
        self.push(out, Op::Gelu(ia), "gelu")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = Tensor::scalar(self.nodes[ia].value.sum());
        self.push(out, Op::Sum(ia), "sum")
    }

    /// Row-wise layer normalisation with learned gain and bias (eps = 1e-5).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let vx = &self.nodes[ix].value;
        let (n, m) = vx.dims2("layer_norm")?;
        let (vg, vb) = (&self.nodes[ig].value, &self.nodes[ib].value);
        if vg.shape() != [m] || vb.shape() != [m] {
            return Err(Self::mismatch("layer_norm", vx, vg));
        }
        let mut xhat = vec![0.0; n * m];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * m];
        for r in 0..n {
            let row = &vx.data()[r * m..(r + 1) * m];
            let mean = row.iter().fold(0.0, |a, v| a + v) / m as f64;
            let var = row.iter().fold(0.0, |a, v| a + (v - mean) * (v - mean)) / m as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[r] = rs;
            for c in 0..m {
                let h = (row[c] - mean) * rs;
                xhat[r * m + c] = h;
                out[r * m + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let out = Tensor::from_parts(vec![n, m], out);
        self.push(
            out,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                rstd,
            },
            "layer_norm",
        )
    }

    /// Gathers rows of `table[v, d]` for each id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let vt = &self.nodes[it].value;
        let (v, d) = vt.dims2("embedding")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(EngineError::TargetOutOfRange { target: id, vocab: v });
            }
            out.extend_from_slice(&vt.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_parts(vec![ids.len(), d], out);
        self.push(
            out,
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    /// Multi-head causal self-attention over packed `[q | k | v]` rows.
    ///
    /// `qkv` is `[batch * seq, 3 * d]`; the output is `[batch * seq, d]` with
    /// heads concatenated. Position `t` attends to positions `0..=t` of its
    /// own sequence only.
    pub fn causal_attention(&mut self, qkv: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let iq = self.idx(qkv)?;
        let vq = &self.nodes[iq].value;
        let (rows, w) = vq.dims2("causal_attention")?;
        if rows != batch * seq || heads == 0 || w % (3 * heads) != 0 {
            return Err(EngineError::InvalidShape {
                op: "causal_attention",
                shape: vq.shape().to_vec(),
            });
        }
        let d = w / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = vq.data();
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &x[(b * seq + i) * w + h * dh..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                        let kj = &x[(b * seq + j) * w + d + h * dh..][..dh];
                        let dot = qi.iter().zip(kj).fold(0.0, |a, (p, q)| a + p * q) * scale;
                        *s = dot;
                        max = max.max(dot);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut().take(i + 1) {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let yi = &mut out[(b * seq + i) * d + h * dh..][..dh];
                    for j in 0..=i {
                        let p = scores[j] / z;
                        probs[pbase + i * seq + j] = p;
                        let vj = &x[(b * seq + j) * w + 2 * d + h * dh..][..dh];
                        for (y, v) in yi.iter_mut().zip(vj) {
                            *y += p * v;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![rows, d], out);
        self.push(
            out,
            Op::Attention {
                qkv: iq,
                batch,
                seq,
                heads,
                probs,
            },
            "causal_attention",
        )
    }

    /// Mean next-token cross-entropy over rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let il = self.idx(logits)?;
        let vl = &self.nodes[il].value;
        let (n, v) = vl.dims2("cross_entropy")?;
        if targets.len() != n {
            return Err(EngineError::ShapeMismatch {
                op: "cross_entropy",
                left: vl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        let mut count = 0usize;
        for r in 0..n {
            let row = &vl.data()[r * v..(r + 1) * v];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let z = row.iter().fold(0.0, |a, &x| a + (x - max).exp());
            for c in 0..v {
                probs[r * v + c] = (row[c] - max).exp() / z;
            }
            if let Some(t) = targets[r] {
                if t >= v {
                    return Err(EngineError::TargetOutOfRange { target: t, vocab: v });
                }
                total += -(row[t] - max - z.ln());
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: il,
                targets: targets.to_vec(),
                probs,
                count,
            },
            "cross_entropy",
        )
    }

    /// Reverse pass from a scalar loss. Populates gradients for every node
    /// that influences it; a second call without [`Tape::reset_grads`] fails.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backpropagated {
            return Err(EngineError::AlreadyBackpropagated);
        }
        let il = self.idx(loss)?;
        if self.nodes[il].value.len() != 1 {
            return Err(EngineError::NonScalarLoss(self.nodes[il].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[il] = Some(vec![1.0]);
        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        for g in self.grads.iter().flatten() {
            g.check_finite("backward")?;
        }
        self.backpropagated = true;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let shape_of = |j: usize| self.nodes[j].value.len();
        fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], j: usize, n: usize) -> &'a mut Vec<f64> {
            grads[j].get_or_insert_with(|| vec![0.0; n])
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = &self.nodes[*a].value;
                let vb = &self.nodes[*b].value;
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                // dA = G B^T, dB = A^T G
                let ga = slot(grads, *a, m * k);
                gemm(m, n, k, g, false, vb.data(), true, ga, true);
                let gb = slot(grads, *b, k * n);
                gemm(k, m, n, va.data(), true, g, false, gb, true);
            }
            Op::Add(a, b) => {
                for j in [*a, *b] {
                    let s = slot(grads, j, g.len());
                    s.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::AddRow(a, b) => {
                let m = self.nodes[*b].value.len();
                let ga = slot(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                let gb = slot(grads, *b, m);
                for row in g.chunks(m) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let ga = slot(grads, *a, g.len());
                for ((x, y), w) in ga.iter_mut().zip(g).zip(vb) {
                    *x += y * w;
                }
                let gb = slot(grads, *b, g.len());
                for ((x, y), w) in gb.iter_mut().zip(g).zip(va) {
                    *x += y * w;
                }
            }
            Op::ScaleCols(a, s) => {
                let va = self.nodes[*a].value.data();
                let vs = self.nodes[*s].value.data();
                let m = vs.len();
                let ga = slot(grads, *a, g.len());
                for (grow, gin) in ga.chunks_mut(m).zip(g.chunks(m)) {
                    for c in 0..m {
                        grow[c] += gin[c] * vs[c];
                    }
                }
                let gs = slot(grads, *s, m);
                for (arow, gin) in va.chunks(m).zip(g.chunks(m)) {
                    for c in 0..m {
                        gs[c] += gin[c] * arow[c];
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = slot(grads, *a, g.len());
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * c);
            }
            Op::Gelu(a) => {
                let va = self.nodes[*a].value.data();
                let ga = slot(grads, *a, g.len());
                for ((x, y), v) in ga.iter_mut().zip(g).zip(va) {
                    *x += y * gelu_grad_scalar(*v);
                }
            }
            Op::Sum(a) => {
                let n = shape_of(*a);
                let ga = slot(grads, *a, n);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let vg = self.nodes[*gamma].value.data();
                let m = vg.len();
                let n = rstd.len();
                let mut dgamma = vec![0.0; m];
                let mut dbeta = vec![0.0; m];
                let mut dx = vec![0.0; n * m];
                let mut dxhat = vec![0.0; m];
                for r in 0..n {
                    let gr = &g[r * m..(r + 1) * m];
                    let hr = &xhat[r * m..(r + 1) * m];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for c in 0..m {
                        dgamma[c] += gr[c] * hr[c];
                        dbeta[c] += gr[c];
                        dxhat[c] = gr[c] * vg[c];
                        mean_d += dxhat[c];
                        mean_dh += dxhat[c] * hr[c];
                    }
                    mean_d /= m as f64;
                    mean_dh /= m as f64;
                    for c in 0..m {
                        dx[r * m + c] = rstd[r] * (dxhat[c] - mean_d - hr[c] * mean_dh);
                    }
                }
                let gx = slot(grads, *x, n * m);
                gx.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
                let gg = slot(grads, *gamma, m);
                gg.iter_mut().zip(&dgamma).for_each(|(a, b)| *a += b);
                let gb = slot(grads, *beta, m);
                gb.iter_mut().zip(&dbeta).for_each(|(a, b)| *a += b);
            }
            Op::Embedding { table, ids } => {
                let vt = &self.nodes[*table].value;
                let d = vt.shape()[1];
                let gt = slot(grads, *table, vt.len());
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[id * d + c] += g[r * d + c];
                    }
                }
            }
            Op::Attention {
                qkv,
                batch,
                seq,
                heads,
                probs,
            } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let vq = &self.nodes[*qkv].value;
                let w = vq.shape()[1];
                let d = w / 3;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let x = vq.data();
                let gx = slot(grads, *qkv, vq.len());
                let mut dp = vec![0.0; seq];
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * seq * seq;
                        for i in 0..seq {
                            let gy = &g[(b * seq + i) * d + h * dh..][..dh];
                            let prow = &probs[pbase + i * seq..][..seq];
                            // dP_ij = gy . v_j ; dV_j += P_ij gy
                            let mut dot_pd = 0.0;
                            for j in 0..=i {
                                let voff = (b * seq + j) * w + 2 * d + h * dh;
                                let vj = &x[voff..voff + dh];
                                let v = gy.iter().zip(vj).fold(0.0, |a, (p, q)| a + p * q);
                                dp[j] = v;
                                dot_pd += prow[j] * v;
                                for c in 0..dh {
                                    gx[voff + c] += prow[j] * gy[c];
                                }
                            }
                            let qoff = (b * seq + i) * w + h * dh;
                            for j in 0..=i {
                                let ds = prow[j] * (dp[j] - dot_pd) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let koff = (b * seq + j) * w + d + h * dh;
                                for c in 0..dh {
                                    gx[qoff + c] += ds * x[koff + c];
                                    gx[koff + c] += ds * x[qoff + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let n = targets.len();
                let v = probs.len() / n.max(1);
                let scale = g[0] / *count as f64;
                let gl = slot(grads, *logits, n * v);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    for c in 0..v {
                        gl[r * v + c] += scale * probs[r * v + c];
                    }
                    gl[r * v + t] -= scale;
                }
            }
        }
    }
}
