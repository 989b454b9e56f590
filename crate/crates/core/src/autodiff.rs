//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value plus whatever the
//! backward rule needs. [`Tape::backward`] walks the nodes once, last to first.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, gemm, row_nll, softmax_rows};

/// Epsilon added to the variance in layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Caller-chosen identifier of a trainable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Param,
    MatMul,
    BatchMatMul,
    Add,
    AddBias,
    Scale,
    LayerNorm,
    Softmax,
    Gelu,
    EmbedLookup,
    Reshape,
    SwapAxes12,
    MaskedCrossEntropy,
}

enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: S,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Softmax {
        x: Var,
    },
    Gelu {
        x: Var,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    SwapAxes12 {
        x: Var,
    },
    MaskedCe {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<S>,
        count: usize,
    },
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::BatchMatMul { .. } => OpKind::BatchMatMul,
            Op::Add { .. } => OpKind::Add,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::Scale { .. } => OpKind::Scale,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Embed { .. } => OpKind::EmbedLookup,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::SwapAxes12 { .. } => OpKind::SwapAxes12,
            Op::MaskedCe { .. } => OpKind::MaskedCrossEntropy,
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by parameter id.
#[derive(Clone, Debug, Default)]
pub struct Gradients<S> {
    by_param: BTreeMap<ParamId, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.by_param.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<S>)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_map(self) -> BTreeMap<ParamId, Tensor<S>> {
        self.by_param
    }
}

/// Recorded computation. Confined to one thread; values are immutable once pushed.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Kinds of all recorded ops in application order.
    pub fn kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input reported by [`Tape::backward`] under `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor<S>) -> Var {
        self.push(value, Op::Param(id), true)
    }

    /// `[m,k] · [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        gemm(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
            false,
            false,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, needs))
    }

    /// `[g,m,k] · [g,k,n] -> [g,m,n]`, or `[g,m,k] · [g,n,k]^T` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape(
                "batch_matmul",
                format!("{sa:?} x {sb:?} (trans_b={trans_b})"),
            ));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![S::zero(); g * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..g {
            gemm(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
                false,
                trans_b,
            );
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![g, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            needs,
        ))
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    /// Adds a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.last_dim();
        if tb.shape() != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for input {:?}", tb.shape(), tx.shape()),
            ));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddBias { x, bias }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(value, Op::Scale { x, factor }, needs)
    }

    /// Layer normalization over the last axis with affine gain and bias.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.last_dim();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.shape() != [n] || tb.shape() != [n] {
            return Err(Error::shape(
                "layernorm",
                format!("gain {:?} bias {:?} for input {:?}", tg.shape(), tb.shape(), tx.shape()),
            ));
        }
        let rows = tx.len() / n.max(1);
        let eps = S::of(LAYERNORM_EPS);
        let inv_n = S::of(1.0 / n as f64);
        let mut xhat = vec![S::zero(); tx.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<S>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = softmax_rows(tx.data(), tx.last_dim());
        let value = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Softmax { x }, needs)
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let half = S::of(0.5);
        let inv_sqrt2 = S::of(std::f64::consts::FRAC_1_SQRT_2);
        let value = self.value(x).map(|v| half * v * (S::one() + (v * inv_sqrt2).erf()));
        let needs = self.needs(x);
        self.push(value, Op::Gelu { x }, needs)
    }

    /// Gathers rows of a `[vocab, d]` table: output `[ids.len(), d]`.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.shape().len() != 2 {
            return Err(Error::shape("embed_lookup", format!("table {:?}", tt.shape())));
        }
        let (rows, d) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("embed_lookup", format!("id {bad} >= table rows {rows}")));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let needs = self.needs(table);
        Ok(self.push(
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, needs))
    }

    /// `[a,b,c,d] -> [a,c,b,d]`
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() != 4 {
            return Err(Error::shape("swap_axes12", format!("need rank 4, got {s:?}")));
        }
        let data = swap12(tx.data(), [s[0], s[1], s[2], s[3]]);
        let value = Tensor::new(vec![s[0], s[2], s[1], s[3]], data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::SwapAxes12 { x }, needs))
    }

    /// Mean cross-entropy of `[N, V]` logits over rows whose mask flag is set.
    pub fn masked_cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let s = tl.shape();
        if s.len() != 2 || targets.len() != s[0] || mask.len() != s[0] {
            return Err(Error::shape(
                "masked_cross_entropy",
                format!("logits {s:?}, {} targets, {} mask flags", targets.len(), mask.len()),
            ));
        }
        let v = s[1];
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::NoMaskedPositions);
        }
        let mut total = S::zero();
        for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if t >= v {
                return Err(Error::shape("masked_cross_entropy", format!("target {t} >= vocab {v}")));
            }
            total += row_nll(&tl.data()[r * v..(r + 1) * v], t);
        }
        let probs = softmax_rows(tl.data(), v);
        let value = Tensor::scalar(total / S::of(count as f64));
        let needs = self.needs(logits);
        Ok(self.push(
            value,
            Op::MaskedCe {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            needs,
        ))
    }

    /// Gradients of a scalar `loss` with respect to every registered parameter.
    /// Parameters the loss does not depend on get a zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            // keep the gradient of params for collection below
            if matches!(node.op, Op::Param(_)) {
                grads[idx] = Some(g);
            }
        }

        let mut by_param: BTreeMap<ParamId, Tensor<S>> = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let g = match grads[idx].take() {
                    Some(g) => g,
                    None => vec![S::zero(); node.value.len()],
                };
                let shape = node.value.shape().to_vec();
                match by_param.get_mut(&id) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                            *a += *b;
                        }
                    }
                    None => {
                        by_param.insert(id, Tensor::new(shape, g)?);
                    }
                }
            }
        }
        Ok(Gradients { by_param })
    }

    fn propagate(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let shape = node.value.shape();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut da = vec![S::zero(); m * k];
                    gemm(g, self.value(*b).data(), &mut da, m, n, k, false, true);
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![S::zero(); k * n];
                    gemm(self.value(*a).data(), g, &mut db, k, m, n, true, false);
                    accumulate(grads, *b, db);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.value(*a).shape();
                let (gr, m, k) = (sa[0], sa[1], sa[2]);
                let n = shape[2];
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let mut da = vec![S::zero(); gr * m * k];
                    for i in 0..gr {
                        gemm(
                            &g[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                            false,
                            !*trans_b,
                        );
                    }
                    accumulate(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![S::zero(); gr * k * n];
                    for i in 0..gr {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &ad[i * m * k..(i + 1) * m * k];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // b stored [n,k]: db = g^T a
                            gemm(gi, ai, out, n, m, k, true, false);
                        } else {
                            gemm(ai, gi, out, k, m, n, true, false);
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::AddBias { x, bias } => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if self.needs(*bias) {
                    let n = self.value(*bias).len();
                    let mut db = vec![S::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *bias, db);
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.iter().map(|&v| v * *factor).collect());
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = self.value(*gain).len();
                let gd = self.value(*gain).data();
                if self.needs(*gain) {
                    let mut dg = vec![S::zero(); n];
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                    accumulate(grads, *gain, dg);
                }
                if self.needs(*bias) {
                    let mut db = vec![S::zero(); n];
                    for grow in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(grow) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *bias, db);
                }
                if self.needs(*x) {
                    let inv_n = S::of(1.0 / n as f64);
                    let mut dx = vec![S::zero(); g.len()];
                    for (r, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut mean_d = S::zero();
                        let mut mean_dh = S::zero();
                        for j in 0..n {
                            let dh = grow[j] * gd[j];
                            mean_d += dh;
                            mean_dh += dh * hrow[j];
                        }
                        mean_d *= inv_n;
                        mean_dh *= inv_n;
                        for j in 0..n {
                            let dh = grow[j] * gd[j];
                            dx[r * n + j] = rstd[r] * (dh - mean_d - hrow[j] * mean_dh);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Softmax { x } => {
                if self.needs(*x) {
                    let n = node.value.last_dim();
                    let y = node.value.data();
                    let mut dx = vec![S::zero(); g.len()];
                    for ((grow, yrow), drow) in g.chunks(n).zip(y.chunks(n)).zip(dx.chunks_mut(n)) {
                        let dot: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            drow[j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let half = S::of(0.5);
                    let inv_sqrt2 = S::of(std::f64::consts::FRAC_1_SQRT_2);
                    let inv_sqrt_2pi = S::of(0.398_942_280_401_432_7);
                    let xs = self.value(*x).data();
                    let dx = xs
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| {
                            let cdf = half * (S::one() + (v * inv_sqrt2).erf());
                            let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                            gv * (cdf + v * pdf)
                        })
                        .collect();
                    accumulate(grads, *x, dx);
                }
            }
            Op::Embed { table, ids } => {
                if self.needs(*table) {
                    let tt = self.value(*table);
                    let d = tt.shape()[1];
                    let mut dt = vec![S::zero(); tt.len()];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += g[r * d + j];
                        }
                    }
                    accumulate(grads, *table, dt);
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
            }
            Op::SwapAxes12 { x } => {
                if self.needs(*x) {
                    // output is [a,c,b,d]; swapping again restores [a,b,c,d]
                    accumulate(grads, *x, swap12(g, [shape[0], shape[1], shape[2], shape[3]]));
                }
            }
            Op::MaskedCe {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if self.needs(*logits) {
                    let v = self.value(*logits).last_dim();
                    let scale = g[0] / S::of(*count as f64);
                    let mut dl = vec![S::zero(); probs.len()];
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..v {
                            dl[r * v + j] = probs[r * v + j] * scale;
                        }
                        dl[r * v + t] -= scale;
                    }
                    accumulate(grads, *logits, dl);
                }
            }
        }
    }
}

fn accumulate<S: Scalar>(grads: &mut [Option<Vec<S>>], v: Var, delta: Vec<S>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

fn swap12<S: Scalar>(x: &[S], [a, b, c, d]: [usize; 4]) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for i in 0..a {
        for j in 0..b {
            for k in 0..c {
                let src = ((i * b + j) * c + k) * d;
                let dst = ((i * c + k) * b + j) * d;
                out[dst..dst + d].copy_from_slice(&x[src..src + d]);
            }
        }
    }
    out
}
