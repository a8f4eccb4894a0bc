//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an append-only arena of nodes. Every operation records its
//! inputs by [`Var`] handle and caches whatever its backward rule needs.
//! [`Tape::backward`] walks the nodes in strict reverse append order, so the
//! recording order doubles as the topological order. A fresh tape is built
//! for every forward pass.

use crate::error::{MgtError, Result};
use crate::tensor::{gemm, MatRef, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right-hand operand of a binary op is broadcast against the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    /// Right operand holds a single value.
    Scalar,
    /// Right operand is a row vector matching the left operand's last dimension.
    Row,
}

impl Broadcast {
    fn resolve(op: &'static str, left: &[usize], right: &[usize]) -> Result<Self> {
        if left == right {
            return Ok(Self::Same);
        }
        let right_len: usize = right.iter().product();
        if right_len == 1 {
            return Ok(Self::Scalar);
        }
        let is_row = match right {
            [d] | [1, d] => left.len() == 2 && left[1] == *d,
            _ => false,
        };
        if is_row {
            Ok(Self::Row)
        } else {
            Err(MgtError::Dimension {
                op,
                left: left.to_vec(),
                right: right.to_vec(),
            })
        }
    }

    #[inline]
    fn index(self, i: usize, cols: usize) -> usize {
        match self {
            Self::Same => i,
            Self::Scalar => 0,
            Self::Row => i % cols,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Sub {
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Mul {
        a: Var,
        b: Var,
        bc: Broadcast,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Shift {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Gelu {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
}

/// Packing of a batch of sequences into one `[batch·seq, width]` matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub causal: bool,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
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

    /// Records a trainable leaf (gradients will be produced for it).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Cached attention probabilities `[batch, heads, seq, seq]` of an attention node.
    pub fn attention_probs(&self, var: Var) -> Option<&[f64]> {
        match &self.nodes[var.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn finite(&self, op: &'static str, value: Tensor) -> Result<Tensor> {
        if value.all_finite() {
            Ok(value)
        } else {
            Err(MgtError::Instability {
                layer: usize::MAX,
                detail: format!("{op} produced a non-finite value"),
            })
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let out = self.finite("matmul", out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_b: false,
            },
            rg,
        ))
    }

    /// `a · bᵀ`, used for the tied output projection.
    pub fn matmul_transpose_b(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(MgtError::Dimension {
                op: "matmul_transpose_b",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::new(self.value(a).data(), m, k, false),
            MatRef::new(self.value(b).data(), n, k, true),
            &mut out,
            false,
        );
        let out = self.finite("matmul", Tensor::new(vec![m, n], out)?)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            out,
            Op::MatMul {
                a,
                b,
                trans_b: true,
            },
            rg,
        ))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Broadcast) -> Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let bc = Broadcast::resolve(name, av.shape(), bv.shape())?;
        let cols = *av.shape().last().unwrap();
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[bc.index(i, cols)]))
            .collect();
        let out = self.finite(name, Tensor::new(av.shape().to_vec(), data)?)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, make(bc), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |bc| Op::Add { a, b, bc })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |bc| Op::Sub { a, b, bc })
    }

    /// Elementwise (Hadamard) product, with scalar/row broadcasting of `b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |bc| Op::Mul { a, b, bc })
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.finite("scale", self.value(a).map(|x| x * factor))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Scale { a, factor }, rg))
    }

    /// Adds a constant to every entry.
    pub fn shift(&mut self, a: Var, offset: f64) -> Result<Var> {
        let out = self.finite("shift", self.value(a).map(|x| x + offset))?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Shift { a }, rg))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Tanh { a }, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Sigmoid { a }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| gelu(x).0);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Gelu { a }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Sum { a }, rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.any_grad(&[a]);
        Ok(self.push(out, Op::Mean { a }, rg))
    }

    /// Row-wise layer normalization of an `[N, D]` matrix with population
    /// variance and `eps` inside the square root.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = xv.dims2()?;
        for (name, p) in [("gain", gain), ("bias", bias)] {
            if self.value(p).len() != d {
                return Err(MgtError::Dimension {
                    op: if name == "gain" {
                        "layer_norm gain"
                    } else {
                        "layer_norm bias"
                    },
                    left: xv.shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        if d < 2 {
            return Err(MgtError::Contract("layer_norm needs width >= 2".into()));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normalized = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            inv_std[r] = rs;
            for j in 0..d {
                let n = (row[j] - mean) * rs;
                normalized[r * d + j] = n;
                out[r * d + j] = n * g[j] + b[j];
            }
        }
        let out = self.finite("layer_norm", Tensor::new(vec![rows, d], out)?)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, vocab) = lv.dims2()?;
        if targets.len() != n || mask.len() != n {
            return Err(MgtError::Dimension {
                op: "softmax_cross_entropy",
                left: lv.shape().to_vec(),
                right: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(MgtError::InvalidConfig(
                "cross-entropy mask selects no positions".into(),
            ));
        }
        if let Some(&t) = targets
            .iter()
            .zip(mask)
            .find(|(&t, &m)| m && t >= vocab)
            .map(|(t, _)| t)
        {
            return Err(MgtError::Contract(format!(
                "target id {t} outside vocabulary of {vocab}"
            )));
        }
        let mut probs = vec![0.0; n * vocab];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &lv.data()[r * vocab..(r + 1) * vocab];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut z = 0.0;
            for (p, &x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p /= z;
            }
            if mask[r] {
                loss += -(row[targets[r]] - max - z.ln());
            }
        }
        let out = self.finite("softmax_cross_entropy", Tensor::scalar(loss / count as f64))?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Row lookup into a `[V, D]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = tv.dims2()?;
        if ids.is_empty() {
            return Err(MgtError::Contract("gather_rows with no ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(MgtError::Contract(format!(
                    "row id {id} out of range for table with {rows} rows"
                )));
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over packed `[batch·seq, D]`
    /// query/key/value matrices. Head `h` uses columns `h·D/H .. (h+1)·D/H`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Result<Var> {
        let shape = self.value(q).shape().to_vec();
        for other in [k, v] {
            if self.value(other).shape() != shape.as_slice() {
                return Err(MgtError::Dimension {
                    op: "attention",
                    left: shape,
                    right: self.value(other).shape().to_vec(),
                });
            }
        }
        let (rows, d) = self.value(q).dims2()?;
        let AttentionLayout {
            batch,
            seq,
            heads,
            causal,
        } = layout;
        if rows != batch * seq || heads == 0 || d % heads != 0 {
            return Err(MgtError::Contract(format!(
                "attention layout {layout:?} incompatible with input {rows}x{d}"
            )));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut out = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * hd;
                for t in 0..seq {
                    let p = &mut probs[((b * heads + h) * seq + t) * seq..][..seq];
                    let span = if causal { t + 1 } else { seq };
                    let qrow = &qd[(b * seq + t) * d + col..][..hd];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..span {
                        let krow = &kd[(b * seq + j) * d + col..][..hd];
                        let s = dot(qrow, krow) * scale;
                        p[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for pj in &mut p[..span] {
                        *pj = (*pj - max).exp();
                        z += *pj;
                    }
                    for pj in &mut p[..span] {
                        *pj /= z;
                    }
                    let orow = &mut out[(b * seq + t) * d + col..][..hd];
                    for j in 0..span {
                        let vrow = &vd[(b * seq + j) * d + col..][..hd];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p[j] * x;
                        }
                    }
                }
            }
        }
        let out = self.finite("attention", Tensor::new(vec![rows, d], out)?)?;
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            rg,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(MgtError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.map(|g| Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate<'g>(
        &self,
        grads: &'g mut [Option<Vec<f64>>],
        var: Var,
    ) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[var.0].requires_grad {
            return None;
        }
        let len = self.nodes[var.0].value.len();
        Some(grads[var.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2().unwrap();
                let n = out.dims2().unwrap().1;
                let gm = MatRef::new(g, m, n, false);
                if let Some(ga) = self.accumulate(grads, *a) {
                    // dA = G · Bᵀ  (or G · B when B was used transposed)
                    let bref = if *trans_b {
                        MatRef::new(bv.data(), n, k, false)
                    } else {
                        MatRef::new(bv.data(), k, n, true)
                    };
                    gemm(gm, bref, ga, true);
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    if *trans_b {
                        // B is [n, k]: dB = Gᵀ · A
                        gemm(
                            MatRef::new(g, m, n, true),
                            MatRef::new(av.data(), m, k, false),
                            gb,
                            true,
                        );
                    } else {
                        gemm(MatRef::new(av.data(), m, k, true), gm, gb, true);
                    }
                }
            }
            Op::Add { a, b, bc } | Op::Sub { a, b, bc } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -1.0
                } else {
                    1.0
                };
                if let Some(ga) = self.accumulate(grads, *a) {
                    add_into(ga, g);
                }
                let cols = *out.shape().last().unwrap();
                if let Some(gb) = self.accumulate(grads, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[bc.index(i, cols)] += sign * gi;
                    }
                }
            }
            Op::Mul { a, b, bc } => {
                let cols = *out.shape().last().unwrap();
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i] += gi * bd[bc.index(i, cols)];
                    }
                }
                if let Some(gb) = self.accumulate(grads, *b) {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[bc.index(i, cols)] += gi * ad[i];
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += gi * factor;
                    }
                }
            }
            Op::Shift { a } => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Tanh { a } => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *x += gi * (1.0 - y * y);
                    }
                }
            }
            Op::Sigmoid { a } => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((x, &gi), &y) in ga.iter_mut().zip(g).zip(out.data()) {
                        *x += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Gelu { a } => {
                let input = self.value(*a).data();
                if let Some(ga) = self.accumulate(grads, *a) {
                    for ((x, &gi), &u) in ga.iter_mut().zip(g).zip(input) {
                        *x += gi * gelu(u).1;
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = self.accumulate(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (rows, d) = out.dims2().unwrap();
                let gd = self.value(*gain).data();
                if let Some(gg) = self.accumulate(grads, *gain) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * normalized[r * d + j];
                        }
                    }
                }
                if let Some(gbias) = self.accumulate(grads, *bias) {
                    for r in 0..rows {
                        for j in 0..d {
                            gbias[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = self.accumulate(grads, *x) {
                    let inv_d = 1.0 / d as f64;
                    for r in 0..rows {
                        let nrow = &normalized[r * d..(r + 1) * d];
                        let grow = &g[r * d..(r + 1) * d];
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for j in 0..d {
                            let dn = grow[j] * gd[j];
                            mean_dn += dn;
                            mean_dn_n += dn * nrow[j];
                        }
                        mean_dn *= inv_d;
                        mean_dn_n *= inv_d;
                        for j in 0..d {
                            let dn = grow[j] * gd[j];
                            gx[r * d + j] += inv_std[r] * (dn - mean_dn - nrow[j] * mean_dn_n);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if let Some(gl) = self.accumulate(grads, *logits) {
                    let vocab = self.value(*logits).dims2().unwrap().1;
                    let s = g[0] / *count as f64;
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..vocab {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * vocab + j] += s * (probs[r * vocab + j] - onehot);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = self.accumulate(grads, *table) {
                    let d = out.dims2().unwrap().1;
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, *layout, probs, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (rows, d) = self.value(q).dims2().unwrap();
        let AttentionLayout {
            batch,
            seq,
            heads,
            causal,
        } = layout;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let col = h * hd;
                for t in 0..seq {
                    let p = &probs[((b * heads + h) * seq + t) * seq..][..seq];
                    let span = if causal { t + 1 } else { seq };
                    let grow = &g[(b * seq + t) * d + col..][..hd];
                    let mut weighted = 0.0;
                    for j in 0..span {
                        let vrow = &vd[(b * seq + j) * d + col..][..hd];
                        dp[j] = dot(grow, vrow);
                        weighted += p[j] * dp[j];
                        let dvrow = &mut dv[(b * seq + j) * d + col..][..hd];
                        for (x, &gi) in dvrow.iter_mut().zip(grow) {
                            *x += p[j] * gi;
                        }
                    }
                    let qrow = &qd[(b * seq + t) * d + col..][..hd];
                    for j in 0..span {
                        let ds = p[j] * (dp[j] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let krow = &kd[(b * seq + j) * d + col..][..hd];
                        let dqrow = &mut dq[(b * seq + t) * d + col..][..hd];
                        for (x, &kv) in dqrow.iter_mut().zip(krow) {
                            *x += ds * kv;
                        }
                        let dkrow = &mut dk[(b * seq + j) * d + col..][..hd];
                        for (x, &qv) in dkrow.iter_mut().zip(qrow) {
                            *x += ds * qv;
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(acc) = self.accumulate(grads, var) {
                add_into(acc, &local);
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU (tanh form) and its derivative.
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let value = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * A * x * x);
    let deriv = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (value, deriv)
}
