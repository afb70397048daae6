//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Every primitive evaluates eagerly and appends a node to the [`Tape`].
//! A node needs a gradient only if one of its inputs does, so a forward
//! pass through frozen (constant) weights records nothing that backward
//! has to visit except the path from the trainable leaves to the loss.
//!
//! Constants may be borrowed, which lets a frozen model run thousands of
//! forwards without copying its weights.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    /// Keeps `tanh` of the inner term for the backward pass.
    Gelu(Var, Vec<f64>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        block: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    GatherSum {
        table: Var,
        lists: Vec<Vec<usize>>,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    AddAtRow {
        a: Var,
        row: usize,
        v: Var,
    },
    ReplaceRow {
        a: Var,
        row: usize,
        v: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    SumAll(Var),
    L2Norm(Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.dims2(op)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node, including leaves and their gradients.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers a trainable leaf. Gradients accumulate into it on backward.
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        value.mark_leaf();
        value.zero_grad();
        self.push(value, Op::Leaf, true)
    }

    /// Registers a borrowed constant; it never receives gradients.
    pub fn constant(&mut self, value: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_owned(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    /// Clears accumulated leaf gradients without dropping the graph.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) {
                node.value.to_mut().zero_grad();
            }
        }
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims(av, "matmul")?;
        let (k2, n) = dims(bv, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (n, 1), 0.0, &mut out, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), ng))
    }

    /// `a * b^T` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims(av, "matmul_nt")?;
        let (n, k2) = dims(bv, "matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m}, {k}] x [{n}, {k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), (k, 1), bv.data(), (1, k), 0.0, &mut out, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt(a, b), ng))
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `[1, n]` row vector to every row of `a: [m, n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let (m, n) = dims(av, "add_bias")?;
        if bv.shape() != [1, n] {
            return Err(Error::shape("add_bias", format!("[{m}, {n}] + {:?}", bv.shape())));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(bv.data()).for_each(|(x, b)| *x += b);
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::AddBias(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Scale(a, c), ng))
    }

    /// GELU, tanh approximation (GPT-2 flavour).
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let th: Vec<f64> = av
            .data()
            .iter()
            .map(|&x| fast_tanh(GELU_C * (x + GELU_A * x * x * x)))
            .collect();
        let data = av.data().iter().zip(&th).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a);
        let th = if ng { th } else { Vec::new() };
        Ok(self.push(t, Op::Gelu(a, th), ng))
    }

    /// Row-wise layer normalisation with `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (m, n) = dims(xv, "layer_norm")?;
        if gv.shape() != [1, n] || bv.shape() != [1, n] {
            return Err(Error::shape("layer_norm", "gain/bias must be [1, n]"));
        }
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        };
        Ok(self.push(Tensor::matrix(m, n, out)?, op, ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = dims(av, "softmax_rows")?;
        let mut out = Vec::with_capacity(m * n);
        for row in av.data().chunks(n) {
            out.extend(crate::tensor::softmax(row));
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::SoftmaxRows(a), ng))
    }

    /// Scaled dot-product attention with a causal mask, applied
    /// independently to consecutive blocks of `block` rows (one block per
    /// sequence of a batch).
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, block: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, dh) = dims(qv, "causal_attention")?;
        if kv.shape() != [n, dh] {
            return Err(Error::shape("causal_attention", "q and k differ in shape"));
        }
        let (n3, dv) = dims(vv, "causal_attention")?;
        if n3 != n || block == 0 || n % block != 0 {
            return Err(Error::shape(
                "causal_attention",
                format!("{n} rows do not split into blocks of {block}"),
            ));
        }
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; n * block];
        let mut out = vec![0.0; n * dv];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut scores = vec![0.0; block];
        for b0 in (0..n).step_by(block) {
            for i in 0..block {
                let qi = &qd[(b0 + i) * dh..(b0 + i + 1) * dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &kd[(b0 + j) * dh..(b0 + j + 1) * dh];
                    let s = crate::tensor::dot(qi, kj) * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut().take(i + 1) {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let prow = &mut probs[(b0 + i) * block..(b0 + i + 1) * block];
                let orow = &mut out[(b0 + i) * dv..(b0 + i + 1) * dv];
                for j in 0..=i {
                    let p = scores[j] / z;
                    prow[j] = p;
                    let vj = &vd[(b0 + j) * dv..(b0 + j + 1) * dv];
                    orow.iter_mut().zip(vj).for_each(|(o, x)| *o += p * x);
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        let op = Op::CausalAttention { q, k, v, block, probs };
        Ok(self.push(Tensor::matrix(n, dv, out)?, op, ng))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = dims(tv, "gather_rows")?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape("gather_rows", format!("index {id} >= {rows}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let ng = self.ng(table);
        let op = Op::GatherRows {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(Tensor::matrix(ids.len(), d, out)?, op, ng))
    }

    /// Output row `i` is the sum of the `table` rows listed in `lists[i]`.
    pub fn gather_sum(&mut self, table: Var, lists: &[Vec<usize>]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = dims(tv, "gather_sum")?;
        let mut out = vec![0.0; lists.len() * d];
        for (i, list) in lists.iter().enumerate() {
            let orow = &mut out[i * d..(i + 1) * d];
            for &f in list {
                if f >= rows {
                    return Err(Error::shape("gather_sum", format!("index {f} >= {rows}")));
                }
                orow.iter_mut().zip(tv.row(f)).for_each(|(o, x)| *o += x);
            }
        }
        let ng = self.ng(table);
        let op = Op::GatherSum {
            table,
            lists: lists.to_vec(),
        };
        Ok(self.push(Tensor::matrix(lists.len(), d, out)?, op, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = dims(av, "slice_cols")?;
        if start + len > n {
            return Err(Error::shape("slice_cols", format!("{start}+{len} > {n}")));
        }
        let mut out = Vec::with_capacity(m * len);
        for row in av.data().chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(m, len, out)?, Op::SliceCols { a, start }, ng))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = dims(av, "slice_rows")?;
        if start + len > m {
            return Err(Error::shape("slice_rows", format!("{start}+{len} > {m}")));
        }
        let out = av.data()[start * n..(start + len) * n].to_vec();
        let ng = self.ng(a);
        Ok(self.push(Tensor::matrix(len, n, out)?, Op::SliceRows { a, start }, ng))
    }

    /// `a` with `v: [1, n]` added to row `row`.
    pub fn add_at_row(&mut self, a: Var, row: usize, v: Var) -> Result<Var> {
        let (av, vv) = (self.value(a), self.value(v));
        let (m, n) = dims(av, "add_at_row")?;
        if row >= m || vv.shape() != [1, n] {
            return Err(Error::shape(
                "add_at_row",
                format!("row {row} of [{m}, {n}] with vector {:?}", vv.shape()),
            ));
        }
        let mut data = av.data().to_vec();
        data[row * n..(row + 1) * n]
            .iter_mut()
            .zip(vv.data())
            .for_each(|(x, y)| *x += y);
        let ng = self.ng(a) || self.ng(v);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::AddAtRow { a, row, v }, ng))
    }

    /// `a` with row `row` overwritten by `v: [1, n]`.
    pub fn replace_row(&mut self, a: Var, row: usize, v: Var) -> Result<Var> {
        let (av, vv) = (self.value(a), self.value(v));
        let (m, n) = dims(av, "replace_row")?;
        if row >= m || vv.shape() != [1, n] {
            return Err(Error::shape(
                "replace_row",
                format!("row {row} of [{m}, {n}] with vector {:?}", vv.shape()),
            ));
        }
        let mut data = av.data().to_vec();
        data[row * n..(row + 1) * n].copy_from_slice(vv.data());
        let ng = self.ng(a) || self.ng(v);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::ReplaceRow { a, row, v }, ng))
    }

    /// Mean cross-entropy over the rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, n) = dims(lv, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {m} rows", targets.len()),
            ));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy needs at least one target".into()));
        }
        let mut probs = vec![0.0; m * n];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= n {
                return Err(Error::shape("cross_entropy", format!("target {t} >= {n}")));
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[t];
            for c in 0..n {
                probs[r * n + c] = (row[c] - lse).exp();
            }
        }
        let ng = self.ng(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(total / count as f64), op, ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(a), ng))
    }

    /// Euclidean norm; its gradient at the origin is defined as zero.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).l2_norm();
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s), Op::L2Norm(a), ng))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Propagates d`loss`/d(node) backwards and accumulates into leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.ng(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.to_mut().accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[i].value;
        let wants = |v: Var| nodes[v.0].needs_grad;
        // Returns a zero-initialised accumulator for `v`.
        fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };

        match &nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).cols();
                if wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    // dA = dC * B^T
                    gemm(m, n, k, g, (n, 1), val(*b).data(), (1, n), 1.0, ga, k);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, k * n);
                    // dB = A^T * dC
                    gemm(k, m, n, val(*a).data(), (1, k), g, (n, 1), 1.0, gb, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let n = val(*b).rows();
                if wants(*a) {
                    let ga = slot(grads, *a, m * k);
                    // dA = dC * B
                    gemm(m, n, k, g, (n, 1), val(*b).data(), (k, 1), 1.0, ga, k);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, n * k);
                    // dB = dC^T * A
                    gemm(n, m, k, g, (1, n), val(*a).data(), (k, 1), 1.0, gb, k);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, g.len());
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bd = val(*b).data();
                    let ga = slot(grads, *a, g.len());
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(bd) {
                        *x += y * w;
                    }
                }
                if wants(*b) {
                    let ad = val(*a).data();
                    let gb = slot(grads, *b, g.len());
                    for ((x, y), w) in gb.iter_mut().zip(g).zip(ad) {
                        *x += y * w;
                    }
                }
            }
            Op::AddBias(a, bias) => {
                let n = out.cols();
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(*bias) {
                    let gb = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::Gelu(a, th) => {
                if wants(*a) {
                    let ad = val(*a).data();
                    let ga = slot(grads, *a, g.len());
                    for (((acc, up), &x), &t) in ga.iter_mut().zip(g).zip(ad).zip(th) {
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        *acc += up * d;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let m = out.rows();
                let gd = val(*gain).data();
                if wants(*gain) {
                    let gg = slot(grads, *gain, n);
                    for r in 0..m {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
                if wants(*x) {
                    let gx = slot(grads, *x, m * n);
                    let mut dxhat = vec![0.0; n];
                    for r in 0..m {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..n {
                            let d = g[r * n + c] * gd[c];
                            dxhat[c] = d;
                            mean_d += d;
                            mean_dx += d * xhat[r * n + c];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for c in 0..n {
                            gx[r * n + c] += inv_std[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if wants(*a) {
                    let n = out.cols();
                    let y = out.data();
                    let ga = slot(grads, *a, g.len());
                    for (r, (grow, yrow)) in g.chunks(n).zip(y.chunks(n)).enumerate() {
                        let s: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            ga[r * n + c] += yrow[c] * (grow[c] - s);
                        }
                    }
                }
            }
            Op::CausalAttention { q, k, v, block, probs } => {
                let block = *block;
                let (n, dh) = (val(*q).rows(), val(*q).cols());
                let dv = val(*v).cols();
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut gq = vec![0.0; n * dh];
                let mut gk = vec![0.0; n * dh];
                let mut gv = vec![0.0; n * dv];
                let mut dp = vec![0.0; block];
                for b0 in (0..n).step_by(block) {
                    for i in 0..block {
                        let gi = &g[(b0 + i) * dv..(b0 + i + 1) * dv];
                        let prow = &probs[(b0 + i) * block..(b0 + i + 1) * block];
                        let mut s = 0.0;
                        for j in 0..=i {
                            let vj = &vd[(b0 + j) * dv..(b0 + j + 1) * dv];
                            dp[j] = crate::tensor::dot(gi, vj);
                            s += prow[j] * dp[j];
                            let gvj = &mut gv[(b0 + j) * dv..(b0 + j + 1) * dv];
                            gvj.iter_mut().zip(gi).for_each(|(a, b)| *a += prow[j] * b);
                        }
                        for j in 0..=i {
                            let ds = prow[j] * (dp[j] - s) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            for c in 0..dh {
                                gq[(b0 + i) * dh + c] += ds * kd[(b0 + j) * dh + c];
                                gk[(b0 + j) * dh + c] += ds * qd[(b0 + i) * dh + c];
                            }
                        }
                    }
                }
                for (var, buf) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if wants(var) {
                        let acc = slot(grads, var, buf.len());
                        acc.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if wants(*table) {
                    let d = out.cols();
                    let gt = slot(grads, *table, val(*table).numel());
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::GatherSum { table, lists } => {
                if wants(*table) {
                    let d = out.cols();
                    let gt = slot(grads, *table, val(*table).numel());
                    for (r, list) in lists.iter().enumerate() {
                        for &f in list {
                            for c in 0..d {
                                gt[f * d + c] += g[r * d + c];
                            }
                        }
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if wants(*a) {
                    let n = val(*a).cols();
                    let len = out.cols();
                    let ga = slot(grads, *a, val(*a).numel());
                    for (r, row) in g.chunks(len).enumerate() {
                        for c in 0..len {
                            ga[r * n + start + c] += row[c];
                        }
                    }
                }
            }
            Op::SliceRows { a, start } => {
                if wants(*a) {
                    let n = out.cols();
                    let ga = slot(grads, *a, val(*a).numel());
                    ga[start * n..start * n + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y);
                }
            }
            Op::AddAtRow { a, row, v } => {
                let n = out.cols();
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if wants(*v) {
                    let gv = slot(grads, *v, n);
                    gv.iter_mut().zip(&g[row * n..(row + 1) * n]).for_each(|(x, y)| *x += y);
                }
            }
            Op::ReplaceRow { a, row, v } => {
                let n = out.cols();
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    for (idx, (x, y)) in ga.iter_mut().zip(g).enumerate() {
                        if idx / n != *row {
                            *x += y;
                        }
                    }
                }
                if wants(*v) {
                    let gv = slot(grads, *v, n);
                    gv.iter_mut().zip(&g[row * n..(row + 1) * n]).for_each(|(x, y)| *x += y);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if wants(*logits) {
                    let n = val(*logits).cols();
                    let count = targets.iter().flatten().count() as f64;
                    let up = g[0] / count;
                    let gl = slot(grads, *logits, probs.len());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for c in 0..n {
                            gl[r * n + c] += up * probs[r * n + c];
                        }
                        gl[r * n + t] -= up;
                    }
                }
            }
            Op::SumAll(a) => {
                if wants(*a) {
                    let ga = slot(grads, *a, val(*a).numel());
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::L2Norm(a) => {
                if wants(*a) {
                    let norm = out.data()[0];
                    if norm > 0.0 {
                        let ad = val(*a).data();
                        let ga = slot(grads, *a, ad.len());
                        ga.iter_mut().zip(ad).for_each(|(x, y)| *x += g[0] * y / norm);
                    } else {
                        slot(grads, *a, val(*a).numel());
                    }
                }
            }
        }
    }
}

/// `tanh` via a branch-free `exp` so the GELU loop vectorizes; absolute
/// error stays below 1e-15.
fn fast_tanh(u: f64) -> f64 {
    let u = u.clamp(-20.0, 20.0);
    1.0 - 2.0 / (exp_poly(2.0 * u) + 1.0)
}

/// `exp` on [-40, 40]: range reduction by ln 2 and a degree-12 Taylor
/// polynomial on |r| <= ln2 / 2.
fn exp_poly(x: f64) -> f64 {
    let k = (x * std::f64::consts::LOG2_E).round();
    let r = x - k * std::f64::consts::LN_2;
    let mut p = 1.0 / 479_001_600.0;
    for d in [
        39_916_800.0, 3_628_800.0, 362_880.0, 40_320.0, 5_040.0, 720.0, 120.0, 24.0, 6.0, 2.0, 1.0,
    ] {
        p = p * r + 1.0 / d;
    }
    let p = p * r + 1.0;
    f64::from_bits(((k as i64 + 1023) as u64) << 52) * p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::row_vector(vec![1.0, 2.0]));
        let sq = tape.mul(v, v).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn independent_leaf_gets_zero_or_nothing() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::row_vector(vec![1.0, 2.0]));
        let w = tape.leaf(Tensor::row_vector(vec![3.0]));
        let loss = tape.sum_all(v).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).is_none_or(|g| g.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::row_vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::row_vector(vec![3.0]));
        let loss = tape.sum_all(v).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[2.0]);
        tape.zero_grads();
        assert!(tape.grad(v).is_none());
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = tape.constant_owned(Tensor::matrix(2, 3, vec![0.0, 1.0, 2.0, -5.0, 0.0, 9.0]).unwrap());
        let s = tape.softmax_rows(a).unwrap();
        for r in 0..2 {
            let sum: f64 = tape.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_entropy_matches_log_sigmoid() {
        // CE([10, -10], 0) = -log(sigmoid(20)) = log(1 + e^-20)
        let mut tape = Tape::new();
        let l = tape.constant_owned(Tensor::row_vector(vec![10.0, -10.0]));
        let ce = tape.cross_entropy(l, &[Some(0)]).unwrap();
        let expected = (-20.0f64).exp().ln_1p();
        assert!((tape.value(ce).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_are_structured() {
        let mut tape = Tape::new();
        let a = tape.constant_owned(Tensor::zeros(&[2, 3]));
        let b = tape.constant_owned(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
        assert!(matches!(tape.add_at_row(a, 5, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn norm_gradient_at_origin_is_zero() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::row_vector(vec![0.0, 0.0]));
        let n = tape.l2_norm(v).unwrap();
        tape.backward(n).unwrap();
        assert_eq!(tape.grad(v).unwrap(), &[0.0, 0.0]);
    }

    // Leaf sizes: table [6,4], gain [1,4], bias [1,4], w [4,4], b2 [1,4],
    // u [1,4], r [1,4], e [5,4].
    const SIZES: [usize; 8] = [24, 4, 4, 16, 4, 4, 4, 20];

    /// A scalar built from every differentiable op; returns the loss and
    /// the leaf gradients.
    fn composite(p: &[f64]) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let mut off = 0;
        let mut leaves = Vec::new();
        for (i, &n) in SIZES.iter().enumerate() {
            let data = p[off..off + n].to_vec();
            off += n;
            let t = match i {
                0 => Tensor::matrix(6, 4, data),
                3 => Tensor::matrix(4, 4, data),
                7 => Tensor::matrix(5, 4, data),
                _ => Tensor::matrix(1, 4, data),
            };
            leaves.push(tape.leaf(t.unwrap()));
        }
        let [table, gain, bias, w, b2, u, r, e] = leaves[..] else {
            unreachable!()
        };
        let x = tape
            .gather_sum(table, &[vec![0, 1], vec![2], vec![3, 5], vec![4], vec![1, 4], vec![0]])
            .unwrap();
        let g = tape.gather_rows(table, &[5, 2, 0, 1, 3, 4]).unwrap();
        let x = tape.add(x, g).unwrap();
        let h = tape.layer_norm(x, gain, bias).unwrap();
        let h = tape.matmul(h, w).unwrap();
        let h = tape.add_bias(h, b2).unwrap();
        let a = tape.gelu(h).unwrap();
        let att = tape.causal_attention(a, h, a, 3).unwrap();
        let att = tape.add_at_row(att, 4, u).unwrap();
        let att = tape.replace_row(att, 1, r).unwrap();
        let logits = tape.matmul_nt(att, e).unwrap();
        let ce = tape
            .cross_entropy(logits, &[Some(1), None, Some(4), Some(0), None, Some(2)])
            .unwrap();
        let top = tape.slice_rows(att, 0, 2).unwrap();
        let top = tape.slice_cols(top, 1, 3).unwrap();
        let sm = tape.softmax_rows(top).unwrap();
        let sq = tape.mul(sm, sm).unwrap();
        let d = tape.sub(sq, sm).unwrap();
        let s = tape.sum_all(d).unwrap();
        let n = tape.l2_norm(u).unwrap();
        let n = tape.scale(n, 0.3).unwrap();
        let loss = tape.add(ce, s).unwrap();
        let loss = tape.add(loss, n).unwrap();
        tape.backward(loss).unwrap();
        let mut grads = Vec::new();
        for (&l, &n) in leaves.iter().zip(&SIZES) {
            match tape.grad(l) {
                Some(gr) => grads.extend_from_slice(gr),
                None => grads.extend(std::iter::repeat_n(0.0, n)),
            }
        }
        (tape.value(loss).data()[0], grads)
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(24))]
        #[test]
        fn composite_gradient_matches_central_differences(
            p in proptest::collection::vec(-1.5f64..1.5, 80),
        ) {
            let (_, g) = composite(&p);
            let eps = 1e-5;
            for i in 0..p.len() {
                let mut hi = p.clone();
                let mut lo = p.clone();
                hi[i] += eps;
                lo[i] -= eps;
                let fd = (composite(&hi).0 - composite(&lo).0) / (2.0 * eps);
                let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-2);
                proptest::prop_assert!(err <= 1e-4, "param {i}: analytic {} fd {fd}", g[i]);
            }
        }
    }

    #[test]
    fn fast_tanh_matches_std() {
        for i in -4000..=4000 {
            let u = i as f64 * 0.01;
            assert!((fast_tanh(u) - u.tanh()).abs() < 1e-15, "{u}");
        }
        assert!(fast_tanh(0.0).abs() < 1e-16);
        assert_eq!(fast_tanh(1e9), 1.0);
    }
}
