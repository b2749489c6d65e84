//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] lives for one forward/backward pass. Every operation appends a
//! node holding its output value; [`Graph::backward`] walks the tape in
//! reverse. Parameters enter through [`Graph::param`] and their gradients are
//! accumulated per [`ParamId`], so a parameter used in several places (tied
//! embeddings) receives the sum of all contributions.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::attention::{self, AttnCache, AttnLayout};
use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::error::{Error, Result};

enum Op {
    Leaf,
    Param(#[allow(dead_code)] ParamId),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    MatMulBt(usize, usize),
    Relu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        layout: Rc<AttnLayout>,
        cache: AttnCache,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    SelectRows {
        x: usize,
        idx: Vec<usize>,
    },
    Dropout {
        x: usize,
        mask: Vec<f64>,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<(usize, f64)>>,
        smoothing: f64,
        probs: Vec<f64>,
    },
    Sum(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of tensor operations for one pass.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
    dropout_rng: Option<RefCell<ChaCha8Rng>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Evaluation graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            dropout_rng: None,
        }
    }

    /// Training graph: dropout draws its masks from `rng`.
    pub fn training(rng: ChaCha8Rng) -> Self {
        Graph {
            dropout_rng: Some(RefCell::new(rng)),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// Non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable free input; its gradient is read back with [`Gradients::wrt`].
    pub fn input(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf. Repeated calls with the same id share one node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var {
                graph: self,
                id: node,
            };
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.params.borrow_mut().insert(id, v.id);
        v
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Gradients of the scalar `loss` with respect to every parameter and
    /// differentiable input that reaches it.
    ///
    /// Each call returns a fresh set of gradients; nothing accumulates across
    /// calls.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if loss.id >= nodes.len() {
            return Err(Error::Internal("loss is not on this tape".into()));
        }
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        if !nodes[loss.id].value.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let mut deltas: Vec<(usize, Vec<f64>)> = Vec::with_capacity(3);
            let mut acc = |target: usize, delta: Vec<f64>| -> Result<()> {
                deltas.push((target, delta));
                Ok(())
            };
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    drop(acc);
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone())?;
                    acc(*b, g)?;
                }
                Op::AddRow(a, b) => {
                    let n = nodes[*b].value.len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    acc(*a, g)?;
                    acc(*b, db)?;
                }
                Op::Mul(a, b) => {
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    let da = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    let db = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    acc(*a, da)?;
                    acc(*b, db)?;
                }
                Op::Scale(a, c) => {
                    acc(*a, g.iter().map(|x| x * c).collect())?;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if nodes[*a].needs_grad {
                        let mut da = vec![0.0; m * k];
                        matmul_bt_into(&g, bv.data(), m, n, k, &mut da);
                        acc(*a, da)?;
                    }
                    if nodes[*b].needs_grad {
                        let mut db = vec![0.0; k * n];
                        matmul_at_into(av.data(), &g, m, k, n, &mut db);
                        acc(*b, db)?;
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                    if nodes[*a].needs_grad {
                        let mut da = vec![0.0; m * k];
                        matmul_into(&g, bv.data(), m, n, k, &mut da);
                        acc(*a, da)?;
                    }
                    if nodes[*b].needs_grad {
                        let mut db = vec![0.0; n * k];
                        matmul_at_into(&g, av.data(), m, n, k, &mut db);
                        acc(*b, db)?;
                    }
                }
                Op::Relu(a) => {
                    let out = node.value.data();
                    let da = g
                        .iter()
                        .zip(out)
                        .map(|(x, y)| if *y > 0.0 { *x } else { 0.0 })
                        .collect();
                    acc(*a, da)?;
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = nodes[*gain].value.len();
                    let gv = nodes[*gain].value.data();
                    let mut dx = vec![0.0; g.len()];
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (r, ((grow, xrow), dxrow)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(dx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for c in 0..d {
                            dg[c] += grow[c] * xrow[c];
                            db[c] += grow[c];
                            let dxh = grow[c] * gv[c];
                            m1 += dxh;
                            m2 += dxh * xrow[c];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for c in 0..d {
                            let dxh = grow[c] * gv[c];
                            dxrow[c] = rstd[r] * (dxh - m1 - xrow[c] * m2);
                        }
                    }
                    acc(*x, dx)?;
                    acc(*gain, dg)?;
                    acc(*bias, db)?;
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    layout,
                    cache,
                } => {
                    let (dq, dk, dv) = attention::backward(
                        &nodes[*q].value,
                        &nodes[*k].value,
                        &nodes[*v].value,
                        *heads,
                        layout,
                        cache,
                        &g,
                    );
                    acc(*q, dq)?;
                    acc(*k, dk)?;
                    acc(*v, dv)?;
                }
                Op::Embedding { table, ids } => {
                    let tv = &nodes[*table].value;
                    let d = tv.cols();
                    let mut dt = vec![0.0; tv.len()];
                    for (row, &id) in g.chunks(d).zip(ids) {
                        for (t, x) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *t += x;
                        }
                    }
                    acc(*table, dt)?;
                }
                Op::SelectRows { x, idx } => {
                    let xv = &nodes[*x].value;
                    let d = xv.cols();
                    let mut dx = vec![0.0; xv.len()];
                    for (row, &i) in g.chunks(d).zip(idx) {
                        for (t, v) in dx[i * d..(i + 1) * d].iter_mut().zip(row) {
                            *t += v;
                        }
                    }
                    acc(*x, dx)?;
                }
                Op::Dropout { x, mask } => {
                    acc(*x, g.iter().zip(mask).map(|(a, b)| a * b).collect())?;
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    smoothing,
                    probs,
                } => {
                    let v = nodes[*logits].value.cols();
                    let mut dl = vec![0.0; probs.len()];
                    let gs = g[0];
                    for (r, t) in targets.iter().enumerate() {
                        let Some((t, w)) = *t else { continue };
                        let gw = gs * w;
                        let prow = &probs[r * v..(r + 1) * v];
                        let drow = &mut dl[r * v..(r + 1) * v];
                        for c in 0..v {
                            drow[c] = gw * (prow[c] - smoothing / v as f64);
                        }
                        drow[t] -= gw * (1.0 - smoothing);
                    }
                    acc(*logits, dl)?;
                }
                Op::Sum(a) => {
                    let n = nodes[*a].value.len();
                    acc(*a, vec![g[0]; n])?;
                }
            }
            for (target, delta) in deltas {
                if target >= id {
                    // ops only ever reference earlier nodes
                    return Err(Error::Internal("cycle in tape".into()));
                }
                if !nodes[target].needs_grad {
                    continue;
                }
                match &mut grads[target] {
                    Some(existing) => {
                        for (e, d) in existing.iter_mut().zip(delta) {
                            *e += d;
                        }
                    }
                    slot @ None => *slot = Some(delta),
                }
            }
        }

        let mut out = Gradients {
            by_param: HashMap::new(),
            by_node: grads,
        };
        for (&pid, &nid) in self.params.borrow().iter() {
            if let Some(g) = out.by_node.get_mut(nid).and_then(Option::take) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient for {pid:?}")));
                }
                out.by_param
                    .insert(pid, Tensor::from_parts(nodes[nid].value.shape().to_vec(), g));
            }
        }
        Ok(out)
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    by_param: HashMap<ParamId, Tensor>,
    by_node: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.by_param.iter()
    }

    /// Gradient of a free input created with [`Graph::input`].
    pub fn wrt(&self, var: Var<'_>) -> Option<Tensor> {
        let g = self.by_node.get(var.id)?.as_ref()?;
        Some(Tensor::from_parts(var.value().shape().to_vec(), g.clone()))
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "{what}: expected a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.rows(), t.cols()))
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Ref<'g, Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn needs(&self) -> bool {
        self.graph.needs(self.id)
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            same_shape(&a, &b, "add")?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        let ng = self.needs() || other.needs();
        Ok(self.graph.push(out, Op::Add(self.id, other.id), ng))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_row(self, row: Var<'g>) -> Result<Var<'g>> {
        let out = {
            let (a, b) = (self.value(), row.value());
            let n = b.len();
            if a.cols() != n {
                return Err(Error::Dimension(format!(
                    "add_row: width {} vs vector of {n}",
                    a.cols()
                )));
            }
            let mut data = a.data().to_vec();
            for r in data.chunks_mut(n) {
                for (x, y) in r.iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        let ng = self.needs() || row.needs();
        Ok(self.graph.push(out, Op::AddRow(self.id, row.id), ng))
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            same_shape(&a, &b, "mul")?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        };
        let ng = self.needs() || other.needs();
        Ok(self.graph.push(out, Op::Mul(self.id, other.id), ng))
    }

    pub fn scale(self, c: f64) -> Var<'g> {
        let out = {
            let a = self.value();
            Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| x * c).collect())
        };
        let ng = self.needs();
        self.graph.push(out, Op::Scale(self.id, c), ng)
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            let (m, k) = matrix(&a, "matmul")?;
            let (k2, n) = matrix(&b, "matmul")?;
            if k != k2 {
                return Err(Error::Dimension(format!("matmul: {m}×{k} · {k2}×{n}")));
            }
            let mut c = vec![0.0; m * n];
            matmul_into(a.data(), b.data(), m, k, n, &mut c);
            Tensor::from_parts(vec![m, n], c)
        };
        let ng = self.needs() || other.needs();
        Ok(self.graph.push(out, Op::MatMul(self.id, other.id), ng))
    }

    /// `self · otherᵀ`.
    pub fn matmul_bt(self, other: Var<'g>) -> Result<Var<'g>> {
        let out = {
            let (a, b) = (self.value(), other.value());
            let (m, k) = matrix(&a, "matmul_bt")?;
            let (n, k2) = matrix(&b, "matmul_bt")?;
            if k != k2 {
                return Err(Error::Dimension(format!("matmul_bt: {m}×{k} · ({n}×{k2})ᵀ")));
            }
            let mut c = vec![0.0; m * n];
            matmul_bt_into(a.data(), b.data(), m, k, n, &mut c);
            Tensor::from_parts(vec![m, n], c)
        };
        let ng = self.needs() || other.needs();
        Ok(self.graph.push(out, Op::MatMulBt(self.id, other.id), ng))
    }

    pub fn relu(self) -> Var<'g> {
        let out = {
            let a = self.value();
            Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| x.max(0.0)).collect())
        };
        let ng = self.needs();
        self.graph.push(out, Op::Relu(self.id), ng)
    }

    /// Normalizes every row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(self, gain: Var<'g>, bias: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let (out, xhat, rstd) = {
            let (x, gv, bv) = (self.value(), gain.value(), bias.value());
            layer_norm_values(&x, &gv, &bv, eps)?
        };
        let ng = self.needs() || gain.needs() || bias.needs();
        Ok(self.graph.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Multi-head attention with `self` as queries.
    pub fn attention(
        self,
        keys: Var<'g>,
        values: Var<'g>,
        heads: usize,
        layout: Rc<AttnLayout>,
    ) -> Result<Var<'g>> {
        let (out, cache) = {
            let (q, k, v) = (self.value(), keys.value(), values.value());
            attention::forward(&q, &k, &v, heads, &layout)?
        };
        let ng = self.needs() || keys.needs() || values.needs();
        Ok(self.graph.push(
            out,
            Op::Attention {
                q: self.id,
                k: keys.id,
                v: values.id,
                heads,
                layout,
                cache,
            },
            ng,
        ))
    }

    /// Gathers rows `ids` of the table `self`.
    pub fn embedding(self, ids: &[usize]) -> Result<Var<'g>> {
        let out = {
            let t = self.value();
            let (rows, d) = matrix(&t, "embedding")?;
            if ids.is_empty() {
                return Err(Error::Dimension("embedding of an empty id list".into()));
            }
            let mut data = Vec::with_capacity(ids.len() * d);
            for &i in ids {
                if i >= rows {
                    return Err(Error::Input(format!("token id {i} outside table of {rows}")));
                }
                data.extend_from_slice(t.row(i));
            }
            Tensor::from_parts(vec![ids.len(), d], data)
        };
        let ng = self.needs();
        Ok(self.graph.push(
            out,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn select_rows(self, idx: &[usize]) -> Result<Var<'g>> {
        let out = {
            let x = self.value();
            let (rows, d) = matrix(&x, "select_rows")?;
            if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
                return Err(Error::Dimension("select_rows: bad row index".into()));
            }
            let mut data = Vec::with_capacity(idx.len() * d);
            for &i in idx {
                data.extend_from_slice(x.row(i));
            }
            Tensor::from_parts(vec![idx.len(), d], data)
        };
        let ng = self.needs();
        Ok(self.graph.push(
            out,
            Op::SelectRows {
                x: self.id,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Inverted dropout; the identity on evaluation graphs or when `p == 0`.
    pub fn dropout(self, p: f64) -> Var<'g> {
        let Some(rng) = &self.graph.dropout_rng else {
            return self;
        };
        if p <= 0.0 {
            return self;
        }
        let (out, mask) = {
            let x = self.value();
            let mut rng = rng.borrow_mut();
            let keep = 1.0 / (1.0 - p);
            let mask: Vec<f64> = (0..x.len())
                .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
                .collect();
            let data = x.data().iter().zip(&mask).map(|(a, b)| a * b).collect();
            (Tensor::from_parts(x.shape().to_vec(), data), mask)
        };
        let ng = self.needs();
        self.graph.push(out, Op::Dropout { x: self.id, mask }, ng)
    }

    /// Summed label-smoothed negative log-likelihood over rows with a target.
    ///
    /// Per row: `(1-ε)·(-log p[t]) + ε·mean_k(-log p[k])`. Rows whose target is
    /// `None` contribute nothing.
    pub fn cross_entropy(self, targets: &[Option<usize>], smoothing: f64) -> Result<Var<'g>> {
        let weighted: Vec<Option<(usize, f64)>> = targets.iter().map(|t| t.map(|t| (t, 1.0))).collect();
        self.weighted_cross_entropy(&weighted, smoothing)
    }

    /// [`cross_entropy`](Self::cross_entropy) with a weight per row.
    pub fn weighted_cross_entropy(self, targets: &[Option<(usize, f64)>], smoothing: f64) -> Result<Var<'g>> {
        let (out, probs) = {
            let x = self.value();
            let (rows, v) = matrix(&x, "cross_entropy")?;
            if targets.len() != rows {
                return Err(Error::Dimension(format!(
                    "{} targets for {rows} rows",
                    targets.len()
                )));
            }
            let lp = super::tensor::log_softmax_rows(x.data(), v);
            let mut loss = 0.0;
            for (r, t) in targets.iter().enumerate() {
                let Some((t, w)) = *t else { continue };
                if t >= v {
                    return Err(Error::Input(format!("target {t} outside vocabulary of {v}")));
                }
                let row = &lp[r * v..(r + 1) * v];
                let uniform = -row.iter().sum::<f64>() / v as f64;
                loss += w * ((1.0 - smoothing) * -row[t] + smoothing * uniform);
            }
            let probs = lp.iter().map(|l| l.exp()).collect();
            (Tensor::scalar(loss), probs)
        };
        let ng = self.needs();
        Ok(self.graph.push(
            out,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            ng,
        ))
    }

    pub fn sum(self) -> Var<'g> {
        let out = Tensor::scalar(self.value().data().iter().sum());
        let ng = self.needs();
        self.graph.push(out, Op::Sum(self.id), ng)
    }
}

pub(crate) fn layer_norm_values(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let d = gain.len();
    if d == 0 || x.cols() != d || bias.len() != d {
        return Err(Error::Dimension(format!(
            "layer_norm: width {} with gain {} and bias {}",
            x.cols(),
            d,
            bias.len()
        )));
    }
    let rows = x.rows();
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = h * gain.data()[c] + bias.data()[c];
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), xhat, rstd))
}

/// Layer normalization outside any graph.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    layer_norm_values(x, gain, bias, eps).map(|(out, _, _)| out)
}
