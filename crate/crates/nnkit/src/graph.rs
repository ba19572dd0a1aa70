//! Define-by-run reverse-mode tape over `f64` vectors.
//!
//! Every node is evaluated eagerly when it is pushed, so a graph doubles as
//! the inference path: build, read values, drop. Parameters are read straight
//! out of the borrowed [`ParamStore`]; [`Graph::backward`] returns gradients
//! keyed by [`ParamId`] without touching the store.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::loss::PROB_FLOOR;
use crate::params::{ParamId, ParamStore};
use crate::{NnError, Result};

/// Log-probability assigned to masked-out entries of a masked log-softmax.
pub const MASKED_LOGP: f64 = -1.0e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatVec { w: ParamId, x: NodeId },
    EmbedRow { table: ParamId, row: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    OneMinus(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Square(NodeId),
    Dot(NodeId, NodeId),
    Concat(Vec<NodeId>),
    Sum(NodeId),
    SumNodes(Vec<NodeId>),
    LogSoftmax { x: NodeId, mask: Option<Rc<Vec<bool>>> },
    Pick(NodeId, usize),
    NegPickFloored(NodeId, usize),
    Entropy(NodeId),
    ClippedSurrogate { logp: NodeId, old_logp: f64, advantage: f64, eps: f64 },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Gradients of a scalar loss with respect to the parameters it reached.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: BTreeMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id.0).map(Vec::as_slice)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Vec<f64>> {
        self.by_param.get_mut(&id.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.by_param.iter().map(|(k, v)| (ParamId(*k), v.as_slice()))
    }

    pub fn is_finite(&self) -> bool {
        self.by_param.values().flatten().all(|v| v.is_finite())
    }

    fn slot(&mut self, store: &ParamStore, id: ParamId) -> &mut Vec<f64> {
        self.by_param
            .entry(id.0)
            .or_insert_with(|| vec![0.0; store.get(id).len()])
    }
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check_same_len(&self, a: NodeId, b: NodeId, what: &str) -> Result<usize> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(NnError::Config(format!("{what}: length {la} vs {lb}")));
        }
        Ok(la)
    }

    pub fn input(&mut self, values: Vec<f64>) -> NodeId {
        self.push(Op::Input, values)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let v = self.store.get(id).data().iter().map(|&x| x as f64).collect();
        self.push(Op::Param(id), v)
    }

    /// `W x` for a rank-2 parameter `W` of shape `[rows, cols]`.
    pub fn matvec(&mut self, w: ParamId, x: NodeId) -> Result<NodeId> {
        let t = self.store.get(w);
        let (rows, cols) = t.matrix_dims();
        let xv = &self.nodes[x.0].value;
        if xv.len() != cols {
            return Err(NnError::Config(format!(
                "matvec `{}`: expected input of {cols}, got {}",
                self.store.name(w),
                xv.len()
            )));
        }
        let data = t.data();
        let out = (0..rows)
            .map(|r| {
                crate::tensor::dot_wx(&data[r * cols..(r + 1) * cols], xv)
            })
            .collect();
        Ok(self.push(Op::MatVec { w, x }, out))
    }

    pub fn embed_row(&mut self, table: ParamId, row: usize) -> Result<NodeId> {
        let t = self.store.get(table);
        let (rows, _) = t.matrix_dims();
        if row >= rows {
            return Err(NnError::Argument(format!(
                "row {row} out of range for `{}` with {rows} rows",
                self.store.name(table)
            )));
        }
        let v = t.row(row).iter().map(|&x| x as f64).collect();
        Ok(self.push(Op::EmbedRow { table, row }, v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_len(a, b, "add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_len(a, b, "sub")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(Op::Sub(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_len(a, b, "mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).iter().map(|x| x * c).collect();
        self.push(Op::Scale(a, c), v)
    }

    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|x| 1.0 - x).collect();
        self.push(Op::OneMinus(a), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(Op::Sigmoid(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), v)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|x| x * x).collect();
        self.push(Op::Square(a), v)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_len(a, b, "dot")?;
        let v = crate::tensor::dot(self.value(a), self.value(b));
        Ok(self.push(Op::Dot(a, b), vec![v]))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let v = parts.iter().flat_map(|p| self.value(*p).iter().copied()).collect();
        self.push(Op::Concat(parts.to_vec()), v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().sum();
        self.push(Op::Sum(a), vec![v])
    }

    /// Elementwise sum of equal-length nodes. An empty list yields scalar 0.
    pub fn sum_nodes(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(first) = parts.first() else {
            return Ok(self.input(vec![0.0]));
        };
        let n = self.value(*first).len();
        let mut v = vec![0.0; n];
        for p in parts {
            let pv = self.value(*p);
            if pv.len() != n {
                return Err(NnError::Config(format!("sum_nodes: length {} vs {n}", pv.len())));
            }
            v.iter_mut().zip(pv).for_each(|(a, b)| *a += b);
        }
        Ok(self.push(Op::SumNodes(parts.to_vec()), v))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.log_softmax_masked(x, None)
    }

    /// Log-softmax restricted to entries where `mask` is true; other entries
    /// receive [`MASKED_LOGP`] and no gradient.
    pub fn log_softmax_masked(&mut self, x: NodeId, mask: Option<Rc<Vec<bool>>>) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(NnError::Argument("log_softmax of empty vector".into()));
        }
        if let Some(m) = &mask {
            if m.len() != xv.len() || !m.iter().any(|&b| b) {
                return Err(NnError::Argument("log_softmax mask mismatch".into()));
            }
        }
        let v = crate::loss::masked_log_softmax(xv, mask.as_deref().map(Vec::as_slice));
        Ok(self.push(Op::LogSoftmax { x, mask }, v))
    }

    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let v = *self
            .value(a)
            .get(index)
            .ok_or_else(|| NnError::Argument(format!("pick index {index} out of range")))?;
        Ok(self.push(Op::Pick(a, index), vec![v]))
    }

    /// `-max(logp[index], ln PROB_FLOOR)` on a log-probability vector.
    pub fn nll(&mut self, logp: NodeId, index: usize) -> Result<NodeId> {
        let lp = *self
            .value(logp)
            .get(index)
            .ok_or_else(|| NnError::Argument(format!("target index {index} out of range")))?;
        let v = -lp.max(PROB_FLOOR.ln());
        Ok(self.push(Op::NegPickFloored(logp, index), vec![v]))
    }

    /// Shannon entropy `-sum p ln p` of a log-probability vector.
    pub fn entropy(&mut self, logp: NodeId) -> NodeId {
        let v = -self
            .value(logp)
            .iter()
            .map(|&lp| if lp <= MASKED_LOGP { 0.0 } else { lp.exp() * lp })
            .sum::<f64>();
        self.push(Op::Entropy(logp), vec![v])
    }

    /// PPO clipped surrogate `min(r A, clip(r, 1-eps, 1+eps) A)` with
    /// `r = exp(logp - old_logp)`.
    pub fn clipped_surrogate(&mut self, logp: NodeId, old_logp: f64, advantage: f64, eps: f64) -> NodeId {
        let ratio = (self.scalar(logp) - old_logp).exp();
        let v = (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage);
        self.push(
            Op::ClippedSurrogate {
                logp,
                old_logp,
                advantage,
                eps,
            },
            vec![v],
        )
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(NnError::State("backward called before any forward pass".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NnError::Argument("backward requires a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
            grads[id.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = &node.value;
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    let slot = out.slot(self.store, *p);
                    slot.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                }
                Op::MatVec { w, x } => {
                    let t = self.store.get(*w);
                    let (rows, cols) = t.matrix_dims();
                    let xv = &self.nodes[x.0].value;
                    let slot = out.slot(self.store, *w);
                    for r in 0..rows {
                        let gr = g[r];
                        if gr != 0.0 {
                            let srow = &mut slot[r * cols..(r + 1) * cols];
                            srow.iter_mut().zip(xv).for_each(|(s, xc)| *s += gr * xc);
                        }
                    }
                    let data = t.data();
                    let gx = acc(&mut grads, *x, cols);
                    for r in 0..rows {
                        let gr = g[r];
                        if gr != 0.0 {
                            gx.iter_mut()
                                .zip(&data[r * cols..(r + 1) * cols])
                                .for_each(|(s, &w)| *s += gr * w as f64);
                        }
                    }
                }
                Op::EmbedRow { table, row } => {
                    let (_, cols) = self.store.get(*table).matrix_dims();
                    let slot = out.slot(self.store, *table);
                    slot[row * cols..(row + 1) * cols]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(s, v)| *s += v);
                }
                Op::Add(a, b) => {
                    let n = g.len();
                    acc(&mut grads, *a, n).iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                    acc(&mut grads, *b, n).iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                }
                Op::Sub(a, b) => {
                    let n = g.len();
                    acc(&mut grads, *a, n).iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                    acc(&mut grads, *b, n).iter_mut().zip(&g).for_each(|(s, v)| *s -= v);
                }
                Op::Mul(a, b) => {
                    let n = g.len();
                    let (av, bv) = (self.nodes[a.0].value.clone(), self.nodes[b.0].value.clone());
                    acc(&mut grads, *a, n)
                        .iter_mut()
                        .zip(g.iter().zip(&bv))
                        .for_each(|(s, (gv, y))| *s += gv * y);
                    acc(&mut grads, *b, n)
                        .iter_mut()
                        .zip(g.iter().zip(&av))
                        .for_each(|(s, (gv, x))| *s += gv * x);
                }
                Op::Scale(a, c) => {
                    acc(&mut grads, *a, g.len()).iter_mut().zip(&g).for_each(|(s, v)| *s += c * v);
                }
                Op::OneMinus(a) => {
                    acc(&mut grads, *a, g.len()).iter_mut().zip(&g).for_each(|(s, v)| *s -= v);
                }
                Op::Sigmoid(a) => {
                    acc(&mut grads, *a, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(val))
                        .for_each(|(s, (gv, y))| *s += gv * y * (1.0 - y));
                }
                Op::Tanh(a) => {
                    acc(&mut grads, *a, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(val))
                        .for_each(|(s, (gv, y))| *s += gv * (1.0 - y * y));
                }
                Op::Square(a) => {
                    let av = &self.nodes[a.0].value;
                    let ga: Vec<f64> = g.iter().zip(av).map(|(gv, x)| 2.0 * gv * x).collect();
                    acc(&mut grads, *a, g.len()).iter_mut().zip(&ga).for_each(|(s, v)| *s += v);
                }
                Op::Dot(a, b) => {
                    let g0 = g[0];
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga: Vec<f64> = bv.iter().map(|y| g0 * y).collect();
                    let gb: Vec<f64> = av.iter().map(|x| g0 * x).collect();
                    acc(&mut grads, *a, ga.len()).iter_mut().zip(&ga).for_each(|(s, v)| *s += v);
                    acc(&mut grads, *b, gb.len()).iter_mut().zip(&gb).for_each(|(s, v)| *s += v);
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        acc(&mut grads, *p, n)
                            .iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(s, v)| *s += v);
                        off += n;
                    }
                }
                Op::Sum(a) => {
                    let n = self.nodes[a.0].value.len();
                    acc(&mut grads, *a, n).iter_mut().for_each(|s| *s += g[0]);
                }
                Op::SumNodes(parts) => {
                    for p in parts {
                        acc(&mut grads, *p, g.len()).iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                    }
                }
                Op::LogSoftmax { x, mask } => {
                    let allowed = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
                    let gsum: f64 = g
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| allowed(*i))
                        .map(|(_, v)| v)
                        .sum();
                    let gx: Vec<f64> = (0..g.len())
                        .map(|i| if allowed(i) { g[i] - val[i].exp() * gsum } else { 0.0 })
                        .collect();
                    acc(&mut grads, *x, gx.len()).iter_mut().zip(&gx).for_each(|(s, v)| *s += v);
                }
                Op::Pick(a, idx) => {
                    let n = self.nodes[a.0].value.len();
                    acc(&mut grads, *a, n)[*idx] += g[0];
                }
                Op::NegPickFloored(a, idx) => {
                    let av = &self.nodes[a.0].value;
                    if av[*idx] > PROB_FLOOR.ln() {
                        let n = av.len();
                        acc(&mut grads, *a, n)[*idx] -= g[0];
                    }
                }
                Op::Entropy(a) => {
                    let av = &self.nodes[a.0].value;
                    let ga: Vec<f64> = av
                        .iter()
                        .map(|&lp| if lp <= MASKED_LOGP { 0.0 } else { -g[0] * lp.exp() * (lp + 1.0) })
                        .collect();
                    acc(&mut grads, *a, ga.len()).iter_mut().zip(&ga).for_each(|(s, v)| *s += v);
                }
                Op::ClippedSurrogate {
                    logp,
                    old_logp,
                    advantage,
                    eps,
                } => {
                    let ratio = (self.nodes[logp.0].value[0] - old_logp).exp();
                    let unclipped = ratio * advantage;
                    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
                    // The min picks the clipped branch only when it is strictly
                    // smaller and the ratio is actually outside the band.
                    let live = unclipped <= clipped || (ratio > 1.0 - eps && ratio < 1.0 + eps);
                    if live {
                        acc(&mut grads, *logp, 1)[0] += g[0] * unclipped;
                    }
                }
            }
        }
        Ok(out)
    }
}
