//! Reverse-mode differentiation over recorded tensor operations.
//!
//! A [`Tape`] records every primitive applied during one evaluation and can
//! then push a scalar loss gradient back to every registered parameter.
//! Rounding primitives follow the straight-through rule (the gradient passes
//! unchanged) and clamps route the gradient to the input inside the active
//! range and to the violated bound outside it.
//!
//! Tapes run in one of two modes:
//!
//! * [`QuantMode::Exact`] — rounding and integer bound primitives compute
//!   their discrete values. This is what calibration optimizes: the loss is
//!   the true quantized loss, the gradients are the straight-through ones.
//! * [`QuantMode::Straight`] — the same graph with rounding and integer
//!   bounds replaced by their identity surrogates. In this mode the
//!   straight-through gradients are the exact gradients of the evaluated
//!   function, which is what makes finite-difference checks meaningful.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gelu, gelu_grad, round_half_away, softmax_row, Tensor};

/// Whether discrete primitives evaluate exactly or as their
/// straight-through surrogates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    Exact,
    Straight,
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Broadcast pattern for binary elementwise ops: `b` may match `a`'s shape,
/// be a length-n row vector, a length-m column vector, or a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

#[derive(Debug, Clone, Copy)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Bin { kind: BinKind, a: usize, b: usize, bc: Bcast },
    MatMul { a: usize, b: usize },
    Transpose { a: usize },
    Affine { a: usize, mul: f64, add: f64 },
    Round { a: usize },
    CeilSte { a: usize },
    FloorSte { a: usize },
    Clamp { x: usize, lo: usize, hi: usize, bc: Bcast },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Softmax { x: usize },
    Gelu { a: usize },
    Sigmoid { a: usize },
    SoftplusNeg { a: usize },
    MeanRows { a: usize },
    SumAll { a: usize },
    MeanAll { a: usize },
    GatherRows { table: usize, idx: Vec<usize> },
    SliceCols { a: usize, start: usize, len: usize },
    ConcatCols { parts: Vec<usize> },
    CrossEntropyMasked { logits: usize, targets: Vec<usize>, mask: Vec<bool> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients per registered parameter, in registration order.
pub struct Gradients {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }
}

pub struct Tape {
    mode: QuantMode,
    nodes: Vec<Node>,
    params: Vec<(String, usize)>,
}

impl Tape {
    pub fn new(mode: QuantMode) -> Self {
        Self { mode, nodes: Vec::new(), params: Vec::new() }
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Record a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    /// Record a named parameter; `backward` reports a gradient for it.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::Contract(format!("parameter `{name}` registered twice")));
        }
        let v = self.push(Op::Leaf, value);
        self.params.push((name.to_string(), v.0));
        Ok(v)
    }

    fn check_bcast(&self, a: Var, b: Var, bc: Bcast) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ok = match bc {
            Bcast::Same => ta.shape() == tb.shape(),
            Bcast::Row => tb.len() == ta.cols(),
            Bcast::Col => tb.len() == ta.rows(),
            Bcast::Scalar => tb.len() == 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "broadcast {bc:?}: shapes {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )))
        }
    }

    fn bin(&mut self, kind: BinKind, a: Var, b: Var, bc: Bcast) -> Result<Var> {
        self.check_bcast(a, b, bc)?;
        let value = {
            let (ta, tb) = (self.value(a), self.value(b));
            bcast_zip(ta, tb, bc, |x, y| match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            })
        };
        Ok(self.push(Op::Bin { kind, a: a.0, b: b.0, bc }, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Add, a, b, Bcast::Same)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Sub, a, b, Bcast::Same)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bin(BinKind::Mul, a, b, Bcast::Same)
    }
    pub fn add_bc(&mut self, a: Var, b: Var, bc: Bcast) -> Result<Var> {
        self.bin(BinKind::Add, a, b, bc)
    }
    pub fn sub_bc(&mut self, a: Var, b: Var, bc: Bcast) -> Result<Var> {
        self.bin(BinKind::Sub, a, b, bc)
    }
    pub fn mul_bc(&mut self, a: Var, b: Var, bc: Bcast) -> Result<Var> {
        self.bin(BinKind::Mul, a, b, bc)
    }
    pub fn div_bc(&mut self, a: Var, b: Var, bc: Bcast) -> Result<Var> {
        self.bin(BinKind::Div, a, b, bc)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul { a: a.0, b: b.0 }, value))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(Op::Transpose { a: a.0 }, value)
    }

    /// Elementwise `a * mul + add` with constant coefficients.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let value = self.value(a).map(|x| x * mul + add);
        self.push(Op::Affine { a: a.0, mul, add }, value)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.affine(a, c, 0.0)
    }

    /// Round half away from zero; gradient passes through unchanged.
    pub fn round(&mut self, a: Var) -> Var {
        let value = match self.mode {
            QuantMode::Exact => self.value(a).map(round_half_away),
            QuantMode::Straight => self.value(a).clone(),
        };
        self.push(Op::Round { a: a.0 }, value)
    }

    /// Ceil with straight-through gradient (identity in `Straight` mode).
    pub fn ceil_ste(&mut self, a: Var) -> Var {
        let value = match self.mode {
            QuantMode::Exact => self.value(a).map(f64::ceil),
            QuantMode::Straight => self.value(a).clone(),
        };
        self.push(Op::CeilSte { a: a.0 }, value)
    }

    /// Floor with straight-through gradient (identity in `Straight` mode).
    pub fn floor_ste(&mut self, a: Var) -> Var {
        let value = match self.mode {
            QuantMode::Exact => self.value(a).map(f64::floor),
            QuantMode::Straight => self.value(a).clone(),
        };
        self.push(Op::FloorSte { a: a.0 }, value)
    }

    /// Clamp `x` between tensors `lo` and `hi` (both broadcast with `bc`).
    /// Inside the range the gradient flows to `x`; outside it flows to the
    /// violated bound.
    pub fn clamp(&mut self, x: Var, lo: Var, hi: Var, bc: Bcast) -> Result<Var> {
        self.check_bcast(x, lo, bc)?;
        self.check_bcast(x, hi, bc)?;
        let value = {
            let (tx, tlo, thi) = (self.value(x), self.value(lo), self.value(hi));
            let lov = bcast_expand(tx, tlo, bc);
            let hiv = bcast_expand(tx, thi, bc);
            let data: Vec<f64> = tx
                .data()
                .iter()
                .zip(lov.iter().zip(hiv.iter()))
                .map(|(&v, (&l, &h))| {
                    if v < l {
                        l
                    } else if v > h {
                        h
                    } else {
                        v
                    }
                })
                .collect();
            Tensor::new(tx.shape().to_vec(), data).expect("clamp shape")
        };
        Ok(self.push(Op::Clamp { x: x.0, lo: lo.0, hi: hi.0, bc }, value))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let value =
            crate::tensor::layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, eps }, value))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let value = crate::tensor::softmax(self.value(x));
        self.push(Op::Softmax { x: x.0 }, value)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        self.push(Op::Gelu { a: a.0 }, value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid { a: a.0 }, value)
    }

    /// Elementwise `log(1 + exp(-x))`, overflow-safe.
    pub fn softplus_neg(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus_neg);
        self.push(Op::SoftplusNeg { a: a.0 }, value)
    }

    /// Column means: `[m x n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        self.push(Op::MeanRows { a: a.0 }, value)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(Op::SumAll { a: a.0 }, value)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(Op::MeanAll { a: a.0 }, value)
    }

    /// Row gather: `out[r, :] = table[idx[r], :]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = (t.rows(), t.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(format!("gather_rows: index {bad} out of range {rows}")));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![idx.len(), cols], data)?;
        Ok(self.push(Op::GatherRows { table: table.0, idx: idx.to_vec() }, value))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = (t.rows(), t.cols());
        if start + len > n {
            return Err(Error::Shape(format!("slice_cols: {start}+{len} > {n}")));
        }
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![m, len], data)?;
        Ok(self.push(Op::SliceCols { a: a.0, start, len }, value))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: no parts".into()));
        }
        let m = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != m) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        Ok(self.push(Op::ConcatCols { parts: parts.iter().map(|p| p.0).collect() }, value))
    }

    /// Mean cross-entropy of `softmax(logits)` against `targets` over the
    /// positions where `mask` is true.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<Var> {
        let t = self.value(logits);
        let (rows, cols) = (t.rows(), t.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Shape("cross_entropy_masked: targets/mask length".into()));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Data("cross_entropy_masked: empty mask".into()));
        }
        if targets.iter().zip(mask).any(|(&tg, &m)| m && tg >= cols) {
            return Err(Error::Data("cross_entropy_masked: target out of range".into()));
        }
        let mut total = 0.0;
        for i in 0..rows {
            if !mask[i] {
                continue;
            }
            let row = t.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.push(
            Op::CrossEntropyMasked { logits: logits.0, targets: targets.to_vec(), mask: mask.to_vec() },
            value,
        ))
    }

    /// Recompute every node from the recorded leaves, in recording order.
    /// Used to check that replaying a tape is bit-deterministic.
    pub fn replay_values(&self) -> Vec<Tensor> {
        let mut vals: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                Op::Bin { kind, a, b, bc } => bcast_zip(&vals[*a], &vals[*b], *bc, |x, y| {
                    match kind {
                        BinKind::Add => x + y,
                        BinKind::Sub => x - y,
                        BinKind::Mul => x * y,
                        BinKind::Div => x / y,
                    }
                }),
                Op::MatMul { a, b } => vals[*a].matmul(&vals[*b]).expect("replay matmul"),
                Op::Transpose { a } => vals[*a].transpose(),
                Op::Affine { a, mul, add } => vals[*a].map(|x| x * mul + add),
                Op::Round { a } => match self.mode {
                    QuantMode::Exact => vals[*a].map(round_half_away),
                    QuantMode::Straight => vals[*a].clone(),
                },
                Op::CeilSte { a } => match self.mode {
                    QuantMode::Exact => vals[*a].map(f64::ceil),
                    QuantMode::Straight => vals[*a].clone(),
                },
                Op::FloorSte { a } => match self.mode {
                    QuantMode::Exact => vals[*a].map(f64::floor),
                    QuantMode::Straight => vals[*a].clone(),
                },
                Op::Clamp { x, lo, hi, bc } => {
                    let lov = bcast_expand(&vals[*x], &vals[*lo], *bc);
                    let hiv = bcast_expand(&vals[*x], &vals[*hi], *bc);
                    let data: Vec<f64> = vals[*x]
                        .data()
                        .iter()
                        .zip(lov.iter().zip(hiv.iter()))
                        .map(|(&v, (&l, &h))| if v < l { l } else if v > h { h } else { v })
                        .collect();
                    Tensor::new(vals[*x].shape().to_vec(), data).expect("replay clamp")
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    crate::tensor::layer_norm(&vals[*x], &vals[*gain], &vals[*bias], *eps)
                        .expect("replay layer_norm")
                }
                Op::Softmax { x } => crate::tensor::softmax(&vals[*x]),
                Op::Gelu { a } => vals[*a].map(gelu),
                Op::Sigmoid { a } => vals[*a].map(sigmoid),
                Op::SoftplusNeg { a } => vals[*a].map(softplus_neg),
                Op::MeanRows { a } => vals[*a].mean_rows(),
                Op::SumAll { a } => Tensor::scalar(vals[*a].data().iter().sum()),
                Op::MeanAll { a } => {
                    Tensor::scalar(vals[*a].data().iter().sum::<f64>() / vals[*a].len() as f64)
                }
                Op::GatherRows { table, idx } => {
                    let t = &vals[*table];
                    let cols = t.cols();
                    let mut data = Vec::with_capacity(idx.len() * cols);
                    for &i in idx {
                        data.extend_from_slice(t.row(i));
                    }
                    Tensor::new(vec![idx.len(), cols], data).expect("replay gather")
                }
                Op::SliceCols { a, start, len } => {
                    let t = &vals[*a];
                    let mut data = Vec::with_capacity(t.rows() * len);
                    for i in 0..t.rows() {
                        data.extend_from_slice(&t.row(i)[*start..start + len]);
                    }
                    Tensor::new(vec![t.rows(), *len], data).expect("replay slice")
                }
                Op::ConcatCols { parts } => {
                    let m = vals[parts[0]].rows();
                    let total: usize = parts.iter().map(|&p| vals[p].cols()).sum();
                    let mut data = Vec::with_capacity(m * total);
                    for i in 0..m {
                        for &p in parts {
                            data.extend_from_slice(vals[p].row(i));
                        }
                    }
                    Tensor::new(vec![m, total], data).expect("replay concat")
                }
                Op::CrossEntropyMasked { logits, targets, mask } => {
                    let t = &vals[*logits];
                    let count = mask.iter().filter(|&&m| m).count();
                    let mut total = 0.0;
                    for i in 0..t.rows() {
                        if !mask[i] {
                            continue;
                        }
                        let row = t.row(i);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let lse =
                            max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                        total += lse - row[targets[i]];
                    }
                    Tensor::scalar(total / count as f64)
                }
            };
            vals.push(v);
        }
        vals
    }

    /// Reverse pass from a scalar `loss`; returns gradients for every
    /// registered parameter (zero tensors where the loss does not depend on
    /// the parameter).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Bin { kind, a, b, bc } => {
                    let ta = &self.nodes[*a].value;
                    let tb = &self.nodes[*b].value;
                    let bv = bcast_expand(ta, tb, *bc);
                    match kind {
                        BinKind::Add => {
                            accumulate(&mut grads, *a, g.clone());
                            accumulate(&mut grads, *b, reduce_to(&g, tb, *bc));
                        }
                        BinKind::Sub => {
                            accumulate(&mut grads, *a, g.clone());
                            let neg = g.map(|x| -x);
                            accumulate(&mut grads, *b, reduce_to(&neg, tb, *bc));
                        }
                        BinKind::Mul => {
                            let da = elem_mul(&g, &bv, ta.shape());
                            let db_full = elem_mul_slices(g.data(), ta.data(), ta.shape());
                            accumulate(&mut grads, *a, da);
                            accumulate(&mut grads, *b, reduce_to(&db_full, tb, *bc));
                        }
                        BinKind::Div => {
                            let da = elem_div(&g, &bv, ta.shape());
                            let mut db_data = Vec::with_capacity(g.len());
                            for i in 0..g.len() {
                                let b2 = bv[i] * bv[i];
                                db_data.push(-g.data()[i] * ta.data()[i] / b2);
                            }
                            let db_full =
                                Tensor::new(ta.shape().to_vec(), db_data).expect("div grad");
                            accumulate(&mut grads, *a, da);
                            accumulate(&mut grads, *b, reduce_to(&db_full, tb, *bc));
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let ta = &self.nodes[*a].value;
                    let tb = &self.nodes[*b].value;
                    let da = g.matmul(&tb.transpose())?;
                    let db = ta.transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Transpose { a } => {
                    accumulate(&mut grads, *a, g.transpose());
                }
                Op::Affine { a, mul, .. } => {
                    accumulate(&mut grads, *a, g.map(|x| x * mul));
                }
                Op::Round { a } | Op::CeilSte { a } | Op::FloorSte { a } => {
                    // Straight-through: gradient passes unchanged.
                    accumulate(&mut grads, *a, g);
                }
                Op::Clamp { x, lo, hi, bc } => {
                    let tx = &self.nodes[*x].value;
                    let tlo = &self.nodes[*lo].value;
                    let thi = &self.nodes[*hi].value;
                    let lov = bcast_expand(tx, tlo, *bc);
                    let hiv = bcast_expand(tx, thi, *bc);
                    let mut dx = vec![0.0; tx.len()];
                    let mut dlo_full = vec![0.0; tx.len()];
                    let mut dhi_full = vec![0.0; tx.len()];
                    for i in 0..tx.len() {
                        let v = tx.data()[i];
                        if v < lov[i] {
                            dlo_full[i] = g.data()[i];
                        } else if v > hiv[i] {
                            dhi_full[i] = g.data()[i];
                        } else {
                            dx[i] = g.data()[i];
                        }
                    }
                    let dx = Tensor::new(tx.shape().to_vec(), dx).expect("clamp dx");
                    let dlo_full =
                        Tensor::new(tx.shape().to_vec(), dlo_full).expect("clamp dlo");
                    let dhi_full =
                        Tensor::new(tx.shape().to_vec(), dhi_full).expect("clamp dhi");
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *lo, reduce_to(&dlo_full, tlo, *bc));
                    accumulate(&mut grads, *hi, reduce_to(&dhi_full, thi, *bc));
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let tx = &self.nodes[*x].value;
                    let tg = &self.nodes[*gain].value;
                    let d = tx.cols();
                    let rows = tx.rows();
                    let mut dx = vec![0.0; tx.len()];
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    for i in 0..rows {
                        let row = tx.row(i);
                        let grow = g.row(i);
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut dvar = 0.0;
                        let mut dmean = 0.0;
                        let mut sum_centered = 0.0;
                        for j in 0..d {
                            let xc = row[j] - mean;
                            let xhat = xc * inv;
                            let dxhat = grow[j] * tg.data()[j];
                            dgain[j] += grow[j] * xhat;
                            dbias[j] += grow[j];
                            dvar += dxhat * xc * (-0.5) * inv * inv * inv;
                            dmean += dxhat * (-inv);
                            sum_centered += xc;
                        }
                        dmean += dvar * (-2.0) * sum_centered / d as f64;
                        for j in 0..d {
                            let xc = row[j] - mean;
                            let dxhat = grow[j] * tg.data()[j];
                            dx[i * d + j] =
                                dxhat * inv + dvar * 2.0 * xc / d as f64 + dmean / d as f64;
                        }
                    }
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::new(tx.shape().to_vec(), dx).expect("ln dx"),
                    );
                    accumulate(&mut grads, *gain, Tensor::new(vec![d], dgain).expect("ln dg"));
                    accumulate(&mut grads, *bias, Tensor::new(vec![d], dbias).expect("ln db"));
                }
                Op::Softmax { x } => {
                    let y = &self.nodes[id].value;
                    let d = y.cols();
                    let mut dx = vec![0.0; y.len()];
                    for i in 0..y.rows() {
                        let yrow = y.row(i);
                        let grow = g.row(i);
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dx[i * d + j] = yrow[j] * (grow[j] - dot);
                        }
                    }
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::new(y.shape().to_vec(), dx).expect("softmax dx"),
                    );
                }
                Op::Gelu { a } => {
                    let ta = &self.nodes[*a].value;
                    let data: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&gv, &x)| gv * gelu_grad(x))
                        .collect();
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor::new(ta.shape().to_vec(), data).expect("gelu dx"),
                    );
                }
                Op::Sigmoid { a } => {
                    let y = &self.nodes[id].value;
                    let data: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .map(|(&gv, &s)| gv * s * (1.0 - s))
                        .collect();
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor::new(y.shape().to_vec(), data).expect("sigmoid dx"),
                    );
                }
                Op::SoftplusNeg { a } => {
                    let ta = &self.nodes[*a].value;
                    let data: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(ta.data())
                        .map(|(&gv, &x)| gv * (-sigmoid(-x)))
                        .collect();
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor::new(ta.shape().to_vec(), data).expect("softplus dx"),
                    );
                }
                Op::MeanRows { a } => {
                    let ta = &self.nodes[*a].value;
                    let (m, n) = (ta.rows(), ta.cols());
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = g.data()[j] / m as f64;
                        }
                    }
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor::new(ta.shape().to_vec(), dx).expect("mean_rows dx"),
                    );
                }
                Op::SumAll { a } => {
                    let ta = &self.nodes[*a].value;
                    let gv = g.item();
                    accumulate(&mut grads, *a, Tensor::filled(ta.shape().to_vec(), gv));
                }
                Op::MeanAll { a } => {
                    let ta = &self.nodes[*a].value;
                    let gv = g.item() / ta.len() as f64;
                    accumulate(&mut grads, *a, Tensor::filled(ta.shape().to_vec(), gv));
                }
                Op::GatherRows { table, idx } => {
                    let tt = &self.nodes[*table].value;
                    let cols = tt.cols();
                    let mut dt = vec![0.0; tt.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..cols {
                            dt[i * cols + j] += g.data()[r * cols + j];
                        }
                    }
                    accumulate(
                        &mut grads,
                        *table,
                        Tensor::new(tt.shape().to_vec(), dt).expect("gather dt"),
                    );
                }
                Op::SliceCols { a, start, len } => {
                    let ta = &self.nodes[*a].value;
                    let (m, n) = (ta.rows(), ta.cols());
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..*len {
                            dx[i * n + start + j] = g.data()[i * len + j];
                        }
                    }
                    accumulate(
                        &mut grads,
                        *a,
                        Tensor::new(ta.shape().to_vec(), dx).expect("slice dx"),
                    );
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    let m = self.nodes[parts[0]].value.rows();
                    let total = self.nodes[id].value.cols();
                    for &p in parts {
                        let pc = self.nodes[p].value.cols();
                        let mut dp = vec![0.0; m * pc];
                        for i in 0..m {
                            for j in 0..pc {
                                dp[i * pc + j] = g.data()[i * total + offset + j];
                            }
                        }
                        accumulate(
                            &mut grads,
                            p,
                            Tensor::new(vec![m, pc], dp).expect("concat dp"),
                        );
                        offset += pc;
                    }
                }
                Op::CrossEntropyMasked { logits, targets, mask } => {
                    let t = &self.nodes[*logits].value;
                    let (rows, cols) = (t.rows(), t.cols());
                    let count = mask.iter().filter(|&&m| m).count() as f64;
                    let gv = g.item();
                    let mut dl = vec![0.0; t.len()];
                    for i in 0..rows {
                        if !mask[i] {
                            continue;
                        }
                        let mut row = t.row(i).to_vec();
                        softmax_row(&mut row);
                        for j in 0..cols {
                            let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                            dl[i * cols + j] = gv * (row[j] - onehot) / count;
                        }
                    }
                    accumulate(
                        &mut grads,
                        *logits,
                        Tensor::new(t.shape().to_vec(), dl).expect("ce dl"),
                    );
                }
            }
        }

        let mut entries = Vec::with_capacity(self.params.len());
        let mut index = HashMap::new();
        for (name, node) in &self.params {
            let grad = grads[*node]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[*node].value.shape().to_vec()));
            index.insert(name.clone(), entries.len());
            entries.push((name.clone(), grad));
        }
        Ok(Gradients { entries, index })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Expand `b` to `a`'s element count following the broadcast pattern.
fn bcast_expand(a: &Tensor, b: &Tensor, bc: Bcast) -> Vec<f64> {
    let (m, n) = (a.rows(), a.cols());
    match bc {
        Bcast::Same => b.data().to_vec(),
        Bcast::Row => {
            let mut out = Vec::with_capacity(m * n);
            for _ in 0..m {
                out.extend_from_slice(b.data());
            }
            out
        }
        Bcast::Col => {
            let mut out = Vec::with_capacity(m * n);
            for i in 0..m {
                out.extend(std::iter::repeat(b.data()[i]).take(n));
            }
            out
        }
        Bcast::Scalar => vec![b.data()[0]; m * n],
    }
}

fn bcast_zip(a: &Tensor, b: &Tensor, bc: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let bv = bcast_expand(a, b, bc);
    let data: Vec<f64> = a.data().iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("bcast_zip shape")
}

/// Sum a full-shaped gradient down to the broadcast operand's shape.
fn reduce_to(full: &Tensor, b: &Tensor, bc: Bcast) -> Tensor {
    let (m, n) = (full.rows(), full.cols());
    match bc {
        Bcast::Same => full.clone(),
        Bcast::Row => {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += full.data()[i * n + j];
                }
            }
            Tensor::new(b.shape().to_vec(), out).expect("reduce row")
        }
        Bcast::Col => {
            let mut out = vec![0.0; m];
            for i in 0..m {
                for j in 0..n {
                    out[i] += full.data()[i * n + j];
                }
            }
            Tensor::new(b.shape().to_vec(), out).expect("reduce col")
        }
        Bcast::Scalar => Tensor::new(b.shape().to_vec(), vec![full.data().iter().sum()])
            .expect("reduce scalar"),
    }
}

fn elem_mul(g: &Tensor, bv: &[f64], shape: &[usize]) -> Tensor {
    let data: Vec<f64> = g.data().iter().zip(bv).map(|(&x, &y)| x * y).collect();
    Tensor::new(shape.to_vec(), data).expect("elem_mul")
}

fn elem_mul_slices(g: &[f64], a: &[f64], shape: &[usize]) -> Tensor {
    let data: Vec<f64> = g.iter().zip(a).map(|(&x, &y)| x * y).collect();
    Tensor::new(shape.to_vec(), data).expect("elem_mul_slices")
}

fn elem_div(g: &Tensor, bv: &[f64], shape: &[usize]) -> Tensor {
    let data: Vec<f64> = g.data().iter().zip(bv).map(|(&x, &y)| x / y).collect();
    Tensor::new(shape.to_vec(), data).expect("elem_div")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(-m))` with the overflow-safe branches.
pub fn softplus_neg(m: f64) -> f64 {
    if m < -30.0 {
        -m
    } else if m > 30.0 {
        (-m).exp()
    } else {
        (-m).exp().ln_1p()
    }
}
