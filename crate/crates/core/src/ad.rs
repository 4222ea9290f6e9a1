//! Reverse-mode automatic differentiation over blocks of `f64`.
//!
//! A [`Tape`] is an append-only list of nodes. Every node holds its forward
//! value (a [`Tensor`]; scalars are 1x1) and the operation that produced it.
//! Operands always have smaller indices than the node that uses them, so a
//! single reverse sweep from the loss propagates adjoints.
//!
//! Only gradients with respect to parameters are ever needed. Parameters live
//! in a [`ParamStore`] and enter the tape as leaves through [`Tape::bind`];
//! [`Tape::backward`] scatters their adjoints back into flat vectors laid out
//! exactly like the stores.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::AdError;
use crate::tensor::{fastmath, gemm, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn tape_id(&self) -> u64 {
        self.tape
    }
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param { group: usize, offset: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Tanh(usize),
    Exp(usize),
    Square(usize),
    Sum(usize),
    Dot(usize, usize),
    Scale(usize, f64),
    /// `x * w + b`, with `b` a single row broadcast over the rows of `x`.
    Affine { x: usize, w: usize, b: usize },
    Columns { src: usize, start: usize },
    Concat(usize, usize),
    Gather { src: usize, index: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Parameters bound to a tape as leaves, one `Var` per slice of the store.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub group: usize,
    pub vars: Vec<Var>,
}

/// Parameter adjoints, one flat vector per bound [`ParamStore`] (in bind order).
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    groups: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn group(&self, group: usize) -> &[f64] {
        &self.groups[group]
    }

    pub fn groups(&self) -> &[Vec<f64>] {
        &self.groups
    }

    pub fn into_groups(self) -> Vec<Vec<f64>> {
        self.groups
    }
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    group_lens: Vec<usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), group_lens: Vec::new() }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize, AdError> {
        if v.tape != self.id {
            return Err(AdError::MixedTape { expected: self.id, found: v.tape });
        }
        if v.index >= self.nodes.len() {
            return Err(AdError::UnknownNode(v.index));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor, AdError> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    fn record(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.record(Op::Constant, value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Registers every slice of `store` as a differentiable leaf.
    pub fn bind(&mut self, store: &ParamStore) -> BoundParams {
        let group = self.group_lens.len();
        self.group_lens.push(store.len());
        let vars = store
            .slices()
            .iter()
            .map(|s| {
                let value = Tensor::new(s.rows, s.cols, store.values[s.offset..s.offset + s.len()].to_vec());
                self.record(Op::Param { group, offset: s.offset }, value, true)
            })
            .collect();
        BoundParams { group, vars }
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        make: fn(usize, usize) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, AdError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(AdError::Shape { op: name, lhs: va.shape(), rhs: vb.shape() });
        }
        let value = va.zip_map(vb, f);
        let needs = self.needs(ia) || self.needs(ib);
        Ok(self.record(make(ia, ib), value, needs))
    }

    fn unary(&mut self, a: Var, make: fn(usize) -> Op, f: impl Fn(f64) -> f64) -> Result<Var, AdError> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.map(f);
        let needs = self.needs(ia);
        Ok(self.record(make(ia), value, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        self.binary(a, b, "div", Op::Div, |x, y| x / y)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(a, Op::Neg, |x| -x)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AdError> {
        let ia = self.check(a)?;
        let src = &self.nodes[ia].value;
        let mut value = Tensor::zeros(src.rows(), src.cols());
        fastmath::tanh_slice(src.data(), value.data_mut());
        let needs = self.needs(ia);
        Ok(self.record(Op::Tanh(ia), value, needs))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(a, Op::Exp, f64::exp)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, AdError> {
        self.unary(a, Op::Square, |x| x * x)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AdError> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.scale(c);
        let needs = self.needs(ia);
        Ok(self.record(Op::Scale(ia, c), value, needs))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, a: Var) -> Result<Var, AdError> {
        let ia = self.check(a)?;
        let value = Tensor::scalar(self.nodes[ia].value.sum());
        let needs = self.needs(ia);
        Ok(self.record(Op::Sum(ia), value, needs))
    }

    /// Sum of the elementwise product, as a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(AdError::Shape { op: "dot", lhs: va.shape(), rhs: vb.shape() });
        }
        let value = Tensor::scalar(va.data().iter().zip(vb.data()).map(|(x, y)| x * y).sum());
        let needs = self.needs(ia) || self.needs(ib);
        Ok(self.record(Op::Dot(ia, ib), value, needs))
    }

    /// Dense layer `x * w + b` with `b` of shape `1 x out` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AdError> {
        let (ix, iw, ib) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let (vx, vw, vb) = (&self.nodes[ix].value, &self.nodes[iw].value, &self.nodes[ib].value);
        if vx.cols() != vw.rows() {
            return Err(AdError::Shape { op: "affine", lhs: vx.shape(), rhs: vw.shape() });
        }
        if vb.shape() != (1, vw.cols()) {
            return Err(AdError::Shape { op: "affine bias", lhs: vw.shape(), rhs: vb.shape() });
        }
        let value = vx.affine(vw, vb.data());
        let needs = self.needs(ix) || self.needs(iw) || self.needs(ib);
        Ok(self.record(Op::Affine { x: ix, w: iw, b: ib }, value, needs))
    }

    pub fn columns(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AdError> {
        let ia = self.check(a)?;
        let src = &self.nodes[ia].value;
        if start + len > src.cols() {
            return Err(AdError::Shape { op: "columns", lhs: src.shape(), rhs: (start, len) });
        }
        let value = src.columns(start, len);
        let needs = self.needs(ia);
        Ok(self.record(Op::Columns { src: ia, start }, value, needs))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, AdError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.rows() != vb.rows() {
            return Err(AdError::Shape { op: "concat", lhs: va.shape(), rhs: vb.shape() });
        }
        let value = va.concat_cols(vb);
        let needs = self.needs(ia) || self.needs(ib);
        Ok(self.record(Op::Concat(ia, ib), value, needs))
    }

    /// `out[:, k] = a[:, index[k]]`.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var, AdError> {
        let ia = self.check(a)?;
        let src = &self.nodes[ia].value;
        if let Some(&bad) = index.iter().find(|&&j| j >= src.cols()) {
            return Err(AdError::Shape { op: "gather", lhs: src.shape(), rhs: (0, bad) });
        }
        let value = src.gather_cols(index);
        let needs = self.needs(ia);
        Ok(self.record(Op::Gather { src: ia, index: index.to_vec() }, value, needs))
    }

    /// Reverse sweep from a scalar `loss`; returns d(loss)/d(parameter) for
    /// every bound store. Forward values are left untouched.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AdError> {
        let root = self.check(loss)?;
        let shape = self.nodes[root].value.shape();
        if shape != (1, 1) {
            return Err(AdError::NonScalarLoss { rows: shape.0, cols: shape.1 });
        }
        let mut groups: Vec<Vec<f64>> = self.group_lens.iter().map(|&n| vec![0.0; n]).collect();
        let mut adj: Vec<Option<Tensor>> = Vec::with_capacity(root + 1);
        adj.resize_with(root + 1, || None);
        adj[root] = Some(Tensor::scalar(1.0));

        for i in (0..=root).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param { group, offset } => {
                    let dst = &mut groups[*group][*offset..*offset + g.len()];
                    for (d, v) in dst.iter_mut().zip(g.data()) {
                        *d += v;
                    }
                }
                Op::Add(a, b) => {
                    self.push_adj(&mut adj, *a, || g.clone());
                    self.push_adj(&mut adj, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.push_adj(&mut adj, *a, || g.clone());
                    self.push_adj(&mut adj, *b, || g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    self.push_adj(&mut adj, *a, || g.zip_map(vb, |g, y| g * y));
                    self.push_adj(&mut adj, *b, || g.zip_map(va, |g, x| g * x));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    self.push_adj(&mut adj, *a, || g.zip_map(vb, |g, y| g / y));
                    self.push_adj(&mut adj, *b, || {
                        let q = va.zip_map(vb, |x, y| x / (y * y));
                        g.zip_map(&q, |g, q| -g * q)
                    });
                }
                Op::Neg(a) => self.push_adj(&mut adj, *a, || g.scale(-1.0)),
                Op::Tanh(a) => self.push_adj(&mut adj, *a, || g.zip_map(&node.value, |g, t| g * (1.0 - t * t))),
                Op::Exp(a) => self.push_adj(&mut adj, *a, || g.zip_map(&node.value, |g, e| g * e)),
                Op::Square(a) => {
                    let va = &self.nodes[*a].value;
                    self.push_adj(&mut adj, *a, || g.zip_map(va, |g, x| 2.0 * g * x));
                }
                Op::Sum(a) => {
                    let (r, c) = self.nodes[*a].value.shape();
                    self.push_adj(&mut adj, *a, || Tensor::filled(r, c, g.item()));
                }
                Op::Dot(a, b) => {
                    let s = g.item();
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    self.push_adj(&mut adj, *a, || vb.scale(s));
                    self.push_adj(&mut adj, *b, || va.scale(s));
                }
                Op::Scale(a, c) => self.push_adj(&mut adj, *a, || g.scale(*c)),
                Op::Affine { x, w, b } => {
                    let (vx, vw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    self.push_adj(&mut adj, *x, || {
                        let mut dx = Tensor::zeros(vx.rows(), vx.cols());
                        gemm(&g, false, vw, true, 0.0, &mut dx);
                        dx
                    });
                    self.push_adj(&mut adj, *w, || {
                        let mut dw = Tensor::zeros(vw.rows(), vw.cols());
                        gemm(vx, true, &g, false, 0.0, &mut dw);
                        dw
                    });
                    self.push_adj(&mut adj, *b, || g.col_sums());
                }
                Op::Columns { src, start } => {
                    let (r, c) = self.nodes[*src].value.shape();
                    self.push_adj(&mut adj, *src, || {
                        let mut full = Tensor::zeros(r, c);
                        for row in 0..r {
                            full.row_mut(row)[*start..*start + g.cols()].copy_from_slice(g.row(row));
                        }
                        full
                    });
                }
                Op::Concat(a, b) => {
                    let ca = self.nodes[*a].value.cols();
                    self.push_adj(&mut adj, *a, || g.columns(0, ca));
                    self.push_adj(&mut adj, *b, || g.columns(ca, g.cols() - ca));
                }
                Op::Gather { src, index } => {
                    let (r, c) = self.nodes[*src].value.shape();
                    self.push_adj(&mut adj, *src, || {
                        let mut full = Tensor::zeros(r, c);
                        for row in 0..r {
                            let (dst, gr) = (full.row_mut(row), g.row(row));
                            for (k, &j) in index.iter().enumerate() {
                                dst[j] += gr[k];
                            }
                        }
                        full
                    });
                }
            }
        }
        Ok(Gradients { groups })
    }

    fn push_adj(&self, adj: &mut [Option<Tensor>], target: usize, contribution: impl FnOnce() -> Tensor) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let c = contribution();
        match &mut adj[target] {
            Some(acc) => acc.add_assign(&c),
            slot @ None => *slot = Some(c),
        }
    }
}

/// Named, contiguous layout of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter vector with named slices. Slices are appended in order, so
/// they are disjoint and cover the vector by construction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    values: Vec<f64>,
    slices: Vec<ParamSlice>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a `rows x cols` block and returns its slice id.
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>) -> usize {
        assert_eq!(values.len(), rows * cols, "parameter block size mismatch");
        let offset = self.values.len();
        self.values.extend(values);
        self.slices.push(ParamSlice { name: name.into(), offset, rows, cols });
        self.slices.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    pub fn slice_values(&self, id: usize) -> &[f64] {
        let s = &self.slices[id];
        &self.values[s.offset..s.offset + s.len()]
    }

    pub fn slice_values_mut(&mut self, id: usize) -> &mut [f64] {
        let s = &self.slices[id];
        let (a, b) = (s.offset, s.offset + s.len());
        &mut self.values[a..b]
    }

    pub fn tensor(&self, id: usize) -> Tensor {
        let s = &self.slices[id];
        Tensor::new(s.rows, s.cols, self.slice_values(id).to_vec())
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.slices.iter().position(|s| s.name == name)
    }

    /// True when the slices tile `0..len()` without gaps or overlap.
    pub fn layout_is_exact(&self) -> bool {
        let mut next = 0;
        for s in &self.slices {
            if s.offset != next {
                return false;
            }
            next += s.len();
        }
        next == self.values.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("theta", 1, 1, vec![v]);
        s
    }

    #[test]
    fn forward_values() {
        let mut t = Tape::new();
        let (a, b) = (t.scalar(3.0), t.scalar(4.0));
        let p = t.mul(a, b).unwrap();
        assert_eq!(t.value(p).unwrap().item(), 12.0);
        let z = t.scalar(0.0);
        let th = t.tanh(z).unwrap();
        assert_eq!(t.value(th).unwrap().item(), 0.0);
        let u = t.constant(Tensor::row_vector(&[1.0, 2.0]));
        let v = t.constant(Tensor::row_vector(&[3.0, 4.0]));
        let d = t.dot(u, v).unwrap();
        assert_eq!(t.value(d).unwrap().item(), 11.0);
    }

    #[test]
    fn square_and_tanh_gradients() {
        let store = scalar_store(3.0);
        let mut t = Tape::new();
        let p = t.bind(&store).vars[0];
        let l = t.square(p).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.group(0), &[6.0]);

        let store = scalar_store(0.0);
        let mut t = Tape::new();
        let p = t.bind(&store).vars[0];
        let l = t.tanh(p).unwrap();
        assert_eq!(t.backward(l).unwrap().group(0), &[1.0]);
    }

    #[test]
    fn mixed_tapes_are_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.scalar(1.0);
        let b = t2.scalar(2.0);
        assert!(matches!(t1.add(a, b), Err(AdError::MixedTape { .. })));
        assert!(matches!(t2.backward(a), Err(AdError::MixedTape { .. })));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::zeros(2, 1));
        assert_eq!(t.backward(v), Err(AdError::NonScalarLoss { rows: 2, cols: 1 }));
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 2));
        let b = t.constant(Tensor::zeros(2, 3));
        assert!(matches!(t.add(a, b), Err(AdError::Shape { .. })));
        assert!(matches!(t.columns(a, 1, 2), Err(AdError::Shape { .. })));
        assert!(matches!(t.gather(a, &[0, 2]), Err(AdError::Shape { .. })));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // l = p*p + p  ->  dl/dp = 2p + 1
        let store = scalar_store(2.5);
        let mut t = Tape::new();
        let p = t.bind(&store).vars[0];
        let sq = t.mul(p, p).unwrap();
        let l = t.add(sq, p).unwrap();
        assert_eq!(t.backward(l).unwrap().group(0), &[6.0]);
    }

    #[test]
    fn param_store_layout() {
        let mut s = ParamStore::new();
        s.push("w", 2, 3, vec![0.0; 6]);
        s.push("b", 1, 3, vec![1.0; 3]);
        assert!(s.layout_is_exact());
        assert_eq!(s.len(), 9);
        assert_eq!(s.find("b"), Some(1));
        assert_eq!(s.slice_values(1), &[1.0, 1.0, 1.0]);
    }
}
