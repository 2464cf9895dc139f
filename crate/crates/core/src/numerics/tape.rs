//! Reverse-mode differentiation over a per-batch tape.
//!
//! A [`Tape`] records every operation of one forward computation. Calling
//! [`Tape::backward`] on a scalar node pushes the adjoint back through the
//! recorded operations and accumulates parameter gradients into the
//! [`ParamStore`]; the tape is consumed in the process.

use std::rc::Rc;

use super::matrix::{gemm_nt, gemm_tn, Matrix};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Lower bound applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Reduction used to collapse each segment of rows to a single row.
#[derive(Copy, Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Sum,
    Max,
}

impl std::str::FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "sum" => Ok(Pooling::Sum),
            "max" => Ok(Pooling::Max),
            other => Err(Error::InvalidArgument(format!("unknown pooling {other}"))),
        }
    }
}

impl std::fmt::Display for Pooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pooling::Mean => "mean",
            Pooling::Sum => "sum",
            Pooling::Max => "max",
        })
    }
}

/// Contiguous row groups: segment `i` spans rows `offsets[i]..offsets[i+1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
}

impl Segments {
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        offsets.push(0);
        for &s in sizes {
            if s == 0 {
                return Err(Error::InvalidArgument("empty segment".into()));
            }
            offsets.push(offsets.last().unwrap() + s);
        }
        Ok(Segments { offsets })
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_rows(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    ConcatCols(Var, Var),
    Pool {
        x: Var,
        segs: Rc<Segments>,
        kind: Pooling,
        argmax: Vec<usize>,
    },
    Broadcast(Var, Rc<Segments>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Rc<[bool]>,
        positive_weight: f64,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `x + row`, with the 1×c `row` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(row) != (1, c) {
            return Err(Error::dim(
                "add_row",
                format!("{r}x{c} plus {:?}", self.shape(row)),
            ));
        }
        let mut out = self.value(x).clone();
        let b = self.value(row).data().to_vec();
        for i in 0..r {
            for (o, bv) in out.row_mut(i).iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = self.value(a).clone();
        for (o, bv) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= bv;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.scale(s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu(x))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::dim("concat_cols", format!("{ra} rows vs {rb} rows")));
        }
        let mut out = Matrix::zeros(ra, ca + cb);
        for i in 0..ra {
            let row = out.row_mut(i);
            row[..ca].copy_from_slice(self.nodes[a.0].value.row(i));
            row[ca..].copy_from_slice(self.nodes[b.0].value.row(i));
        }
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// Reduces each segment of rows of `x` to one row.
    pub fn pool(&mut self, x: Var, segs: &Rc<Segments>, kind: Pooling) -> Result<Var> {
        let (r, c) = self.shape(x);
        if segs.total_rows() != r {
            return Err(Error::dim(
                "pool",
                format!("segments cover {} rows, input has {r}", segs.total_rows()),
            ));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Matrix::zeros(segs.len(), c);
        let mut argmax = Vec::new();
        for s in 0..segs.len() {
            let range = segs.range(s);
            match kind {
                Pooling::Mean | Pooling::Sum => {
                    let orow = out.row_mut(s);
                    for i in range.clone() {
                        for (o, v) in orow.iter_mut().zip(xv.row(i)) {
                            *o += v;
                        }
                    }
                    if kind == Pooling::Mean {
                        let inv = 1.0 / range.len() as f64;
                        orow.iter_mut().for_each(|o| *o *= inv);
                    }
                }
                Pooling::Max => {
                    for j in 0..c {
                        let mut best = range.start;
                        for i in range.clone() {
                            if xv.get(i, j) > xv.get(best, j) {
                                best = i;
                            }
                        }
                        argmax.push(best);
                        out.set(s, j, xv.get(best, j));
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Pool {
                x,
                segs: Rc::clone(segs),
                kind,
                argmax,
            },
        ))
    }

    /// Repeats row `i` of `x` for every row of segment `i`.
    pub fn broadcast(&mut self, x: Var, segs: &Rc<Segments>) -> Result<Var> {
        let (r, c) = self.shape(x);
        if segs.len() != r {
            return Err(Error::dim(
                "broadcast",
                format!("{} segments for {r} rows", segs.len()),
            ));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = Matrix::zeros(segs.total_rows(), c);
        for s in 0..segs.len() {
            for i in segs.range(s) {
                out.row_mut(i).copy_from_slice(xv.row(s));
            }
        }
        Ok(self.push(out, Op::Broadcast(x, Rc::clone(segs))))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(x))
    }

    /// Mean weighted binary cross-entropy over rows of 2-logit `logits`.
    ///
    /// Row loss is `-(w·y·log p + (1-y)·log(1-p))` with `p` the softmax
    /// probability of column 1. Log-probabilities are floored at
    /// `ln(PROB_FLOOR)`, and a floored row contributes no gradient.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[bool],
        positive_weight: f64,
    ) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if c != 2 || r != labels.len() || r == 0 {
            return Err(Error::dim(
                "cross_entropy",
                format!("{r}x{c} logits for {} labels", labels.len()),
            ));
        }
        let floor = PROB_FLOOR.ln();
        let z = &self.nodes[logits.0].value;
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let (lp0, lp1) = log_softmax2(z.get(i, 0), z.get(i, 1));
            total += if y {
                -positive_weight * lp1.max(floor)
            } else {
                -lp0.max(floor)
            };
        }
        let out = Matrix::filled(1, 1, total / r as f64);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.into(),
                positive_weight,
            },
        ))
    }

    /// Accumulates `∂loss/∂θ` into `store` for every parameter node, then
    /// clears the tape.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::State("tape already consumed by backward".into()));
        }
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called without a recorded forward pass".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => store.grad_mut(*id).add_assign(&g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = slot(&mut grads, *a, av.shape());
                    gemm_nt(&g, bv, ga);
                    let gb = slot(&mut grads, *b, bv.shape());
                    gemm_tn(av, &g, gb);
                }
                Op::Add(a, b) => {
                    slot(&mut grads, *a, g.shape()).add_assign(&g);
                    slot(&mut grads, *b, g.shape()).add_assign(&g);
                }
                Op::AddRow(x, row) => {
                    slot(&mut grads, *x, g.shape()).add_assign(&g);
                    let gr = slot(&mut grads, *row, (1, g.cols()));
                    for i in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga = slot(&mut grads, *a, g.shape());
                    for ((o, gv), bv) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *o += gv * bv;
                    }
                    let gb = slot(&mut grads, *b, g.shape());
                    for ((o, gv), av) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *o += gv * av;
                    }
                }
                Op::Scale(x, s) => {
                    let gx = slot(&mut grads, *x, g.shape());
                    for (o, gv) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += s * gv;
                    }
                }
                Op::Relu(x) => {
                    let out = &node.value;
                    let gx = slot(&mut grads, *x, g.shape());
                    for ((o, gv), y) in gx.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                        if *y > 0.0 {
                            *o += gv;
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[a.0].value.cols();
                    let cb = self.nodes[b.0].value.cols();
                    let ga = slot(&mut grads, *a, (g.rows(), ca));
                    for i in 0..g.rows() {
                        for (o, v) in ga.row_mut(i).iter_mut().zip(&g.row(i)[..ca]) {
                            *o += v;
                        }
                    }
                    let gb = slot(&mut grads, *b, (g.rows(), cb));
                    for i in 0..g.rows() {
                        for (o, v) in gb.row_mut(i).iter_mut().zip(&g.row(i)[ca..]) {
                            *o += v;
                        }
                    }
                }
                Op::Pool {
                    x,
                    segs,
                    kind,
                    argmax,
                } => {
                    let c = g.cols();
                    let gx = slot(&mut grads, *x, (segs.total_rows(), c));
                    for s in 0..segs.len() {
                        let range = segs.range(s);
                        match kind {
                            Pooling::Mean | Pooling::Sum => {
                                let w = if *kind == Pooling::Mean {
                                    1.0 / range.len() as f64
                                } else {
                                    1.0
                                };
                                for i in range {
                                    for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(s)) {
                                        *o += w * v;
                                    }
                                }
                            }
                            Pooling::Max => {
                                for j in 0..c {
                                    let i = argmax[s * c + j];
                                    let cur = gx.get(i, j);
                                    gx.set(i, j, cur + g.get(s, j));
                                }
                            }
                        }
                    }
                }
                Op::Broadcast(x, segs) => {
                    let gx = slot(&mut grads, *x, (segs.len(), g.cols()));
                    for s in 0..segs.len() {
                        for i in segs.range(s) {
                            for (o, v) in gx.row_mut(s).iter_mut().zip(g.row(i)) {
                                *o += v;
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    let shape = self.nodes[x.0].value.shape();
                    let gv = g.get(0, 0);
                    for o in slot(&mut grads, *x, shape).data_mut() {
                        *o += gv;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    positive_weight,
                } => {
                    let z = &self.nodes[logits.0].value;
                    let floor = PROB_FLOOR.ln();
                    let upstream = g.get(0, 0) / labels.len() as f64;
                    let gz = slot(&mut grads, *logits, z.shape());
                    for (i, &y) in labels.iter().enumerate() {
                        let (lp0, lp1) = log_softmax2(z.get(i, 0), z.get(i, 1));
                        if (if y { lp1 } else { lp0 }) < floor {
                            continue;
                        }
                        let (p0, p1) = (lp0.exp(), lp1.exp());
                        let (w, t0, t1) = if y {
                            (*positive_weight, 0.0, 1.0)
                        } else {
                            (1.0, 1.0, 0.0)
                        };
                        let row = gz.row_mut(i);
                        row[0] += upstream * w * (p0 - t0);
                        row[1] += upstream * w * (p1 - t1);
                    }
                }
            }
        }
        self.nodes.clear();
        self.consumed = true;
        Ok(())
    }
}

fn slot(grads: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

/// Log-probabilities of a 2-way softmax.
pub fn log_softmax2(z0: f64, z1: f64) -> (f64, f64) {
    let m = z0.max(z1);
    let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
    (z0 - lse, z1 - lse)
}
