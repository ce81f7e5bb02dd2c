//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a `1 x 1` output replays the recorded operations in
//! reverse and returns one gradient per variable that requires it.
//!
//! ```
//! use socov::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::row_vector(&[1.0, 2.0]));
//! let loss = x.square().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
//! ```

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    SubRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, T),
    Transpose(usize),
    Tanh(usize),
    Relu(usize),
    Square(usize),
    SqrtFloor { x: usize, floor: T },
    ColSoftmax(usize),
    SumRows(usize),
    SumAll(usize),
    ConcatCols(Vec<usize>),
    SliceRows { x: usize, start: usize },
    WeightedGram { x: usize, w: usize },
    NormalizeRows { x: usize, eps: T },
    NormalizeCols { x: usize, eps: T },
    AmSoftmax { x: usize, label: usize, margin: T, scale: T },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Operation recorder. Confined to one thread; independent tapes may live on
/// different threads.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

/// Gradients produced by one backward pass, indexed by variable.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads[v.id].as_ref()
    }

    /// Gradient of `v`, or zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.id];
                Tensor::zeros(r, c)
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    fn record(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let needs = self.needs(inputs);
        self.push(value, op, needs)
    }

    /// Runs the backward pass from a `1 x 1` output.
    pub fn backward(&self, output: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.id].value.shape();
        if out_shape != (1, 1) {
            return Err(Error::Dimension {
                op: "backward",
                lhs: out_shape,
                rhs: (1, 1),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::scalar(T::one()));
        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.needs_grad {
                backprop(&nodes, node, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }
        for (id, node) in nodes.iter().enumerate() {
            if !node.needs_grad || !matches!(node.op, Op::Leaf) {
                grads[id] = None;
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    g: Tensor<T>,
) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.accumulate(&g),
        slot => *slot = Some(g),
    }
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let val = |i: usize| &nodes[i].value;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            if nodes[a].needs_grad {
                accumulate(nodes, grads, a, g.matmul_t(val(b))?);
            }
            if nodes[b].needs_grad {
                accumulate(nodes, grads, b, val(a).t_matmul(g)?);
            }
        }
        &Op::Add(a, b) => {
            accumulate(nodes, grads, a, g.clone());
            accumulate(nodes, grads, b, g.clone());
        }
        &Op::Sub(a, b) => {
            accumulate(nodes, grads, a, g.clone());
            accumulate(nodes, grads, b, g.scale(-T::one()));
        }
        &Op::Mul(a, b) => {
            accumulate(nodes, grads, a, g.zip_map(val(b), "mul", |x, y| x * y)?);
            accumulate(nodes, grads, b, g.zip_map(val(a), "mul", |x, y| x * y)?);
        }
        &Op::AddRow(a, b) | &Op::SubRow(a, b) => {
            accumulate(nodes, grads, a, g.clone());
            let sign = if matches!(node.op, Op::AddRow(..)) {
                T::one()
            } else {
                -T::one()
            };
            accumulate(nodes, grads, b, column_sums(g).scale(sign));
        }
        &Op::MulCol(a, c) => {
            let av = val(a);
            let cv = val(c);
            if nodes[a].needs_grad {
                let mut ga = g.clone();
                for r in 0..ga.rows() {
                    let k = cv.get(r, 0);
                    for v in &mut ga.data_mut()[r * av.cols()..(r + 1) * av.cols()] {
                        *v *= k;
                    }
                }
                accumulate(nodes, grads, a, ga);
            }
            if nodes[c].needs_grad {
                let gc: Vec<T> = (0..av.rows())
                    .map(|r| g.row(r).iter().zip(av.row(r)).map(|(&x, &y)| x * y).sum())
                    .collect();
                accumulate(nodes, grads, c, Tensor::col_vector(&gc));
            }
        }
        &Op::Scale(a, k) => accumulate(nodes, grads, a, g.scale(k)),
        &Op::Transpose(a) => accumulate(nodes, grads, a, g.transpose()),
        &Op::Tanh(a) => {
            accumulate(nodes, grads, a, g.zip_map(y, "tanh", |gv, yv| gv * (T::one() - yv * yv))?);
        }
        &Op::Relu(a) => {
            accumulate(
                nodes,
                grads,
                a,
                g.zip_map(val(a), "relu", |gv, x| if x > T::zero() { gv } else { T::zero() })?,
            );
        }
        &Op::Square(a) => {
            let two = T::lit(2.0);
            accumulate(nodes, grads, a, g.zip_map(val(a), "square", |gv, x| two * x * gv)?);
        }
        &Op::SqrtFloor { x, floor } => {
            let xv = val(x);
            let two = T::lit(2.0);
            let mut gx = g.clone();
            for ((gv, &xi), &yi) in gx.data_mut().iter_mut().zip(xv.data()).zip(y.data()) {
                *gv = if xi > floor && yi > T::zero() {
                    *gv / (two * yi)
                } else {
                    T::zero()
                };
            }
            accumulate(nodes, grads, x, gx);
        }
        &Op::ColSoftmax(a) => {
            let mut ga = Tensor::zeros(y.rows(), y.cols());
            for c in 0..y.cols() {
                let dot: T = (0..y.rows()).map(|r| g.get(r, c) * y.get(r, c)).sum();
                for r in 0..y.rows() {
                    ga.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                }
            }
            accumulate(nodes, grads, a, ga);
        }
        &Op::SumRows(a) => {
            let rows = val(a).rows();
            let mut ga = Tensor::zeros(rows, g.cols());
            for r in 0..rows {
                ga.data_mut()[r * g.cols()..(r + 1) * g.cols()].copy_from_slice(g.data());
            }
            accumulate(nodes, grads, a, ga);
        }
        &Op::SumAll(a) => {
            let (r, c) = val(a).shape();
            accumulate(nodes, grads, a, Tensor::filled(r, c, g.item()));
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let (rows, cols) = val(p).shape();
                if nodes[p].needs_grad {
                    let mut gp = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            gp.set(r, c, g.get(r, offset + c));
                        }
                    }
                    accumulate(nodes, grads, p, gp);
                }
                offset += cols;
            }
        }
        &Op::SliceRows { x, start } => {
            let (rows, cols) = val(x).shape();
            let mut gx = Tensor::zeros(rows, cols);
            gx.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
            accumulate(nodes, grads, x, gx);
        }
        &Op::WeightedGram { x, w } => {
            let xv = val(x);
            let wv = val(w);
            let (n, k) = xv.shape();
            if nodes[x].needs_grad {
                let sym = g.add(&g.transpose())?;
                let mut gx = xv.matmul(&sym)?;
                for r in 0..n {
                    let wr = wv.get(r, 0);
                    for v in &mut gx.data_mut()[r * k..(r + 1) * k] {
                        *v *= wr;
                    }
                }
                accumulate(nodes, grads, x, gx);
            }
            if nodes[w].needs_grad {
                let xg = xv.matmul(g)?;
                let gw: Vec<T> = (0..n)
                    .map(|r| xg.row(r).iter().zip(xv.row(r)).map(|(&a, &b)| a * b).sum())
                    .collect();
                accumulate(nodes, grads, w, Tensor::col_vector(&gw));
            }
        }
        &Op::NormalizeRows { x, eps } => {
            let xv = val(x);
            let mut gx = Tensor::zeros(xv.rows(), xv.cols());
            for r in 0..xv.rows() {
                let row = xv.row(r);
                let grow = g.row(r);
                let out = normalize_backward(row, grow, eps);
                gx.data_mut()[r * xv.cols()..(r + 1) * xv.cols()].copy_from_slice(&out);
            }
            accumulate(nodes, grads, x, gx);
        }
        &Op::NormalizeCols { x, eps } => {
            let xv = val(x);
            let mut gx = Tensor::zeros(xv.rows(), xv.cols());
            for c in 0..xv.cols() {
                let out = normalize_backward(&xv.column(c), &g.column(c), eps);
                for (r, v) in out.into_iter().enumerate() {
                    gx.set(r, c, v);
                }
            }
            accumulate(nodes, grads, x, gx);
        }
        &Op::AmSoftmax {
            x,
            label,
            margin,
            scale,
        } => {
            let probs = am_softmax_probs(val(x), label, margin, scale);
            let gv = g.item();
            let gx: Vec<T> = probs
                .iter()
                .enumerate()
                .map(|(j, &p)| {
                    let target = if j == label { T::one() } else { T::zero() };
                    gv * scale * (p - target)
                })
                .collect();
            accumulate(nodes, grads, x, Tensor::row_vector(&gx));
        }
    }
    Ok(())
}

fn column_sums<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let mut out = vec![T::zero(); t.cols()];
    for r in 0..t.rows() {
        for (o, &v) in out.iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    Tensor::row_vector(&out)
}

fn normalize_forward<T: Scalar>(x: &[T], eps: T) -> Vec<T> {
    let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    let d = norm + eps;
    x.iter().map(|&v| v / d).collect()
}

// y = x / (|x| + eps)  =>  dx = g/d - x (g.x) / (d^2 |x|)
fn normalize_backward<T: Scalar>(x: &[T], g: &[T], eps: T) -> Vec<T> {
    let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    let d = norm + eps;
    if norm == T::zero() {
        return g.iter().map(|&v| v / d).collect();
    }
    let gx: T = g.iter().zip(x).map(|(&a, &b)| a * b).sum();
    let k = gx / (d * d * norm);
    g.iter().zip(x).map(|(&gv, &xv)| gv / d - xv * k).collect()
}

fn am_softmax_logits<T: Scalar>(cosines: &Tensor<T>, label: usize, margin: T, scale: T) -> Vec<T> {
    cosines
        .data()
        .iter()
        .enumerate()
        .map(|(j, &c)| if j == label { scale * (c - margin) } else { scale * c })
        .collect()
}

fn am_softmax_probs<T: Scalar>(cosines: &Tensor<T>, label: usize, margin: T, scale: T) -> Vec<T> {
    let z = am_softmax_logits(cosines, label, margin, scale);
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / total).collect()
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    fn same_tape(&self, other: &Var<'t, T>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    fn unary(self, op: Op<T>, f: impl FnOnce(&Tensor<T>) -> Tensor<T>) -> Var<'t, T> {
        let out = f(&self.value());
        self.tape.record(out, op, &[self.id])
    }

    fn binary(
        self,
        rhs: Var<'t, T>,
        op: Op<T>,
        f: impl FnOnce(&Tensor<T>, &Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&rhs);
        let out = f(&self.value(), &rhs.value())?;
        Ok(self.tape.record(out, op, &[self.id, rhs.id]))
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Op::MatMul(self.id, rhs.id), |a, b| a.matmul(b))
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Op::Add(self.id, rhs.id), |a, b| a.add(b))
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Op::Sub(self.id, rhs.id), |a, b| a.sub(b))
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(rhs, Op::Mul(self.id, rhs.id), |a, b| a.zip_map(b, "mul", |x, y| x * y))
    }

    /// Adds a `1 x k` row to every row of an `n x k` tensor.
    pub fn add_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(row, Op::AddRow(self.id, row.id), |a, b| broadcast_row(a, b, T::one()))
    }

    /// Subtracts a `1 x k` row from every row of an `n x k` tensor.
    pub fn sub_row(self, row: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(row, Op::SubRow(self.id, row.id), |a, b| broadcast_row(a, b, -T::one()))
    }

    /// Scales row `i` of an `n x k` tensor by entry `i` of an `n x 1` column.
    pub fn mul_col(self, col: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(col, Op::MulCol(self.id, col.id), |a, c| {
            if c.shape() != (a.rows(), 1) {
                return Err(Error::Dimension {
                    op: "mul_col",
                    lhs: a.shape(),
                    rhs: c.shape(),
                });
            }
            let mut out = a.clone();
            let cols = a.cols();
            for r in 0..a.rows() {
                let k = c.get(r, 0);
                for v in &mut out.data_mut()[r * cols..(r + 1) * cols] {
                    *v *= k;
                }
            }
            Ok(out)
        })
    }

    pub fn scale(self, k: T) -> Var<'t, T> {
        self.unary(Op::Scale(self.id, k), |a| a.scale(k))
    }

    pub fn transpose(self) -> Var<'t, T> {
        self.unary(Op::Transpose(self.id), |a| a.transpose())
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(Op::Tanh(self.id), |a| a.map(T::tanh))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(Op::Relu(self.id), |a| a.map(|v| v.max(T::zero())))
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(Op::Square(self.id), |a| a.map(|v| v * v))
    }

    /// `sqrt(max(x, floor))`; the gradient is zero wherever the floor is active.
    pub fn sqrt_floor(self, floor: T) -> Var<'t, T> {
        self.unary(Op::SqrtFloor { x: self.id, floor }, |a| {
            a.map(|v| v.max(floor).sqrt())
        })
    }

    pub fn columnwise_softmax(self) -> Var<'t, T> {
        self.unary(Op::ColSoftmax(self.id), |a| a.columnwise_softmax())
    }

    /// Sums over rows, producing a `1 x k` row.
    pub fn sum_rows(self) -> Var<'t, T> {
        self.unary(Op::SumRows(self.id), column_sums)
    }

    pub fn sum(self) -> Var<'t, T> {
        self.unary(Op::SumAll(self.id), |a| Tensor::scalar(a.sum()))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let rows = self.shape().0;
        if start + len > rows {
            return Err(Error::Input(format!(
                "row slice {start}..{} exceeds {rows} rows",
                start + len
            )));
        }
        Ok(self.unary(Op::SliceRows { x: self.id, start }, |a| {
            a.slice_rows(start, len)
        }))
    }

    /// Symmetric `k x k` matrix `Σₙ wₙ xₙᵀxₙ` from `n x k` rows and `n x 1`
    /// weights. Only the upper triangle is computed, so the result is exactly
    /// symmetric.
    pub fn weighted_gram(self, weights: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(weights, Op::WeightedGram { x: self.id, w: weights.id }, |x, w| {
            if w.shape() != (x.rows(), 1) {
                return Err(Error::Dimension {
                    op: "weighted_gram",
                    lhs: x.shape(),
                    rhs: w.shape(),
                });
            }
            let (n, k) = x.shape();
            let mut out = Tensor::zeros(k, k);
            for i in 0..k {
                for j in i..k {
                    let mut acc = T::zero();
                    for r in 0..n {
                        acc += w.get(r, 0) * x.get(r, i) * x.get(r, j);
                    }
                    out.set(i, j, acc);
                    out.set(j, i, acc);
                }
            }
            Ok(out)
        })
    }

    /// Divides each row by `(‖row‖ + eps)`.
    pub fn normalize_rows(self, eps: T) -> Var<'t, T> {
        self.unary(Op::NormalizeRows { x: self.id, eps }, |a| {
            let mut out = a.clone();
            let cols = a.cols();
            for r in 0..a.rows() {
                let n = normalize_forward(a.row(r), eps);
                out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(&n);
            }
            out
        })
    }

    /// Divides each column by `(‖column‖ + eps)`.
    pub fn normalize_cols(self, eps: T) -> Var<'t, T> {
        self.unary(Op::NormalizeCols { x: self.id, eps }, |a| {
            let mut out = a.clone();
            for c in 0..a.cols() {
                for (r, v) in normalize_forward(&a.column(c), eps).into_iter().enumerate() {
                    out.set(r, c, v);
                }
            }
            out
        })
    }

    /// Additive-margin softmax cross-entropy of a `1 x C` row of cosines.
    pub fn am_softmax(self, label: usize, margin: T, scale: T) -> Result<Var<'t, T>> {
        let (rows, classes) = self.shape();
        if rows != 1 {
            return Err(Error::Dimension {
                op: "am_softmax",
                lhs: (rows, classes),
                rhs: (1, classes),
            });
        }
        if label >= classes {
            return Err(Error::Input(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        Ok(self.unary(
            Op::AmSoftmax {
                x: self.id,
                label,
                margin,
                scale,
            },
            |a| {
                // log Σ exp(z_j − z_y), with the largest term split out so a
                // confident correct prediction keeps its tiny loss
                let z = am_softmax_logits(a, label, margin, scale);
                let k = (0..z.len()).fold(0, |k, j| if z[j] > z[k] { j } else { k });
                let rest: T = (0..z.len())
                    .filter(|&j| j != k)
                    .map(|j| (z[j] - z[k]).exp())
                    .sum();
                Tensor::scalar((z[k] - z[label]) + rest.ln_1p())
            },
        ))
    }
}

/// Concatenates tensors with equal row counts side by side.
pub fn concat_cols<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
    let tape = first.tape;
    let rows = first.shape().0;
    let mut cols = 0;
    for p in parts {
        let shape = p.shape();
        if shape.0 != rows {
            return Err(Error::Dimension {
                op: "concat_cols",
                lhs: (rows, cols),
                rhs: shape,
            });
        }
        cols += shape.1;
    }
    let mut out = Tensor::zeros(rows, cols);
    let mut offset = 0;
    for p in parts {
        let v = p.value();
        for r in 0..rows {
            for c in 0..v.cols() {
                out.set(r, offset + c, v.get(r, c));
            }
        }
        offset += v.cols();
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(tape.record(out, Op::ConcatCols(ids.clone()), &ids))
}

fn broadcast_row<T: Scalar>(a: &Tensor<T>, row: &Tensor<T>, sign: T) -> Result<Tensor<T>> {
    if row.shape() != (1, a.cols()) {
        return Err(Error::Dimension {
            op: "broadcast_row",
            lhs: a.shape(),
            rhs: row.shape(),
        });
    }
    let mut out = a.clone();
    let cols = a.cols();
    for r in 0..a.rows() {
        for (v, &b) in out.data_mut()[r * cols..(r + 1) * cols].iter_mut().zip(row.data()) {
            *v += sign * b;
        }
    }
    Ok(out)
}
