//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every primitive application together with its forward
//! value. [`Tape::backward`] sweeps the nodes in reverse insertion order, which
//! is a topological order because inputs always precede their consumers.
//!
//! ```
//! use pnde_core::tape::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf_vec(vec![3.0]);
//! let y = tape.mul(x, x).unwrap();
//! let s = tape.sum(y);
//! let grads = tape.backward(s).unwrap();
//! assert_eq!(grads.wrt(x).as_slice(), &[6.0]);
//! ```

use std::fmt;

use crate::error::{shape_err, Error, Result};
use crate::linalg::{axpy, dot, gelu, gelu_grad, Cholesky, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A primitive defined outside this module, e.g. the tangent-space projection.
///
/// `forward` must be a pure function of the inputs; it is used when the tape
/// is replayed. `backward` receives the recorded inputs and output together
/// with the output cotangent and returns one cotangent per input.
pub trait CustomOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix>;
    fn backward(&self, inputs: &[&Matrix], output: &Matrix, grad: &Matrix) -> Result<Vec<Matrix>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Affine { w: NodeId, b: NodeId, x: NodeId },
    Gelu(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    LinComb(Vec<(NodeId, f64)>),
    Dot(NodeId, NodeId),
    Sum(NodeId),
    MeanSquares(NodeId),
    CholeskySolve { a: NodeId, b: NodeId, factor: Cholesky },
    Custom { inputs: Vec<NodeId>, op: Box<dyn CustomOp> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `id`; exact zeros when the seed does not depend on it.
    pub fn wrt(&self, id: NodeId) -> Matrix {
        match &self.adjoints[id.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.adjoints[id.0].as_ref()
    }
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    Ok(())
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

    #[inline]
    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        id
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn leaf_vec(&mut self, v: Vec<f64>) -> NodeId {
        self.leaf(Matrix::column(v))
    }

    /// Input that never receives an adjoint.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Const, value, false)
    }

    pub fn constant_vec(&mut self, v: Vec<f64>) -> NodeId {
        self.constant(Matrix::column(v))
    }

    /// `W x + b`
    pub fn affine(&mut self, w: NodeId, b: NodeId, x: NodeId) -> Result<NodeId> {
        let value = affine_value(self.value(w), self.value(b), self.value(x))?;
        let rg = self.rg(w) || self.rg(b) || self.rg(x);
        Ok(self.push(Op::Affine { w, b, x }, value, rg))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let value = Matrix::from_raw(v.rows(), v.cols(), v.as_slice().iter().map(|&t| gelu(t)).collect());
        let rg = self.rg(x);
        self.push(Op::Gelu(x), value, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = zip_value("add", self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = zip_value("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = zip_value("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a);
        let value = Matrix::from_raw(v.rows(), v.cols(), v.as_slice().iter().map(|x| c * x).collect());
        let rg = self.rg(a);
        self.push(Op::Scale(a, c), value, rg)
    }

    /// `Σ cᵢ aᵢ` over same-shaped nodes.
    pub fn lin_comb(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let value = lin_comb_value(terms.iter().map(|&(id, c)| (self.value(id), c)))?;
        let rg = terms.iter().any(|&(id, _)| self.rg(id));
        Ok(self.push(Op::LinComb(terms.to_vec()), value, rg))
    }

    /// Inner product of two same-shaped nodes, `1 x 1`.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape("dot", self.value(a), self.value(b))?;
        let value = Matrix::column(vec![dot(self.value(a).as_slice(), self.value(b).as_slice())]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Dot(a, b), value, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::column(vec![self.value(a).as_slice().iter().sum()]);
        let rg = self.rg(a);
        self.push(Op::Sum(a), value, rg)
    }

    /// Mean of squared entries, `1 x 1`.
    pub fn mean_squares(&mut self, a: NodeId) -> Result<NodeId> {
        let value = mean_squares_value(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(Op::MeanSquares(a), value, rg))
    }

    /// `A⁻¹ B` for SPD `A`; only the lower triangle of `A` is read.
    pub fn cholesky_solve(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let factor = Cholesky::factor(self.value(a))?;
        let value = factor.solve(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::CholeskySolve { a, b, factor }, value, rg))
    }

    /// Record a custom primitive, computing its value with `op.forward`.
    pub fn custom(&mut self, inputs: &[NodeId], op: Box<dyn CustomOp>) -> Result<NodeId> {
        let value = {
            let vals: Vec<&Matrix> = inputs.iter().map(|&i| self.value(i)).collect();
            op.forward(&vals)?
        };
        Ok(self.custom_with_value(inputs, op, value))
    }

    /// Record a custom primitive whose forward value the caller already has.
    /// `value` must equal `op.forward(inputs)`.
    pub fn custom_with_value(&mut self, inputs: &[NodeId], op: Box<dyn CustomOp>, value: Matrix) -> NodeId {
        let rg = inputs.iter().any(|&i| self.rg(i));
        self.push(
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            value,
            rg,
        )
    }

    /// Recompute every node from the recorded leaves and constants.
    pub fn replay(&self) -> Result<Vec<Matrix>> {
        let mut vals: Vec<Matrix> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf | Op::Const => node.value.clone(),
                Op::Affine { w, b, x } => affine_value(&vals[w.0], &vals[b.0], &vals[x.0])?,
                Op::Gelu(x) => {
                    let v = &vals[x.0];
                    Matrix::from_raw(v.rows(), v.cols(), v.as_slice().iter().map(|&t| gelu(t)).collect())
                }
                Op::Add(a, b) => zip_value("add", &vals[a.0], &vals[b.0], |x, y| x + y)?,
                Op::Sub(a, b) => zip_value("sub", &vals[a.0], &vals[b.0], |x, y| x - y)?,
                Op::Mul(a, b) => zip_value("mul", &vals[a.0], &vals[b.0], |x, y| x * y)?,
                Op::Scale(a, c) => {
                    let v = &vals[a.0];
                    Matrix::from_raw(v.rows(), v.cols(), v.as_slice().iter().map(|x| c * x).collect())
                }
                Op::LinComb(terms) => lin_comb_value(terms.iter().map(|&(id, c)| (&vals[id.0], c)))?,
                Op::Dot(a, b) => Matrix::column(vec![dot(vals[a.0].as_slice(), vals[b.0].as_slice())]),
                Op::Sum(a) => Matrix::column(vec![vals[a.0].as_slice().iter().sum()]),
                Op::MeanSquares(a) => mean_squares_value(&vals[a.0])?,
                Op::CholeskySolve { a, b, .. } => Cholesky::factor(&vals[a.0])?.solve(&vals[b.0])?,
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Matrix> = inputs.iter().map(|i| &vals[i.0]).collect();
                    op.forward(&ins)?
                }
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients> {
        if self.value(seed).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward seed must be scalar, node {} has shape {:?}",
                seed.0,
                self.value(seed).shape()
            )));
        }
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[seed.0] = Some(Matrix::column(vec![1.0]));

        for idx in (0..=seed.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Const => {}
                Op::Affine { w, b, x } => {
                    let gv = g.as_slice();
                    if self.rg(*w) {
                        let xv = self.value(*x).as_slice();
                        let wv = self.value(*w);
                        let acc = slot(&mut adj, *w, wv.rows(), wv.cols());
                        for (i, &gi) in gv.iter().enumerate() {
                            if gi != 0.0 {
                                axpy(gi, xv, acc.row_mut(i));
                            }
                        }
                    }
                    if self.rg(*b) {
                        let acc = slot_like(&mut adj, *b, self.value(*b));
                        axpy(1.0, gv, acc.as_mut_slice());
                    }
                    if self.rg(*x) {
                        let wv = self.value(*w);
                        let acc = slot_like(&mut adj, *x, self.value(*x));
                        let out = acc.as_mut_slice();
                        for (i, &gi) in gv.iter().enumerate() {
                            if gi != 0.0 {
                                axpy(gi, wv.row(i), out);
                            }
                        }
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).as_slice();
                    let acc = slot_like(&mut adj, *x, self.value(*x));
                    for ((a, &gi), &xi) in acc.as_mut_slice().iter_mut().zip(g.as_slice()).zip(xv) {
                        *a += gi * gelu_grad(xi);
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut adj, *a, &g, 1.0);
                    self.accumulate(&mut adj, *b, &g, 1.0);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut adj, *a, &g, 1.0);
                    self.accumulate(&mut adj, *b, &g, -1.0);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let bv = self.value(*b).as_slice();
                        let acc = slot_like(&mut adj, *a, self.value(*a));
                        for ((s, &gi), &bi) in acc.as_mut_slice().iter_mut().zip(g.as_slice()).zip(bv) {
                            *s += gi * bi;
                        }
                    }
                    if self.rg(*b) {
                        let av = self.value(*a).as_slice();
                        let acc = slot_like(&mut adj, *b, self.value(*b));
                        for ((s, &gi), &ai) in acc.as_mut_slice().iter_mut().zip(g.as_slice()).zip(av) {
                            *s += gi * ai;
                        }
                    }
                }
                Op::Scale(a, c) => self.accumulate(&mut adj, *a, &g, *c),
                Op::LinComb(terms) => {
                    for &(id, c) in terms {
                        self.accumulate(&mut adj, id, &g, c);
                    }
                }
                Op::Dot(a, b) => {
                    let gs = g.as_slice()[0];
                    if self.rg(*a) {
                        let bv = self.value(*b).as_slice();
                        let acc = slot_like(&mut adj, *a, self.value(*a));
                        axpy(gs, bv, acc.as_mut_slice());
                    }
                    if self.rg(*b) {
                        let av = self.value(*a).as_slice();
                        let acc = slot_like(&mut adj, *b, self.value(*b));
                        axpy(gs, av, acc.as_mut_slice());
                    }
                }
                Op::Sum(a) => {
                    let gs = g.as_slice()[0];
                    let acc = slot_like(&mut adj, *a, self.value(*a));
                    acc.as_mut_slice().iter_mut().for_each(|s| *s += gs);
                }
                Op::MeanSquares(a) => {
                    let av = self.value(*a).as_slice();
                    let c = 2.0 * g.as_slice()[0] / av.len() as f64;
                    let acc = slot_like(&mut adj, *a, self.value(*a));
                    axpy(c, av, acc.as_mut_slice());
                }
                Op::CholeskySolve { a, b, factor } => {
                    // X = A⁻¹B  =>  B̄ = A⁻¹X̄,  Ā = -B̄ Xᵀ folded onto the lower triangle.
                    let bbar = factor.solve(&g)?;
                    if self.rg(*a) {
                        let x = &node.value;
                        let n = factor.dim();
                        let full = bbar.matmul(&x.transpose())?;
                        let acc = slot_like(&mut adj, *a, self.value(*a));
                        for i in 0..n {
                            for j in 0..i {
                                let v = acc.get(i, j) - full.get(i, j) - full.get(j, i);
                                acc.set(i, j, v);
                            }
                            let v = acc.get(i, i) - full.get(i, i);
                            acc.set(i, i, v);
                        }
                    }
                    if self.rg(*b) {
                        let acc = slot_like(&mut adj, *b, self.value(*b));
                        axpy(1.0, bbar.as_slice(), acc.as_mut_slice());
                    }
                }
                Op::Custom { inputs, op } => {
                    let ins: Vec<&Matrix> = inputs.iter().map(|i| self.value(*i)).collect();
                    let grads = op.backward(&ins, &node.value, &g)?;
                    if grads.len() != inputs.len() {
                        return Err(Error::Contract(format!(
                            "custom op {} returned {} cotangents for {} inputs",
                            op.name(),
                            grads.len(),
                            inputs.len()
                        )));
                    }
                    for (&id, gi) in inputs.iter().zip(&grads) {
                        if self.rg(id) {
                            same_shape(op.name(), self.value(id), gi)?;
                            self.accumulate(&mut adj, id, gi, 1.0);
                        }
                    }
                }
            }
            // Leaves keep their adjoint for the caller.
            if matches!(node.op, Op::Leaf) {
                adj[idx] = Some(g);
            }
        }

        // Leaves earlier than the seed were visited; clear interior adjoints.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) {
                adj[i] = None;
            }
        }
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn accumulate(&self, adj: &mut [Option<Matrix>], id: NodeId, g: &Matrix, c: f64) {
        if !self.rg(id) {
            return;
        }
        let acc = slot_like(adj, id, self.value(id));
        axpy(c, g.as_slice(), acc.as_mut_slice());
    }
}

fn slot(adj: &mut [Option<Matrix>], id: NodeId, rows: usize, cols: usize) -> &mut Matrix {
    adj[id.0].get_or_insert_with(|| Matrix::zeros(rows, cols))
}

fn slot_like<'a>(adj: &'a mut [Option<Matrix>], id: NodeId, like: &Matrix) -> &'a mut Matrix {
    slot(adj, id, like.rows(), like.cols())
}

fn affine_value(w: &Matrix, b: &Matrix, x: &Matrix) -> Result<Matrix> {
    if x.cols() != 1 || b.cols() != 1 {
        return Err(shape_err("affine", "column vectors", format!("x {:?}, b {:?}", x.shape(), b.shape())));
    }
    if w.cols() != x.rows() {
        return Err(shape_err("affine", format!("len(x) = {}", w.cols()), x.rows()));
    }
    if b.rows() != w.rows() {
        return Err(shape_err("affine", format!("len(b) = {}", w.rows()), b.rows()));
    }
    let mut out = b.as_slice().to_vec();
    let xv = x.as_slice();
    for (i, o) in out.iter_mut().enumerate() {
        *o += dot(w.row(i), xv);
    }
    Ok(Matrix::column(out))
}

fn zip_value(op: &'static str, a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
    same_shape(op, a, b)?;
    Ok(Matrix::from_raw(
        a.rows(),
        a.cols(),
        a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f(x, y)).collect(),
    ))
}

fn lin_comb_value<'a>(mut terms: impl Iterator<Item = (&'a Matrix, f64)>) -> Result<Matrix> {
    let Some((first, c0)) = terms.next() else {
        return Err(Error::Contract("lin_comb needs at least one term".into()));
    };
    let mut out: Vec<f64> = first.as_slice().iter().map(|x| c0 * x).collect();
    for (m, c) in terms {
        same_shape("lin_comb", first, m)?;
        axpy(c, m.as_slice(), &mut out);
    }
    Ok(Matrix::from_raw(first.rows(), first.cols(), out))
}

fn mean_squares_value(a: &Matrix) -> Result<Matrix> {
    if a.is_empty() {
        return Err(Error::Contract("mean of squares over an empty node".into()));
    }
    let s: f64 = a.as_slice().iter().map(|x| x * x).sum();
    Ok(Matrix::column(vec![s / a.len() as f64]))
}

/// Compare the tape gradient of a scalar function with central differences.
///
/// `f` records the function of the leaf it is given. Returns
/// `max_i |g_i - fd_i| / (|fd_i| + 1e-12)`.
pub fn grad_check<F>(f: F, x: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, eps, &coords)
}

/// [`grad_check`] restricted to a subset of coordinates.
pub fn grad_check_coords<F>(f: F, x: &[f64], eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let eval = |point: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf_vec(point);
        let out = f(&mut tape, leaf)?;
        Ok(tape.value(out).as_slice()[0])
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf_vec(x.to_vec());
    let out = f(&mut tape, leaf)?;
    let grad = tape.backward(out)?.wrt(leaf);

    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = x.to_vec();
        plus[i] += eps;
        let mut minus = x.to_vec();
        minus[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (grad.as_slice()[i] - fd).abs() / (fd.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cholesky_solve;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
    }

    #[test]
    fn affine_examples() {
        let mut t = Tape::new();
        let w = t.constant(Matrix::identity(2));
        let b = t.constant_vec(vec![0.0, 0.0]);
        let x = t.constant_vec(vec![3.0, -1.0]);
        let y = t.affine(w, b, x).unwrap();
        assert_eq!(t.value(y).as_slice(), &[3.0, -1.0]);

        let w0 = t.constant(Matrix::zeros(2, 2));
        let b1 = t.constant_vec(vec![1.0, 2.0]);
        let x5 = t.constant_vec(vec![5.0, 5.0]);
        let y = t.affine(w0, b1, x5).unwrap();
        assert_eq!(t.value(y).as_slice(), &[1.0, 2.0]);

        let w = t.constant(Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
        let b = t.constant_vec(vec![1.0, 0.0]);
        let x = t.constant_vec(vec![1.0, 1.0]);
        let y = t.affine(w, b, x).unwrap();
        assert_eq!(t.value(y).as_slice(), &[4.0, 7.0]);

        let short = t.constant_vec(vec![1.0]);
        assert!(matches!(t.affine(w, b, short), Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_examples() {
        let mut t = Tape::new();
        let x = t.leaf_vec(vec![3.0]);
        let y = t.mul(x, x).unwrap();
        let s = t.sum(y);
        assert_eq!(t.backward(s).unwrap().wrt(x).as_slice(), &[6.0]);

        let mut t = Tape::new();
        let x = t.leaf_vec(vec![1.0, 2.0]);
        let c = t.constant_vec(vec![4.0]);
        let s = t.sum(c);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(x).as_slice(), &[0.0, 0.0]);

        let mut t = Tape::new();
        let w = t.leaf_vec(vec![1.0, -2.0, 0.5]);
        let x = t.leaf_vec(vec![3.0, 4.0, -1.0]);
        let y = t.dot(w, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(w).as_slice(), &[3.0, 4.0, -1.0]);
        assert_eq!(g.wrt(x).as_slice(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn non_scalar_seed_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf_vec(vec![1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn grad_check_examples() {
        let sq = |t: &mut Tape, x: NodeId| t.dot(x, x);
        assert!(grad_check(sq, &[1.0, 2.0], 1e-5).unwrap() <= 1e-8);

        let sum_gelu = |t: &mut Tape, x: NodeId| {
            let g = t.gelu(x);
            Ok(t.sum(g))
        };
        assert!(grad_check(sum_gelu, &[0.3, -0.7], 1e-5).unwrap() <= 1e-6);

        let constant = |t: &mut Tape, _x: NodeId| Ok(t.constant_vec(vec![2.0]));
        assert_eq!(grad_check(constant, &[0.3, -0.7], 1e-5).unwrap(), 0.0);
    }

    // Each primitive checked against central differences at 100 random points.
    #[test]
    fn every_primitive_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let eps = 1e-5;
        let tol = 1e-6;
        for _ in 0..100 {
            let w = rand_vec(&mut rng, 6);
            let b = rand_vec(&mut rng, 2);
            let c = rand_vec(&mut rng, 3);
            let x = rand_vec(&mut rng, 3);

            let (w2, b2) = (w.clone(), b.clone());
            let f_x = move |t: &mut Tape, x: NodeId| {
                let wn = t.constant(Matrix::new(2, 3, w2.clone())?);
                let bn = t.constant_vec(b2.clone());
                let y = t.affine(wn, bn, x)?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            };
            assert!(grad_check(f_x, &x, eps).unwrap() <= tol);

            // W and b adjoints against a plain re-evaluation.
            let mut t = Tape::new();
            let wl = t.leaf(Matrix::new(2, 3, w.clone()).unwrap());
            let bl = t.leaf_vec(b.clone());
            let xl = t.leaf_vec(x.clone());
            let y = t.affine(wl, bl, xl).unwrap();
            let y2 = t.gelu(y);
            let s = t.dot(y2, y2).unwrap();
            let g = t.backward(s).unwrap();
            let loss = |w: &[f64], b: &[f64]| {
                let m = Matrix::new(2, 3, w.to_vec()).unwrap();
                let y: Vec<f64> = m.matvec(&x).unwrap().iter().zip(b).map(|(a, c)| gelu(a + c)).collect();
                dot(&y, &y)
            };
            for i in 0..6 {
                let (mut p, mut m) = (w.clone(), w.clone());
                p[i] += eps;
                m[i] -= eps;
                let fd = (loss(&p, &b) - loss(&m, &b)) / (2.0 * eps);
                let an = g.wrt(wl).as_slice()[i];
                assert!((an - fd).abs() / (fd.abs() + 1e-12) <= tol || (an - fd).abs() < 1e-10);
            }
            for i in 0..2 {
                let (mut p, mut m) = (b.clone(), b.clone());
                p[i] += eps;
                m[i] -= eps;
                let fd = (loss(&w, &p) - loss(&w, &m)) / (2.0 * eps);
                let an = g.wrt(bl).as_slice()[i];
                assert!((an - fd).abs() / (fd.abs() + 1e-12) <= tol || (an - fd).abs() < 1e-10);
            }

            // elementwise family and reductions
            let c2 = c.clone();
            let f = move |t: &mut Tape, x: NodeId| {
                let cn = t.constant_vec(c2.clone());
                let a = t.add(x, cn)?;
                let s = t.sub(a, x)?;
                let m = t.mul(a, x)?;
                let sc = t.scale(m, -1.7);
                let l = t.lin_comb(&[(sc, 0.3), (s, 2.0), (x, -1.1)])?;
                let g = t.gelu(l);
                let d = t.dot(g, x)?;
                let ms = t.mean_squares(g)?;
                t.add(d, ms)
            };
            assert!(grad_check(f, &x, eps).unwrap() <= tol);
        }
    }

    #[test]
    fn cholesky_solve_adjoint_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let r = rand_vec(&mut rng, 9);
            let rm = Matrix::new(3, 3, r).unwrap();
            let mut a = rm.matmul(&rm.transpose()).unwrap();
            for i in 0..3 {
                a.set(i, i, a.get(i, i) + 1.0);
            }
            let b = rand_vec(&mut rng, 3);
            // Only the lower triangle of A is read by the factorization.
            let idx: Vec<(usize, usize)> = (0..3).flat_map(|i| (0..=i).map(move |j| (i, j))).collect();
            let mut t = Tape::new();
            let al = t.leaf(a.clone());
            let bl = t.leaf_vec(b.clone());
            let x = t.cholesky_solve(al, bl).unwrap();
            let w = t.constant_vec(vec![0.4, -1.3, 0.9]);
            let s = t.dot(x, w).unwrap();
            let g = t.backward(s).unwrap();
            let loss = |a: &Matrix, b: &[f64]| {
                let x = cholesky_solve(a, &Matrix::column(b.to_vec())).unwrap();
                dot(x.as_slice(), &[0.4, -1.3, 0.9])
            };
            let eps = 1e-6;
            for &(i, j) in &idx {
                let (mut p, mut m) = (a.clone(), a.clone());
                p.set(i, j, a.get(i, j) + eps);
                m.set(i, j, a.get(i, j) - eps);
                let fd = (loss(&p, &b) - loss(&m, &b)) / (2.0 * eps);
                let an = g.wrt(al).get(i, j);
                assert!((an - fd).abs() <= 1e-6 * (fd.abs() + 1e-3), "A[{i}][{j}]: {an} vs {fd}");
            }
            // Upper triangle is never read.
            assert_eq!(g.wrt(al).get(0, 2), 0.0);
            for i in 0..3 {
                let (mut p, mut m) = (b.clone(), b.clone());
                p[i] += eps;
                m[i] -= eps;
                let fd = (loss(&a, &p) - loss(&a, &m)) / (2.0 * eps);
                let an = g.wrt(bl).as_slice()[i];
                assert!((an - fd).abs() <= 1e-6 * (fd.abs() + 1e-3));
            }
        }
    }

    #[test]
    fn replay_and_gradients_are_bitwise_deterministic() {
        let build = || {
            let mut t = Tape::new();
            let w = t.leaf(Matrix::new(2, 2, vec![0.3, -0.2, 1.1, 0.7]).unwrap());
            let b = t.leaf_vec(vec![0.1, -0.4]);
            let x = t.leaf_vec(vec![0.9, 2.1]);
            let h = t.affine(w, b, x).unwrap();
            let h = t.gelu(h);
            let s = t.mean_squares(h).unwrap();
            (t, w, s)
        };
        let (t1, w1, s1) = build();
        let (t2, w2, s2) = build();
        let replayed = t1.replay().unwrap();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, t1.value(NodeId(i)));
        }
        assert_eq!(t1.value(s1), t2.value(s2));
        let g1 = t1.backward(s1).unwrap().wrt(w1);
        let g2 = t2.backward(s2).unwrap().wrt(w2);
        assert_eq!(g1.as_slice(), g2.as_slice());
    }
}
