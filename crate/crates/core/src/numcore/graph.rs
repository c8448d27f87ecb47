//! Tape-based reverse-mode differentiation over `[rows x cols]` matrices.

use crate::error::{Error, Result};
use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::element::Element;
use super::seeds::seeded_rng;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<E: Element> {
    Leaf,
    Matmul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, E),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        // per-row 1/sqrt(var + eps), saved by the forward pass
        inv_std: Vec<E>,
    },
    Relu(Var),
    Gelu(Var),
    EmbeddingLookup {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        // 0 where dropped, 1/(1-p) where kept
        mask: Array2<E>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        smoothing: E,
        probs: Array2<E>,
        n_active: usize,
    },
    Sum(Var),
    Block {
        x: Var,
        r0: usize,
        c0: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
}

struct Node<E: Element> {
    value: Array2<E>,
    grad: Option<Array2<E>>,
    requires_grad: bool,
    op: Op<E>,
}

/// A single-use computation tape. Build one per training step, run
/// [`Graph::backward`] once, read gradients, drop it.
pub struct Graph<E: Element> {
    nodes: Vec<Node<E>>,
    train: bool,
    dropout_rng: ChaCha8Rng,
}

const LN_EPS: f64 = 1e-5;

impl<E: Element> Graph<E> {
    /// Inference/evaluation graph: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            train: false,
            dropout_rng: seeded_rng(0),
        }
    }

    /// Training graph: dropout draws masks from a rng seeded here.
    pub fn with_dropout(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            train: true,
            dropout_rng: seeded_rng(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn push(&mut self, value: Array2<E>, requires_grad: bool, op: Op<E>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Insert a tensor that should receive gradients.
    pub fn leaf(&mut self, value: Array2<E>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Insert a tensor that never receives gradients.
    pub fn constant(&mut self, value: Array2<E>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Array2<E> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Array2<E>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar payload of a `[1 x 1]` node.
    pub fn scalar(&self, v: Var) -> Result<E> {
        let val = &self.nodes[v.0].value;
        if val.dim() != (1, 1) {
            return Err(Error::shape("scalar", format!("expected [1 x 1], got {:?}", val.dim())));
        }
        Ok(val[[0, 0]])
    }

    pub fn assert_finite(&self, v: Var, context: &str) -> Result<()> {
        if self.nodes[v.0].value.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::Numeric(format!("non-finite value in {context}")))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k1) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k1 != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m} x {k1}] . [{k2} x {n}]"),
            ));
        }
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.t().to_owned();
        let rg = self.requires(a);
        self.push(value, rg, Op::Transpose(a))
    }

    /// Element-wise sum. `b` must match `a`'s shape or be a `[1 x n]` row
    /// broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let bs = self.shape(b);
        if bs != (m, n) && bs != (1, n) {
            return Err(Error::shape("add", format!("[{m} x {n}] + [{} x {}]", bs.0, bs.1)));
        }
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    /// Element-wise product, same broadcast rules as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let bs = self.shape(b);
        if bs != (m, n) && bs != (1, n) {
            return Err(Error::shape("mul", format!("[{m} x {n}] * [{} x {}]", bs.0, bs.1)));
        }
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: E) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        let rg = self.requires(a);
        self.push(value, rg, Op::Scale(a, c))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        for mut row in value.axis_iter_mut(Axis(0)) {
            let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.iter().cloned().sum::<E>();
            row.mapv_inplace(|x| x / sum);
        }
        let rg = self.requires(a);
        self.push(value, rg, Op::SoftmaxRows(a))
    }

    /// Row-wise normalization `(x - mean) / sqrt(var + 1e-5)`, no affine part.
    /// The variance floor makes constant rows map to zeros.
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let (m, n) = x.dim();
        let nf = E::of_f64(n as f64);
        let eps = E::of_f64(LN_EPS);
        let mut value = Array2::zeros((m, n));
        let mut inv_std = Vec::with_capacity(m);
        for (i, row) in x.axis_iter(Axis(0)).enumerate() {
            let mean = row.iter().cloned().sum::<E>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / nf;
            let s = (var + eps).sqrt().recip();
            inv_std.push(s);
            for (j, &v) in row.iter().enumerate() {
                value[[i, j]] = (v - mean) * s;
            }
        }
        let rg = self.requires(a);
        self.push(value, rg, Op::LayerNormRows { x: a, inv_std })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.max(E::zero()));
        let rg = self.requires(a);
        self.push(value, rg, Op::Relu(a))
    }

    /// Tanh-approximation GELU; the backward pass differentiates the
    /// approximation exactly.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(gelu_fwd);
        let rg = self.requires(a);
        self.push(value, rg, Op::Gelu(a))
    }

    /// Gather rows of `table` by id: output row i is `table[ids[i]]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::shape(
                "embedding_lookup",
                format!("id {bad} out of range for table with {v} rows"),
            ));
        }
        let mut value = Array2::zeros((ids.len(), d));
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).assign(&self.nodes[table.0].value.row(id));
        }
        let rg = self.requires(table);
        Ok(self.push(value, rg, Op::EmbeddingLookup { table, ids: ids.to_vec() }))
    }

    /// Inverted dropout: kept units are scaled by 1/(1-p) so the expectation
    /// matches the identity. On a non-training graph (or p = 0) this is the
    /// identity and records nothing.
    pub fn dropout(&mut self, a: Var, p: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if !self.train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - p;
        let scale = E::of_f64(1.0 / keep);
        let (m, n) = self.shape(a);
        let mut mask = Array2::zeros((m, n));
        for x in mask.iter_mut() {
            if self.dropout_rng.random::<f64>() < keep {
                *x = scale;
            }
        }
        let value = &self.nodes[a.0].value * &mask;
        let rg = self.requires(a);
        Ok(self.push(value, rg, Op::Dropout { x: a, mask }))
    }

    /// Label-smoothed cross entropy averaged over labeled rows. `None`
    /// labels are ignored; `smoothing` spreads `eps/V` mass over all classes.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[Option<usize>],
        smoothing: f64,
    ) -> Result<Var> {
        let (m, v) = self.shape(logits);
        if labels.len() != m {
            return Err(Error::shape(
                "cross_entropy",
                format!("{m} logit rows vs {} labels", labels.len()),
            ));
        }
        if let Some(&Some(bad)) = labels.iter().find(|l| matches!(l, Some(c) if *c >= v)) {
            return Err(Error::shape(
                "cross_entropy",
                format!("label {bad} out of range for {v} classes"),
            ));
        }
        let n_active = labels.iter().filter(|l| l.is_some()).count();
        if n_active == 0 {
            return Err(Error::Data("cross_entropy: all positions ignored".into()));
        }
        let eps = E::of_f64(smoothing);
        let vf = E::of_f64(v as f64);
        let one = E::one();
        let x = &self.nodes[logits.0].value;
        let mut probs = Array2::zeros((m, v));
        let mut total = E::zero();
        for (i, label) in labels.iter().enumerate() {
            let Some(y) = label else { continue };
            let row = x.row(i);
            let max = row.iter().cloned().fold(E::neg_infinity(), E::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<E>().ln() + max;
            let mut sum_logp = E::zero();
            for (j, &z) in row.iter().enumerate() {
                let logp = z - lse;
                probs[[i, j]] = logp.exp();
                sum_logp = sum_logp + logp;
            }
            let logp_y = row[*y] - lse;
            total = total - ((one - eps) * logp_y + eps / vf * sum_logp);
        }
        let nf = E::of_f64(n_active as f64);
        let value = Array2::from_elem((1, 1), total / nf);
        let rg = self.requires(logits);
        Ok(self.push(
            value,
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                smoothing: eps,
                probs,
                n_active,
            },
        ))
    }

    /// Sum of all elements, as a `[1 x 1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.iter().cloned().sum::<E>();
        let rg = self.requires(a);
        self.push(Array2::from_elem((1, 1), total), rg, Op::Sum(a))
    }

    /// Rectangular sub-block `a[r0..r1, c0..c1]`.
    pub fn block(&mut self, a: Var, r0: usize, r1: usize, c0: usize, c1: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if r0 >= r1 || c0 >= c1 || r1 > m || c1 > n {
            return Err(Error::shape(
                "block",
                format!("rows {r0}..{r1}, cols {c0}..{c1} of [{m} x {n}]"),
            ));
        }
        let value = self.nodes[a.0].value.slice(s![r0..r1, c0..c1]).to_owned();
        let rg = self.requires(a);
        Ok(self.push(value, rg, Op::Block { x: a, r0, c0 }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, Axis(0), "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, Axis(1), "concat_cols")
    }

    fn concat(&mut self, parts: &[Var], axis: Axis, op: &str) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape(op, "no inputs"));
        }
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let value = concatenate(axis, &views)
            .map_err(|e| Error::shape(op, format!("incompatible shapes: {e}")))?;
        let rg = parts.iter().any(|p| self.requires(*p));
        let op = if axis == Axis(0) {
            Op::ConcatRows(parts.to_vec())
        } else {
            Op::ConcatCols(parts.to_vec())
        };
        Ok(self.push(value, rg, op))
    }

    /// Reverse pass from a scalar loss. Populates `grad` on every node that
    /// requires gradients and contributed to the loss.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let dim = self.nodes[loss.0].value.dim();
        if dim != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!("loss must be [1 x 1], got [{} x {}]", dim.0, dim.1),
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            // Nothing upstream wants gradients; a no-op, not an error.
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(Array2::from_elem((1, 1), E::one()));
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let (left, right) = self.nodes.split_at_mut(id);
            let node = &right[0];
            let g = node.grad.as_ref().expect("checked above");
            match &node.op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    if left[a.0].requires_grad {
                        let ga = g.dot(&left[b.0].value.t());
                        accumulate(&mut left[a.0], ga);
                    }
                    if left[b.0].requires_grad {
                        let gb = left[a.0].value.t().dot(g);
                        accumulate(&mut left[b.0], gb);
                    }
                }
                Op::Transpose(a) => {
                    if left[a.0].requires_grad {
                        accumulate(&mut left[a.0], g.t().to_owned());
                    }
                }
                Op::Add(a, b) => {
                    if left[a.0].requires_grad {
                        accumulate(&mut left[a.0], g.clone());
                    }
                    if left[b.0].requires_grad {
                        let gb = reduce_to_shape(g, left[b.0].value.dim());
                        accumulate(&mut left[b.0], gb);
                    }
                }
                Op::Mul(a, b) => {
                    if left[a.0].requires_grad {
                        let ga = g * &left[b.0].value;
                        accumulate(&mut left[a.0], ga);
                    }
                    if left[b.0].requires_grad {
                        let gb = reduce_to_shape(&(g * &left[a.0].value), left[b.0].value.dim());
                        accumulate(&mut left[b.0], gb);
                    }
                }
                Op::Scale(a, c) => {
                    if left[a.0].requires_grad {
                        accumulate(&mut left[a.0], g.mapv(|x| x * *c));
                    }
                }
                Op::SoftmaxRows(a) => {
                    if left[a.0].requires_grad {
                        let y = &node.value;
                        let mut ga = Array2::zeros(y.dim());
                        for (i, yrow) in y.axis_iter(Axis(0)).enumerate() {
                            let grow = g.row(i);
                            let dot = grow
                                .iter()
                                .zip(yrow.iter())
                                .map(|(&gj, &yj)| gj * yj)
                                .sum::<E>();
                            for (j, (&gj, &yj)) in grow.iter().zip(yrow.iter()).enumerate() {
                                ga[[i, j]] = yj * (gj - dot);
                            }
                        }
                        accumulate(&mut left[a.0], ga);
                    }
                }
                Op::LayerNormRows { x, inv_std } => {
                    if left[x.0].requires_grad {
                        let xhat = &node.value;
                        let (m, n) = xhat.dim();
                        let nf = E::of_f64(n as f64);
                        let mut ga = Array2::zeros((m, n));
                        for i in 0..m {
                            let grow = g.row(i);
                            let hrow = xhat.row(i);
                            let gmean = grow.iter().cloned().sum::<E>() / nf;
                            let ghmean = grow
                                .iter()
                                .zip(hrow.iter())
                                .map(|(&gj, &hj)| gj * hj)
                                .sum::<E>()
                                / nf;
                            let s = inv_std[i];
                            for j in 0..n {
                                ga[[i, j]] = s * (grow[j] - gmean - hrow[j] * ghmean);
                            }
                        }
                        accumulate(&mut left[x.0], ga);
                    }
                }
                Op::Relu(a) => {
                    if left[a.0].requires_grad {
                        let x = &left[a.0].value;
                        let mut ga = g.clone();
                        ga.zip_mut_with(x, |gv, &xv| {
                            if xv <= E::zero() {
                                *gv = E::zero();
                            }
                        });
                        accumulate(&mut left[a.0], ga);
                    }
                }
                Op::Gelu(a) => {
                    if left[a.0].requires_grad {
                        let x = &left[a.0].value;
                        let mut ga = g.clone();
                        ga.zip_mut_with(x, |gv, &xv| *gv = *gv * gelu_bwd(xv));
                        accumulate(&mut left[a.0], ga);
                    }
                }
                Op::EmbeddingLookup { table, ids } => {
                    if left[table.0].requires_grad {
                        let (v, d) = left[table.0].value.dim();
                        let mut gt = Array2::zeros((v, d));
                        for (i, &id) in ids.iter().enumerate() {
                            let mut dst = gt.row_mut(id);
                            dst += &g.row(i);
                        }
                        accumulate(&mut left[table.0], gt);
                    }
                }
                Op::Dropout { x, mask } => {
                    if left[x.0].requires_grad {
                        accumulate(&mut left[x.0], g * mask);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    smoothing,
                    probs,
                    n_active,
                } => {
                    if left[logits.0].requires_grad {
                        let gs = g[[0, 0]] / E::of_f64(*n_active as f64);
                        let (m, v) = probs.dim();
                        let vf = E::of_f64(v as f64);
                        let one = E::one();
                        let mut gl = Array2::zeros((m, v));
                        for (i, label) in labels.iter().enumerate() {
                            let Some(y) = label else { continue };
                            for j in 0..v {
                                let q = if j == *y {
                                    one - *smoothing + *smoothing / vf
                                } else {
                                    *smoothing / vf
                                };
                                gl[[i, j]] = (probs[[i, j]] - q) * gs;
                            }
                        }
                        accumulate(&mut left[logits.0], gl);
                    }
                }
                Op::Sum(a) => {
                    if left[a.0].requires_grad {
                        let ga = Array2::from_elem(left[a.0].value.dim(), g[[0, 0]]);
                        accumulate(&mut left[a.0], ga);
                    }
                }
                Op::Block { x, r0, c0 } => {
                    if left[x.0].requires_grad {
                        let (gr, gc) = g.dim();
                        let mut gx = Array2::zeros(left[x.0].value.dim());
                        gx.slice_mut(s![*r0..r0 + gr, *c0..c0 + gc]).assign(g);
                        accumulate(&mut left[x.0], gx);
                    }
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let g = g.clone();
                    let mut r = 0;
                    for p in parts {
                        let rows = left[p.0].value.nrows();
                        if left[p.0].requires_grad {
                            let gp = g.slice(s![r..r + rows, ..]).to_owned();
                            accumulate(&mut left[p.0], gp);
                        }
                        r += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let g = g.clone();
                    let mut c = 0;
                    for p in parts {
                        let cols = left[p.0].value.ncols();
                        if left[p.0].requires_grad {
                            let gp = g.slice(s![.., c..c + cols]).to_owned();
                            accumulate(&mut left[p.0], gp);
                        }
                        c += cols;
                    }
                }
            }
        }
        Ok(())
    }
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate<E: Element>(node: &mut Node<E>, delta: Array2<E>) {
    match &mut node.grad {
        Some(g) => *g += &delta,
        None => node.grad = Some(delta),
    }
}

/// Sum a gradient down to a broadcast operand's shape ([1 x n] rows).
fn reduce_to_shape<E: Element>(g: &Array2<E>, target: (usize, usize)) -> Array2<E> {
    if g.dim() == target {
        g.clone()
    } else {
        g.sum_axis(Axis(0)).insert_axis(Axis(0))
    }
}

fn gelu_fwd<E: Element>(x: E) -> E {
    let c = E::of_f64(0.7978845608028654); // sqrt(2/pi)
    let a = E::of_f64(0.044715);
    let half = E::of_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (E::one() + u.tanh())
}

fn gelu_bwd<E: Element>(x: E) -> E {
    let c = E::of_f64(0.7978845608028654);
    let a = E::of_f64(0.044715);
    let half = E::of_f64(0.5);
    let three = E::of_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = E::one() - t * t;
    half * (E::one() + t) + half * x * sech2 * c * (E::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(array![[0.0, 0.0]]);
        let y = g.softmax_rows(x);
        assert_eq!(g.value(y), &array![[0.5, 0.5]]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(array![[1.0, -2.0, 0.3], [100.0, 99.0, -50.0]]);
        let y = g.softmax_rows(x);
        for row in g.value(y).axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(array![[3.0, 3.0, 3.0, 3.0]]);
        let y = g.layer_norm_rows(x);
        assert!(g.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let v = 11;
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Array2::zeros((3, v)));
        let labels = vec![Some(0), Some(5), Some(10)];
        let loss = g.cross_entropy(x, &labels, 0.0).unwrap();
        let got = g.scalar(loss).unwrap();
        assert!((got - (v as f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_all_ignored_errors() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(Array2::zeros((2, 4)));
        let err = g.cross_entropy(x, &[None, None], 0.0).unwrap_err();
        assert!(err.to_string().contains("ignored"));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(array![[1.0, 2.0, 3.0]], true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &array![[1.0, 1.0, 1.0]]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(array![[1.0, 2.0]], true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &array![[2.0, 4.0]]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(array![[1.0, 2.0]], true);
        let y = g.relu(x);
        let err = g.backward(y).unwrap_err();
        assert!(err.to_string().contains("[1 x 1]"));
    }

    #[test]
    fn matmul_shape_mismatch_names_op_and_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Array2::zeros((2, 3)));
        let b = g.constant(Array2::zeros((4, 2)));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("3") && msg.contains("4"));
    }

    #[test]
    fn dropout_p_zero_is_identity() {
        let mut g: Graph<f64> = Graph::with_dropout(7);
        let x = g.leaf(array![[1.0, -2.0, 3.0]], true);
        let y = g.dropout(x, 0.0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(array![[1.0, 2.0]]);
        let y = g.dropout(x, 0.5).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_preserves_expectation() {
        let n = 20_000;
        let mut g: Graph<f32> = Graph::with_dropout(13);
        let x = g.constant(Array2::from_elem((1, n), 1.0));
        let y = g.dropout(x, 0.3).unwrap();
        let mean = g.value(y).sum() / n as f32;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn dropout_same_seed_same_mask() {
        let make = |seed| {
            let mut g: Graph<f32> = Graph::with_dropout(seed);
            let x = g.constant(Array2::from_elem((4, 8), 1.0));
            let y = g.dropout(x, 0.5).unwrap();
            g.value(y).clone()
        };
        assert_eq!(make(3), make(3));
        assert_ne!(make(3), make(4));
    }

    #[test]
    fn block_and_concat_roundtrip() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let top = g.block(x, 0, 1, 0, 2).unwrap();
        let rest = g.block(x, 1, 3, 0, 2).unwrap();
        let back = g.concat_rows(&[top, rest]).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn embedding_lookup_gathers_and_scatters() {
        let mut g: Graph<f64> = Graph::new();
        let table = g.leaf(array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]], true);
        let e = g.embedding_lookup(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(e), &array![[2.0, 2.0], [1.0, 0.0], [2.0, 2.0]]);
        let s = g.sum(e);
        g.backward(s).unwrap();
        // row 2 was used twice, row 1 never
        assert_eq!(g.grad(table).unwrap(), &array![[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]]);
    }

    #[test]
    fn embedding_lookup_rejects_out_of_range() {
        let mut g: Graph<f64> = Graph::new();
        let table = g.constant(Array2::zeros((3, 2)));
        assert!(g.embedding_lookup(table, &[3]).is_err());
    }

    #[test]
    fn no_grad_flows_into_constants() {
        let mut g: Graph<f64> = Graph::new();
        let frozen = g.constant(array![[1.0, 2.0]]);
        let w = g.leaf(array![[3.0], [4.0]], true);
        let y = g.matmul(frozen, w).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(frozen).is_none());
        assert!(g.grad(w).is_some());
    }

    #[test]
    fn smoothed_cross_entropy_reaches_analytic_floor() {
        // With p = q the smoothed loss equals the entropy of the smoothed
        // target distribution, its minimum.
        let v = 7;
        let eps = 0.1;
        let y = 2;
        let q: Vec<f64> = (0..v)
            .map(|j| if j == y { 1.0 - eps + eps / v as f64 } else { eps / v as f64 })
            .collect();
        let floor: f64 = -q.iter().map(|&p| p * p.ln()).sum::<f64>();

        let mut g: Graph<f64> = Graph::new();
        let logits = g.constant(Array2::from_shape_vec((1, v), q.iter().map(|p| p.ln()).collect()).unwrap());
        let loss = g.cross_entropy(logits, &[Some(y)], eps).unwrap();
        assert!((g.scalar(loss).unwrap() - floor).abs() < 1e-9);

        // A sharp one-hot sits above the floor.
        let mut g2: Graph<f64> = Graph::new();
        let mut sharp = Array2::zeros((1, v));
        sharp[[0, y]] = 25.0;
        let logits2 = g2.constant(sharp);
        let loss2 = g2.cross_entropy(logits2, &[Some(y)], eps).unwrap();
        assert!(g2.scalar(loss2).unwrap() > floor);
    }
}
