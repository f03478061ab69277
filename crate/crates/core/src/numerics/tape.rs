//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! Every operation appends one node holding its forward value, so node order
//! is a topological order and the backward sweep simply walks it in reverse.
//! Index-valued choices (Top-K selections, gathers) are baked into the op as
//! constants: gradients flow through the selected values, never through the
//! choice itself.

use super::matrix::{cosine, dot, gelu_grad, norm, Matrix, COSINE_EPS};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    NormalizeRows(Var),
    LogSumExp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>, usize),
    Gather(Var, Vec<(usize, usize)>, (usize, usize)),
    Cosine(Var, Var),
    PairCosine(Var, Var, Vec<(usize, usize)>, (usize, usize)),
    MixRows(Var, Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation plus the registry of trainable leaves.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

/// Gradients from one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Matrix {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
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

    /// Registers a trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        let v = self.leaf(value, true);
        self.params.push(v);
        v
    }

    /// Adds a leaf that receives no gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.get(0, 0)
    }

    fn leaf(&mut self, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = eval(&op, |v| &self.nodes[v.0].value)?;
        let needs_grad = inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    /// Scales row `r` of `a` by `col[r]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.push(Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.push(Op::AddScalar(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax(a))
    }

    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::NormalizeRows(a))
    }

    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSumExp(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::MeanRows(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        self.push(Op::GatherRows(a, idx))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.gather_rows(a, (start..start + len).collect())
    }

    /// Places row `i` of `a` at row `idx[i]` of a zero `rows x cols` matrix,
    /// summing rows that land on the same target.
    pub fn scatter_rows(&mut self, a: Var, idx: Vec<usize>, rows: usize) -> Result<Var> {
        self.push(Op::ScatterRows(a, idx, rows))
    }

    /// Reads `entries` (row, col) of `a` into a matrix of `shape`, row-major.
    pub fn gather(&mut self, a: Var, entries: Vec<(usize, usize)>, shape: (usize, usize)) -> Result<Var> {
        self.push(Op::Gather(a, entries, shape))
    }

    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Cosine(a, b))
    }

    /// Cosine similarity of `a[i]` and `b[j]` for each listed pair, laid out
    /// row-major into `shape`.
    pub fn pair_cosine(&mut self, a: Var, b: Var, pairs: Vec<(usize, usize)>, shape: (usize, usize)) -> Result<Var> {
        self.push(Op::PairCosine(a, b, pairs, shape))
    }

    /// `out[t] = sum_j weights[t, j] * src[idx[t * L + j]]` with `L = weights.cols`.
    pub fn mix_rows(&mut self, src: Var, weights: Var, idx: Vec<usize>) -> Result<Var> {
        self.push(Op::MixRows(src, weights, idx))
    }

    /// Recomputes every node with optional leaf overrides. Without overrides
    /// the result is bitwise identical to the recorded values.
    pub fn replay(&self, overrides: &[(Var, Matrix)]) -> Result<Tape> {
        let mut out = Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
            params: self.params.clone(),
        };
        for (i, node) in self.nodes.iter().enumerate() {
            let value = match node.op {
                Op::Leaf => match overrides.iter().find(|(v, _)| v.0 == i) {
                    Some((_, m)) => {
                        node.value.same_shape(m, "replay")?;
                        m.clone()
                    }
                    None => node.value.clone(),
                },
                ref op => eval(op, |v| &out.nodes[v.0].value)?,
            };
            out.nodes.push(Node {
                value,
                op: node.op.clone(),
                needs_grad: node.needs_grad,
            });
        }
        Ok(out)
    }

    /// Reverse sweep from a `1 x 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.nodes[loss.0].value.shape();
        if shape != (1, 1) {
            return Err(Error::Contract(format!("backward needs a scalar loss, got {}x{}", shape.0, shape.1)));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                for (input, contrib) in self.local_grads(node, &g)? {
                    accumulate(&mut grads[input.0], contrib);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn local_grads(&self, node: &Node, g: &Matrix) -> Result<Vec<(Var, Matrix)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.matmul(&val(*b).transpose())?));
                }
                if self.wants(*b) {
                    out.push((*b, val(*a).transpose().matmul(g)?));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.scale(-1.0)));
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.mul(val(*b))?));
                }
                if self.wants(*b) {
                    out.push((*b, g.mul(val(*a))?));
                }
            }
            Op::AddRow(a, row) => {
                out.push((*a, g.clone()));
                if self.wants(*row) {
                    let mut s = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in s.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    out.push((*row, s));
                }
            }
            Op::MulCol(a, col) => {
                if self.wants(*a) {
                    out.push((*a, g.mul_col(val(*col))?));
                }
                if self.wants(*col) {
                    let av = val(*a);
                    out.push((*col, Matrix::from_fn(g.rows(), 1, |r, _| dot(g.row(r), av.row(r)))));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.scale(*s))),
            Op::AddScalar(a, _) => out.push((*a, g.clone())),
            Op::Gelu(a) => {
                let x = val(*a);
                out.push((*a, g.zip_map(x, "gelu'", |gv, xv| gv * gelu_grad(xv))?));
            }
            Op::Sigmoid(a) => out.push((*a, g.zip_map(y, "sigmoid'", |gv, s| gv * s * (1.0 - s))?)),
            Op::Softmax(a) => {
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let inner = dot(g.row(r), y.row(r));
                    for c in 0..y.cols() {
                        d.set(r, c, y.get(r, c) * (g.get(r, c) - inner));
                    }
                }
                out.push((*a, d));
            }
            Op::NormalizeRows(a) => {
                let x = val(*a);
                let mut d = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let s: f64 = x.row(r).iter().sum();
                    let inner = dot(g.row(r), y.row(r));
                    for c in 0..y.cols() {
                        d.set(r, c, (g.get(r, c) - inner) / s);
                    }
                }
                out.push((*a, d));
            }
            Op::LogSumExp(a) => {
                let p = val(*a).softmax_rows();
                out.push((*a, Matrix::from_fn(p.rows(), p.cols(), |r, c| g.get(r, 0) * p.get(r, c))));
            }
            Op::Square(a) => out.push((*a, g.zip_map(val(*a), "square'", |gv, x| 2.0 * x * gv)?)),
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                out.push((*a, Matrix::filled(r, c, g.get(0, 0))));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                out.push((*a, Matrix::filled(r, c, g.get(0, 0) / (r * c) as f64)));
            }
            Op::MeanRows(a) => {
                let (r, c) = val(*a).shape();
                let n = r as f64;
                out.push((*a, Matrix::from_fn(r, c, |_, j| g.get(0, j) / n)));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = val(*p).rows();
                    if self.wants(*p) {
                        out.push((*p, g.slice_rows(start, len)?));
                    }
                    start += len;
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &v) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                out.push((*a, d));
            }
            Op::ScatterRows(a, idx, _) => out.push((*a, g.gather_rows(idx)?)),
            Op::Gather(a, entries, _) => {
                let (r, c) = val(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for (k, &(i, j)) in entries.iter().enumerate() {
                    d.data_mut()[i * c + j] += g.data()[k];
                }
                out.push((*a, d));
            }
            Op::Cosine(a, b) => {
                let pairs: Vec<(usize, usize)> = (0..y.rows())
                    .flat_map(|i| (0..y.cols()).map(move |j| (i, j)))
                    .collect();
                let (da, db) = pair_cosine_grads(val(*a), val(*b), &pairs, g);
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::PairCosine(a, b, pairs, _) => {
                let (da, db) = pair_cosine_grads(val(*a), val(*b), pairs, g);
                out.push((*a, da));
                out.push((*b, db));
            }
            Op::MixRows(src, w, idx) => {
                let s = val(*src);
                let wv = val(*w);
                let l = wv.cols();
                if self.wants(*w) {
                    out.push((*w, Matrix::from_fn(wv.rows(), l, |t, j| dot(g.row(t), s.row(idx[t * l + j])))));
                }
                if self.wants(*src) {
                    let mut d = Matrix::zeros(s.rows(), s.cols());
                    for t in 0..wv.rows() {
                        for j in 0..l {
                            let wt = wv.get(t, j);
                            for (o, &gv) in d.row_mut(idx[t * l + j]).iter_mut().zip(g.row(t)) {
                                *o += wt * gv;
                            }
                        }
                    }
                    out.push((*src, d));
                }
            }
        }
        Ok(out.into_iter().filter(|(v, _)| self.wants(*v)).collect())
    }
}

fn accumulate(slot: &mut Option<Matrix>, contrib: Matrix) {
    match slot {
        Some(acc) => acc
            .data_mut()
            .iter_mut()
            .zip(contrib.data())
            .for_each(|(a, c)| *a += c),
        None => *slot = Some(contrib),
    }
}

/// Gradients of `s = <a_i, b_j> / max(|a_i| |b_j|, eps)` summed over `pairs`,
/// with `g[k]` the upstream gradient of pair `k`.
fn pair_cosine_grads(a: &Matrix, b: &Matrix, pairs: &[(usize, usize)], g: &Matrix) -> (Matrix, Matrix) {
    let mut da = Matrix::zeros(a.rows(), a.cols());
    let mut db = Matrix::zeros(b.rows(), b.cols());
    for (k, &(i, j)) in pairs.iter().enumerate() {
        let gk = g.data()[k];
        if gk == 0.0 {
            continue;
        }
        let (ai, bj) = (a.row(i), b.row(j));
        let (na, nb) = (norm(ai), norm(bj));
        let d = dot(ai, bj);
        // below the clamp the denominator is constant
        let (q, ca, cb) = if na * nb > COSINE_EPS {
            let q = na * nb;
            (q, d * nb / (na * q * q), d * na / (nb * q * q))
        } else {
            (COSINE_EPS, 0.0, 0.0)
        };
        for c in 0..a.cols() {
            da.row_mut(i)[c] += gk * (bj[c] / q - ca * ai[c]);
            db.row_mut(j)[c] += gk * (ai[c] / q - cb * bj[c]);
        }
    }
    (da, db)
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b)
        | Op::MulCol(a, b)
        | Op::Cosine(a, b)
        | Op::PairCosine(a, b, ..)
        | Op::MixRows(a, b, _) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::AddScalar(a, _)
        | Op::Gelu(a)
        | Op::Sigmoid(a)
        | Op::Softmax(a)
        | Op::NormalizeRows(a)
        | Op::LogSumExp(a)
        | Op::Square(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::MeanRows(a)
        | Op::GatherRows(a, _)
        | Op::ScatterRows(a, ..)
        | Op::Gather(a, ..) => vec![*a],
        Op::ConcatRows(parts) => parts.clone(),
    }
}

fn eval<'a>(op: &Op, val: impl Fn(Var) -> &'a Matrix) -> Result<Matrix> {
    Ok(match op {
        Op::Leaf => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => val(*a).matmul(val(*b))?,
        Op::Add(a, b) => val(*a).add(val(*b))?,
        Op::Sub(a, b) => val(*a).sub(val(*b))?,
        Op::Mul(a, b) => val(*a).mul(val(*b))?,
        Op::AddRow(a, r) => val(*a).add_row(val(*r))?,
        Op::MulCol(a, c) => val(*a).mul_col(val(*c))?,
        Op::Scale(a, s) => val(*a).scale(*s),
        Op::AddScalar(a, s) => val(*a).add_scalar(*s),
        Op::Gelu(a) => val(*a).gelu(),
        Op::Sigmoid(a) => val(*a).sigmoid(),
        Op::Softmax(a) => val(*a).softmax_rows(),
        Op::NormalizeRows(a) => val(*a).normalize_rows(),
        Op::LogSumExp(a) => val(*a).logsumexp_rows(),
        Op::Square(a) => val(*a).map(|x| x * x),
        Op::Sum(a) => Matrix::scalar(val(*a).sum()),
        Op::Mean(a) => {
            let m = val(*a);
            Matrix::scalar(m.sum() / m.len() as f64)
        }
        Op::MeanRows(a) => val(*a).mean_rows(),
        Op::ConcatRows(parts) => {
            let ms: Vec<&Matrix> = parts.iter().map(|p| val(*p)).collect();
            Matrix::concat_rows(&ms)?
        }
        Op::GatherRows(a, idx) => val(*a).gather_rows(idx)?,
        Op::ScatterRows(a, idx, rows) => {
            let src = val(*a);
            if idx.len() != src.rows() || idx.iter().any(|&i| i >= *rows) {
                return Err(Error::Param {
                    op: "scatter_rows",
                    msg: format!("{} targets for {} rows into {rows}", idx.len(), src.rows()),
                });
            }
            let mut out = Matrix::zeros(*rows, src.cols());
            for (k, &i) in idx.iter().enumerate() {
                for (o, &v) in out.row_mut(i).iter_mut().zip(src.row(k)) {
                    *o += v;
                }
            }
            out
        }
        Op::Gather(a, entries, (r, c)) => {
            let src = val(*a);
            if entries.len() != r * c || entries.iter().any(|&(i, j)| i >= src.rows() || j >= src.cols()) {
                return Err(Error::Param {
                    op: "gather",
                    msg: format!("{} entries for a {r}x{c} output from {}x{}", entries.len(), src.rows(), src.cols()),
                });
            }
            Matrix::new(*r, *c, entries.iter().map(|&(i, j)| src.get(i, j)).collect())?
        }
        Op::Cosine(a, b) => val(*a).cosine_sim(val(*b))?,
        Op::PairCosine(a, b, pairs, (r, c)) => {
            let (am, bm) = (val(*a), val(*b));
            if am.cols() != bm.cols() {
                return Err(Error::shape("pair_cosine", am.shape(), bm.shape()));
            }
            if pairs.len() != r * c || pairs.iter().any(|&(i, j)| i >= am.rows() || j >= bm.rows()) {
                return Err(Error::Param {
                    op: "pair_cosine",
                    msg: format!("{} pairs for a {r}x{c} output", pairs.len()),
                });
            }
            Matrix::new(*r, *c, pairs.iter().map(|&(i, j)| cosine(am.row(i), bm.row(j))).collect())?
        }
        Op::MixRows(src, w, idx) => {
            let (s, wv) = (val(*src), val(*w));
            let l = wv.cols();
            if idx.len() != wv.rows() * l || idx.iter().any(|&i| i >= s.rows()) {
                return Err(Error::Param {
                    op: "mix_rows",
                    msg: format!("{} indices for {}x{} weights", idx.len(), wv.rows(), l),
                });
            }
            let mut out = Matrix::zeros(wv.rows(), s.cols());
            for t in 0..wv.rows() {
                for j in 0..l {
                    let wt = wv.get(t, j);
                    let row = s.row(idx[t * l + j]);
                    for (o, &v) in out.row_mut(t).iter_mut().zip(row) {
                        *o += wt * v;
                    }
                }
            }
            out
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
    }

    /// Checks d(loss)/d(param) for every input against central differences.
    /// `build` maps the param leaves to a scalar loss.
    fn check(inputs: Vec<Matrix>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let loss = build(&mut tape, &vars).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (k, m) in inputs.iter().enumerate() {
            let numeric = finite_diff_grad(
                |x| {
                    let mut t = Tape::new();
                    let mut vs = Vec::new();
                    for (i, orig) in inputs.iter().enumerate() {
                        let v = if i == k { Matrix::new(orig.rows(), orig.cols(), x.to_vec()).unwrap() } else { orig.clone() };
                        vs.push(t.param(v));
                    }
                    let l = build(&mut t, &vs).unwrap();
                    t.scalar(l)
                },
                m.data(),
                1e-5,
            );
            let analytic = grads.wrt(vars[k]);
            for (a, n) in analytic.data().iter().zip(&numeric) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(rel < 1e-4, "input {k}: analytic {a} numeric {n}");
            }
        }
    }

    #[test]
    fn sum_gives_ones_and_square_gives_2m() {
        let m = Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]);
        let mut t = Tape::new();
        let v = t.param(m.clone());
        let s = t.sum(v).unwrap();
        assert_eq!(t.backward(s).unwrap().wrt(v), Matrix::filled(2, 2, 1.0));

        let mut t = Tape::new();
        let v = t.param(m.clone());
        let sq = t.square(v).unwrap();
        let s = t.sum(sq).unwrap();
        assert_eq!(t.backward(s).unwrap().wrt(v), m.scale(2.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let v = t.param(Matrix::zeros(2, 2));
        assert!(matches!(t.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_param_has_zero_gradient() {
        let mut t = Tape::new();
        let a = t.param(Matrix::filled(1, 2, 1.0));
        let b = t.param(Matrix::filled(2, 2, 1.0));
        let s = t.sum(a).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(b).is_none());
        assert_eq!(g.wrt(b), Matrix::zeros(2, 2));
    }

    #[test]
    fn replay_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new();
        let a = t.param(random(3, 4, &mut rng));
        let b = t.constant(random(4, 2, &mut rng));
        let m = t.matmul(a, b).unwrap();
        let s = t.softmax_rows(m).unwrap();
        let g = t.gelu(s).unwrap();
        let out = t.mean(g).unwrap();
        let r = t.replay(&[]).unwrap();
        for i in 0..t.len() {
            assert_eq!(t.nodes[i].value, r.nodes[i].value);
        }
        let r2 = t.replay(&[(a, Matrix::zeros(3, 4))]).unwrap();
        assert_ne!(r2.scalar(out), t.scalar(out));
        assert!(t.replay(&[(a, Matrix::zeros(1, 1))]).is_err());
    }

    #[test]
    fn grad_matmul_add_row_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        check(vec![random(3, 4, &mut rng), random(4, 2, &mut rng), random(1, 2, &mut rng)], |t, v| {
            let m = t.matmul(v[0], v[1])?;
            let m = t.add_row(m, v[2])?;
            let m = t.gelu(m)?;
            let m = t.square(m)?;
            t.sum(m)
        });
    }

    #[test]
    fn grad_elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        check(vec![random(2, 3, &mut rng), random(2, 3, &mut rng)], |t, v| {
            let a = t.mul(v[0], v[1])?;
            let b = t.sub(a, v[1])?;
            let c = t.scale(b, 0.7)?;
            let d = t.add_scalar(c, -0.2)?;
            let e = t.sigmoid(d)?;
            let f = t.add(e, v[0])?;
            let f = t.square(f)?;
            t.mean(f)
        });
    }

    #[test]
    fn grad_softmax_normalize_logsumexp() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = random(3, 4, &mut rng);
        check(vec![random(3, 4, &mut rng)], move |t, v| {
            let s = t.softmax_rows(v[0])?;
            let n = t.normalize_rows(s)?;
            let c = t.constant(w.clone());
            let p = t.mul(n, c)?;
            let l = t.logsumexp_rows(v[0])?;
            let l = t.square(l)?;
            let a = t.sum(p)?;
            let b = t.sum(l)?;
            t.add(a, b)
        });
    }

    #[test]
    fn grad_row_plumbing() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        check(vec![random(4, 3, &mut rng), random(2, 3, &mut rng), random(3, 1, &mut rng)], |t, v| {
            let cat = t.concat_rows(&[v[0], v[1]])?;
            let g = t.gather_rows(cat, vec![5, 0, 0, 3])?;
            let s = t.slice_rows(g, 1, 3)?;
            let m = t.mul_col(s, v[2])?;
            let sc = t.scatter_rows(m, vec![1, 1, 4], 5)?;
            let mr = t.mean_rows(sc)?;
            let sq = t.square(mr)?;
            let e = t.gather(cat, vec![(0, 1), (5, 2)], (2, 1))?;
            let e = t.square(e)?;
            let a = t.sum(sq)?;
            let b = t.sum(e)?;
            t.add(a, b)
        });
    }

    #[test]
    fn grad_cosine_and_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w = random(3, 5, &mut rng);
        check(vec![random(3, 4, &mut rng), random(5, 4, &mut rng)], move |t, v| {
            let s = t.cosine_sim(v[0], v[1])?;
            let c = t.constant(w.clone());
            let p = t.mul(s, c)?;
            let pc = t.pair_cosine(v[0], v[1], vec![(0, 1), (2, 4), (1, 1), (2, 0)], (2, 2))?;
            let wts = t.softmax_rows(pc)?;
            let mixed = t.mix_rows(v[1], wts, vec![1, 4, 1, 0])?;
            let mixed = t.square(mixed)?;
            let a = t.sum(p)?;
            let b = t.sum(mixed)?;
            t.add(a, b)
        });
    }

    #[test]
    fn gather_shape_errors() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::zeros(2, 2));
        assert!(t.gather(a, vec![(0, 0)], (2, 1)).is_err());
        assert!(t.gather(a, vec![(2, 0)], (1, 1)).is_err());
        assert!(t.scatter_rows(a, vec![0, 3], 3).is_err());
    }
}
