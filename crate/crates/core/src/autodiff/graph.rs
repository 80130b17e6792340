//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are bound
//! by reference from a [`ParamStore`], so building a graph never copies
//! weights. Vectors are represented as `1 × n` row matrices throughout.

use std::borrow::Cow;

use ndarray::{concatenate, s, Array2, Axis};

use super::params::{GradStore, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Elu(Var),
    Exp(Var),
    Ln(Var),
    Floor(Var, f64),
    SoftmaxRows(Var),
    SoftmaxAll(Var),
    LogSoftmaxRows(Var),
    NormalizeAll(Var),
    SumAll(Var),
    SumRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Row(Var, usize),
    Gather(Var, Vec<usize>),
    BlockSum(Var, usize),
    SoftmaxBlocks(Var, usize),
}

struct Node<'p> {
    value: Cow<'p, Mat>,
    op: Op,
}

/// Computation tape. Nodes are appended in topological order.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    store: Option<&'p ParamStore>,
    bound: Vec<Option<Var>>,
}

/// Gradients of a scalar output with respect to every node of a graph.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            store: None,
            bound: Vec::new(),
        }
    }

    /// Graph whose `param` lookups resolve against `store`.
    pub fn with_params(store: &'p ParamStore) -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            store: Some(store),
            bound: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'p, Mat>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Mat, op: Op) -> Var {
        self.push(Cow::Owned(value), op)
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push_owned(m, Op::Leaf)
    }

    pub fn constant_ref(&mut self, m: &'p Mat) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn row_vector(&mut self, xs: &[f64]) -> Var {
        self.constant(Array2::from_shape_vec((1, xs.len()), xs.to_vec()).expect("row shape"))
    }

    /// Bind the named parameter of the attached store. Panics on an unknown
    /// name: parameter names are fixed by the model constructors.
    pub fn param(&mut self, name: &str) -> Var {
        let store = self.store.expect("graph has no parameter store");
        let idx = store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        if let Some(v) = self.bound[idx] {
            return v;
        }
        let v = self.push(Cow::Borrowed(store.get_index(idx)), Op::Leaf);
        self.bound[idx] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn row_values(&self, v: Var) -> Vec<f64> {
        self.value(v).iter().copied().collect()
    }

    fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push_owned(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push_owned(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.value(a) + self.value(b);
        self.push_owned(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let out = self.value(a) - self.value(b);
        self.push_owned(out, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let out = self.value(a) * self.value(b);
        self.push_owned(out, Op::Mul(a, b))
    }

    /// `a (m×n) + row (1×n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row width mismatch");
        let out = self.value(a) + self.value(row);
        self.push_owned(out, Op::AddRow(a, row))
    }

    /// `a (m×n) ⊙ row (1×n)` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        assert_eq!(self.shape(a).1, self.shape(row).1, "mul_row width mismatch");
        let out = self.value(a) * self.value(row);
        self.push_owned(out, Op::MulRow(a, row))
    }

    /// `a · s` for a `1×1` node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.shape(s), (1, 1));
        let k = self.item(s);
        let out = self.value(a) * k;
        self.push_owned(out, Op::MulScalar(a, s))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push_owned(out, Op::Scale(a, c))
    }

    /// `a + c` elementwise.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push_owned(out, Op::Offset(a))
    }

    /// `1 − a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.offset(neg, 1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::tanh);
        self.push_owned(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push_owned(out, Op::Sigmoid(a))
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(elu);
        self.push_owned(out, Op::Elu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push_owned(out, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push_owned(out, Op::Ln(a))
    }

    /// `max(a, eps)`; the gradient is passed only where `a > eps`.
    pub fn floor(&mut self, a: Var, eps: f64) -> Var {
        let out = self.value(a).mapv(|x| x.max(eps));
        self.push_owned(out, Op::Floor(a, eps))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            softmax_in_place(row.as_slice_mut().expect("contiguous row"));
        }
        self.push_owned(out, Op::SoftmaxRows(a))
    }

    /// Softmax over every cell of the matrix jointly.
    pub fn softmax_all(&mut self, a: Var) -> Var {
        let mut out = self.value(a).as_standard_layout().into_owned();
        softmax_in_place(out.as_slice_mut().expect("standard layout"));
        self.push_owned(out, Op::SoftmaxAll(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        self.push_owned(out, Op::LogSoftmaxRows(a))
    }

    /// Divide every cell by the total sum.
    pub fn normalize_all(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let out = self.value(a) / total;
        self.push_owned(out, Op::NormalizeAll(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push_owned(Array2::from_elem((1, 1), total), Op::SumAll(a))
    }

    /// Column sums: `m×n → 1×n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push_owned(out, Op::SumRows(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.shape(a).0 as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / m)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push_owned(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows col mismatch");
        self.push_owned(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let out = self.value(a).slice(s![i..i + 1, ..]).to_owned();
        self.push_owned(out, Op::Row(a, i))
    }

    /// Select rows by index (embedding lookup).
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), idx);
        self.push_owned(out, Op::Gather(a, idx.to_vec()))
    }

    /// Sum contiguous column blocks of width `block`: `m×(k·block) → m×k`.
    pub fn block_sum(&mut self, a: Var, block: usize) -> Var {
        let (m, n) = self.shape(a);
        assert!(block > 0 && n % block == 0, "block_sum width mismatch");
        let src = self.value(a);
        let out = Array2::from_shape_fn((m, n / block), |(i, k)| {
            src.slice(s![i, k * block..(k + 1) * block]).sum()
        });
        self.push_owned(out, Op::BlockSum(a, block))
    }

    /// Softmax within each contiguous column block of width `block`.
    pub fn softmax_blocks(&mut self, a: Var, block: usize) -> Var {
        let (_, n) = self.shape(a);
        assert!(block > 0 && n % block == 0, "softmax_blocks width mismatch");
        let mut out = self.value(a).as_standard_layout().into_owned();
        for mut row in out.rows_mut() {
            for chunk in row.as_slice_mut().expect("contiguous row").chunks_mut(block) {
                softmax_in_place(chunk);
            }
        }
        self.push_owned(out, Op::SoftmaxBlocks(a, block))
    }

    /// `Σ p ln p − Σ p ln q` for a constant distribution `p` and a node `q`
    /// already floored away from zero.
    pub fn kl_from_const(&mut self, p: &Mat, q: Var) -> Var {
        let neg_entropy: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum();
        let p_node = self.constant(p.clone());
        let lq = self.ln(q);
        let cross = self.mul(p_node, lq);
        let cross = self.sum_all(cross);
        let neg = self.scale(cross, -1.0);
        self.offset(neg, neg_entropy)
    }

    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Array2::ones((1, 1)));
        for id in (0..=output.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let y = &*node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = gy.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&gy);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, gy.t().to_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, gy.clone());
                    acc(&mut grads, *b, gy.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&gy);
                    acc(&mut grads, *a, gy.clone());
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &gy * self.value(*b));
                    acc(&mut grads, *b, &gy * self.value(*a));
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *r, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, gy.clone());
                }
                Op::MulRow(a, r) => {
                    let gr = (&gy * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, &gy * self.value(*r));
                    acc(&mut grads, *r, gr);
                }
                Op::MulScalar(a, sv) => {
                    let k = self.item(*sv);
                    let gs = (&gy * self.value(*a)).sum();
                    acc(&mut grads, *a, &gy * k);
                    acc(&mut grads, *sv, Array2::from_elem((1, 1), gs));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, &gy * *c),
                Op::Offset(a) => acc(&mut grads, *a, gy.clone()),
                Op::Tanh(a) => acc(&mut grads, *a, &gy * &y.mapv(|t| 1.0 - t * t)),
                Op::Sigmoid(a) => acc(&mut grads, *a, &gy * &y.mapv(|t| t * (1.0 - t))),
                Op::Elu(a) => {
                    let x = self.value(*a);
                    let mut g = gy.clone();
                    ndarray::Zip::from(&mut g)
                        .and(x)
                        .and(y)
                        .for_each(|g, &x, &y| *g *= if x > 0.0 { 1.0 } else { y + 1.0 });
                    acc(&mut grads, *a, g);
                }
                Op::Exp(a) => acc(&mut grads, *a, &gy * y),
                Op::Ln(a) => acc(&mut grads, *a, &gy / self.value(*a)),
                Op::Floor(a, eps) => {
                    let x = self.value(*a);
                    let mut g = gy.clone();
                    ndarray::Zip::from(&mut g).and(x).for_each(|g, &x| {
                        if x <= *eps {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let mut g = &gy * y;
                    for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                        let dot = grow.sum();
                        grow.zip_mut_with(&yrow, |gi, &yi| *gi -= yi * dot);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::SoftmaxAll(a) => {
                    let dot = (&gy * y).sum();
                    let g = y * &(&gy - dot);
                    acc(&mut grads, *a, g);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut g = gy.clone();
                    for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                        let total = grow.sum();
                        grow.zip_mut_with(&yrow, |gi, &li| *gi -= li.exp() * total);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::NormalizeAll(a) => {
                    let total = self.value(*a).sum();
                    let dot = (&gy * y).sum();
                    acc(&mut grads, *a, (&gy - dot) / total);
                }
                Op::SumAll(a) => {
                    let k = gy[[0, 0]];
                    acc(&mut grads, *a, Array2::from_elem(self.shape(*a), k));
                }
                Op::SumRows(a) => {
                    let (m, _) = self.shape(*a);
                    let g = gy.broadcast((m, gy.ncols())).expect("broadcast").to_owned();
                    acc(&mut grads, *a, g);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        acc(&mut grads, p, gy.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        acc(&mut grads, p, gy.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::Row(a, i) => {
                    let mut g = Array2::zeros(self.shape(*a));
                    g.row_mut(*i).assign(&gy.row(0));
                    acc(&mut grads, *a, g);
                }
                Op::Gather(a, idx) => {
                    let mut g = Array2::zeros(self.shape(*a));
                    for (r, &src) in idx.iter().enumerate() {
                        let mut dst = g.row_mut(src);
                        dst += &gy.row(r);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::SoftmaxBlocks(a, block) => {
                    let mut g = (&gy * y).as_standard_layout().into_owned();
                    for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                        let gs = grow.as_slice_mut().expect("contiguous row");
                        for (k, chunk) in gs.chunks_mut(*block).enumerate() {
                            let dot: f64 = chunk.iter().sum();
                            for (j, gi) in chunk.iter_mut().enumerate() {
                                *gi -= yrow[k * block + j] * dot;
                            }
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::BlockSum(a, block) => {
                    let (m, n) = self.shape(*a);
                    let g = Array2::from_shape_fn((m, n), |(i, j)| gy[[i, j / block]]);
                    acc(&mut grads, *a, g);
                }
            }
            grads[id] = Some(gy);
        }
        Gradients { grads }
    }

    /// Gradients of every bound parameter, indexed like the store.
    pub fn param_grads(&self, grads: &Gradients) -> GradStore {
        let store = self.store.expect("graph has no parameter store");
        let mut out = GradStore::zeros_like(store);
        for (idx, bound) in self.bound.iter().enumerate() {
            if let Some(v) = bound {
                if let Some(g) = grads.wrt(*v) {
                    out.add_at(idx, g);
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// Numerically stable softmax with max subtraction.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut out = xs.to_vec();
    softmax_in_place(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: impl Fn(&Mat) -> f64, x: &Mat) -> Mat {
        let h = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn check_unary(build: impl Fn(&mut Graph, Var) -> Var, x: Mat) {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let weights = Array2::from_shape_fn(x.dim(), |(i, j)| 0.3 + 0.1 * (i + 2 * j) as f64);
        let w = g.constant(weights.clone());
        let y = build(&mut g, v);
        // weighted so that softmax-like ops see a non-constant upstream gradient
        let y = if g.value(y).dim() == x.dim() { g.mul(y, w) } else { y };
        let y = g.sum_all(y);
        let grads = g.backward(y);
        let analytic = grads.wrt(v).unwrap().clone();
        let numeric = numeric_grad(
            |m| {
                let mut g = Graph::new();
                let v = g.constant(m.clone());
                let y = build(&mut g, v);
                let val = g.value(y);
                if val.dim() == weights.dim() {
                    (val * &weights).sum()
                } else {
                    val.sum()
                }
            },
            &x,
        );
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x = array![[0.3, -0.7, 1.1], [-1.4, 0.2, 0.9]];
        check_unary(|g, v| g.tanh(v), x.clone());
        check_unary(|g, v| g.sigmoid(v), x.clone());
        check_unary(|g, v| g.elu(v), x.clone());
        check_unary(|g, v| g.exp(v), x.clone());
        check_unary(|g, v| g.softmax_rows(v), x.clone());
        check_unary(|g, v| g.softmax_all(v), x.clone());
        check_unary(|g, v| g.log_softmax_rows(v), x.clone());
        check_unary(|g, v| g.block_sum(v, 3), x.clone());
        check_unary(|g, v| g.softmax_blocks(v, 3), x.clone());
        check_unary(|g, v| g.softmax_blocks(v, 2), array![[0.3, -0.7, 1.1, 0.2], [-1.4, 0.2, 0.9, 2.0]]);
        check_unary(|g, v| g.sum_rows(v), x.clone());
        check_unary(|g, v| g.transpose(v), x.clone());
        let pos = x.mapv(|v: f64| v.abs() + 0.1);
        check_unary(|g, v| g.ln(v), pos.clone());
        check_unary(|g, v| g.normalize_all(v), pos);
    }

    #[test]
    fn structural_ops_route_gradients() {
        let x = array![[0.3, -0.7], [-1.4, 0.2], [0.5, 0.5]];
        check_unary(|g, v| g.row(v, 1), x.clone());
        check_unary(|g, v| g.gather(v, &[2, 0, 2]), x.clone());
        check_unary(
            |g, v| {
                let r0 = g.row(v, 0);
                let r2 = g.row(v, 2);
                g.concat_cols(&[r0, r2])
            },
            x.clone(),
        );
        check_unary(
            |g, v| {
                let a = g.row(v, 0);
                let b = g.row(v, 2);
                g.concat_rows(&[a, b, v])
            },
            x,
        );
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let b = array![[0.5, -0.2], [0.1, 0.8]];
        check_unary(
            |g, v| {
                let c = g.constant(array![[0.5, -0.2], [0.1, 0.8]]);
                let m = g.matmul(v, c);
                let t = g.transpose(c);
                let m2 = g.matmul(t, v);
                let s = g.sub(m, m2);
                g.mul(s, v)
            },
            b.clone(),
        );
        check_unary(
            |g, v| {
                let r = g.row(v, 0);
                let a = g.add_row(v, r);
                g.mul_row(a, r)
            },
            b.clone(),
        );
        check_unary(
            |g, v| {
                let r = g.row(v, 1);
                let s = g.sum_all(r);
                let y = g.mul_scalar(v, s);
                g.scale(y, 0.7)
            },
            b,
        );
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let p = softmax(&[1000.0, 1000.0 + 3f64.ln()]);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn floor_blocks_gradient_below_epsilon() {
        let mut g = Graph::new();
        let x = g.constant(array![[1e-12, 0.5]]);
        let y = g.floor(x, 1e-8);
        let y = g.sum_all(y);
        let grads = g.backward(y);
        assert_eq!(grads.wrt(x).unwrap(), &array![[0.0, 1.0]]);
    }
}
