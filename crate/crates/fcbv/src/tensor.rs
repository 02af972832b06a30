//! Minimal reverse-mode automatic differentiation over `ndarray` matrices.
//!
//! Everything is double precision and single threaded, which keeps gradient
//! checks tight (central differences agree to ~1e-8 relative) and makes whole
//! pipeline runs bitwise reproducible. Values are always 2-d: a point cloud
//! batch is `n x c`, a bias is `1 x c`, a scalar loss is `1 x 1`.
//!
//! Gradients are allocated lazily during the backward sweep, so inference-only
//! tapes pay nothing for them.

use std::rc::Rc;

use ndarray::{Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TId(usize);

enum Op {
    Leaf,
    MatMul(TId, TId),
    /// x (n x m) + broadcast bias (1 x m)
    AddBias(TId, TId),
    Add(TId, TId),
    Sub(TId, TId),
    MulElem(TId, TId),
    Scale(TId, f64),
    Relu(TId),
    Sigmoid(TId),
    ConcatCols(Vec<TId>),
    GatherRows(TId, Rc<Vec<usize>>),
    /// out (k x 1), out[k] = x[rows[k], cols[k]]
    GatherCells(TId, Rc<Vec<(usize, usize)>>),
    /// Segment s covers input rows offsets[s]..offsets[s+1]; column-wise max.
    /// argmax holds the winning input row per (segment, col), flattened.
    SegmentMax(TId, Rc<Vec<usize>>, Vec<usize>),
    /// out[i] = sum_j w[i][j] * x[idx[i][j]]  (weights are constants)
    Interp(TId, Rc<Vec<[usize; 3]>>, Rc<Vec<[f64; 3]>>),
    /// Column-wise max over all rows -> 1 x m; argmax row per column.
    GlobalMaxRows(TId, Vec<usize>),
    SumAll(TId),
    MeanAll(TId),
    Reshape(TId),
    /// out (n x 1), out[i] = dot(a[i], b[i])
    RowDot(TId, TId),
    /// Rows rescaled to unit Euclidean norm; saved norms for backward.
    RowNormalize(TId, Vec<f64>),
    /// Elementwise binary cross entropy with logits against a constant target.
    BceWithLogits(TId, Rc<Array2<f64>>),
    /// BCE weighted by W = wmin + sigmoid(x)*(wmax-wmin), W not differentiated.
    DynWeightedBce(TId, Rc<Array2<f64>>, f64, f64),
    /// Rows are logit vectors; out (n x 1) of weighted CE losses vs targets.
    CrossEntropyRows(TId, Rc<Vec<usize>>, Rc<Vec<f64>>),
}

struct Node {
    value: Array2<f64>,
    grad: Option<Array2<f64>>,
    op: Op,
}

/// A single forward computation and (optionally) its backward sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable elementwise BCE-with-logits.
fn bce_with_logits(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (1.0 + (-x.abs()).exp()).ln()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> TId {
        self.nodes.push(Node { value, grad: None, op });
        TId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: TId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: TId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[[0, 0]]
    }

    /// Gradient of the last `backward` target w.r.t. this node (zeros if the
    /// node did not participate).
    pub fn grad(&self, id: TId) -> Array2<f64> {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => Array2::zeros(self.nodes[id.0].value.dim()),
        }
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> TId {
        self.push(value, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, v: f64) -> TId {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn matmul(&mut self, a: TId, b: TId) -> TId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_bias(&mut self, x: TId, bias: TId) -> TId {
        debug_assert_eq!(self.value(bias).nrows(), 1);
        let v = self.value(x) + self.value(bias);
        self.push(v, Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: TId, b: TId) -> TId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TId, b: TId) -> TId {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul_elem(&mut self, a: TId, b: TId) -> TId {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::MulElem(a, b))
    }

    pub fn scale(&mut self, x: TId, c: f64) -> TId {
        let v = self.value(x) * c;
        self.push(v, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: TId) -> TId {
        let v = self.value(x).mapv(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid_node(&mut self, x: TId) -> TId {
        let v = self.value(x).mapv(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn concat_cols(&mut self, parts: &[TId]) -> TId {
        let n = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut v = Array2::zeros((n, total));
        let mut col = 0;
        for &p in parts {
            let pv = self.value(p);
            debug_assert_eq!(pv.nrows(), n);
            v.slice_mut(ndarray::s![.., col..col + pv.ncols()]).assign(pv);
            col += pv.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, x: TId, rows: Rc<Vec<usize>>) -> TId {
        let xv = self.value(x);
        let mut v = Array2::zeros((rows.len(), xv.ncols()));
        for (out_r, &src) in rows.iter().enumerate() {
            v.row_mut(out_r).assign(&xv.row(src));
        }
        self.push(v, Op::GatherRows(x, rows))
    }

    pub fn gather_cells(&mut self, x: TId, cells: Rc<Vec<(usize, usize)>>) -> TId {
        let xv = self.value(x);
        let mut v = Array2::zeros((cells.len(), 1));
        for (k, &(r, c)) in cells.iter().enumerate() {
            v[[k, 0]] = xv[[r, c]];
        }
        self.push(v, Op::GatherCells(x, cells))
    }

    /// `offsets` has one more entry than there are segments; segment `s`
    /// covers rows `offsets[s]..offsets[s+1]` and must be non-empty.
    pub fn segment_max(&mut self, x: TId, offsets: Rc<Vec<usize>>) -> TId {
        let xv = self.value(x);
        let segs = offsets.len() - 1;
        let cols = xv.ncols();
        let mut v = Array2::zeros((segs, cols));
        let mut argmax = vec![0usize; segs * cols];
        for s in 0..segs {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            debug_assert!(hi > lo, "empty segment {s}");
            for c in 0..cols {
                let mut best = xv[[lo, c]];
                let mut best_r = lo;
                for r in lo + 1..hi {
                    if xv[[r, c]] > best {
                        best = xv[[r, c]];
                        best_r = r;
                    }
                }
                v[[s, c]] = best;
                argmax[s * cols + c] = best_r;
            }
        }
        self.push(v, Op::SegmentMax(x, offsets, argmax))
    }

    pub fn interp(
        &mut self,
        x: TId,
        idx: Rc<Vec<[usize; 3]>>,
        w: Rc<Vec<[f64; 3]>>,
    ) -> TId {
        let xv = self.value(x);
        let mut v = Array2::zeros((idx.len(), xv.ncols()));
        for (i, (ids, ws)) in idx.iter().zip(w.iter()).enumerate() {
            for j in 0..3 {
                let src = xv.row(ids[j]);
                let mut dst = v.row_mut(i);
                dst.scaled_add(ws[j], &src);
            }
        }
        self.push(v, Op::Interp(x, idx, w))
    }

    pub fn global_max_rows(&mut self, x: TId) -> TId {
        let xv = self.value(x);
        let cols = xv.ncols();
        let mut v = Array2::zeros((1, cols));
        let mut argmax = vec![0usize; cols];
        for c in 0..cols {
            let mut best = xv[[0, c]];
            let mut best_r = 0;
            for r in 1..xv.nrows() {
                if xv[[r, c]] > best {
                    best = xv[[r, c]];
                    best_r = r;
                }
            }
            v[[0, c]] = best;
            argmax[c] = best_r;
        }
        self.push(v, Op::GlobalMaxRows(x, argmax))
    }

    pub fn sum_all(&mut self, x: TId) -> TId {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        self.push(v, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: TId) -> TId {
        let n = self.value(x).len() as f64;
        let v = Array2::from_elem((1, 1), self.value(x).sum() / n);
        self.push(v, Op::MeanAll(x))
    }

    pub fn reshape(&mut self, x: TId, shape: (usize, usize)) -> TId {
        let xv = self.value(x);
        debug_assert_eq!(xv.len(), shape.0 * shape.1);
        let flat: Vec<f64> = xv.iter().copied().collect();
        let v = Array2::from_shape_vec(shape, flat).expect("reshape size mismatch");
        self.push(v, Op::Reshape(x))
    }

    /// L2-normalizes each row. Rows with near-zero norm are left unscaled.
    pub fn row_normalize(&mut self, x: TId) -> TId {
        let xv = self.value(x);
        let mut v = xv.clone();
        let mut norms = Vec::with_capacity(xv.nrows());
        for mut row in v.rows_mut() {
            let n = row.dot(&row).sqrt();
            let safe = if n < 1e-12 { 1.0 } else { n };
            row /= safe;
            norms.push(safe);
        }
        self.push(v, Op::RowNormalize(x, norms))
    }

    pub fn row_dot(&mut self, a: TId, b: TId) -> TId {
        let (av, bv) = (self.value(a), self.value(b));
        debug_assert_eq!(av.dim(), bv.dim());
        let mut v = Array2::zeros((av.nrows(), 1));
        for i in 0..av.nrows() {
            v[[i, 0]] = av.row(i).dot(&bv.row(i));
        }
        self.push(v, Op::RowDot(a, b))
    }

    pub fn bce_with_logits(&mut self, x: TId, target: Rc<Array2<f64>>) -> TId {
        let xv = self.value(x);
        debug_assert_eq!(xv.dim(), target.dim());
        let mut v = Array2::zeros(xv.dim());
        ndarray::Zip::from(&mut v).and(xv).and(&*target).for_each(|o, &x, &t| {
            *o = bce_with_logits(x, t);
        });
        self.push(v, Op::BceWithLogits(x, target))
    }

    pub fn dyn_weighted_bce(
        &mut self,
        x: TId,
        target: Rc<Array2<f64>>,
        w_min: f64,
        w_max: f64,
    ) -> TId {
        let xv = self.value(x);
        debug_assert_eq!(xv.dim(), target.dim());
        let mut v = Array2::zeros(xv.dim());
        ndarray::Zip::from(&mut v).and(xv).and(&*target).for_each(|o, &x, &t| {
            let w = w_min + sigmoid(x) * (w_max - w_min);
            *o = w * bce_with_logits(x, t);
        });
        self.push(v, Op::DynWeightedBce(x, target, w_min, w_max))
    }

    /// Per-row weighted cross entropy: out[i] = w[i] * (-log softmax(x[i])[t[i]]).
    pub fn cross_entropy_rows(
        &mut self,
        x: TId,
        targets: Rc<Vec<usize>>,
        weights: Rc<Vec<f64>>,
    ) -> TId {
        let xv = self.value(x);
        debug_assert_eq!(xv.nrows(), targets.len());
        debug_assert_eq!(xv.nrows(), weights.len());
        let mut v = Array2::zeros((xv.nrows(), 1));
        for i in 0..xv.nrows() {
            let row = xv.row(i);
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            v[[i, 0]] = weights[i] * (lse - row[targets[i]]);
        }
        self.push(v, Op::CrossEntropyRows(x, targets, weights))
    }

    /// Linear layer: x * w + bias.
    pub fn linear(&mut self, x: TId, w: TId, bias: TId) -> TId {
        let xw = self.matmul(x, w);
        self.add_bias(xw, bias)
    }

    fn accum(&mut self, id: TId, delta: &Array2<f64>) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => *g += delta,
            None => node.grad = Some(delta.clone()),
        }
    }

    /// Reverse sweep from a scalar node. Gradients accumulate into every
    /// ancestor; call `grad` afterwards to read them.
    pub fn backward(&mut self, loss: TId) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward target must be scalar");
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=loss.0).rev() {
            let g = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            // Ops are cheap to describe by index; move saved data out briefly.
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            match &op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&g);
                    self.accum(*a, &da);
                    self.accum(*b, &db);
                }
                Op::AddBias(x, bias) => {
                    self.accum(*x, &g);
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accum(*bias, &db);
                }
                Op::Add(a, b) => {
                    self.accum(*a, &g);
                    self.accum(*b, &g);
                }
                Op::Sub(a, b) => {
                    self.accum(*a, &g);
                    self.accum(*b, &(-&g));
                }
                Op::MulElem(a, b) => {
                    let da = &g * &self.nodes[b.0].value;
                    let db = &g * &self.nodes[a.0].value;
                    self.accum(*a, &da);
                    self.accum(*b, &db);
                }
                Op::Scale(x, c) => {
                    self.accum(*x, &(&g * *c));
                }
                Op::Relu(x) => {
                    let mask = self.nodes[x.0].value.mapv(|a| if a > 0.0 { 1.0 } else { 0.0 });
                    self.accum(*x, &(&g * &mask));
                }
                Op::Sigmoid(x) => {
                    let s = &self.nodes[i].value;
                    let d = s * &(1.0 - s) * &g;
                    self.accum(*x, &d);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        let slice = g.slice(ndarray::s![.., col..col + w]).to_owned();
                        self.accum(p, &slice);
                        col += w;
                    }
                }
                Op::GatherRows(x, rows) => {
                    let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                    for (out_r, &src) in rows.iter().enumerate() {
                        let mut dst = dx.row_mut(src);
                        dst += &g.row(out_r);
                    }
                    self.accum(*x, &dx);
                }
                Op::GatherCells(x, cells) => {
                    let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                    for (k, &(r, c)) in cells.iter().enumerate() {
                        dx[[r, c]] += g[[k, 0]];
                    }
                    self.accum(*x, &dx);
                }
                Op::SegmentMax(x, offsets, argmax) => {
                    let cols = self.nodes[x.0].value.ncols();
                    let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                    for s in 0..offsets.len() - 1 {
                        for c in 0..cols {
                            dx[[argmax[s * cols + c], c]] += g[[s, c]];
                        }
                    }
                    self.accum(*x, &dx);
                }
                Op::Interp(x, idx, w) => {
                    let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                    for (i_out, (ids, ws)) in idx.iter().zip(w.iter()).enumerate() {
                        for j in 0..3 {
                            let mut dst = dx.row_mut(ids[j]);
                            dst.scaled_add(ws[j], &g.row(i_out));
                        }
                    }
                    self.accum(*x, &dx);
                }
                Op::GlobalMaxRows(x, argmax) => {
                    let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                    for (c, &r) in argmax.iter().enumerate() {
                        dx[[r, c]] += g[[0, c]];
                    }
                    self.accum(*x, &dx);
                }
                Op::SumAll(x) => {
                    let dx = Array2::from_elem(self.nodes[x.0].value.dim(), g[[0, 0]]);
                    self.accum(*x, &dx);
                }
                Op::MeanAll(x) => {
                    let n = self.nodes[x.0].value.len() as f64;
                    let dx = Array2::from_elem(self.nodes[x.0].value.dim(), g[[0, 0]] / n);
                    self.accum(*x, &dx);
                }
                Op::Reshape(x) => {
                    let dim = self.nodes[x.0].value.dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let dx = Array2::from_shape_vec(dim, flat).expect("reshape grad");
                    self.accum(*x, &dx);
                }
                Op::RowNormalize(x, norms) => {
                    let y = self.nodes[i].value.clone();
                    let mut dx = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = gr.dot(&yr);
                        for c in 0..y.ncols() {
                            dx[[r, c]] = (gr[c] - proj * yr[c]) / norms[r];
                        }
                    }
                    self.accum(*x, &dx);
                }
                Op::RowDot(a, b) => {
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let mut da = Array2::zeros(av.dim());
                    let mut db = Array2::zeros(bv.dim());
                    for r in 0..av.nrows() {
                        let gr = g[[r, 0]];
                        da.row_mut(r).scaled_add(gr, &bv.row(r));
                        db.row_mut(r).scaled_add(gr, &av.row(r));
                    }
                    self.accum(*a, &da);
                    self.accum(*b, &db);
                }
                Op::BceWithLogits(x, target) => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Array2::zeros(xv.dim());
                    ndarray::Zip::from(&mut dx).and(xv).and(&**target).and(&g).for_each(
                        |o, &x, &t, &gi| {
                            *o = gi * (sigmoid(x) - t);
                        },
                    );
                    self.accum(*x, &dx);
                }
                Op::DynWeightedBce(x, target, w_min, w_max) => {
                    let xv = &self.nodes[x.0].value;
                    let mut dx = Array2::zeros(xv.dim());
                    ndarray::Zip::from(&mut dx).and(xv).and(&**target).and(&g).for_each(
                        |o, &x, &t, &gi| {
                            let w = w_min + sigmoid(x) * (w_max - w_min);
                            *o = gi * w * (sigmoid(x) - t);
                        },
                    );
                    self.accum(*x, &dx);
                }
                Op::CrossEntropyRows(x, targets, weights) => {
                    let xv = self.nodes[x.0].value.clone();
                    let mut dx = Array2::zeros(xv.dim());
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                        let exps: Vec<f64> = row.iter().map(|&z| (z - m).exp()).collect();
                        let denom: f64 = exps.iter().sum();
                        let gw = g[[r, 0]] * weights[r];
                        for c in 0..xv.ncols() {
                            let soft = exps[c] / denom;
                            let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                            dx[[r, c]] += gw * (soft - onehot);
                        }
                    }
                    self.accum(*x, &dx);
                }
            }
            self.nodes[i].op = op;
        }
    }
}

/// Central finite-difference gradient of `f` at `x`, one probe per entry.
pub fn numeric_gradient<F: FnMut(&Array2<f64>) -> f64>(
    mut f: F,
    x: &Array2<f64>,
    eps: f64,
) -> Array2<f64> {
    let mut g = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + eps;
        let fp = f(&probe);
        probe[[r, c]] = orig - eps;
        let fm = f(&probe);
        probe[[r, c]] = orig;
        g[[r, c]] = (fp - fm) / (2.0 * eps);
    }
    g
}

/// Largest relative disagreement between two gradients, using a symmetric
/// denominator floored at `floor` to keep near-zero entries meaningful.
pub fn max_relative_error(a: &Array2<f64>, b: &Array2<f64>, floor: f64) -> f64 {
    let mut worst = 0.0f64;
    ndarray::Zip::from(a).and(b).for_each(|&x, &y| {
        let denom = x.abs().max(y.abs()).max(floor);
        worst = worst.max((x - y).abs() / denom);
    });
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks d(sum of some scalar pipeline)/d(leaf) against central differences.
    fn check_leaf_grad<F>(build: F, leaf_value: Array2<f64>, tol: f64)
    where
        F: Fn(&mut Tape, TId) -> TId,
    {
        let mut tape = Tape::new();
        let x = tape.leaf(leaf_value.clone());
        let loss = build(&mut tape, x);
        tape.backward(loss);
        let analytic = tape.grad(x);

        let numeric = numeric_gradient(
            |probe| {
                let mut t = Tape::new();
                let x = t.leaf(probe.clone());
                let l = build(&mut t, x);
                t.scalar(l)
            },
            &leaf_value,
            1e-5,
        );
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < tol, "gradient mismatch: rel err {err}");
    }

    #[test]
    fn matmul_linear_relu_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_mat(&mut rng, 4, 3);
        let b = rand_mat(&mut rng, 1, 3);
        let x0 = rand_mat(&mut rng, 5, 4);
        check_leaf_grad(
            move |t, x| {
                let w = t.leaf(w.clone());
                let b = t.leaf(b.clone());
                let h = t.linear(x, w, b);
                let h = t.relu(h);
                t.mean_all(h)
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn gather_segment_max_interp() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x0 = rand_mat(&mut rng, 6, 3);
        let rows = Rc::new(vec![0usize, 2, 2, 5, 1, 3, 4, 0]);
        let offsets = Rc::new(vec![0usize, 3, 5, 8]);
        let idx = Rc::new(vec![[0usize, 1, 2], [1, 2, 0], [2, 0, 1], [0, 2, 1]]);
        let w = Rc::new(vec![[0.5, 0.3, 0.2], [0.2, 0.2, 0.6], [1.0, 0.0, 0.0], [0.4, 0.4, 0.2]]);
        check_leaf_grad(
            move |t, x| {
                let gathered = t.gather_rows(x, rows.clone());
                let pooled = t.segment_max(gathered, offsets.clone());
                let lifted = t.interp(pooled, idx.clone(), w.clone());
                t.sum_all(lifted)
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn bce_and_dynamic_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = rand_mat(&mut rng, 4, 5);
        let target = Rc::new(rand_mat(&mut rng, 4, 5).mapv(|v| (v + 1.0) / 2.0));
        let t2 = target.clone();
        check_leaf_grad(
            move |t, x| {
                let l = t.bce_with_logits(x, target.clone());
                t.mean_all(l)
            },
            x0.clone(),
            1e-6,
        );
        // The dynamic weight is a stop-gradient coefficient: analytic backward
        // must match finite differences of a fn where W is frozen at x.
        let frozen_at = x0.clone();
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let l = tape.dyn_weighted_bce(x, t2.clone(), 0.04, 1.0);
        let loss = tape.mean_all(l);
        tape.backward(loss);
        let analytic = tape.grad(x);
        let numeric = numeric_gradient(
            |probe| {
                // W evaluated at the frozen point, BCE at the probe.
                let mut acc = 0.0;
                for (idx, (&p, &t)) in probe.iter().zip(t2.iter()).enumerate() {
                    let (r, c) = (idx / probe.ncols(), idx % probe.ncols());
                    let w = 0.04 + sigmoid(frozen_at[[r, c]]) * 0.96;
                    acc += w * bce_with_logits(p, t);
                }
                acc / probe.len() as f64
            },
            &x0,
            1e-5,
        );
        let err = max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-6, "stop-grad weight mismatch: {err}");
    }

    #[test]
    fn cross_entropy_rows_matches_uniform_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::zeros((2, 4)));
        let l = tape.cross_entropy_rows(x, Rc::new(vec![1, 3]), Rc::new(vec![1.0, 1.0]));
        let loss = tape.mean_all(l);
        assert!((tape.scalar(loss) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = rand_mat(&mut rng, 3, 4);
        check_leaf_grad(
            move |t, x| {
                let l = t.cross_entropy_rows(x, Rc::new(vec![0, 2, 1]), Rc::new(vec![1.0, 0.5, 2.0]));
                t.sum_all(l)
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn row_dot_reshape_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_mat(&mut rng, 4, 3);
        let x0 = rand_mat(&mut rng, 4, 3);
        check_leaf_grad(
            move |t, x| {
                let a = t.leaf(a.clone());
                let d = t.row_dot(x, a);
                let r = t.reshape(d, (2, 2));
                let s = t.sigmoid_node(r);
                let cat = t.concat_cols(&[s, r]);
                t.mean_all(cat)
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn global_max_and_cells() {
        let x0 = array![[1.0, -2.0], [0.5, 3.0], [2.0, 0.0]];
        check_leaf_grad(
            |t, x| {
                let m = t.global_max_rows(x);
                let cells = t.gather_cells(x, Rc::new(vec![(0, 1), (2, 0)]));
                let cm = t.reshape(cells, (1, 2));
                let cat = t.concat_cols(&[m, cm]);
                t.sum_all(cat)
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn row_normalize_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_mat(&mut rng, 4, 3);
        let x0 = rand_mat(&mut rng, 4, 3) + 2.0; // keep norms away from zero
        check_leaf_grad(
            move |t, x| {
                let n = t.row_normalize(x);
                let a = t.leaf(a.clone());
                let d = t.row_dot(n, a);
                t.mean_all(d)
            },
            x0,
            1e-6,
        );
    }

    #[test]
    fn backward_is_repeatable() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[0.3, -0.7], [1.1, 0.2]]);
        let s = tape.sigmoid_node(x);
        let loss = tape.mean_all(s);
        tape.backward(loss);
        let g1 = tape.grad(x);
        tape.backward(loss);
        let g2 = tape.grad(x);
        assert_eq!(g1, g2);
    }
}
