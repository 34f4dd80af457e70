//! Reverse-mode automatic differentiation over a fixed set of matrix
//! operations.
//!
//! A [`Tape`] records eagerly evaluated ops over `f64` matrices; calling
//! [`Tape::backward`] on a scalar (1x1) output accumulates gradients for
//! every parameter leaf. The op set is exactly what the surrogate network
//! needs: affine maps, rectifiers, row gather/scatter for embeddings and
//! message passing, softmax over edge segments, batch normalization in both
//! statistics modes, fixed linear combinations for restricted means, row L1
//! norms, mean-squared error, and an escape hatch for losses whose gradient
//! is computed at forward time.

use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};

/// Handle to a value on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Const,
    Param { id: usize },
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    /// `a + c * b`, used for residual links and loss mixing.
    AddScaled { a: Var, b: Var, c: f64 },
    AddBias { x: Var, bias: Var },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: f64 },
    ConcatCols { parts: Vec<Var> },
    GatherRows { x: Var, rows: Arc<Vec<u32>> },
    ScatterAddRows { x: Var, rows: Arc<Vec<u32>> },
    MulColBroadcast { x: Var, col: Var },
    SegmentSoftmax { logits: Var, groups: Arc<Vec<Vec<u32>>> },
    FixedLinComb { x: Var, weights: Arc<Array2<f64>> },
    BatchNorm { x: Var, gamma: Var, beta: Var, inv_std: Array1<f64>, xhat: Array2<f64>, batch_stats: bool },
    RowL1 { x: Var },
    Mse { pred: Var, target: Arc<Array2<f64>> },
    /// Loss with an externally computed gradient w.r.t. its input.
    Stash { x: Var, grad: Array2<f64> },
}

struct TapeNode {
    op: Op,
    value: Array2<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1), "expected scalar node");
        val[(0, 0)]
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(TapeNode { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Const, value)
    }

    /// Parameter leaf; `id` keys the gradient slot returned by `backward`.
    pub fn param(&mut self, id: usize, value: Array2<f64>) -> Var {
        self.push(Op::Param { id }, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(Op::MatMul { a, b }, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(Op::Add { a, b }, value)
    }

    pub fn add_scaled(&mut self, a: Var, b: Var, c: f64) -> Var {
        let value = self.value(a) + &(self.value(b) * c);
        self.push(Op::AddScaled { a, b, c }, value)
    }

    /// Adds a 1 x d bias row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        debug_assert_eq!(b.nrows(), 1);
        let value = self.value(x) + &b.row(0);
        self.push(Op::AddBias { x, bias }, value)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x) * c;
        self.push(Op::Scale { x, c }, value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push(Op::Relu { x }, value)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self.value(x).mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push(Op::LeakyRelu { x, slope }, value)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        debug_assert!(!parts.is_empty());
        let rows = self.value(parts[0]).nrows();
        let total: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut value = Array2::zeros((rows, total));
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            debug_assert_eq!(v.nrows(), rows);
            value.slice_mut(ndarray::s![.., offset..offset + v.ncols()]).assign(v);
            offset += v.ncols();
        }
        self.push(Op::ConcatCols { parts: parts.to_vec() }, value)
    }

    /// `out[i] = x[rows[i]]`; duplicated rows are allowed.
    pub fn gather_rows(&mut self, x: Var, rows: Arc<Vec<u32>>) -> Var {
        let v = self.value(x);
        let mut value = Array2::zeros((rows.len(), v.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            value.row_mut(i).assign(&v.row(r as usize));
        }
        self.push(Op::GatherRows { x, rows }, value)
    }

    /// `out[rows[i]] += x[i]` into a zero matrix of `out_rows` rows.
    pub fn scatter_add_rows(&mut self, x: Var, rows: Arc<Vec<u32>>, out_rows: usize) -> Var {
        let v = self.value(x);
        debug_assert_eq!(v.nrows(), rows.len());
        let mut value = Array2::zeros((out_rows, v.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            let mut row = value.row_mut(r as usize);
            row += &v.row(i);
        }
        self.push(Op::ScatterAddRows { x, rows }, value)
    }

    /// `out[i][j] = x[i][j] * col[i]` with `col` of shape n x 1.
    pub fn mul_col_broadcast(&mut self, x: Var, col: Var) -> Var {
        let xv = self.value(x);
        let cv = self.value(col);
        debug_assert_eq!(cv.ncols(), 1);
        debug_assert_eq!(cv.nrows(), xv.nrows());
        let mut value = xv.clone();
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            row *= cv[(i, 0)];
        }
        self.push(Op::MulColBroadcast { x, col }, value)
    }

    /// Softmax of an E x 1 logit column within each index group, with
    /// max-subtraction for stability. Groups must be disjoint and cover
    /// every row.
    pub fn segment_softmax(&mut self, logits: Var, groups: Arc<Vec<Vec<u32>>>) -> Var {
        let lv = self.value(logits);
        debug_assert_eq!(lv.ncols(), 1);
        let mut value = Array2::zeros(lv.dim());
        for group in groups.iter() {
            let max = group.iter().map(|&e| lv[(e as usize, 0)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for &e in group {
                let w = (lv[(e as usize, 0)] - max).exp();
                value[(e as usize, 0)] = w;
                total += w;
            }
            for &e in group {
                value[(e as usize, 0)] /= total;
            }
        }
        self.push(Op::SegmentSoftmax { logits, groups }, value)
    }

    /// `out = weights . x` with a constant coefficient matrix
    /// (e.g. block-averaging over designated node sets).
    pub fn fixed_lin_comb(&mut self, x: Var, weights: Arc<Array2<f64>>) -> Var {
        let value = weights.dot(self.value(x));
        self.push(Op::FixedLinComb { x, weights }, value)
    }

    /// Batch normalization over columns. With `batch_stats` the batch's own
    /// mean/variance normalize it (training mode); otherwise the provided
    /// running statistics do (eval mode). Returns the output together with
    /// the statistics used, so callers can maintain running averages.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&Array1<f64>, &Array1<f64>)>,
    ) -> (Var, Array1<f64>, Array1<f64>) {
        let xv = self.value(x);
        let n = xv.nrows() as f64;
        let batch_stats = running.is_none();
        let (mean, var) = match running {
            Some((m, v)) => (m.clone(), v.clone()),
            None => {
                let mean = xv.mean_axis(Axis(0)).expect("nonempty batch");
                let var = xv
                    .map_axis(Axis(0), |col| {
                        let m = col.sum() / n;
                        col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
                    });
                (mean, var)
            }
        };
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let mut xhat = xv.clone();
        for mut row in xhat.rows_mut() {
            row -= &mean;
            row *= &inv_std;
        }
        let g = self.value(gamma);
        let b = self.value(beta);
        debug_assert_eq!(g.nrows(), 1);
        debug_assert_eq!(b.nrows(), 1);
        let mut value = xhat.clone();
        for mut row in value.rows_mut() {
            row *= &g.row(0);
            row += &b.row(0);
        }
        let var_out = var.clone();
        let out = self.push(
            Op::BatchNorm { x, gamma, beta, inv_std, xhat, batch_stats },
            value,
        );
        (out, mean, var_out)
    }

    /// Per-row L1 norm, producing an n x 1 column.
    pub fn row_l1(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let mut value = Array2::zeros((v.nrows(), 1));
        for (i, row) in v.rows().into_iter().enumerate() {
            value[(i, 0)] = row.iter().map(|a| a.abs()).sum();
        }
        self.push(Op::RowL1 { x }, value)
    }

    /// Mean squared error against a constant target, as a 1 x 1 scalar.
    pub fn mse(&mut self, pred: Var, target: Arc<Array2<f64>>) -> Var {
        let p = self.value(pred);
        debug_assert_eq!(p.dim(), target.dim());
        let n = p.len() as f64;
        let loss = p.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        self.push(Op::Mse { pred, target }, Array2::from_elem((1, 1), loss))
    }

    /// Records a scalar loss whose gradient w.r.t. `x` was computed by the
    /// caller at forward time.
    pub fn stashed_loss(&mut self, x: Var, loss: f64, grad: Array2<f64>) -> Var {
        debug_assert_eq!(grad.dim(), self.value(x).dim());
        self.push(Op::Stash { x, grad }, Array2::from_elem((1, 1), loss))
    }

    /// Reverse pass from a scalar root. Returns one gradient per parameter
    /// id in `0..n_params` (zeros for parameters the root does not reach).
    pub fn backward(&self, root: Var, n_params: usize) -> Vec<Array2<f64>> {
        debug_assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        let mut param_grads: Vec<Option<Array2<f64>>> = (0..n_params).map(|_| None).collect();

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Const => {}
                Op::Param { id } => {
                    accumulate_opt(&mut param_grads[*id], &g);
                }
                Op::MatMul { a, b } => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddScaled { a, b, c } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, &g * *c);
                }
                Op::AddBias { x, bias } => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *bias, gb);
                    accumulate(&mut grads, *x, g);
                }
                Op::Scale { x, c } => {
                    accumulate(&mut grads, *x, &g * *c);
                }
                Op::Relu { x } => {
                    let mut gx = g;
                    gx.zip_mut_with(self.value(*x), |gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::LeakyRelu { x, slope } => {
                    let mut gx = g;
                    let s = *slope;
                    gx.zip_mut_with(self.value(*x), |gv, &xv| {
                        if xv <= 0.0 {
                            *gv *= s;
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        let gp = g.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        accumulate(&mut grads, p, gp);
                        offset += w;
                    }
                }
                Op::GatherRows { x, rows } => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        let mut row = gx.row_mut(r as usize);
                        row += &g.row(i);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ScatterAddRows { x, rows } => {
                    let mut gx = Array2::zeros(self.value(*x).dim());
                    for (i, &r) in rows.iter().enumerate() {
                        gx.row_mut(i).assign(&g.row(r as usize));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::MulColBroadcast { x, col } => {
                    let xv = self.value(*x);
                    let cv = self.value(*col);
                    let mut gx = g.clone();
                    for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                        row *= cv[(i, 0)];
                    }
                    let mut gc = Array2::zeros(cv.dim());
                    for i in 0..xv.nrows() {
                        gc[(i, 0)] = g.row(i).dot(&xv.row(i));
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *col, gc);
                }
                Op::SegmentSoftmax { logits, groups } => {
                    let alpha = &self.nodes[idx].value;
                    let mut gl = Array2::zeros(alpha.dim());
                    for group in groups.iter() {
                        let dot: f64 =
                            group.iter().map(|&e| alpha[(e as usize, 0)] * g[(e as usize, 0)]).sum();
                        for &e in group {
                            let e = e as usize;
                            gl[(e, 0)] = alpha[(e, 0)] * (g[(e, 0)] - dot);
                        }
                    }
                    accumulate(&mut grads, *logits, gl);
                }
                Op::FixedLinComb { x, weights } => {
                    let gx = weights.t().dot(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::BatchNorm { x, gamma, beta, inv_std, xhat, batch_stats } => {
                    let gv = self.value(*gamma);
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let n = g.nrows() as f64;
                    let gx = if *batch_stats {
                        // d/dx of (x - mean)/std with mean/std functions of x.
                        let mean_g = g.mean_axis(Axis(0)).expect("nonempty");
                        let mean_gxhat = (&g * xhat).mean_axis(Axis(0)).expect("nonempty");
                        let _ = n;
                        let mut gx = g.clone();
                        for (i, mut row) in gx.rows_mut().into_iter().enumerate() {
                            for (j, cell) in row.iter_mut().enumerate() {
                                *cell = (*cell - mean_g[j] - xhat[(i, j)] * mean_gxhat[j])
                                    * gv[(0, j)]
                                    * inv_std[j];
                            }
                        }
                        gx
                    } else {
                        let mut gx = g.clone();
                        for mut row in gx.rows_mut() {
                            for (j, cell) in row.iter_mut().enumerate() {
                                *cell *= gv[(0, j)] * inv_std[j];
                            }
                        }
                        gx
                    };
                    accumulate(&mut grads, *beta, gbeta);
                    accumulate(&mut grads, *gamma, ggamma);
                    accumulate(&mut grads, *x, gx);
                }
                Op::RowL1 { x } => {
                    let xv = self.value(*x);
                    let mut gx = Array2::zeros(xv.dim());
                    for (i, row) in xv.rows().into_iter().enumerate() {
                        let gi = g[(i, 0)];
                        for (j, &v) in row.iter().enumerate() {
                            // Subgradient at zero is zero.
                            gx[(i, j)] = gi * v.signum() * f64::from(v != 0.0);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Mse { pred, target } => {
                    let p = self.value(*pred);
                    let n = p.len() as f64;
                    let scale = 2.0 * g[(0, 0)] / n;
                    let gp = (p - target.as_ref()) * scale;
                    accumulate(&mut grads, *pred, gp);
                }
                Op::Stash { x, grad } => {
                    accumulate(&mut grads, *x, grad * g[(0, 0)]);
                }
            }
        }
        param_grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| g.unwrap_or_else(|| zeros_like_param(self, id)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

fn zeros_like_param(tape: &Tape, id: usize) -> Array2<f64> {
    for node in &tape.nodes {
        if let Op::Param { id: pid } = node.op {
            if pid == id {
                return Array2::zeros(node.value.dim());
            }
        }
    }
    Array2::zeros((0, 0))
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_opt(slot: &mut Option<Array2<f64>>, g: &Array2<f64>) {
    match slot {
        Some(existing) => *existing += g,
        None => *slot = Some(g.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    /// Central-difference check of every parameter entry of a scalar tape
    /// function.
    fn fd_check<F>(params: &[Array2<f64>], build: F, tol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eval = |ps: &[Array2<f64>]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> =
                ps.iter().enumerate().map(|(i, p)| tape.param(i, p.clone())).collect();
            let root = build(&mut tape, &vars);
            tape.scalar(root)
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> =
            params.iter().enumerate().map(|(i, p)| tape.param(i, p.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root, params.len());

        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            for ((r, c), _) in p.indexed_iter() {
                let mut plus = params.to_vec();
                plus[pi][(r, c)] += h;
                let mut minus = params.to_vec();
                minus[pi][(r, c)] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = grads[pi][(r, c)];
                assert!(
                    (fd - an).abs() < tol * (1.0 + fd.abs().max(an.abs())),
                    "param {pi} entry ({r},{c}): fd {fd} vs analytic {an}"
                );
            }
        }
    }

    fn m(rows: usize, cols: usize, scale: f64) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |(i, j)| {
            ((i * cols + j + 1) as f64 * 0.7315).sin() * scale
        })
    }

    #[test]
    fn matmul_bias_relu_chain() {
        let x = m(3, 4, 1.0);
        let w = m(4, 2, 0.8);
        let b = m(1, 2, 0.5);
        let target = Arc::new(m(3, 2, 1.0));
        fd_check(&[x, w, b], |t, vs| {
            let xw = t.matmul(vs[0], vs[1]);
            let z = t.add_bias(xw, vs[2]);
            let a = t.relu(z);
            t.mse(a, Arc::clone(&target))
        }, 1e-6);
    }

    #[test]
    fn leaky_relu_and_scale() {
        let x = m(4, 3, 2.0);
        let target = Arc::new(m(4, 3, 1.0));
        fd_check(&[x], |t, vs| {
            let l = t.leaky_relu(vs[0], 0.2);
            let s = t.scale(l, 1.7);
            t.mse(s, Arc::clone(&target))
        }, 1e-6);
    }

    #[test]
    fn concat_and_addscaled() {
        let a = m(3, 2, 1.0);
        let b = m(3, 3, 0.6);
        let target = Arc::new(m(3, 5, 0.4));
        fd_check(&[a, b], |t, vs| {
            let cat = t.concat_cols(&[vs[0], vs[1]]);
            let doubled = t.add_scaled(cat, cat, 0.5);
            t.mse(doubled, Arc::clone(&target))
        }, 1e-6);
    }

    #[test]
    fn gather_scatter_round_trip() {
        let x = m(4, 3, 1.2);
        let rows = Arc::new(vec![0u32, 2, 2, 3, 1]);
        let target = Arc::new(m(4, 3, 0.9));
        fd_check(&[x], |t, vs| {
            let gathered = t.gather_rows(vs[0], Arc::clone(&rows));
            let spread = t.scatter_add_rows(gathered, Arc::clone(&rows), 4);
            t.mse(spread, Arc::clone(&target))
        }, 1e-6);
    }

    #[test]
    fn mul_col_broadcast_grads() {
        let x = m(4, 3, 1.0);
        let col = m(4, 1, 0.8);
        let target = Arc::new(m(4, 3, 0.2));
        fd_check(&[x, col], |t, vs| {
            let prod = t.mul_col_broadcast(vs[0], vs[1]);
            t.mse(prod, Arc::clone(&target))
        }, 1e-6);
    }

    #[test]
    fn segment_softmax_grads() {
        let logits = m(6, 1, 1.5);
        let groups = Arc::new(vec![vec![0u32, 1, 2], vec![3, 4], vec![5]]);
        let target = Arc::new(m(6, 1, 0.5));
        fd_check(&[logits], |t, vs| {
            let alpha = t.segment_softmax(vs[0], Arc::clone(&groups));
            t.mse(alpha, Arc::clone(&target))
        }, 1e-5);
    }

    #[test]
    fn segment_softmax_sums_to_one_per_group() {
        let mut tape = Tape::new();
        let logits = tape.constant(m(5, 1, 3.0));
        let groups = Arc::new(vec![vec![0u32, 3], vec![1, 2, 4]]);
        let alpha = tape.segment_softmax(logits, Arc::clone(&groups));
        let a = tape.value(alpha);
        for group in groups.iter() {
            let s: f64 = group.iter().map(|&e| a[(e as usize, 0)]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_lin_comb_grads() {
        let x = m(4, 3, 1.1);
        let weights = Arc::new(arr2(&[[0.5, 0.5, 0.0, 0.0], [0.0, 0.0, 0.25, 0.75]]));
        let target = Arc::new(m(2, 3, 0.3));
        fd_check(&[x], |t, vs| {
            let combo = t.fixed_lin_comb(vs[0], Arc::clone(&weights));
            t.mse(combo, Arc::clone(&target))
        }, 1e-6);
    }

    #[test]
    fn batch_norm_training_mode_grads() {
        let x = m(6, 3, 1.4);
        let gamma = m(1, 3, 0.9);
        let beta = m(1, 3, 0.2);
        let target = Arc::new(m(6, 3, 0.7));
        fd_check(&[x, gamma, beta], |t, vs| {
            let (out, _, _) = t.batch_norm(vs[0], vs[1], vs[2], 1e-5, None);
            t.mse(out, Arc::clone(&target))
        }, 1e-5);
    }

    #[test]
    fn batch_norm_eval_mode_grads() {
        let x = m(5, 2, 1.0);
        let gamma = m(1, 2, 1.2);
        let beta = m(1, 2, 0.1);
        let rm = Array1::from_vec(vec![0.3, -0.2]);
        let rv = Array1::from_vec(vec![1.5, 0.8]);
        let target = Arc::new(m(5, 2, 0.5));
        fd_check(&[x, gamma, beta], |t, vs| {
            let (out, _, _) = t.batch_norm(vs[0], vs[1], vs[2], 1e-5, Some((&rm, &rv)));
            t.mse(out, Arc::clone(&target))
        }, 1e-6);
    }

    #[test]
    fn row_l1_grads_away_from_zero() {
        // Entries are bounded away from zero so the subgradient is exact.
        let x = m(4, 3, 1.0).mapv(|v| if v >= 0.0 { v + 0.5 } else { v - 0.5 });
        let target = Arc::new(m(4, 1, 2.0));
        fd_check(&[x], |t, vs| {
            let norms = t.row_l1(vs[0]);
            t.mse(norms, Arc::clone(&target))
        }, 1e-6);
    }

    #[test]
    fn stashed_loss_backpropagates_given_gradient() {
        let x = m(3, 1, 1.0);
        // loss = sum(x^2) with handmade gradient 2x.
        let mut tape = Tape::new();
        let v = tape.param(0, x.clone());
        let loss_val: f64 = x.iter().map(|a| a * a).sum();
        let grad = &x * 2.0;
        let loss = tape.stashed_loss(v, loss_val, grad.clone());
        let grads = tape.backward(loss, 1);
        assert!(grads[0].iter().zip(grad.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn fan_in_reuse_accumulates() {
        // f = mse(x + x) -> gradient doubles relative to single use.
        let x = m(2, 2, 1.0);
        let target = Arc::new(Array2::zeros((2, 2)));
        fd_check(&[x], |t, vs| {
            let s = t.add(vs[0], vs[0]);
            t.mse(s, Arc::clone(&target))
        }, 1e-6);
    }

    #[test]
    fn unreached_params_get_zero_grads() {
        let mut tape = Tape::new();
        let a = tape.param(0, m(2, 2, 1.0));
        let _unused = tape.param(1, m(3, 1, 1.0));
        let target = Arc::new(Array2::zeros((2, 2)));
        let loss = tape.mse(a, target);
        let grads = tape.backward(loss, 2);
        assert_eq!(grads[1].dim(), (3, 1));
        assert!(grads[1].iter().all(|&g| g == 0.0));
    }
}
