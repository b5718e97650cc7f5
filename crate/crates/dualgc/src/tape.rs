//! Reverse-mode automatic differentiation over dense f64 matrices.
//!
//! A [`Tape`] records a forward computation as a flat list of nodes; calling
//! [`Tape::backward`] on a 1×1 loss node replays the list in reverse and
//! accumulates exact analytic gradients for every node flagged as requiring
//! them. The op set is exactly what the training losses need — nothing is
//! approximated, and every op's gradient is validated against central finite
//! differences in the test suite.
//!
//! Shape violations are programming errors and panic; user-facing input
//! validation happens before values reach the tape.

use ndarray::{Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// a · b
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Hadamard(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    /// N×d plus a 1×d row broadcast over all rows.
    AddRowBroadcast(usize, usize),
    Tanh(usize),
    Sigmoid(usize),
    RowSoftmax(usize),
    /// ln(max(x, 1e-12)); zero slope inside the floor.
    LnClamped(usize),
    Recip(usize),
    /// Rows scaled to unit L2 norm with a 1e-12 guard.
    RowNormalizeL2(usize),
    /// Rows scaled to sum 1; input entries must be positive.
    RowNormalizeSum(usize),
    /// N×d → N×1 row sums.
    RowSums(usize),
    /// N×1 → N×k copy across columns.
    BroadcastCol(usize),
    /// 1×k → n×k copy across rows.
    BroadcastRow(usize),
    Transpose(usize),
    /// Any shape → 1×1 sum of all entries.
    SumAll(usize),
    /// N×d → K×d; row k = mean of rows whose group id is k, or the global
    /// row mean when group k is empty.
    GroupMeanRows(usize, Vec<usize>, usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` required one.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

/// A Wengert list: forward values plus enough structure to run backward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Record an input that does not require gradients.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Record a trainable input.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Extract a 1×1 node's value.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() needs a 1x1 node");
        val[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        assert!(
            value.iter().all(|v| v.is_finite()),
            "non-finite value entering the tape"
        );
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, value: Array2<f64>, op: Op) -> Var {
        let ng = self.nodes[a.0].needs_grad;
        self.push(value, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, value: Array2<f64>, op: Op) -> Var {
        let ng = self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad;
        self.push(value, op, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.ncols(), vb.nrows(), "matmul inner dims differ");
        let value = va.dot(vb);
        self.binary(a, b, value, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = same_shape(&self.nodes[a.0].value, &self.nodes[b.0].value, "add")
            .map(|(x, y)| x + y)
            .unwrap();
        self.binary(a, b, value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = same_shape(&self.nodes[a.0].value, &self.nodes[b.0].value, "sub")
            .map(|(x, y)| x - y)
            .unwrap();
        self.binary(a, b, value, Op::Sub(a.0, b.0))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Var {
        let value = same_shape(&self.nodes[a.0].value, &self.nodes[b.0].value, "hadamard")
            .map(|(x, y)| x * y)
            .unwrap();
        self.binary(a, b, value, Op::Hadamard(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        self.unary(a, value, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value + c;
        self.unary(a, value, Op::AddScalar(a.0))
    }

    /// `a` is N×d, `bias` is 1×d; adds the bias row to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        assert_eq!(vb.nrows(), 1, "bias must be a single row");
        assert_eq!(va.ncols(), vb.ncols(), "bias width mismatch");
        let value = va + &vb.row(0);
        self.binary(a, bias, value, Op::AddRowBroadcast(a.0, bias.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::tanh);
        self.unary(a, value, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.unary(a, value, Op::Sigmoid(a.0))
    }

    /// Numerically-stable softmax along each row.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        for mut row in value.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - max).exp());
            let sum: f64 = row.sum();
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.unary(a, value, Op::RowSoftmax(a.0))
    }

    pub fn ln_clamped(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| v.max(1e-12).ln());
        self.unary(a, value, Op::LnClamped(a.0))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|v| 1.0 / v);
        self.unary(a, value, Op::Recip(a.0))
    }

    pub fn row_normalize_l2(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        for mut row in value.rows_mut() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let inv = 1.0 / norm.max(1e-12);
            row.iter_mut().for_each(|v| *v *= inv);
        }
        self.unary(a, value, Op::RowNormalizeL2(a.0))
    }

    pub fn row_normalize_sum(&mut self, a: Var) -> Var {
        let mut value = self.nodes[a.0].value.clone();
        for mut row in value.rows_mut() {
            let sum: f64 = row.sum();
            row.iter_mut().for_each(|v| *v /= sum);
        }
        self.unary(a, value, Op::RowNormalizeSum(a.0))
    }

    pub fn row_sums(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let mut value = Array2::zeros((va.nrows(), 1));
        for (i, row) in va.rows().into_iter().enumerate() {
            value[[i, 0]] = row.sum();
        }
        self.unary(a, value, Op::RowSums(a.0))
    }

    /// N×1 → N×k.
    pub fn broadcast_col(&mut self, a: Var, k: usize) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.ncols(), 1, "broadcast_col needs a column vector");
        let n = va.nrows();
        let mut value = Array2::zeros((n, k));
        for i in 0..n {
            value.row_mut(i).fill(va[[i, 0]]);
        }
        self.unary(a, value, Op::BroadcastCol(a.0))
    }

    /// 1×k → n×k.
    pub fn broadcast_row(&mut self, a: Var, n: usize) -> Var {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.nrows(), 1, "broadcast_row needs a row vector");
        let k = va.ncols();
        let mut value = Array2::zeros((n, k));
        for mut row in value.rows_mut() {
            row.assign(&va.row(0));
        }
        self.unary(a, value, Op::BroadcastRow(a.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.t().to_owned();
        self.unary(a, value, Op::Transpose(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.sum();
        let value = Array2::from_elem((1, 1), total);
        self.unary(a, value, Op::SumAll(a.0))
    }

    /// Group rows of `a` (N×d) by `groups[i] ∈ 0..k` and emit the K×d matrix
    /// of group means; an empty group falls back to the global row mean.
    pub fn group_mean_rows(&mut self, a: Var, groups: &[usize], k: usize) -> Var {
        let va = &self.nodes[a.0].value;
        let (n, d) = va.dim();
        assert_eq!(groups.len(), n, "one group id per row required");
        assert!(groups.iter().all(|&g| g < k), "group id out of range");
        let mut value = Array2::zeros((k, d));
        let mut counts = vec![0usize; k];
        for (i, &g) in groups.iter().enumerate() {
            counts[g] += 1;
            let row = va.row(i);
            for j in 0..d {
                value[[g, j]] += row[j];
            }
        }
        let global = va.mean_axis(Axis(0)).expect("nonempty matrix");
        for (g, &count) in counts.iter().enumerate() {
            if count == 0 {
                value.row_mut(g).assign(&global);
            } else {
                let inv = 1.0 / count as f64;
                value.row_mut(g).iter_mut().for_each(|v| *v *= inv);
            }
        }
        self.unary(a, value, Op::GroupMeanRows(a.0, groups.to_vec(), k))
    }

    /// Run reverse accumulation from a 1×1 loss node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(
            self.nodes[loss.0].value.dim(),
            (1, 1),
            "backward() starts from a scalar loss"
        );
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], g.dot(&vb.t()));
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads[*b], va.t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads[*b], g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads[*b], -&g);
                    }
                }
                Op::Hadamard(a, b) => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], &g * vb);
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads[*b], &g * va);
                    }
                }
                Op::Scale(a, c) => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], &g * *c);
                    }
                }
                Op::AddScalar(a) => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], g.clone());
                    }
                }
                Op::AddRowBroadcast(a, b) => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if self.nodes[*b].needs_grad {
                        let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads[*b], col_sum);
                    }
                }
                Op::Tanh(a) => {
                    if self.nodes[*a].needs_grad {
                        let y = &self.nodes[idx].value;
                        accumulate(&mut grads[*a], &g * &y.mapv(|v| 1.0 - v * v));
                    }
                }
                Op::Sigmoid(a) => {
                    if self.nodes[*a].needs_grad {
                        let y = &self.nodes[idx].value;
                        accumulate(&mut grads[*a], &g * &y.mapv(|v| v * (1.0 - v)));
                    }
                }
                Op::RowSoftmax(a) => {
                    if self.nodes[*a].needs_grad {
                        let y = &self.nodes[idx].value;
                        let mut ga = Array2::zeros(y.dim());
                        for i in 0..y.nrows() {
                            let gy: f64 = g
                                .row(i)
                                .iter()
                                .zip(y.row(i).iter())
                                .map(|(a, b)| a * b)
                                .sum();
                            for j in 0..y.ncols() {
                                ga[[i, j]] = y[[i, j]] * (g[[i, j]] - gy);
                            }
                        }
                        accumulate(&mut grads[*a], ga);
                    }
                }
                Op::LnClamped(a) => {
                    if self.nodes[*a].needs_grad {
                        let x = &self.nodes[*a].value;
                        let slope = x.mapv(|v| if v > 1e-12 { 1.0 / v } else { 0.0 });
                        accumulate(&mut grads[*a], &g * &slope);
                    }
                }
                Op::Recip(a) => {
                    if self.nodes[*a].needs_grad {
                        let y = &self.nodes[idx].value;
                        accumulate(&mut grads[*a], &g * &y.mapv(|v| -v * v));
                    }
                }
                Op::RowNormalizeL2(a) => {
                    if self.nodes[*a].needs_grad {
                        let x = &self.nodes[*a].value;
                        let mut ga = Array2::zeros(x.dim());
                        for i in 0..x.nrows() {
                            let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                            let s = norm.max(1e-12);
                            let gx: f64 = g
                                .row(i)
                                .iter()
                                .zip(x.row(i).iter())
                                .map(|(a, b)| a * b)
                                .sum();
                            for j in 0..x.ncols() {
                                let direct = g[[i, j]] / s;
                                // Below the floor the norm is treated as a
                                // constant, so only the direct term remains.
                                let through_norm = if norm > 1e-12 {
                                    x[[i, j]] * gx / (norm * s * s)
                                } else {
                                    0.0
                                };
                                ga[[i, j]] = direct - through_norm;
                            }
                        }
                        accumulate(&mut grads[*a], ga);
                    }
                }
                Op::RowNormalizeSum(a) => {
                    if self.nodes[*a].needs_grad {
                        let x = &self.nodes[*a].value;
                        let mut ga = Array2::zeros(x.dim());
                        for i in 0..x.nrows() {
                            let sum: f64 = x.row(i).sum();
                            let gx: f64 = g
                                .row(i)
                                .iter()
                                .zip(x.row(i).iter())
                                .map(|(a, b)| a * b)
                                .sum();
                            for j in 0..x.ncols() {
                                ga[[i, j]] = g[[i, j]] / sum - gx / (sum * sum);
                            }
                        }
                        accumulate(&mut grads[*a], ga);
                    }
                }
                Op::RowSums(a) => {
                    if self.nodes[*a].needs_grad {
                        let shape = self.nodes[*a].value.dim();
                        let mut ga = Array2::zeros(shape);
                        for i in 0..shape.0 {
                            ga.row_mut(i).fill(g[[i, 0]]);
                        }
                        accumulate(&mut grads[*a], ga);
                    }
                }
                Op::BroadcastCol(a) => {
                    if self.nodes[*a].needs_grad {
                        let ga = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                        accumulate(&mut grads[*a], ga);
                    }
                }
                Op::BroadcastRow(a) => {
                    if self.nodes[*a].needs_grad {
                        let ga = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads[*a], ga);
                    }
                }
                Op::Transpose(a) => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads[*a], g.t().to_owned());
                    }
                }
                Op::SumAll(a) => {
                    if self.nodes[*a].needs_grad {
                        let shape = self.nodes[*a].value.dim();
                        accumulate(&mut grads[*a], Array2::from_elem(shape, g[[0, 0]]));
                    }
                }
                Op::GroupMeanRows(a, groups, k) => {
                    if self.nodes[*a].needs_grad {
                        let (n, d) = self.nodes[*a].value.dim();
                        let mut counts = vec![0usize; *k];
                        for &gid in groups {
                            counts[gid] += 1;
                        }
                        let mut ga = Array2::zeros((n, d));
                        // Members of nonempty groups receive their group's
                        // share; every row shares in empty groups' fallback.
                        let mut empty_share = vec![0.0f64; d];
                        for gid in 0..*k {
                            if counts[gid] == 0 {
                                for j in 0..d {
                                    empty_share[j] += g[[gid, j]] / n as f64;
                                }
                            }
                        }
                        for (i, &gid) in groups.iter().enumerate() {
                            let inv = 1.0 / counts[gid] as f64;
                            for j in 0..d {
                                ga[[i, j]] = g[[gid, j]] * inv + empty_share[j];
                            }
                        }
                        accumulate(&mut grads[*a], ga);
                    }
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
    match slot {
        Some(acc) => *acc += &delta,
        None => *slot = Some(delta),
    }
}

fn same_shape<'a>(
    a: &'a Array2<f64>,
    b: &'a Array2<f64>,
    op: &str,
) -> Option<(&'a Array2<f64>, &'a Array2<f64>)> {
    assert_eq!(a.dim(), b.dim(), "{op}: shape mismatch");
    Some((a, b))
}
