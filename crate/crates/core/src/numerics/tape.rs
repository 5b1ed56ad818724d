//! Reverse-mode gradient tape over matrix-valued primitive operations.
//!
//! A forward pass records one node per primitive op; replaying the tape
//! backward from a scalar loss accumulates a gradient for every node,
//! so every registered parameter that was touched gets its gradient and
//! untouched parameters keep an exact zero gradient.

use super::funcs::{sigmoid, softmax_unchecked, softplus};
use super::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Elementwise a*x + b; only the scale matters for the gradient.
    Affine(NodeId, f64),
    /// Row vector broadcast-added to every row.
    AddBias(NodeId, NodeId),
    Tanh(NodeId),
    Softplus(NodeId),
    Ln(NodeId),
    /// ln(max(x, floor)); zero gradient inside the clamped region.
    LnClamped(NodeId, f64),
    /// max(x, c); zero gradient inside the clamped region.
    ClampMin(NodeId, f64),
    Transpose(NodeId),
    /// Row-wise softmax; with `causal` row i sees only columns 0..=i.
    SoftmaxRows { x: NodeId, causal: bool },
    SelectRow(NodeId, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize, len: usize },
    SumAll(NodeId),
    MeanRows(NodeId),
    /// Product of a 1x1 scalar node with a matrix node.
    ScaleBy { scalar: NodeId, x: NodeId },
    LayerNormRows { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Records a forward computation; see [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Matrix>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> &Matrix {
        &self.grads[id.0]
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Register an input (parameter or constant). Gradients are accumulated
    /// for every input; callers read the ones they care about.
    pub fn input(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.input(Matrix::scalar(value))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert!(
            self.value(a).same_shape(self.value(b)),
            "add shape mismatch: {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let mut value = self.value(a).clone();
        value.add_scaled(self.value(b), 1.0);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert!(
            self.value(a).same_shape(self.value(b)),
            "sub shape mismatch: {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let mut value = self.value(a).clone();
        value.add_scaled(self.value(b), -1.0);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert!(
            self.value(a).same_shape(self.value(b)),
            "mul shape mismatch: {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        );
        let (rows, cols) = self.value(a).shape();
        let mut value = Matrix::zeros(rows, cols);
        for ((o, &x), &y) in value
            .as_mut_slice()
            .iter_mut()
            .zip(self.value(a).as_slice())
            .zip(self.value(b).as_slice())
        {
            *o = x * y;
        }
        self.push(value, Op::Mul(a, b))
    }

    /// Elementwise scale*x + shift with constant coefficients.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        self.affine(x, factor, 0.0)
    }

    /// x (n x d) plus a bias row (1 x d) broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (rows, cols) = self.value(x).shape();
        assert_eq!(
            self.value(bias).shape(),
            (1, cols),
            "add_bias expects a 1x{cols} bias"
        );
        let mut value = self.value(x).clone();
        for i in 0..rows {
            let brow = self.value(bias).row(0).to_vec();
            for (o, b) in value.row_mut(i).iter_mut().zip(&brow) {
                *o += b;
            }
        }
        self.push(value, Op::AddBias(x, bias))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(softplus);
        self.push(value, Op::Softplus(x))
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::ln);
        self.push(value, Op::Ln(x))
    }

    pub fn ln_clamped(&mut self, x: NodeId, floor: f64) -> NodeId {
        let value = self.value(x).map(|v| v.max(floor).ln());
        self.push(value, Op::LnClamped(x, floor))
    }

    pub fn clamp_min(&mut self, x: NodeId, min: f64) -> NodeId {
        let value = self.value(x).map(|v| v.max(min));
        self.push(value, Op::ClampMin(x, min))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x))
    }

    /// Row-wise softmax. With `causal = true` the input must be square and
    /// row i is normalized over columns 0..=i; the rest are exactly zero.
    pub fn softmax_rows(&mut self, x: NodeId, causal: bool) -> NodeId {
        let m = self.value(x);
        if causal {
            assert_eq!(m.rows(), m.cols(), "causal softmax expects a square matrix");
        }
        let mut value = Matrix::zeros(m.rows(), m.cols());
        for i in 0..m.rows() {
            let visible = if causal { i + 1 } else { m.cols() };
            let probs = softmax_unchecked(&m.row(i)[..visible]);
            value.row_mut(i)[..visible].copy_from_slice(&probs);
        }
        self.push(value, Op::SoftmaxRows { x, causal })
    }

    pub fn select_row(&mut self, x: NodeId, row: usize) -> NodeId {
        let value = Matrix::row_vector(self.value(x).row(row));
        self.push(value, Op::SelectRow(x, row))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.as_slice());
        }
        let value = Matrix::from_vec(rows, cols, data).expect("sized above");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    /// Concatenate matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p).clone();
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                value.row_mut(i)[offset..offset + m.cols()].copy_from_slice(m.row(i));
            }
            offset += m.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let m = self.value(x);
        assert!(start + len <= m.cols(), "slice_cols out of range");
        let mut value = Matrix::zeros(m.rows(), len);
        for i in 0..m.rows() {
            value
                .row_mut(i)
                .copy_from_slice(&m.row(i)[start..start + len]);
        }
        self.push(value, Op::SliceCols { x, start, len })
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = Matrix::scalar(self.value(x).sum());
        self.push(value, Op::SumAll(x))
    }

    /// Column means over rows. Each column is summed in sorted value order,
    /// so permuting the rows gives a bit-identical result.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let m = self.value(x);
        let n = m.rows();
        let mut value = Matrix::zeros(1, m.cols());
        let mut column = Vec::with_capacity(n);
        for j in 0..m.cols() {
            column.clear();
            column.extend((0..n).map(|i| m.get(i, j)));
            column.sort_by(f64::total_cmp);
            value.set(0, j, column.iter().sum::<f64>() / n as f64);
        }
        self.push(value, Op::MeanRows(x))
    }

    /// Multiply a matrix node by a 1x1 scalar node.
    pub fn scale_by(&mut self, scalar: NodeId, x: NodeId) -> NodeId {
        assert_eq!(self.value(scalar).shape(), (1, 1), "scale_by expects a 1x1 scalar");
        let s = self.value(scalar).item();
        let value = self.value(x).map(|v| s * v);
        self.push(value, Op::ScaleBy { scalar, x })
    }

    /// Per-row layer normalization with learnable gain and bias (both 1 x d).
    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let m = self.value(x);
        let d = m.cols();
        assert_eq!(self.value(gain).shape(), (1, d), "layer norm gain shape");
        assert_eq!(self.value(bias).shape(), (1, d), "layer norm bias shape");
        let mut value = Matrix::zeros(m.rows(), d);
        for i in 0..m.rows() {
            let row = m.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                let normed = (row[j] - mean) * inv_std;
                value.set(i, j, self.value(gain).get(0, j) * normed + self.value(bias).get(0, j));
            }
        }
        self.push(value, Op::LayerNormRows { x, gain, bias, eps })
    }

    /// Backpropagate from a 1x1 loss node. Returns a gradient per node,
    /// zero for anything the loss does not depend on.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(
            self.value(loss).shape(),
            (1, 1),
            "backward expects a scalar loss node"
        );
        let mut grads: Vec<Matrix> = self
            .nodes
            .iter()
            .map(|n| Matrix::zeros(n.value.rows(), n.value.cols()))
            .collect();
        grads[loss.0].set(0, 0, 1.0);

        for idx in (0..=loss.0).rev() {
            // Split so the upstream gradient can be read while parents are written.
            let (before, rest) = grads.split_at_mut(idx);
            let go = &rest[0];
            if go.as_slice().iter().all(|&g| g == 0.0) {
                continue;
            }
            match &self.nodes[idx].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = go.matmul(&self.nodes[b.0].value.transpose());
                    let gb = self.nodes[a.0].value.transpose().matmul(go);
                    before[a.0].add_scaled(&ga, 1.0);
                    before[b.0].add_scaled(&gb, 1.0);
                }
                Op::Add(a, b) => {
                    before[a.0].add_scaled(go, 1.0);
                    before[b.0].add_scaled(go, 1.0);
                }
                Op::Sub(a, b) => {
                    before[a.0].add_scaled(go, 1.0);
                    before[b.0].add_scaled(go, -1.0);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    for (k, &g) in go.as_slice().iter().enumerate() {
                        before[a.0].as_mut_slice()[k] += g * bv.as_slice()[k];
                        before[b.0].as_mut_slice()[k] += g * av.as_slice()[k];
                    }
                }
                Op::Affine(x, scale) => {
                    before[x.0].add_scaled(go, *scale);
                }
                Op::AddBias(x, bias) => {
                    before[x.0].add_scaled(go, 1.0);
                    let cols = go.cols();
                    for i in 0..go.rows() {
                        for j in 0..cols {
                            let g = go.get(i, j);
                            let cur = before[bias.0].get(0, j);
                            before[bias.0].set(0, j, cur + g);
                        }
                    }
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[idx].value;
                    for (k, &g) in go.as_slice().iter().enumerate() {
                        let t = y.as_slice()[k];
                        before[x.0].as_mut_slice()[k] += g * (1.0 - t * t);
                    }
                }
                Op::Softplus(x) => {
                    let xv = self.nodes[x.0].value.clone();
                    for (k, &g) in go.as_slice().iter().enumerate() {
                        before[x.0].as_mut_slice()[k] += g * sigmoid(xv.as_slice()[k]);
                    }
                }
                Op::Ln(x) => {
                    let xv = self.nodes[x.0].value.clone();
                    for (k, &g) in go.as_slice().iter().enumerate() {
                        before[x.0].as_mut_slice()[k] += g / xv.as_slice()[k];
                    }
                }
                Op::LnClamped(x, floor) => {
                    let xv = self.nodes[x.0].value.clone();
                    for (k, &g) in go.as_slice().iter().enumerate() {
                        let v = xv.as_slice()[k];
                        if v > *floor {
                            before[x.0].as_mut_slice()[k] += g / v;
                        }
                    }
                }
                Op::ClampMin(x, min) => {
                    let xv = self.nodes[x.0].value.clone();
                    for (k, &g) in go.as_slice().iter().enumerate() {
                        if xv.as_slice()[k] >= *min {
                            before[x.0].as_mut_slice()[k] += g;
                        }
                    }
                }
                Op::Transpose(x) => {
                    before[x.0].add_scaled(&go.transpose(), 1.0);
                }
                Op::SoftmaxRows { x, causal } => {
                    let y = &self.nodes[idx].value;
                    for i in 0..y.rows() {
                        let visible = if *causal { i + 1 } else { y.cols() };
                        let yrow = &y.row(i)[..visible];
                        let grow = &go.row(i)[..visible];
                        let dot: f64 = yrow.iter().zip(grow).map(|(p, g)| p * g).sum();
                        for j in 0..visible {
                            let cur = before[x.0].get(i, j);
                            before[x.0].set(i, j, cur + yrow[j] * (grow[j] - dot));
                        }
                    }
                }
                Op::SelectRow(x, row) => {
                    for (j, &g) in go.row(0).iter().enumerate() {
                        let cur = before[x.0].get(*row, j);
                        before[x.0].set(*row, j, cur + g);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.nodes[p.0].value.rows();
                        for i in 0..rows {
                            let src = go.row(offset + i).to_vec();
                            for (g, s) in before[p.0].row_mut(i).iter_mut().zip(&src) {
                                *g += s;
                            }
                        }
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.nodes[p.0].value.cols();
                        for i in 0..go.rows() {
                            let src = go.row(i)[offset..offset + cols].to_vec();
                            for (g, s) in before[p.0].row_mut(i).iter_mut().zip(&src) {
                                *g += s;
                            }
                        }
                        offset += cols;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    for i in 0..go.rows() {
                        for j in 0..*len {
                            let cur = before[x.0].get(i, start + j);
                            before[x.0].set(i, start + j, cur + go.get(i, j));
                        }
                    }
                }
                Op::SumAll(x) => {
                    let g = go.item();
                    for v in before[x.0].as_mut_slice() {
                        *v += g;
                    }
                }
                Op::MeanRows(x) => {
                    let n = self.nodes[x.0].value.rows();
                    let inv = 1.0 / n as f64;
                    for i in 0..n {
                        let src = go.row(0).to_vec();
                        for (g, s) in before[x.0].row_mut(i).iter_mut().zip(&src) {
                            *g += s * inv;
                        }
                    }
                }
                Op::ScaleBy { scalar, x } => {
                    let s = self.nodes[scalar.0].value.item();
                    let xv = self.nodes[x.0].value.clone();
                    let mut gs = 0.0;
                    for (k, &g) in go.as_slice().iter().enumerate() {
                        gs += g * xv.as_slice()[k];
                        before[x.0].as_mut_slice()[k] += g * s;
                    }
                    let cur = before[scalar.0].get(0, 0);
                    before[scalar.0].set(0, 0, cur + gs);
                }
                Op::LayerNormRows { x, gain, bias, eps } => {
                    let xv = self.nodes[x.0].value.clone();
                    let gv = self.nodes[gain.0].value.clone();
                    let d = xv.cols();
                    for i in 0..xv.rows() {
                        let row = xv.row(i);
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let normed: Vec<f64> =
                            row.iter().map(|v| (v - mean) * inv_std).collect();
                        let dy = go.row(i);
                        // d loss / d normed
                        let dxhat: Vec<f64> = dy
                            .iter()
                            .enumerate()
                            .map(|(j, g)| g * gv.get(0, j))
                            .collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dxhat_xhat = dxhat
                            .iter()
                            .zip(&normed)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            let dx =
                                inv_std * (dxhat[j] - mean_dxhat - normed[j] * mean_dxhat_xhat);
                            let cur = before[x.0].get(i, j);
                            before[x.0].set(i, j, cur + dx);
                            let curg = before[gain.0].get(0, j);
                            before[gain.0].set(0, j, curg + dy[j] * normed[j]);
                            let curb = before[bias.0].get(0, j);
                            before[bias.0].set(0, j, curb + dy[j]);
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff::{finite_diff_gradient, gradient_relative_error};
    use crate::numerics::rng::Rng;

    /// Check a tape program's analytic gradients against central differences.
    /// `build` must produce a scalar node from its inputs.
    fn check(build: impl Fn(&mut Tape, &[NodeId]) -> NodeId, inputs: &[Matrix]) {
        let shapes: Vec<(usize, usize)> = inputs.iter().map(Matrix::shape).collect();
        let flat: Vec<f64> = inputs
            .iter()
            .flat_map(|m| m.as_slice().iter().copied())
            .collect();

        let eval = |p: &[f64]| {
            let mut tape = Tape::new();
            let mut ids = Vec::new();
            let mut off = 0;
            for &(r, c) in &shapes {
                let m = Matrix::from_vec(r, c, p[off..off + r * c].to_vec()).unwrap();
                ids.push(tape.input(m));
                off += r * c;
            }
            let loss = build(&mut tape, &ids);
            (tape, ids, loss)
        };

        let numeric = finite_diff_gradient(
            |p| {
                let (tape, _, loss) = eval(p);
                Ok(tape.value(loss).item())
            },
            &flat,
            1e-5,
        )
        .unwrap();

        let (tape, ids, loss) = eval(&flat);
        let grads = tape.backward(loss);
        let analytic: Vec<f64> = ids
            .iter()
            .flat_map(|&id| grads.get(id).as_slice().iter().copied())
            .collect();

        for (k, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            let err = gradient_relative_error(a, n);
            assert!(
                err < 1e-6,
                "coordinate {k}: analytic {a} vs numeric {n} (rel err {err})"
            );
        }
    }

    fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.uniform_range(-1.0, 1.0))
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = Rng::new(1);
        let a = random_matrix(&mut rng, 3, 4);
        let b = random_matrix(&mut rng, 4, 2);
        check(
            |t, ids| {
                let c = t.matmul(ids[0], ids[1]);
                let d = t.tanh(c);
                t.sum_all(d)
            },
            &[a, b],
        );
    }

    #[test]
    fn grad_add_sub_mul_affine() {
        let mut rng = Rng::new(2);
        let a = random_matrix(&mut rng, 2, 3);
        let b = random_matrix(&mut rng, 2, 3);
        check(
            |t, ids| {
                let s = t.add(ids[0], ids[1]);
                let d = t.sub(s, ids[1]);
                let m = t.mul(d, ids[0]);
                let a = t.affine(m, 2.5, -0.75);
                t.sum_all(a)
            },
            &[a, b],
        );
    }

    #[test]
    fn grad_bias_and_activations() {
        let mut rng = Rng::new(3);
        let x = random_matrix(&mut rng, 4, 3);
        let b = random_matrix(&mut rng, 1, 3);
        check(
            |t, ids| {
                let h = t.add_bias(ids[0], ids[1]);
                let s = t.softplus(h);
                let l = t.ln(s); // softplus output is strictly positive
                let y = t.tanh(l);
                t.sum_all(y)
            },
            &[x, b],
        );
    }

    #[test]
    fn grad_softmax_rows_plain_and_causal() {
        let mut rng = Rng::new(4);
        let x = random_matrix(&mut rng, 4, 4);
        let w = random_matrix(&mut rng, 4, 4);
        for causal in [false, true] {
            check(
                |t, ids| {
                    let p = t.softmax_rows(ids[0], causal);
                    let m = t.mul(p, ids[1]);
                    t.sum_all(m)
                },
                &[x.clone(), w.clone()],
            );
        }
    }

    #[test]
    fn grad_transpose() {
        let mut rng = Rng::new(8);
        let a = random_matrix(&mut rng, 2, 5);
        let b = random_matrix(&mut rng, 2, 5);
        check(
            |t, ids| {
                let at = t.transpose(ids[0]);
                let prod = t.matmul(at, ids[1]); // 5x5
                let y = t.tanh(prod);
                t.sum_all(y)
            },
            &[a, b],
        );
    }

    #[test]
    fn grad_select_concat_slice() {
        let mut rng = Rng::new(5);
        let x = random_matrix(&mut rng, 3, 4);
        let y = random_matrix(&mut rng, 2, 4);
        check(
            |t, ids| {
                let stacked = t.concat_rows(&[ids[0], ids[1]]);
                let r = t.select_row(stacked, 4);
                let side = t.select_row(stacked, 0);
                let wide = t.concat_cols(&[r, side]);
                let part = t.slice_cols(wide, 2, 5);
                let sq = t.mul(part, part);
                t.sum_all(sq)
            },
            &[x, y],
        );
    }

    #[test]
    fn grad_mean_rows_and_scale_by() {
        let mut rng = Rng::new(6);
        let x = random_matrix(&mut rng, 5, 3);
        let s = random_matrix(&mut rng, 1, 1);
        check(
            |t, ids| {
                let m = t.mean_rows(ids[0]);
                let scaled = t.scale_by(ids[1], m);
                let sq = t.mul(scaled, scaled);
                t.sum_all(sq)
            },
            &[x, s],
        );
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = Rng::new(7);
        let x = random_matrix(&mut rng, 4, 6);
        let g = random_matrix(&mut rng, 1, 6);
        let b = random_matrix(&mut rng, 1, 6);
        check(
            |t, ids| {
                let n = t.layer_norm_rows(ids[0], ids[1], ids[2], 1e-5);
                let y = t.tanh(n);
                t.sum_all(y)
            },
            &[x, g, b],
        );
    }

    #[test]
    fn grad_clamp_and_ln_clamped_away_from_kinks() {
        let x = Matrix::row_vector(&[0.5, 2.0, -3.0, 0.25]);
        check(
            |t, ids| {
                let c = t.clamp_min(ids[0], -1.0);
                let sp = t.softplus(c);
                let l = t.ln_clamped(sp, 1e-12);
                t.sum_all(l)
            },
            &[x],
        );
    }

    #[test]
    fn clamp_regions_have_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::row_vector(&[-5.0, 5.0]));
        let c = tape.clamp_min(x, 0.0);
        let loss = tape.sum_all(c);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn untouched_inputs_get_exact_zero_gradients() {
        let mut tape = Tape::new();
        let used = tape.input(Matrix::row_vector(&[1.0, 2.0]));
        let unused = tape.input(Matrix::row_vector(&[3.0, 4.0]));
        let sq = tape.mul(used, used);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(unused).as_slice(), &[0.0, 0.0]);
        assert_eq!(grads.get(used).as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::scalar(3.0));
        let sq = tape.mul(x, x);
        let plus = tape.add(sq, x); // x^2 + x
        let loss = tape.sum_all(plus);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).item(), 7.0); // 2x + 1
    }

    #[test]
    fn causal_softmax_masks_strictly_above_diagonal() {
        let mut tape = Tape::new();
        let x = tape.input(Matrix::from_fn(3, 3, |i, j| (i * 3 + j) as f64));
        let p = tape.softmax_rows(x, true);
        let v = tape.value(p);
        assert_eq!(v.get(0, 0), 1.0);
        assert_eq!(v.get(0, 1), 0.0);
        assert_eq!(v.get(0, 2), 0.0);
        assert_eq!(v.get(1, 2), 0.0);
        for i in 0..3 {
            let s: f64 = v.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
