//! Reverse-mode autodiff on a flat tape of eagerly evaluated ops.
//!
//! The tape owns every intermediate value. Callers bind parameters as leaves
//! at the start of a forward pass, build the graph with the op methods, and
//! read gradients back by leaf id after `backward`.

use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// `a @ b^T`
    MatMulNT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// broadcast a `1 x C` row over every row of `a`
    AddRow(NodeId, NodeId),
    MulRow(NodeId, NodeId),
    Scale(NodeId, f32),
    AddConst(NodeId),
    Relu(NodeId),
    /// per-row zero mean, unit variance
    NormalizeRows(NodeId, f32),
    /// per-row division by the L2 norm
    L2NormRows(NodeId, f32),
    SoftmaxRows(NodeId),
    LogSoftmaxRows(NodeId),
    /// gather rows of an embedding table
    Embed(NodeId, Vec<usize>),
    SliceRows(NodeId, usize),
    ConcatRows(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    /// out[r] = a[r, ids[r]]
    PickPerRow(NodeId, Vec<usize>),
    RowSum(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f32 {
        let t = self.value(id);
        assert_eq!(t.len(), 1, "not a scalar node");
        t.data[0]
    }

    /// Binds a tensor as a differentiable leaf (parameter or input).
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// A leaf whose gradient nobody reads; same mechanics, clearer intent.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.same_shape(tb), "add shape mismatch");
        let mut v = ta.clone();
        v.add_assign(tb);
        self.push(v, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.same_shape(tb), "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let v = Tensor::from_vec(ta.rows, ta.cols, data);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.rows, 1);
        assert_eq!(ta.cols, tr.cols);
        let mut v = ta.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] += tr.data[c];
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (ta, tr) = (self.value(a), self.value(row));
        assert_eq!(tr.rows, 1);
        assert_eq!(ta.cols, tr.cols);
        let mut v = ta.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] *= tr.data[c];
            }
        }
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, k: f32) -> NodeId {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    /// Adds a fixed tensor (e.g. an attention mask); no gradient flows into it.
    pub fn add_const(&mut self, a: NodeId, t: &Tensor) -> NodeId {
        let ta = self.value(a);
        assert!(ta.same_shape(t), "add_const shape mismatch");
        let mut v = ta.clone();
        v.add_assign(t);
        self.push(v, Op::AddConst(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn normalize_rows(&mut self, a: NodeId, eps: f32) -> NodeId {
        let ta = self.value(a);
        let mut v = ta.clone();
        for r in 0..v.rows {
            let row = &mut v.data[r * v.cols..(r + 1) * v.cols];
            let mean = row.iter().sum::<f32>() / row.len() as f32;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / row.len() as f32;
            let inv = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * inv;
            }
        }
        self.push(v, Op::NormalizeRows(a, eps))
    }

    pub fn l2norm_rows(&mut self, a: NodeId, eps: f32) -> NodeId {
        let ta = self.value(a);
        let mut v = ta.clone();
        for r in 0..v.rows {
            let row = &mut v.data[r * v.cols..(r + 1) * v.cols];
            let n = (row.iter().map(|x| x * x).sum::<f32>() + eps).sqrt();
            for x in row.iter_mut() {
                *x /= n;
            }
        }
        self.push(v, Op::L2NormRows(a, eps))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let mut v = ta.clone();
        for r in 0..v.rows {
            softmax_in_place(&mut v.data[r * v.cols..(r + 1) * v.cols]);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let mut v = ta.clone();
        for r in 0..v.rows {
            let row = &mut v.data[r * v.cols..(r + 1) * v.cols];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f32>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tt = self.value(table);
        let mut v = Tensor::zeros(ids.len(), tt.cols);
        for (r, &id) in ids.iter().enumerate() {
            assert!(id < tt.rows, "embedding id out of range");
            v.data[r * tt.cols..(r + 1) * tt.cols].copy_from_slice(tt.row(id));
        }
        self.push(v, Op::Embed(table, ids.to_vec()))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let ta = self.value(a);
        assert!(start + len <= ta.rows);
        let v = Tensor::from_vec(
            len,
            ta.cols,
            ta.data[start * ta.cols..(start + len) * ta.cols].to_vec(),
        );
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.cols, tb.cols);
        let mut data = ta.data.clone();
        data.extend_from_slice(&tb.data);
        let v = Tensor::from_vec(ta.rows + tb.rows, ta.cols, data);
        self.push(v, Op::ConcatRows(a, b))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.rows, tb.rows);
        let mut v = Tensor::zeros(ta.rows, ta.cols + tb.cols);
        for r in 0..ta.rows {
            v.data[r * v.cols..r * v.cols + ta.cols].copy_from_slice(ta.row(r));
            v.data[r * v.cols + ta.cols..(r + 1) * v.cols].copy_from_slice(tb.row(r));
        }
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn pick_per_row(&mut self, a: NodeId, ids: &[usize]) -> NodeId {
        let ta = self.value(a);
        assert_eq!(ta.rows, ids.len());
        let data = ids.iter().enumerate().map(|(r, &c)| ta.at(r, c)).collect();
        let v = Tensor::from_vec(ids.len(), 1, data);
        self.push(v, Op::PickPerRow(a, ids.to_vec()))
    }

    pub fn row_sum(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let data = (0..ta.rows).map(|r| ta.row(r).iter().sum()).collect();
        let v = Tensor::from_vec(ta.rows, 1, data);
        self.push(v, Op::RowSum(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f32::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f32::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let s = ta.data.iter().sum::<f32>() / ta.len() as f32;
        self.push(Tensor::scalar(s), Op::MeanAll(a))
    }

    /// Backpropagates from a scalar loss. Returns one gradient slot per node;
    /// nodes the loss does not depend on stay `None`.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                add_grad(grads, *a, g.matmul_nt(tb));
                add_grad(grads, *b, ta.matmul_tn(g));
            }
            Op::MatMulNT(a, b) => {
                // y = a b^T: da = g b; db = g^T a
                let (ta, tb) = (self.value(*a), self.value(*b));
                add_grad(grads, *a, g.matmul(tb));
                add_grad(grads, *b, g.matmul_tn(ta));
            }
            Op::Add(a, b) => {
                add_grad(grads, *a, g.clone());
                add_grad(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = Tensor::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect(),
                );
                let gb = Tensor::from_vec(
                    g.rows,
                    g.cols,
                    g.data.iter().zip(&ta.data).map(|(x, y)| x * y).collect(),
                );
                add_grad(grads, *a, ga);
                add_grad(grads, *b, gb);
            }
            Op::AddRow(a, row) => {
                add_grad(grads, *a, g.clone());
                let mut gr = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        gr.data[c] += g.at(r, c);
                    }
                }
                add_grad(grads, *row, gr);
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (self.value(*a), self.value(*row));
                let mut ga = g.clone();
                let mut gr = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        ga.data[r * g.cols + c] *= tr.data[c];
                        gr.data[c] += g.at(r, c) * ta.at(r, c);
                    }
                }
                add_grad(grads, *a, ga);
                add_grad(grads, *row, gr);
            }
            Op::Scale(a, k) => add_grad(grads, *a, g.map(|x| x * k)),
            Op::AddConst(a) => add_grad(grads, *a, g.clone()),
            Op::Relu(a) => {
                let ta = self.value(*a);
                let data = g.data.iter().zip(&ta.data).map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 }).collect();
                add_grad(grads, *a, Tensor::from_vec(g.rows, g.cols, data));
            }
            Op::NormalizeRows(a, eps) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(g.rows, g.cols);
                let n = g.cols as f32;
                for r in 0..g.rows {
                    let xr = ta.row(r);
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let mean = xr.iter().sum::<f32>() / n;
                    let var = xr.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean = gr.iter().sum::<f32>() / n;
                    let gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f32>() / n;
                    for c in 0..g.cols {
                        ga.data[r * g.cols + c] = inv * (gr[c] - gmean - yr[c] * gy);
                    }
                }
                add_grad(grads, *a, ga);
            }
            Op::L2NormRows(a, eps) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let xr = ta.row(r);
                    let gr = g.row(r);
                    let norm = (xr.iter().map(|x| x * x).sum::<f32>() + eps).sqrt();
                    let dot = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f32>();
                    for c in 0..g.cols {
                        ga.data[r * g.cols + c] = gr[c] / norm - xr[c] * dot / (norm * norm * norm);
                    }
                }
                add_grad(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f32>();
                    for c in 0..g.cols {
                        ga.data[r * g.cols + c] = yr[c] * (gr[c] - dot);
                    }
                }
                add_grad(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let yr = y.row(r); // log-probs
                    let gr = g.row(r);
                    let gsum = gr.iter().sum::<f32>();
                    for c in 0..g.cols {
                        ga.data[r * g.cols + c] = gr[c] - yr[c].exp() * gsum;
                    }
                }
                add_grad(grads, *a, ga);
            }
            Op::Embed(table, ids) => {
                let tt = self.value(*table);
                let mut gt = Tensor::zeros(tt.rows, tt.cols);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..g.cols {
                        gt.data[id * gt.cols + c] += g.at(r, c);
                    }
                }
                add_grad(grads, *table, gt);
            }
            Op::SliceRows(a, start) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows, ta.cols);
                for r in 0..g.rows {
                    let dst = (start + r) * ga.cols;
                    for c in 0..g.cols {
                        ga.data[dst + c] += g.at(r, c);
                    }
                }
                add_grad(grads, *a, ga);
            }
            Op::ConcatRows(a, b) => {
                let ra = self.value(*a).rows;
                let ga = Tensor::from_vec(ra, g.cols, g.data[..ra * g.cols].to_vec());
                let gb = Tensor::from_vec(g.rows - ra, g.cols, g.data[ra * g.cols..].to_vec());
                add_grad(grads, *a, ga);
                add_grad(grads, *b, gb);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols;
                let mut ga = Tensor::zeros(g.rows, ca);
                let mut gb = Tensor::zeros(g.rows, g.cols - ca);
                for r in 0..g.rows {
                    ga.data[r * ca..(r + 1) * ca].copy_from_slice(&g.row(r)[..ca]);
                    gb.data[r * gb.cols..(r + 1) * gb.cols].copy_from_slice(&g.row(r)[ca..]);
                }
                add_grad(grads, *a, ga);
                add_grad(grads, *b, gb);
            }
            Op::PickPerRow(a, ids) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows, ta.cols);
                for (r, &c) in ids.iter().enumerate() {
                    ga.data[r * ga.cols + c] += g.data[r];
                }
                add_grad(grads, *a, ga);
            }
            Op::RowSum(a) => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows, ta.cols);
                for r in 0..ta.rows {
                    for c in 0..ta.cols {
                        ga.data[r * ta.cols + c] = g.data[r];
                    }
                }
                add_grad(grads, *a, ga);
            }
            Op::Exp(a) => {
                let data = g.data.iter().zip(&y.data).map(|(gv, yv)| gv * yv).collect();
                add_grad(grads, *a, Tensor::from_vec(g.rows, g.cols, data));
            }
            Op::Ln(a) => {
                let ta = self.value(*a);
                let data = g.data.iter().zip(&ta.data).map(|(gv, xv)| gv / xv).collect();
                add_grad(grads, *a, Tensor::from_vec(g.rows, g.cols, data));
            }
            Op::SumAll(a) => {
                let ta = self.value(*a);
                add_grad(grads, *a, Tensor::filled(ta.rows, ta.cols, g.data[0]));
            }
            Op::MeanAll(a) => {
                let ta = self.value(*a);
                add_grad(grads, *a, Tensor::filled(ta.rows, ta.cols, g.data[0] / ta.len() as f32));
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

fn add_grad(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
