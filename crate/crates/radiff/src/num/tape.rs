use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

use super::tensor::Tensor;

/// Recorded operation. Input ids always precede the node's own id, so the
/// tape order is a valid topological order for the backward pass.
#[derive(Debug, Clone)]
#[allow(dead_code)] // some variants keep forward-only metadata for Debug output
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddConst(usize, f64),
    /// Broadcast a 1xC row over every row of an NxC matrix.
    AddRow(usize, usize),
    MulRow(usize, usize),
    Matmul(usize, usize),
    Transpose(usize),
    SumAll(usize),
    MeanAll(usize),
    MeanRows(usize),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    Tanh(usize),
    Softplus(usize),
    Gelu(usize),
    Abs(usize),
    SoftmaxRows(usize),
    LayerNormRows(usize, f64),
    GatherRows(usize, Rc<Vec<usize>>),
    SegmentSum(usize, Rc<Vec<usize>>, usize),
    SegmentSoftmax(usize, Rc<Vec<usize>>, usize),
    ScaleRows(usize, Rc<Vec<f64>>),
    /// Column-wise max over rows; saves the winning row per column.
    MaxOverRows(usize, Rc<Vec<usize>>),
    ConcatRows(usize, usize),
    ConcatCols(usize, usize),
    SliceRows(usize, usize, usize),
    SliceCols(usize, usize, usize),
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Reverse-mode autodiff tape. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to a value on the tape.
#[derive(Clone)]
pub struct Tx {
    tape: Tape,
    id: usize,
    rows: usize,
    cols: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, rows: usize, cols: usize, data: Vec<f64>, op: Op, requires_grad: bool) -> Tx {
        debug_assert_eq!(rows * cols, data.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            rows,
            cols,
            data,
            op,
            requires_grad,
        });
        Tx {
            tape: self.clone(),
            id,
            rows,
            cols,
        }
    }

    /// Leaf with gradient tracking.
    pub fn leaf(&self, t: &Tensor) -> Tx {
        assert_eq!(t.shape.len(), 2, "tape values are matrices, got {:?}", t.shape);
        self.push(t.shape[0], t.shape[1], t.data.clone(), Op::Leaf, true)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&self, t: &Tensor) -> Tx {
        assert_eq!(t.shape.len(), 2, "tape values are matrices, got {:?}", t.shape);
        self.push(t.shape[0], t.shape[1], t.data.clone(), Op::Leaf, false)
    }

    pub fn constant_from(&self, rows: usize, cols: usize, data: Vec<f64>) -> Tx {
        self.push(rows, cols, data, Op::Leaf, false)
    }

    pub fn scalar(&self, v: f64) -> Tx {
        self.push(1, 1, vec![v], Op::Leaf, false)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.inner.borrow().nodes[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar loss. Returns one gradient slot per
    /// node; only nodes reachable from `loss` that require grad are filled.
    pub fn backward(&self, loss: &Tx) -> Result<Grads> {
        if loss.rows != 1 || loss.cols != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got {}x{}",
                loss.rows, loss.cols
            )));
        }
        let inner = self.inner.borrow();
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &inner.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let mut acc = |tid: usize, contrib: Vec<f64>| {
                if !inner.nodes[tid].requires_grad {
                    return;
                }
                match &mut grads[tid] {
                    Some(existing) => {
                        for (e, c) in existing.iter_mut().zip(contrib) {
                            *e += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.iter().map(|v| -v).collect());
                }
                Op::Mul(a, b) => {
                    let va = &inner.nodes[*a].data;
                    let vb = &inner.nodes[*b].data;
                    acc(*a, g.iter().zip(vb).map(|(g, b)| g * b).collect());
                    acc(*b, g.iter().zip(va).map(|(g, a)| g * a).collect());
                }
                Op::Neg(a) => acc(*a, g.iter().map(|v| -v).collect()),
                Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
                Op::AddConst(a, _) => acc(*a, g.clone()),
                Op::AddRow(a, r) => {
                    let cols = node.cols;
                    acc(*a, g.clone());
                    let mut rg = vec![0.0; cols];
                    for row in g.chunks(cols) {
                        for (o, v) in rg.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(*r, rg);
                }
                Op::MulRow(a, r) => {
                    let cols = node.cols;
                    let va = &inner.nodes[*a].data;
                    let vr = &inner.nodes[*r].data;
                    let ga: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * vr[i % cols])
                        .collect();
                    acc(*a, ga);
                    let mut rg = vec![0.0; cols];
                    for (i, v) in g.iter().enumerate() {
                        rg[i % cols] += v * va[i];
                    }
                    acc(*r, rg);
                }
                Op::Matmul(a, b) => {
                    let na = &inner.nodes[*a];
                    let nb = &inner.nodes[*b];
                    // dA = G B^T, dB = A^T G
                    let (n, k, m) = (na.rows, na.cols, nb.cols);
                    let mut ga = vec![0.0; n * k];
                    for i in 0..n {
                        for j in 0..m {
                            let gij = g[i * m + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for l in 0..k {
                                ga[i * k + l] += gij * nb.data[l * m + j];
                            }
                        }
                    }
                    acc(*a, ga);
                    let mut gb = vec![0.0; k * m];
                    for i in 0..n {
                        for l in 0..k {
                            let ail = na.data[i * k + l];
                            if ail == 0.0 {
                                continue;
                            }
                            for j in 0..m {
                                gb[l * m + j] += ail * g[i * m + j];
                            }
                        }
                    }
                    acc(*b, gb);
                }
                Op::Transpose(a) => {
                    let (r, c) = (node.rows, node.cols);
                    let mut ga = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            ga[j * r + i] = g[i * c + j];
                        }
                    }
                    acc(*a, ga);
                }
                Op::SumAll(a) => {
                    let na = &inner.nodes[*a];
                    acc(*a, vec![g[0]; na.data.len()]);
                }
                Op::MeanAll(a) => {
                    let na = &inner.nodes[*a];
                    let v = g[0] / na.data.len() as f64;
                    acc(*a, vec![v; na.data.len()]);
                }
                Op::MeanRows(a) => {
                    let na = &inner.nodes[*a];
                    let scale = 1.0 / na.rows as f64;
                    let mut ga = vec![0.0; na.data.len()];
                    for i in 0..na.rows {
                        for j in 0..na.cols {
                            ga[i * na.cols + j] = g[j] * scale;
                        }
                    }
                    acc(*a, ga);
                }
                Op::Sqrt(a) => {
                    let y = &node.data;
                    acc(*a, g.iter().zip(y).map(|(g, y)| g * 0.5 / y).collect());
                }
                Op::Exp(a) => {
                    let y = &node.data;
                    acc(*a, g.iter().zip(y).map(|(g, y)| g * y).collect());
                }
                Op::Log(a) => {
                    let x = &inner.nodes[*a].data;
                    acc(*a, g.iter().zip(x).map(|(g, x)| g / x).collect());
                }
                Op::Tanh(a) => {
                    let y = &node.data;
                    acc(*a, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
                }
                Op::Softplus(a) => {
                    let x = &inner.nodes[*a].data;
                    acc(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(g, x)| g / (1.0 + (-x).exp()))
                            .collect(),
                    );
                }
                Op::Gelu(a) => {
                    let x = &inner.nodes[*a].data;
                    acc(*a, g.iter().zip(x).map(|(g, x)| g * gelu_grad(*x)).collect());
                }
                Op::Abs(a) => {
                    let x = &inner.nodes[*a].data;
                    acc(
                        *a,
                        g.iter()
                            .zip(x)
                            .map(|(g, x)| {
                                g * if *x > 0.0 {
                                    1.0
                                } else if *x < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    );
                }
                Op::SoftmaxRows(a) => {
                    let p = &node.data;
                    let cols = node.cols;
                    let mut ga = vec![0.0; p.len()];
                    for r in 0..node.rows {
                        let base = r * cols;
                        let dot: f64 = (0..cols).map(|j| p[base + j] * g[base + j]).sum();
                        for j in 0..cols {
                            ga[base + j] = p[base + j] * (g[base + j] - dot);
                        }
                    }
                    acc(*a, ga);
                }
                Op::LayerNormRows(a, eps) => {
                    let x = &inner.nodes[*a].data;
                    let cols = node.cols;
                    let n = cols as f64;
                    let mut ga = vec![0.0; x.len()];
                    for r in 0..node.rows {
                        let base = r * cols;
                        let row = &x[base..base + cols];
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gy = &g[base..base + cols];
                        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                        let gsum: f64 = gy.iter().sum();
                        let gxhat: f64 = gy.iter().zip(&xhat).map(|(g, h)| g * h).sum();
                        for j in 0..cols {
                            ga[base + j] = inv / n * (n * gy[j] - gsum - xhat[j] * gxhat);
                        }
                    }
                    acc(*a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let na = &inner.nodes[*a];
                    let cols = na.cols;
                    let mut ga = vec![0.0; na.data.len()];
                    for (out_row, &src) in idx.iter().enumerate() {
                        for j in 0..cols {
                            ga[src * cols + j] += g[out_row * cols + j];
                        }
                    }
                    acc(*a, ga);
                }
                Op::SegmentSum(a, seg, _) => {
                    let na = &inner.nodes[*a];
                    let cols = na.cols;
                    let mut ga = vec![0.0; na.data.len()];
                    for (row, &s) in seg.iter().enumerate() {
                        for j in 0..cols {
                            ga[row * cols + j] = g[s * cols + j];
                        }
                    }
                    acc(*a, ga);
                }
                Op::SegmentSoftmax(a, seg, nseg) => {
                    let p = &node.data;
                    let mut dots = vec![0.0; *nseg];
                    for (row, &s) in seg.iter().enumerate() {
                        dots[s] += p[row] * g[row];
                    }
                    let ga: Vec<f64> = seg
                        .iter()
                        .enumerate()
                        .map(|(row, &s)| p[row] * (g[row] - dots[s]))
                        .collect();
                    acc(*a, ga);
                }
                Op::ScaleRows(a, factors) => {
                    let cols = node.cols;
                    let ga: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, v)| v * factors[i / cols])
                        .collect();
                    acc(*a, ga);
                }
                Op::MaxOverRows(a, argmax) => {
                    let na = &inner.nodes[*a];
                    let cols = na.cols;
                    let mut ga = vec![0.0; na.data.len()];
                    for j in 0..cols {
                        ga[argmax[j] * cols + j] = g[j];
                    }
                    acc(*a, ga);
                }
                Op::ConcatRows(a, b) => {
                    let na = &inner.nodes[*a];
                    acc(*a, g[..na.data.len()].to_vec());
                    acc(*b, g[na.data.len()..].to_vec());
                }
                Op::ConcatCols(a, b) => {
                    let na = &inner.nodes[*a];
                    let nb = &inner.nodes[*b];
                    let (ca, cb) = (na.cols, nb.cols);
                    let mut ga = vec![0.0; na.data.len()];
                    let mut gb = vec![0.0; nb.data.len()];
                    for r in 0..node.rows {
                        ga[r * ca..(r + 1) * ca]
                            .copy_from_slice(&g[r * (ca + cb)..r * (ca + cb) + ca]);
                        gb[r * cb..(r + 1) * cb]
                            .copy_from_slice(&g[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                    acc(*a, ga);
                    acc(*b, gb);
                }
                Op::SliceRows(a, start, _) => {
                    let na = &inner.nodes[*a];
                    let cols = na.cols;
                    let mut ga = vec![0.0; na.data.len()];
                    ga[start * cols..start * cols + g.len()].copy_from_slice(&g);
                    acc(*a, ga);
                }
                Op::SliceCols(a, start, end) => {
                    let na = &inner.nodes[*a];
                    let w = end - start;
                    let mut ga = vec![0.0; na.data.len()];
                    for r in 0..node.rows {
                        ga[r * na.cols + start..r * na.cols + end]
                            .copy_from_slice(&g[r * w..(r + 1) * w]);
                    }
                    acc(*a, ga);
                }
            }
        }
        Ok(Grads { grads })
    }
}

/// Gradient container produced by one backward sweep.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, x: &Tx) -> Option<Tensor> {
        self.grads[x.id]
            .as_ref()
            .map(|g| Tensor::new(vec![x.rows, x.cols], g.clone()))
    }
}

fn gelu_val(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

impl Tx {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn value(&self) -> Tensor {
        let inner = self.tape.inner.borrow();
        let node = &inner.nodes[self.id];
        Tensor::new(vec![node.rows, node.cols], node.data.clone())
    }

    pub fn scalar_value(&self) -> f64 {
        assert_eq!((self.rows, self.cols), (1, 1), "not a scalar");
        self.tape.inner.borrow().nodes[self.id].data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn unary(&self, op: impl Fn(usize) -> Op, data: Vec<f64>, rows: usize, cols: usize) -> Tx {
        let rg = self.requires_grad();
        self.tape.push(rows, cols, data, op(self.id), rg)
    }

    fn same_shape(&self, other: &Tx, what: &str) {
        assert!(
            self.rows == other.rows && self.cols == other.cols,
            "{what}: shape mismatch {}x{} vs {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
    }

    fn data(&self) -> std::cell::Ref<'_, TapeInner> {
        self.tape.inner.borrow()
    }

    pub fn add(&self, other: &Tx) -> Tx {
        self.same_shape(other, "add");
        let inner = self.data();
        let d: Vec<f64> = inner.nodes[self.id]
            .data
            .iter()
            .zip(&inner.nodes[other.id].data)
            .map(|(a, b)| a + b)
            .collect();
        drop(inner);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape
            .push(self.rows, self.cols, d, Op::Add(self.id, other.id), rg)
    }

    pub fn sub(&self, other: &Tx) -> Tx {
        self.same_shape(other, "sub");
        let inner = self.data();
        let d: Vec<f64> = inner.nodes[self.id]
            .data
            .iter()
            .zip(&inner.nodes[other.id].data)
            .map(|(a, b)| a - b)
            .collect();
        drop(inner);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape
            .push(self.rows, self.cols, d, Op::Sub(self.id, other.id), rg)
    }

    pub fn mul(&self, other: &Tx) -> Tx {
        self.same_shape(other, "mul");
        let inner = self.data();
        let d: Vec<f64> = inner.nodes[self.id]
            .data
            .iter()
            .zip(&inner.nodes[other.id].data)
            .map(|(a, b)| a * b)
            .collect();
        drop(inner);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape
            .push(self.rows, self.cols, d, Op::Mul(self.id, other.id), rg)
    }

    pub fn neg(&self) -> Tx {
        let d: Vec<f64> = self.data().nodes[self.id].data.iter().map(|v| -v).collect();
        self.unary(Op::Neg, d, self.rows, self.cols)
    }

    pub fn scale(&self, c: f64) -> Tx {
        let d: Vec<f64> = self.data().nodes[self.id]
            .data
            .iter()
            .map(|v| v * c)
            .collect();
        self.unary(|a| Op::Scale(a, c), d, self.rows, self.cols)
    }

    pub fn add_const(&self, c: f64) -> Tx {
        let d: Vec<f64> = self.data().nodes[self.id]
            .data
            .iter()
            .map(|v| v + c)
            .collect();
        self.unary(|a| Op::AddConst(a, c), d, self.rows, self.cols)
    }

    /// Broadcast-add a 1xC row to every row.
    pub fn add_row(&self, row: &Tx) -> Tx {
        assert!(
            row.rows == 1 && row.cols == self.cols,
            "add_row: shape mismatch {}x{} vs {}x{}",
            self.rows,
            self.cols,
            row.rows,
            row.cols
        );
        let inner = self.data();
        let r = &inner.nodes[row.id].data;
        let d: Vec<f64> = inner.nodes[self.id]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + r[i % self.cols])
            .collect();
        drop(inner);
        let rg = self.requires_grad() || row.requires_grad();
        self.tape
            .push(self.rows, self.cols, d, Op::AddRow(self.id, row.id), rg)
    }

    pub fn mul_row(&self, row: &Tx) -> Tx {
        assert!(
            row.rows == 1 && row.cols == self.cols,
            "mul_row: shape mismatch {}x{} vs {}x{}",
            self.rows,
            self.cols,
            row.rows,
            row.cols
        );
        let inner = self.data();
        let r = &inner.nodes[row.id].data;
        let d: Vec<f64> = inner.nodes[self.id]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v * r[i % self.cols])
            .collect();
        drop(inner);
        let rg = self.requires_grad() || row.requires_grad();
        self.tape
            .push(self.rows, self.cols, d, Op::MulRow(self.id, row.id), rg)
    }

    pub fn matmul(&self, other: &Tx) -> Tx {
        assert_eq!(
            self.cols, other.rows,
            "matmul: inner extents differ, {}x{} vs {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let inner = self.data();
        let a = &inner.nodes[self.id].data;
        let b = &inner.nodes[other.id].data;
        let mut d = vec![0.0; n * m];
        for i in 0..n {
            for l in 0..k {
                let ail = a[i * k + l];
                if ail == 0.0 {
                    continue;
                }
                let brow = &b[l * m..(l + 1) * m];
                let drow = &mut d[i * m..(i + 1) * m];
                for (dv, bv) in drow.iter_mut().zip(brow) {
                    *dv += ail * bv;
                }
            }
        }
        drop(inner);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape
            .push(n, m, d, Op::Matmul(self.id, other.id), rg)
    }

    pub fn t(&self) -> Tx {
        let inner = self.data();
        let a = &inner.nodes[self.id].data;
        let mut d = vec![0.0; a.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                d[j * self.rows + i] = a[i * self.cols + j];
            }
        }
        drop(inner);
        self.unary(Op::Transpose, d, self.cols, self.rows)
    }

    pub fn sum_all(&self) -> Tx {
        let s: f64 = self.data().nodes[self.id].data.iter().sum();
        self.unary(Op::SumAll, vec![s], 1, 1)
    }

    pub fn mean_all(&self) -> Tx {
        let inner = self.data();
        let d = &inner.nodes[self.id].data;
        let s: f64 = d.iter().sum::<f64>() / d.len() as f64;
        drop(inner);
        self.unary(Op::MeanAll, vec![s], 1, 1)
    }

    /// Mean over rows, giving a 1xC row.
    pub fn mean_rows(&self) -> Tx {
        let inner = self.data();
        let a = &inner.nodes[self.id].data;
        let mut d = vec![0.0; self.cols];
        for row in a.chunks(self.cols) {
            for (o, v) in d.iter_mut().zip(row) {
                *o += v;
            }
        }
        for v in &mut d {
            *v /= self.rows as f64;
        }
        drop(inner);
        self.unary(Op::MeanRows, d, 1, self.cols)
    }

    fn map(&self, f: impl Fn(f64) -> f64, op: impl Fn(usize) -> Op) -> Tx {
        let d: Vec<f64> = self.data().nodes[self.id].data.iter().map(|v| f(*v)).collect();
        self.unary(op, d, self.rows, self.cols)
    }

    pub fn sqrt(&self) -> Tx {
        self.map(f64::sqrt, Op::Sqrt)
    }

    pub fn exp(&self) -> Tx {
        self.map(f64::exp, Op::Exp)
    }

    pub fn log(&self) -> Tx {
        self.map(f64::ln, Op::Log)
    }

    pub fn tanh(&self) -> Tx {
        self.map(f64::tanh, Op::Tanh)
    }

    pub fn softplus(&self) -> Tx {
        self.map(
            |x| {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            },
            Op::Softplus,
        )
    }

    pub fn gelu(&self) -> Tx {
        self.map(gelu_val, Op::Gelu)
    }

    pub fn abs(&self) -> Tx {
        self.map(f64::abs, Op::Abs)
    }

    pub fn square(&self) -> Tx {
        self.mul(self)
    }

    pub fn softmax_rows(&self) -> Tx {
        let inner = self.data();
        let a = &inner.nodes[self.id].data;
        let mut d = vec![0.0; a.len()];
        for (r, row) in a.chunks(self.cols).enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = (v - max).exp();
                d[r * self.cols + j] = e;
                sum += e;
            }
            for j in 0..self.cols {
                d[r * self.cols + j] /= sum;
            }
        }
        drop(inner);
        self.unary(Op::SoftmaxRows, d, self.rows, self.cols)
    }

    pub fn layer_norm_rows(&self, eps: f64) -> Tx {
        let inner = self.data();
        let a = &inner.nodes[self.id].data;
        let n = self.cols as f64;
        let mut d = vec![0.0; a.len()];
        for (r, row) in a.chunks(self.cols).enumerate() {
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter().enumerate() {
                d[r * self.cols + j] = (v - mean) * inv;
            }
        }
        drop(inner);
        self.unary(|a| Op::LayerNormRows(a, eps), d, self.rows, self.cols)
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Tx {
        let inner = self.data();
        let a = &inner.nodes[self.id].data;
        let mut d = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            assert!(i < self.rows, "gather_rows: index {} out of {} rows", i, self.rows);
            d.extend_from_slice(&a[i * self.cols..(i + 1) * self.cols]);
        }
        drop(inner);
        let idx = Rc::new(idx.to_vec());
        self.unary(
            |a| Op::GatherRows(a, idx.clone()),
            d,
            idx.len(),
            self.cols,
        )
    }

    /// Sum rows into `n_seg` buckets given per-row segment ids.
    pub fn segment_sum(&self, seg: &[usize], n_seg: usize) -> Tx {
        assert_eq!(seg.len(), self.rows, "segment_sum: {} ids for {} rows", seg.len(), self.rows);
        let inner = self.data();
        let a = &inner.nodes[self.id].data;
        let mut d = vec![0.0; n_seg * self.cols];
        for (row, &s) in seg.iter().enumerate() {
            assert!(s < n_seg);
            for j in 0..self.cols {
                d[s * self.cols + j] += a[row * self.cols + j];
            }
        }
        drop(inner);
        let seg = Rc::new(seg.to_vec());
        self.unary(
            |a| Op::SegmentSum(a, seg.clone(), n_seg),
            d,
            n_seg,
            self.cols,
        )
    }

    /// Softmax of an Nx1 score column within each segment.
    pub fn segment_softmax(&self, seg: &[usize], n_seg: usize) -> Tx {
        assert_eq!(self.cols, 1, "segment_softmax expects an Nx1 column");
        assert_eq!(seg.len(), self.rows);
        let inner = self.data();
        let a = &inner.nodes[self.id].data;
        let mut maxes = vec![f64::NEG_INFINITY; n_seg];
        for (row, &s) in seg.iter().enumerate() {
            maxes[s] = maxes[s].max(a[row]);
        }
        let mut sums = vec![0.0; n_seg];
        let mut d = vec![0.0; a.len()];
        for (row, &s) in seg.iter().enumerate() {
            let e = (a[row] - maxes[s]).exp();
            d[row] = e;
            sums[s] += e;
        }
        for (row, &s) in seg.iter().enumerate() {
            d[row] /= sums[s];
        }
        drop(inner);
        let seg = Rc::new(seg.to_vec());
        self.unary(
            |a| Op::SegmentSoftmax(a, seg.clone(), n_seg),
            d,
            self.rows,
            1,
        )
    }

    /// Scale each row by a fixed (non-differentiated) factor.
    pub fn scale_rows(&self, factors: &[f64]) -> Tx {
        assert_eq!(factors.len(), self.rows);
        let inner = self.data();
        let a = &inner.nodes[self.id].data;
        let d: Vec<f64> = a
            .iter()
            .enumerate()
            .map(|(i, v)| v * factors[i / self.cols])
            .collect();
        drop(inner);
        let f = Rc::new(factors.to_vec());
        self.unary(|a| Op::ScaleRows(a, f.clone()), d, self.rows, self.cols)
    }

    /// Column-wise max over rows, giving a 1xC row.
    pub fn max_over_rows(&self) -> Tx {
        assert!(self.rows >= 1);
        let inner = self.data();
        let a = &inner.nodes[self.id].data;
        let mut d = vec![f64::NEG_INFINITY; self.cols];
        let mut arg = vec![0usize; self.cols];
        for r in 0..self.rows {
            for j in 0..self.cols {
                let v = a[r * self.cols + j];
                if v > d[j] {
                    d[j] = v;
                    arg[j] = r;
                }
            }
        }
        drop(inner);
        let arg = Rc::new(arg);
        self.unary(|a| Op::MaxOverRows(a, arg.clone()), d, 1, self.cols)
    }

    pub fn concat_rows(&self, other: &Tx) -> Tx {
        assert_eq!(
            self.cols, other.cols,
            "concat_rows: column mismatch {} vs {}",
            self.cols, other.cols
        );
        let inner = self.data();
        let mut d = inner.nodes[self.id].data.clone();
        d.extend_from_slice(&inner.nodes[other.id].data);
        drop(inner);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(
            self.rows + other.rows,
            self.cols,
            d,
            Op::ConcatRows(self.id, other.id),
            rg,
        )
    }

    pub fn concat_cols(&self, other: &Tx) -> Tx {
        assert_eq!(
            self.rows, other.rows,
            "concat_cols: row mismatch {} vs {}",
            self.rows, other.rows
        );
        let inner = self.data();
        let a = &inner.nodes[self.id].data;
        let b = &inner.nodes[other.id].data;
        let mut d = Vec::with_capacity(a.len() + b.len());
        for r in 0..self.rows {
            d.extend_from_slice(&a[r * self.cols..(r + 1) * self.cols]);
            d.extend_from_slice(&b[r * other.cols..(r + 1) * other.cols]);
        }
        drop(inner);
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(
            self.rows,
            self.cols + other.cols,
            d,
            Op::ConcatCols(self.id, other.id),
            rg,
        )
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Tx {
        assert!(start < end && end <= self.rows, "slice_rows({start},{end}) of {} rows", self.rows);
        let inner = self.data();
        let d = inner.nodes[self.id].data[start * self.cols..end * self.cols].to_vec();
        drop(inner);
        self.unary(
            |a| Op::SliceRows(a, start, end),
            d,
            end - start,
            self.cols,
        )
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Tx {
        assert!(start < end && end <= self.cols, "slice_cols({start},{end}) of {} cols", self.cols);
        let inner = self.data();
        let a = &inner.nodes[self.id].data;
        let mut d = Vec::with_capacity(self.rows * (end - start));
        for r in 0..self.rows {
            d.extend_from_slice(&a[r * self.cols + start..r * self.cols + end]);
        }
        drop(inner);
        self.unary(
            |a| Op::SliceCols(a, start, end),
            d,
            self.rows,
            end - start,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_identity() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![1, 3], vec![1.0, -2.0, 3.0]));
        let z = tape.constant(&Tensor::zeros(&[1, 3]));
        let y = x.add(&z);
        assert_eq!(y.value().data, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn matmul_ones() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::full(&[2, 3], 1.0));
        let b = tape.leaf(&Tensor::full(&[3, 2], 1.0));
        let c = a.matmul(&b);
        assert_eq!(c.value().data, vec![3.0; 4]);
    }

    #[test]
    #[should_panic(expected = "inner extents differ")]
    fn matmul_shape_mismatch_names_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::full(&[2, 3], 1.0));
        let b = tape.leaf(&Tensor::full(&[2, 2], 1.0));
        let _ = a.matmul(&b);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        // d/dx sum(x*x) = 2x
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let loss = x.mul(&x).sum_all();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap().data, vec![2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_no_grads() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let c = tape.scalar(5.0);
        let grads = tape.backward(&c).unwrap();
        assert!(grads.get(&x).is_none());
    }

    #[test]
    fn non_scalar_loss_errors() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let p = x.softmax_rows();
        let v = p.value();
        for row in v.data.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn wx_squared_matches_closed_form() {
        // loss = ||Wx||^2, grad_x = 2 W^T W x
        let tape = Tape::new();
        let w_vals = vec![1.0, 2.0, -1.0, 0.5, 0.0, 1.5];
        let x_vals = vec![0.3, -0.7];
        let w = tape.leaf(&Tensor::new(vec![3, 2], w_vals.clone()));
        let x = tape.leaf(&Tensor::new(vec![2, 1], x_vals.clone()));
        let y = w.matmul(&x);
        let loss = y.mul(&y).sum_all();
        let grads = tape.backward(&loss).unwrap();
        let gx = grads.get(&x).unwrap().data;
        // expected: 2 W^T (W x)
        let wx: Vec<f64> = (0..3)
            .map(|i| w_vals[i * 2] * x_vals[0] + w_vals[i * 2 + 1] * x_vals[1])
            .collect();
        for j in 0..2 {
            let expect: f64 = 2.0 * (0..3).map(|i| w_vals[i * 2 + j] * wx[i]).sum::<f64>();
            assert!((gx[j] - expect).abs() < 1e-12);
        }
    }
}
