use super::{shape_err, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Mul(Var, Var),
    Matmul(Var, Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    Relu(Var),
    Concat(Vec<Var>),
    RowNorm(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    SoftmaxRows(Var),
    ComplexMul(Var, Var),
    PhaseToComplex(Var),
    RowSum(Var),
    Sum(Var),
    MulRows(Var, Var),
    ScaleRows(Var, Vec<f64>),
    Select(Var, usize),
    Column(Var, usize),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation so gradients can be pulled back through it.
///
/// A tape is built fresh for every forward pass. Leaves are either trainable
/// parameters or constants; every other node is the output of one op.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    relu_signature: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            relu_signature: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Hash of the sign pattern (negative / zero / positive) of every ReLU
    /// input seen so far. Two evaluations with equal signatures sit on the same
    /// linear piece of every ReLU.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, a: Var) -> Result<(usize, usize), TensorError> {
        let t = self.value(a);
        if !t.is_matrix() {
            return Err(shape_err(op, format!("expected a matrix, got {:?}", t.shape())));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor {
            shape: x.shape().to_vec(),
            data,
        }
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let x = self.value(a);
        Tensor {
            shape: x.shape().to_vec(),
            data: x.data().iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |p, q| p + q);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |p, q| p - q);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let out = self.map(a, |p| c * p);
        self.push("scale", out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let out = self.map(a, |p| p + c);
        self.push("add_scalar", out, Op::AddScalar(a), &[a])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |p, q| p * q);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (n, k) = self.matrix("matmul", a)?;
        let (k2, m) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{n}x{k} times {k2}x{m}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push("matmul", Tensor::matrix(n, m, out)?, Op::Matmul(a, b), &[a, b])
    }

    /// `out[i] = a[index[i]]`.
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Result<Var, TensorError> {
        let (n, d) = self.matrix("gather_rows", a)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather_rows", format!("row {bad} out of {n}")));
        }
        let src = self.value(a);
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in &index {
            data.extend_from_slice(src.row(i));
        }
        let out = Tensor::matrix(index.len(), d, data)?;
        self.push("gather_rows", out, Op::GatherRows(a, index), &[a])
    }

    /// `out[index[i]] += a[i]` into a zero matrix with `rows` rows.
    pub fn scatter_add_rows(&mut self, a: Var, index: Vec<usize>, rows: usize) -> Result<Var, TensorError> {
        let (m, d) = self.matrix("scatter_add_rows", a)?;
        if index.len() != m {
            return Err(shape_err(
                "scatter_add_rows",
                format!("{} indices for {m} rows", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(shape_err("scatter_add_rows", format!("target row {bad} out of {rows}")));
        }
        let src = self.value(a);
        let mut out = Tensor::zeros(&[rows, d]);
        for (i, &dst) in index.iter().enumerate() {
            for (o, &v) in out.row_mut(dst).iter_mut().zip(src.row(i)) {
                *o += v;
            }
        }
        self.push("scatter_add_rows", out, Op::ScatterAddRows(a, index), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let mut sig = self.relu_signature;
        for &v in self.value(a).data() {
            let class: u64 = if v > 0.0 {
                2
            } else if v < 0.0 {
                0
            } else {
                1
            };
            sig = (sig ^ class).wrapping_mul(FNV_PRIME);
        }
        self.relu_signature = sig;
        let out = self.map(a, |p| if p > 0.0 { p } else { 0.0 });
        self.push("relu", out, Op::Relu(a), &[a])
    }

    /// Concatenate matrices with equal row counts along the last axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let mut widths = Vec::with_capacity(parts.len());
        let (n, _) = self.matrix("concat", parts[0])?;
        for &p in parts {
            let (r, c) = self.matrix("concat", p)?;
            if r != n {
                return Err(shape_err("concat", format!("row counts {n} and {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(n, total, data)?;
        self.push("concat", out, Op::Concat(parts.to_vec()), parts)
    }

    /// L2 norm of each row, as an `n x 1` column.
    pub fn row_norm(&mut self, a: Var) -> Result<Var, TensorError> {
        let (n, _) = self.matrix("row_norm", a)?;
        let x = self.value(a);
        let data = (0..n).map(|i| x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let out = Tensor::matrix(n, 1, data)?;
        self.push("row_norm", out, Op::RowNorm(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.map(a, sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a), &[a])
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let out = self.map(a, log_sigmoid);
        self.push("log_sigmoid", out, Op::LogSigmoid(a), &[a])
    }

    /// Softmax over the last axis of each row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        let c = x.cols();
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        self.push("softmax", out, Op::SoftmaxRows(a), &[a])
    }

    /// Hadamard product of complex vectors stored as interleaved `(re, im)` pairs.
    pub fn complex_mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("complex_mul", a, b)?;
        if self.value(a).cols() % 2 != 0 {
            return Err(shape_err("complex_mul", "odd width for interleaved complex layout"));
        }
        let (x, y) = (self.value(a), self.value(b));
        let mut data = vec![0.0; x.numel()];
        for ((o, p), q) in data.chunks_mut(2).zip(x.data().chunks(2)).zip(y.data().chunks(2)) {
            o[0] = p[0] * q[0] - p[1] * q[1];
            o[1] = p[0] * q[1] + p[1] * q[0];
        }
        let out = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        self.push("complex_mul", out, Op::ComplexMul(a, b), &[a, b])
    }

    /// Map an `n x m` matrix of phases to `n x 2m` unit complex numbers `(cos, sin)`.
    pub fn phase_to_complex(&mut self, a: Var) -> Result<Var, TensorError> {
        let (n, m) = self.matrix("phase_to_complex", a)?;
        let mut data = Vec::with_capacity(n * m * 2);
        for &p in self.value(a).data() {
            data.push(p.cos());
            data.push(p.sin());
        }
        let out = Tensor::matrix(n, 2 * m, data)?;
        self.push("phase_to_complex", out, Op::PhaseToComplex(a), &[a])
    }

    /// Sum over the last axis of a matrix, as an `n x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let (n, _) = self.matrix("row_sum", a)?;
        let x = self.value(a);
        let data = (0..n).map(|i| x.row(i).iter().sum()).collect();
        let out = Tensor::matrix(n, 1, data)?;
        self.push("row_sum", out, Op::RowSum(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Multiply each row of `a` (`n x d`) by the matching entry of column `s` (`n x 1`).
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let (n, d) = self.matrix("mul_rows", a)?;
        if self.shape(s) != [n, 1] {
            return Err(shape_err("mul_rows", format!("scale shape {:?} for {n} rows", self.shape(s))));
        }
        let (x, c) = (self.value(a), self.value(s));
        let mut data = x.data().to_vec();
        for (row, &k) in data.chunks_mut(d.max(1)).zip(c.data()) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        let out = Tensor::matrix(n, d, data)?;
        self.push("mul_rows", out, Op::MulRows(a, s), &[a, s])
    }

    /// Multiply each row by a constant factor.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var, TensorError> {
        let (n, d) = self.matrix("scale_rows", a)?;
        if factors.len() != n {
            return Err(shape_err("scale_rows", format!("{} factors for {n} rows", factors.len())));
        }
        let mut data = self.value(a).data().to_vec();
        for (row, &k) in data.chunks_mut(d.max(1)).zip(&factors) {
            row.iter_mut().for_each(|v| *v *= k);
        }
        let out = Tensor::matrix(n, d, data)?;
        self.push("scale_rows", out, Op::ScaleRows(a, factors), &[a])
    }

    /// Slice `index` along the first axis of a 3-D tensor.
    pub fn select(&mut self, a: Var, index: usize) -> Result<Var, TensorError> {
        let x = self.value(a);
        if x.shape().len() != 3 || index >= x.shape()[0] {
            return Err(shape_err("select", format!("index {index} into {:?}", x.shape())));
        }
        let (p, q) = (x.shape()[1], x.shape()[2]);
        let data = x.data()[index * p * q..(index + 1) * p * q].to_vec();
        let out = Tensor::matrix(p, q, data)?;
        self.push("select", out, Op::Select(a, index), &[a])
    }

    /// Column `j` of a matrix as an `n x 1` column.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var, TensorError> {
        let (n, d) = self.matrix("column", a)?;
        if j >= d {
            return Err(shape_err("column", format!("column {j} of {d}")));
        }
        let x = self.value(a);
        let data = (0..n).map(|i| x.data()[i * d + j]).collect();
        let out = Tensor::matrix(n, 1, data)?;
        self.push("column", out, Op::Column(a, j), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(a).clone().reshaped(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Pull gradients of the scalar `loss` back to every leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if matches!(n.op, Op::Leaf) && n.requires_grad {
                    grads[i].take().map(|data| Tensor {
                        shape: n.value.shape().to_vec(),
                        data,
                    })
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: leaves, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.wants(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, &|s| add_into(s, g));
                acc(grads, *b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &|s| add_into(s, g));
                acc(grads, *b, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Scale(a, c) => acc(grads, *a, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(grads, *a, &|s| add_into(s, g)),
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(grads, *a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(grads, *b, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                acc(grads, *a, &|s| {
                    // dA = G · Bᵀ
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &tb.data()[p * m..(p + 1) * m];
                            s[i * k + p] += gi.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(grads, *b, &|s| {
                    // dB = Aᵀ · G
                    for i in 0..n {
                        let gi = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let a_ip = ta.data()[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (x, y) in s[p * m..(p + 1) * m].iter_mut().zip(gi) {
                                *x += a_ip * y;
                            }
                        }
                    }
                });
            }
            Op::GatherRows(a, index) => {
                let d = out.cols();
                acc(grads, *a, &|s| {
                    for (i, &src) in index.iter().enumerate() {
                        add_into(&mut s[src * d..(src + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::ScatterAddRows(a, index) => {
                let d = out.cols();
                acc(grads, *a, &|s| {
                    for (i, &dst) in index.iter().enumerate() {
                        add_into(&mut s[i * d..(i + 1) * d], &g[dst * d..(dst + 1) * d]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(grads, *a, &|s| {
                    for i in 0..s.len() {
                        if x[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let n = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(grads, p, &|s| {
                        for i in 0..n {
                            add_into(&mut s[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::RowNorm(a) => {
                let x = self.value(*a);
                let d = x.cols();
                acc(grads, *a, &|s| {
                    for i in 0..out.rows() {
                        let norm = out.data()[i];
                        if norm == 0.0 {
                            continue;
                        }
                        let k = g[i] / norm;
                        for j in 0..d {
                            s[i * d + j] += k * x.data()[i * d + j];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => acc(grads, *a, &|s| {
                for i in 0..s.len() {
                    let y = out.data()[i];
                    s[i] += g[i] * y * (1.0 - y);
                }
            }),
            Op::LogSigmoid(a) => {
                let x = self.value(*a).data();
                acc(grads, *a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * sigmoid(-x[i]);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols().max(1);
                acc(grads, *a, &|s| {
                    for ((srow, yrow), grow) in s.chunks_mut(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::ComplexMul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                // d(p*q)/dp is multiplication by conj(q) on the upstream gradient.
                let pull = |s: &mut [f64], other: &[f64]| {
                    for ((sp, q), go) in s.chunks_mut(2).zip(other.chunks(2)).zip(g.chunks(2)) {
                        sp[0] += go[0] * q[0] + go[1] * q[1];
                        sp[1] += -go[0] * q[1] + go[1] * q[0];
                    }
                };
                acc(grads, *a, &|s| pull(s, y));
                acc(grads, *b, &|s| pull(s, x));
            }
            Op::PhaseToComplex(a) => acc(grads, *a, &|s| {
                for (i, sp) in s.iter_mut().enumerate() {
                    let (c, sn) = (out.data()[2 * i], out.data()[2 * i + 1]);
                    *sp += -g[2 * i] * sn + g[2 * i + 1] * c;
                }
            }),
            Op::RowSum(a) => {
                let d = self.value(*a).cols().max(1);
                acc(grads, *a, &|s| {
                    for (row, &gi) in s.chunks_mut(d).zip(g) {
                        row.iter_mut().for_each(|x| *x += gi);
                    }
                });
            }
            Op::Sum(a) => acc(grads, *a, &|s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::MulRows(a, sc) => {
                let (x, c) = (self.value(*a), self.value(*sc));
                let d = x.cols().max(1);
                acc(grads, *a, &|s| {
                    for ((row, grow), &k) in s.chunks_mut(d).zip(g.chunks(d)).zip(c.data()) {
                        row.iter_mut().zip(grow).for_each(|(p, q)| *p += k * q);
                    }
                });
                acc(grads, *sc, &|s| {
                    for (i, si) in s.iter_mut().enumerate() {
                        *si += x.row(i).iter().zip(&g[i * d..(i + 1) * d]).map(|(p, q)| p * q).sum::<f64>();
                    }
                });
            }
            Op::ScaleRows(a, factors) => {
                let d = out.cols().max(1);
                acc(grads, *a, &|s| {
                    for ((row, grow), &k) in s.chunks_mut(d).zip(g.chunks(d)).zip(factors) {
                        row.iter_mut().zip(grow).for_each(|(p, q)| *p += k * q);
                    }
                });
            }
            Op::Select(a, index) => {
                let len = out.numel();
                acc(grads, *a, &|s| add_into(&mut s[index * len..(index + 1) * len], g));
            }
            Op::Column(a, j) => {
                let d = self.value(*a).cols();
                acc(grads, *a, &|s| {
                    for (i, &gi) in g.iter().enumerate() {
                        s[i * d + j] += gi;
                    }
                });
            }
        }
    }
}

/// Gradients of one backward pass, indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v` if any path from the loss reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * m..(p + 1) * m]) {
                *o += a_ip * bv;
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without overflow for large `|x|`.
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn relu_definition() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), [0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_equal_entries_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), [0.5, 0.5]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = rand_tensor(&[3, 4], 1);
        let b = rand_tensor(&[4, 2], 2);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
                assert!((tape.value(c).data()[i * 2 + j] - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b).unwrap_err() {
            TensorError::Shape { op, .. } => assert_eq!(op, "matmul"),
            e => panic!("{e:?}"),
        }
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, c), Err(TensorError::Shape { op: "add", .. })));
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 1, vec![1e308]).unwrap());
        assert!(matches!(tape.scale(a, 10.0), Err(TensorError::NonFinite { op: "scale" })));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(rand_tensor(&[3, 5], 4));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_of_squared_norm_is_twice_x() {
        let x0 = rand_tensor(&[2, 3], 5);
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        for (gv, xv) in g.wrt(x).data().iter().zip(x0.data()) {
            assert!((gv - 2.0 * xv).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn untouched_leaves_get_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::filled(&[2, 2], 1.0));
        let unused = tape.param(Tensor::filled(&[3], 1.0));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.wrt(unused), Tensor::zeros(&[3]));
    }

    #[test]
    fn scatter_then_gather_on_disjoint_indices_is_identity() {
        let x = rand_tensor(&[3, 4], 9);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let idx = vec![4, 0, 2];
        let s = tape.scatter_add_rows(v, idx.clone(), 6).unwrap();
        let back = tape.gather_rows(s, idx).unwrap();
        assert_eq!(tape.value(back), &x);
    }

    #[test]
    fn concat_backward_splits_upstream_exactly() {
        let mut tape = Tape::new();
        let a = tape.param(rand_tensor(&[4, 2], 1));
        let b = tape.param(rand_tensor(&[4, 3], 2));
        let c = tape.concat_cols(&[a, b]).unwrap();
        let w = tape.constant(rand_tensor(&[4, 5], 3));
        let prod = tape.mul(c, w).unwrap();
        let loss = tape.sum(prod).unwrap();
        let g = tape.backward(loss).unwrap();
        let (ga, gb) = (g.wrt(a), g.wrt(b));
        let up = tape.value(w);
        for i in 0..4 {
            let split: f64 = ga.row(i).iter().chain(gb.row(i)).map(|v| v * v).sum();
            let whole: f64 = up.row(i).iter().map(|v| v * v).sum();
            assert!((split - whole).abs() < 1e-14);
            assert_eq!(&up.row(i)[..2], ga.row(i));
            assert_eq!(&up.row(i)[2..], gb.row(i));
        }
    }

    #[test]
    fn log_sigmoid_is_stable() {
        for x in [-1e3, -50.0, -1.0, 0.0, 1.0, 50.0, 1e3] {
            let v = log_sigmoid(x);
            assert!(v.is_finite() && v <= 0.0);
        }
        assert!((log_sigmoid(-1e3) + 1e3).abs() < 1e-9);
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn complex_mul_matches_num_complex_style_expansion() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, 0.5, -1.0]).unwrap());
        let b = tape.constant(Tensor::matrix(1, 4, vec![3.0, -1.0, 2.0, 2.0]).unwrap());
        let c = tape.complex_mul(a, b).unwrap();
        // (1+2i)(3-i) = 5+5i ; (0.5-i)(2+2i) = 3-1i
        assert_eq!(tape.value(c).data(), [5.0, 5.0, 3.0, -1.0]);
    }
}
