use super::{NumericsError, Tensor};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: ValueId, b: ValueId },
    Add { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    BiasAdd { x: ValueId, bias: ValueId },
    Tanh { x: ValueId },
    Relu { x: ValueId },
    Scale { x: ValueId, factor: f64 },
    Embedding { table: ValueId, ids: Vec<usize> },
    LogSoftmax { x: ValueId },
    PairwiseSum { a: ValueId, b: ValueId },
    FrameStack { x: ValueId, factor: usize },
    ConcatCols { a: ValueId, b: ValueId },
    Reshape { x: ValueId },
    Sum { x: ValueId },
    MeanStack { xs: Vec<ValueId> },
    CustomGrad { x: ValueId, grad: Tensor },
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

/// Define-by-run reverse-mode tape.
///
/// Nodes are appended in topological order (inputs always precede their
/// consumers), so [`GradTape::backward`] is a single reverse sweep. A tape is
/// single-threaded and rebuilt for every forward pass.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of a node, valid after [`GradTape::backward`].
    pub fn grad(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn grad_tensor(&self, id: ValueId) -> Tensor {
        let shape = self.nodes[id.0].value.shape().to_vec();
        Tensor::new(shape, self.nodes[id.0].grad.clone()).expect("grad buffer matches value shape")
    }

    fn push(&mut self, value: Tensor, op: Op) -> ValueId {
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node { value, grad, op });
        ValueId(self.nodes.len() - 1)
    }

    /// Record an input value with no backward rule of its own.
    pub fn leaf(&mut self, value: Tensor) -> ValueId {
        self.push(value, Op::Leaf)
    }

    /// 2-D matrix product `[m×k] · [k×n] -> [m×n]`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_raw(
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
        );
        let value = Tensor::new(vec![m, n], out).expect("matmul output length");
        Ok(self.push(value, Op::Matmul { a, b }))
    }

    /// Elementwise sum of two identically shaped tensors.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    /// Elementwise (Hadamard) product of two identically shaped tensors.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn binary_same_shape(
        &mut self,
        a: ValueId,
        b: ValueId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(ValueId, ValueId) -> Op,
    ) -> Result<ValueId, NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumericsError::ShapeMismatch {
                op: name,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value =
            Tensor::new(self.value(a).shape().to_vec(), data).expect("same-shape binary output");
        Ok(self.push(value, op(a, b)))
    }

    /// Broadcasting add of a vector over the last axis. The only broadcast
    /// this module supports.
    pub fn bias_add(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId, NumericsError> {
        let sx = self.value(x).shape().to_vec();
        let sb = self.value(bias).shape().to_vec();
        let last = sx.last().copied().unwrap_or(0);
        if sb.len() != 1 || sb[0] != last {
            return Err(NumericsError::ShapeMismatch {
                op: "bias_add",
                lhs: sx,
                rhs: sb,
            });
        }
        let bias_data = self.value(bias).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bias_data[i % last])
            .collect();
        let value = Tensor::new(sx, data).expect("bias_add output");
        Ok(self.push(value, Op::BiasAdd { x, bias }))
    }

    pub fn tanh(&mut self, x: ValueId) -> ValueId {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("tanh output");
        self.push(value, Op::Tanh { x })
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("relu output");
        self.push(value, Op::Relu { x })
    }

    pub fn scale(&mut self, x: ValueId, factor: f64) -> ValueId {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.value(x).shape().to_vec(), data).expect("scale output");
        self.push(value, Op::Scale { x, factor })
    }

    /// Row gather from a `[rows×d]` table; backward scatters into the table.
    pub fn embedding(&mut self, table: ValueId, ids: &[usize]) -> Result<ValueId, NumericsError> {
        let shape = self.value(table).shape();
        if shape.len() != 2 {
            return Err(NumericsError::BadShape {
                op: "embedding",
                shape: shape.to_vec(),
                detail: ": table must be 2-D".into(),
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(NumericsError::IdOutOfRange { id, rows });
            }
            data.extend_from_slice(&self.value(table).data()[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data).expect("embedding output");
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `x - logsumexp(x)` along the last axis, max-subtracted for stability.
    pub fn log_softmax(&mut self, x: ValueId) -> Result<ValueId, NumericsError> {
        let shape = self.value(x).shape().to_vec();
        let last = shape.last().copied().unwrap_or(0);
        if last == 0 {
            return Err(NumericsError::BadShape {
                op: "log_softmax",
                shape,
                detail: ": empty last dimension".into(),
            });
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for (row_out, row_in) in data.chunks_mut(last).zip(src.chunks(last)) {
            let max = row_in.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let lse = max + row_in.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in row_out.iter_mut().zip(row_in) {
                *o = v - lse;
            }
        }
        let value = Tensor::new(shape, data).expect("log_softmax output");
        Ok(self.push(value, Op::LogSoftmax { x }))
    }

    /// All-pairs row sum: `[m×d]` and `[n×d]` become `[m×n×d]` with
    /// `out[i][j] = a[i] + b[j]`.
    pub fn pairwise_sum(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(NumericsError::ShapeMismatch {
                op: "pairwise_sum",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, n, d) = (sa[0], sb[0], sa[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * n * d);
        for i in 0..m {
            let ra = &da[i * d..(i + 1) * d];
            for j in 0..n {
                let rb = &db[j * d..(j + 1) * d];
                data.extend(ra.iter().zip(rb).map(|(x, y)| x + y));
            }
        }
        let value = Tensor::new(vec![m, n, d], data).expect("pairwise_sum output");
        Ok(self.push(value, Op::PairwiseSum { a, b }))
    }

    /// Stack `factor` consecutive rows of a `[T×d]` tensor into single rows,
    /// zero-padding the tail: output is `[ceil(T/factor) × factor·d]`.
    pub fn frame_stack(&mut self, x: ValueId, factor: usize) -> Result<ValueId, NumericsError> {
        let shape = self.value(x).shape();
        if shape.len() != 2 || factor == 0 {
            return Err(NumericsError::BadShape {
                op: "frame_stack",
                shape: shape.to_vec(),
                detail: format!(": need 2-D input and factor >= 1, got factor {factor}"),
            });
        }
        let (t, d) = (shape[0], shape[1]);
        let t_out = t.div_ceil(factor);
        let src = self.value(x).data();
        let mut data = vec![0.0; t_out * factor * d];
        for row in 0..t {
            let (block, slot) = (row / factor, row % factor);
            let dst = block * factor * d + slot * d;
            data[dst..dst + d].copy_from_slice(&src[row * d..(row + 1) * d]);
        }
        let value = Tensor::new(vec![t_out, factor * d], data).expect("frame_stack output");
        Ok(self.push(value, Op::FrameStack { x, factor }))
    }

    /// Column-wise concatenation of `[m×p]` and `[m×q]` into `[m×(p+q)]`.
    pub fn concat_cols(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_cols",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, p, q) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(&da[i * p..(i + 1) * p]);
            data.extend_from_slice(&db[i * q..(i + 1) * q]);
        }
        let value = Tensor::new(vec![m, p + q], data).expect("concat_cols output");
        Ok(self.push(value, Op::ConcatCols { a, b }))
    }

    /// Same data, new shape of identical total length.
    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId, NumericsError> {
        let expect: usize = shape.iter().product();
        if expect != self.value(x).len() {
            return Err(NumericsError::BadShape {
                op: "reshape",
                shape,
                detail: format!(": length mismatch with input {:?}", self.value(x).shape()),
            });
        }
        let value = Tensor::new(shape, self.value(x).data().to_vec()).expect("reshape output");
        Ok(self.push(value, Op::Reshape { x }))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x })
    }

    /// Mean of scalar nodes, as a scalar node.
    pub fn mean_stack(&mut self, xs: &[ValueId]) -> Result<ValueId, NumericsError> {
        if xs.is_empty() {
            return Err(NumericsError::BadShape {
                op: "mean_stack",
                shape: vec![0],
                detail: ": no inputs".into(),
            });
        }
        let mut total = 0.0;
        for &id in xs {
            total += self.value(id).as_scalar().ok_or_else(|| NumericsError::BadShape {
                op: "mean_stack",
                shape: self.value(id).shape().to_vec(),
                detail: ": inputs must be scalars".into(),
            })?;
        }
        let value = Tensor::scalar(total / xs.len() as f64);
        Ok(self.push(value, Op::MeanStack { xs: xs.to_vec() }))
    }

    /// Scalar node with an externally computed value and gradient.
    ///
    /// Used to splice losses whose gradient is obtained analytically (the
    /// alignment-lattice loss) into the tape: backward adds
    /// `upstream · grad` into `x`.
    pub fn custom_grad(
        &mut self,
        x: ValueId,
        value: f64,
        grad: Tensor,
    ) -> Result<ValueId, NumericsError> {
        if grad.shape() != self.value(x).shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "custom_grad",
                lhs: grad.shape().to_vec(),
                rhs: self.value(x).shape().to_vec(),
            });
        }
        Ok(self.push(Tensor::scalar(value), Op::CustomGrad { x, grad }))
    }

    /// Reverse sweep from a scalar root. The root's gradient is exactly 1.0.
    pub fn backward(&mut self, root: ValueId) -> Result<(), NumericsError> {
        if self.nodes[root.0].value.as_scalar().is_none() {
            return Err(NumericsError::BadShape {
                op: "backward",
                shape: self.nodes[root.0].value.shape().to_vec(),
                detail: ": root must be scalar".into(),
            });
        }
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[root.0].grad[0] = 1.0;

        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.iter().all(|g| *g == 0.0) {
                continue;
            }
            // Split off the current node so its inputs can be mutated.
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let g = &node.grad;
            match &node.op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (before[a.0].value.shape()[0], before[a.0].value.shape()[1]);
                    let n = before[b.0].value.shape()[1];
                    // a_grad += g · bᵀ
                    let bt = transpose(before[b.0].value.data(), k, n);
                    let mut da = vec![0.0; m * k];
                    matmul_raw(m, n, k, g, &bt, &mut da);
                    // b_grad += aᵀ · g
                    let at = transpose(before[a.0].value.data(), m, k);
                    let mut db = vec![0.0; k * n];
                    matmul_raw(k, m, n, &at, g, &mut db);
                    accumulate(&mut before[a.0].grad, &da);
                    accumulate(&mut before[b.0].grad, &db);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut before[a.0].grad, g);
                    accumulate(&mut before[b.0].grad, g);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> = g
                        .iter()
                        .zip(before[b.0].value.data())
                        .map(|(g, y)| g * y)
                        .collect();
                    let db: Vec<f64> = g
                        .iter()
                        .zip(before[a.0].value.data())
                        .map(|(g, x)| g * x)
                        .collect();
                    accumulate(&mut before[a.0].grad, &da);
                    accumulate(&mut before[b.0].grad, &db);
                }
                Op::BiasAdd { x, bias } => {
                    let last = before[bias.0].value.len();
                    for (i, gv) in g.iter().enumerate() {
                        before[bias.0].grad[i % last] += gv;
                    }
                    accumulate(&mut before[x.0].grad, g);
                }
                Op::Tanh { x } => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    accumulate(&mut before[x.0].grad, &dx);
                }
                Op::Relu { x } => {
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(before[x.0].value.data())
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut before[x.0].grad, &dx);
                }
                Op::Scale { x, factor } => {
                    let dx: Vec<f64> = g.iter().map(|g| g * factor).collect();
                    accumulate(&mut before[x.0].grad, &dx);
                }
                Op::Embedding { table, ids } => {
                    let d = before[table.0].value.shape()[1];
                    for (row, &id) in ids.iter().enumerate() {
                        let src = &g[row * d..(row + 1) * d];
                        let dst = &mut before[table.0].grad[id * d..(id + 1) * d];
                        accumulate(dst, src);
                    }
                }
                Op::LogSoftmax { x } => {
                    // dx_i = g_i - softmax_i · Σ g  per row, using y = output.
                    let last = *node.value.shape().last().expect("non-empty shape");
                    let mut dx = vec![0.0; g.len()];
                    for ((drow, grow), yrow) in dx
                        .chunks_mut(last)
                        .zip(g.chunks(last))
                        .zip(node.value.data().chunks(last))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = g - y.exp() * gsum;
                        }
                    }
                    accumulate(&mut before[x.0].grad, &dx);
                }
                Op::PairwiseSum { a, b } => {
                    let (m, d) = (before[a.0].value.shape()[0], before[a.0].value.shape()[1]);
                    let n = before[b.0].value.shape()[0];
                    for i in 0..m {
                        for j in 0..n {
                            let src = &g[(i * n + j) * d..(i * n + j + 1) * d];
                            accumulate(&mut before[a.0].grad[i * d..(i + 1) * d], src);
                            accumulate(&mut before[b.0].grad[j * d..(j + 1) * d], src);
                        }
                    }
                }
                Op::FrameStack { x, factor } => {
                    let (t, d) = (before[x.0].value.shape()[0], before[x.0].value.shape()[1]);
                    for row in 0..t {
                        let (block, slot) = (row / factor, row % factor);
                        let src = &g[block * factor * d + slot * d..block * factor * d + (slot + 1) * d];
                        accumulate(&mut before[x.0].grad[row * d..(row + 1) * d], src);
                    }
                }
                Op::ConcatCols { a, b } => {
                    let (m, p) = (before[a.0].value.shape()[0], before[a.0].value.shape()[1]);
                    let q = before[b.0].value.shape()[1];
                    for i in 0..m {
                        let row = &g[i * (p + q)..(i + 1) * (p + q)];
                        accumulate(&mut before[a.0].grad[i * p..(i + 1) * p], &row[..p]);
                        accumulate(&mut before[b.0].grad[i * q..(i + 1) * q], &row[p..]);
                    }
                }
                Op::Reshape { x } => {
                    accumulate(&mut before[x.0].grad, g);
                }
                Op::Sum { x } => {
                    let gv = g[0];
                    before[x.0].grad.iter_mut().for_each(|d| *d += gv);
                }
                Op::MeanStack { xs } => {
                    let gv = g[0] / xs.len() as f64;
                    for &xid in xs {
                        before[xid.0].grad[0] += gv;
                    }
                }
                Op::CustomGrad { x, grad } => {
                    let gv = g[0];
                    let dx: Vec<f64> = grad.data().iter().map(|d| gv * d).collect();
                    accumulate(&mut before[x.0].grad, &dx);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

/// `out += a·b` for row-major `[m×k]` and `[k×n]`; i-k-j loop order keeps the
/// inner loop contiguous.
fn matmul_raw(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}
