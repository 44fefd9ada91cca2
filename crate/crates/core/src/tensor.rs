//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The tape is rebuilt per forward pass (define-by-run). All taped values
//! are 2-D row-major matrices; scalars are `[1, 1]`. Detached values live
//! in [`Tensor`]; taped values are referenced by the copyable [`Var`]
//! handle into the active [`Tape`].

use std::collections::BTreeMap;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

/// Detached dense tensor. `shape` may be 0-, 1- or 2-dimensional;
/// binding to a tape canonicalizes it to a row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Contract(format!(
                "tensor shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    /// Rows/cols when viewed as a matrix: `[] -> 1x1`, `[n] -> 1xn`.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("tensors above rank 2 are not supported"),
        }
    }
}

/// Handle to a value on the active tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    /// `[m,n] + [1,n]` row-vector bias.
    AddBias(usize, usize),
    ScalarMul(usize, f64),
    ConcatCols(Vec<usize>),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Sqrt(usize),
    Square(usize),
    SumAll(usize),
    MeanAll(usize),
    /// Global max; saved flat argmax (first-encountered on ties).
    MaxAll(usize, usize),
    GatherRows(usize, Vec<usize>),
    SegmentSum(usize, Vec<usize>),
    /// Saved flat argmax per (segment, col); usize::MAX marks an empty segment.
    SegmentMax(usize, Vec<usize>, Vec<usize>),
    /// Per-segment softmax over the rows of a `[n,1]` column.
    SegmentSoftmax(usize, Vec<usize>),
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    op: Op,
}

/// Wengert list recording one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// Scalar value of a `[1,1]` node.
    pub fn scalar_value(&self, v: Var) -> Result<f64, TensorError> {
        let n = &self.nodes[v.0];
        if n.rows * n.cols != 1 {
            return Err(TensorError::Contract(format!(
                "expected scalar, got {}x{}",
                n.rows, n.cols
            )));
        }
        Ok(n.data[0])
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor {
            shape: vec![n.rows, n.cols],
            data: n.data.clone(),
        }
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> Result<Var, TensorError> {
        let op_name = op_name(&op);
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(TensorError::Domain {
                op: op_name,
                detail: format!("non-finite output {bad}"),
            });
        }
        self.nodes.push(Node { rows, cols, data, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a detached tensor as a tape leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let (rows, cols) = t.matrix_dims();
        self.nodes.push(Node {
            rows,
            cols,
            data: t.data.clone(),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var, TensorError> {
        if rows * cols != data.len() {
            return Err(TensorError::Contract(format!(
                "constant {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        self.nodes.push(Node { rows, cols, data, op: Op::Leaf });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} @ {k2}x{n}")));
        }
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        self.push(m, n, out, Op::Matmul(a.0, b.0))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        op: fn(f64, f64) -> f64,
        make: fn(usize, usize) -> Op,
        name: &'static str,
    ) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        if self.dims(b) != (m, n) {
            return Err(shape_err(
                name,
                format!("{m}x{n} vs {}x{}", self.dims(b).0, self.dims(b).1),
            ));
        }
        let data: Vec<f64> = self.data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| op(x, y))
            .collect();
        self.push(m, n, data, make(a.0, b.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, |x, y| x + y, Op::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, |x, y| x - y, Op::Sub, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.elementwise(a, b, |x, y| x * y, Op::Mul, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        if self.data(b).iter().any(|&y| y == 0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        self.elementwise(a, b, |x, y| x / y, Op::Div, "div")
    }

    /// `[m,n] + [1,n]` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        let (br, bc) = self.dims(bias);
        if br != 1 || bc != n {
            return Err(shape_err("add_bias", format!("{m}x{n} + {br}x{bc}")));
        }
        let bv = self.data(bias).to_vec();
        let data: Vec<f64> = self.data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        self.push(m, n, data, Op::AddBias(a.0, bias.0))
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        let data: Vec<f64> = self.data(a).iter().map(|&x| x * c).collect();
        self.push(m, n, data, Op::ScalarMul(a.0, c))
    }

    /// Concatenate along columns; all inputs must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat of zero tensors".into()));
        }
        let m = self.dims(parts[0]).0;
        let mut total = 0usize;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            if pm != m {
                return Err(shape_err("concat", format!("row counts {m} vs {pm}")));
            }
            total += pn;
        }
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let (_, pn) = self.dims(p);
            let src = self.data(p);
            for r in 0..m {
                data[r * total + off..r * total + off + pn]
                    .copy_from_slice(&src[r * pn..(r + 1) * pn]);
            }
            off += pn;
        }
        self.push(m, total, data, Op::ConcatCols(parts.iter().map(|v| v.0).collect()))
    }

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        make: fn(usize) -> Op,
    ) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        let data: Vec<f64> = self.data(a).iter().map(|&x| f(x)).collect();
        self.push(m, n, data, make(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |x| x.max(0.0), Op::Relu)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        let data: Vec<f64> = self.data(a)
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        self.push(m, n, data, Op::LeakyRelu(a.0, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, f64::exp, Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        if self.data(a).iter().any(|&x| x <= 0.0) {
            return Err(TensorError::Domain {
                op: "log",
                detail: "log of non-positive value".into(),
            });
        }
        self.unary(a, f64::ln, Op::Log)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        if self.data(a).iter().any(|&x| x < 0.0) {
            return Err(TensorError::Domain {
                op: "sqrt",
                detail: "sqrt of negative value".into(),
            });
        }
        self.unary(a, f64::sqrt, Op::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, |x| x * x, Op::Square)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let s: f64 = self.data(a).iter().sum();
        self.push(1, 1, vec![s], Op::SumAll(a.0))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let len = self.data(a).len();
        let s: f64 = self.data(a).iter().sum();
        self.push(1, 1, vec![s / len as f64], Op::MeanAll(a.0))
    }

    /// Global maximum; gradient flows to the first-encountered maximizer.
    pub fn max_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let data = self.data(a);
        let mut arg = 0usize;
        let mut best = data[0];
        for (i, &x) in data.iter().enumerate().skip(1) {
            if x > best {
                best = x;
                arg = i;
            }
        }
        self.push(1, 1, vec![best], Op::MaxAll(a.0, arg))
    }

    /// `out[r] = a[rows[r]]`, row gather.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(TensorError::Contract(format!(
                "gather row {bad} out of range for {m} rows"
            )));
        }
        let src = self.data(a);
        let mut data = vec![0.0; rows.len() * n];
        for (r, &i) in rows.iter().enumerate() {
            data[r * n..(r + 1) * n].copy_from_slice(&src[i * n..(i + 1) * n]);
        }
        self.push(rows.len(), n, data, Op::GatherRows(a.0, rows.to_vec()))
    }

    fn check_segments(&self, a: Var, segments: &[usize], num_segments: usize) -> Result<(usize, usize), TensorError> {
        let (m, n) = self.dims(a);
        if segments.len() != m {
            return Err(TensorError::Contract(format!(
                "{} segment ids for {m} rows",
                segments.len()
            )));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= num_segments) {
            return Err(TensorError::Contract(format!(
                "segment id {bad} >= {num_segments}"
            )));
        }
        Ok((m, n))
    }

    /// Row-wise sum into `num_segments` output rows; empty segments are zero.
    pub fn segment_sum(&mut self, a: Var, segments: &[usize], num_segments: usize) -> Result<Var, TensorError> {
        let (m, n) = self.check_segments(a, segments, num_segments)?;
        let src = self.data(a);
        let mut data = vec![0.0; num_segments * n];
        for r in 0..m {
            let s = segments[r];
            for c in 0..n {
                data[s * n + c] += src[r * n + c];
            }
        }
        self.push(num_segments, n, data, Op::SegmentSum(a.0, segments.to_vec()))
    }

    /// Row-wise max per segment; empty segments yield the zero vector and
    /// receive no gradient. Ties resolve to the lowest row index.
    pub fn segment_max(&mut self, a: Var, segments: &[usize], num_segments: usize) -> Result<Var, TensorError> {
        let (m, n) = self.check_segments(a, segments, num_segments)?;
        let src = self.data(a);
        let mut data = vec![0.0; num_segments * n];
        let mut argmax = vec![usize::MAX; num_segments * n];
        for r in 0..m {
            let s = segments[r];
            for c in 0..n {
                let x = src[r * n + c];
                let slot = s * n + c;
                if argmax[slot] == usize::MAX || x > data[slot] {
                    data[slot] = x;
                    argmax[slot] = r;
                }
            }
        }
        self.push(num_segments, n, data, Op::SegmentMax(a.0, segments.to_vec(), argmax))
    }

    /// Numerically stable per-segment softmax over an `[n,1]` column.
    pub fn segment_softmax(&mut self, a: Var, segments: &[usize], num_segments: usize) -> Result<Var, TensorError> {
        let (m, n) = self.check_segments(a, segments, num_segments)?;
        if n != 1 {
            return Err(shape_err("softmax_over_segments", format!("{m}x{n}, want column")));
        }
        let src = self.data(a);
        let mut seg_max = vec![f64::NEG_INFINITY; num_segments];
        for r in 0..m {
            seg_max[segments[r]] = seg_max[segments[r]].max(src[r]);
        }
        let mut seg_z = vec![0.0; num_segments];
        let mut data = vec![0.0; m];
        for r in 0..m {
            data[r] = (src[r] - seg_max[segments[r]]).exp();
            seg_z[segments[r]] += data[r];
        }
        for r in 0..m {
            data[r] /= seg_z[segments[r]];
        }
        self.push(m, 1, data, Op::SegmentSoftmax(a.0, segments.to_vec()))
    }

    /// Reverse sweep from a scalar loss. Returns one gradient buffer per
    /// node id; nodes unreachable from the loss get `None`.
    pub fn backward(&self, loss: Var) -> Result<Grads, TensorError> {
        let ln = &self.nodes[loss.0];
        if ln.rows * ln.cols != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs scalar loss, got {}x{}",
                ln.rows, ln.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let g = match &grads[id] {
                Some(g) => g.clone(),
                None => continue,
            };
            let node = &self.nodes[id];
            let accum = |nodes: &Vec<Node>, grads: &mut Vec<Option<Vec<f64>>>, target: usize, add: &dyn Fn(&mut [f64])| {
                let tn = &nodes[target];
                let buf = grads[target].get_or_insert_with(|| vec![0.0; tn.rows * tn.cols]);
                add(buf);
            };
            match &node.op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (m, k) = (self.nodes[*a].rows, self.nodes[*a].cols);
                    let n = self.nodes[*b].cols;
                    let ga = matmul_transpose_b(&g, &self.nodes[*b].data, m, n, k);
                    let gb = matmul_transpose_a(&self.nodes[*a].data, &g, m, k, n);
                    accum(&self.nodes, &mut grads, *a, &|buf| axpy(buf, &ga));
                    accum(&self.nodes, &mut grads, *b, &|buf| axpy(buf, &gb));
                }
                Op::Add(a, b) => {
                    accum(&self.nodes, &mut grads, *a, &|buf| axpy(buf, &g));
                    accum(&self.nodes, &mut grads, *b, &|buf| axpy(buf, &g));
                }
                Op::Sub(a, b) => {
                    accum(&self.nodes, &mut grads, *a, &|buf| axpy(buf, &g));
                    accum(&self.nodes, &mut grads, *b, &|buf| {
                        for (o, &x) in buf.iter_mut().zip(&g) {
                            *o -= x;
                        }
                    });
                }
                Op::Mul(a, b) => {
                    let av = &self.nodes[*a].data;
                    let bv = &self.nodes[*b].data;
                    accum(&self.nodes, &mut grads, *a, &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * bv[i];
                        }
                    });
                    accum(&self.nodes, &mut grads, *b, &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * av[i];
                        }
                    });
                }
                Op::Div(a, b) => {
                    let av = &self.nodes[*a].data;
                    let bv = &self.nodes[*b].data;
                    accum(&self.nodes, &mut grads, *a, &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] / bv[i];
                        }
                    });
                    accum(&self.nodes, &mut grads, *b, &|buf| {
                        for i in 0..buf.len() {
                            buf[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                        }
                    });
                }
                Op::AddBias(a, bias) => {
                    let n = node.cols;
                    accum(&self.nodes, &mut grads, *a, &|buf| axpy(buf, &g));
                    accum(&self.nodes, &mut grads, *bias, &|buf| {
                        for (i, &x) in g.iter().enumerate() {
                            buf[i % n] += x;
                        }
                    });
                }
                Op::ScalarMul(a, c) => {
                    accum(&self.nodes, &mut grads, *a, &|buf| {
                        for (o, &x) in buf.iter_mut().zip(&g) {
                            *o += c * x;
                        }
                    });
                }
                Op::ConcatCols(parts) => {
                    let total = node.cols;
                    let m = node.rows;
                    let mut off = 0;
                    for &p in parts {
                        let pn = self.nodes[p].cols;
                        accum(&self.nodes, &mut grads, p, &|buf| {
                            for r in 0..m {
                                for c in 0..pn {
                                    buf[r * pn + c] += g[r * total + off + c];
                                }
                            }
                        });
                        off += pn;
                    }
                }
                Op::Relu(a) => {
                    let av = &self.nodes[*a].data;
                    accum(&self.nodes, &mut grads, *a, &|buf| {
                        for i in 0..buf.len() {
                            if av[i] > 0.0 {
                                buf[i] += g[i];
                            }
                        }
                    });
                }
                Op::LeakyRelu(a, slope) => {
                    let av = &self.nodes[*a].data;
                    accum(&self.nodes, &mut grads, *a, &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * if av[i] > 0.0 { 1.0 } else { *slope };
                        }
                    });
                }
                Op::Sigmoid(a) => {
                    let out = &node.data;
                    accum(&self.nodes, &mut grads, *a, &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * out[i] * (1.0 - out[i]);
                        }
                    });
                }
                Op::Exp(a) => {
                    let out = &node.data;
                    accum(&self.nodes, &mut grads, *a, &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * out[i];
                        }
                    });
                }
                Op::Log(a) => {
                    let av = &self.nodes[*a].data;
                    accum(&self.nodes, &mut grads, *a, &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] / av[i];
                        }
                    });
                }
                Op::Sqrt(a) => {
                    let out = &node.data;
                    accum(&self.nodes, &mut grads, *a, &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * 0.5 / out[i];
                        }
                    });
                }
                Op::Square(a) => {
                    let av = &self.nodes[*a].data;
                    accum(&self.nodes, &mut grads, *a, &|buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * 2.0 * av[i];
                        }
                    });
                }
                Op::SumAll(a) => {
                    accum(&self.nodes, &mut grads, *a, &|buf| {
                        for o in buf.iter_mut() {
                            *o += g[0];
                        }
                    });
                }
                Op::MeanAll(a) => {
                    let len = self.nodes[*a].data.len() as f64;
                    accum(&self.nodes, &mut grads, *a, &|buf| {
                        for o in buf.iter_mut() {
                            *o += g[0] / len;
                        }
                    });
                }
                Op::MaxAll(a, arg) => {
                    accum(&self.nodes, &mut grads, *a, &|buf| {
                        buf[*arg] += g[0];
                    });
                }
                Op::GatherRows(a, rows) => {
                    let n = node.cols;
                    accum(&self.nodes, &mut grads, *a, &|buf| {
                        for (r, &i) in rows.iter().enumerate() {
                            for c in 0..n {
                                buf[i * n + c] += g[r * n + c];
                            }
                        }
                    });
                }
                Op::SegmentSum(a, segments) => {
                    let n = node.cols;
                    accum(&self.nodes, &mut grads, *a, &|buf| {
                        for (r, &s) in segments.iter().enumerate() {
                            for c in 0..n {
                                buf[r * n + c] += g[s * n + c];
                            }
                        }
                    });
                }
                Op::SegmentMax(a, _segments, argmax) => {
                    let n = node.cols;
                    accum(&self.nodes, &mut grads, *a, &|buf| {
                        for (slot, &r) in argmax.iter().enumerate() {
                            if r != usize::MAX {
                                let c = slot % n;
                                buf[r * n + c] += g[slot];
                            }
                        }
                    });
                }
                Op::SegmentSoftmax(a, segments) => {
                    let alpha = &node.data;
                    // dL/ds_i = alpha_i * (g_i - sum_{j in seg} alpha_j g_j)
                    let num_segments = segments.iter().max().map_or(0, |&s| s + 1);
                    let mut seg_dot = vec![0.0; num_segments];
                    for (r, &s) in segments.iter().enumerate() {
                        seg_dot[s] += alpha[r] * g[r];
                    }
                    accum(&self.nodes, &mut grads, *a, &|buf| {
                        for (r, &s) in segments.iter().enumerate() {
                            buf[r] += alpha[r] * (g[r] - seg_dot[s]);
                        }
                    });
                }
            }
        }
        Ok(Grads { grads })
    }
}

/// Per-node gradient buffers from one backward sweep.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient for `v`, zero-filled if the loss never reached it.
    pub fn get(&self, tape: &Tape, v: Var) -> Tensor {
        let (rows, cols) = tape.dims(v);
        let data = self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; rows * cols]);
        Tensor { shape: vec![rows, cols], data }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::AddBias(..) => "add_bias",
        Op::ScalarMul(..) => "scalar_mul",
        Op::ConcatCols(..) => "concat",
        Op::Relu(..) => "relu",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Sqrt(..) => "sqrt",
        Op::Square(..) => "square",
        Op::SumAll(..) => "sum_reduce",
        Op::MeanAll(..) => "mean_reduce",
        Op::MaxAll(..) => "max_reduce",
        Op::GatherRows(..) => "gather",
        Op::SegmentSum(..) => "segment_sum",
        Op::SegmentMax(..) => "segment_max",
        Op::SegmentSoftmax(..) => "softmax_over_segments",
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

/// `G [m,n] @ B^T [n,k] -> [m,k]`
fn matmul_transpose_b(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        for j in 0..n {
            let gv = g[i * n + j];
            if gv == 0.0 {
                continue;
            }
            for p in 0..k {
                out[i * k + p] += gv * b[p * n + j];
            }
        }
    }
    out
}

/// `A^T [k,m] @ G [m,n] -> [k,n]`
fn matmul_transpose_a(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[p * n + j] += av * g[i * n + j];
            }
        }
    }
    out
}

fn axpy(out: &mut [f64], x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += v;
    }
}

/// Named, ordered collection of parameter tensors (one model's weights).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

/// Tape bindings for a ParamSet, keyed by parameter name.
pub type BoundParams = BTreeMap<String, Var>;

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|t| t.data.len()).sum()
    }

    /// Record every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        self.entries
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t)))
            .collect()
    }
}

/// Parameter-name-keyed gradients; shapes mirror the ParamSet.
#[derive(Debug, Clone, Default)]
pub struct GradMap {
    entries: BTreeMap<String, Tensor>,
}

impl GradMap {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.entries.values_mut() {
            for x in t.data.iter_mut() {
                *x *= c;
            }
        }
    }
}

/// Reverse-mode gradients of `loss` w.r.t. every bound parameter.
/// Parameters the loss never touched get zero gradients.
pub fn param_grads(tape: &Tape, loss: Var, bound: &BoundParams, params: &ParamSet) -> Result<GradMap, TensorError> {
    let grads = tape.backward(loss)?;
    let mut out = BTreeMap::new();
    for (name, &var) in bound {
        let mut g = grads.get(tape, var);
        // keep the parameter's declared shape, not the tape's 2-D view
        if let Some(p) = params.get(name) {
            g.shape = p.shape.clone();
        }
        out.insert(name.clone(), g);
    }
    Ok(GradMap { entries: out })
}

/// One vanilla SGD step `theta' = theta - lr * g` by value.
pub fn sgd_step(params: &ParamSet, grads: &GradMap, lr: f64) -> Result<ParamSet, TensorError> {
    if lr <= 0.0 {
        return Err(TensorError::Contract(format!("learning rate must be > 0, got {lr}")));
    }
    let mut out = ParamSet::new();
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| {
            TensorError::Contract(format!("missing gradient for parameter '{name}'"))
        })?;
        if g.data.len() != p.data.len() {
            return Err(TensorError::Contract(format!(
                "gradient size mismatch for '{name}'"
            )));
        }
        let data: Vec<f64> = p.data.iter().zip(&g.data).map(|(&t, &gr)| t - lr * gr).collect();
        out.insert(name.clone(), Tensor { shape: p.shape.clone(), data });
    }
    Ok(out)
}

/// Compare analytic gradients against central finite differences at
/// `probe_count` randomly chosen parameter coordinates. Returns the maximum
/// relative error with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    forward: F,
    params: &ParamSet,
    probe_count: usize,
    eps: f64,
    seed: u64,
) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var, TensorError>,
{
    use rand::{Rng, SeedableRng};
    if probe_count == 0 {
        return Err(TensorError::Contract("probe_count must be >= 1".into()));
    }
    if eps <= 0.0 || eps > 1e-3 {
        return Err(TensorError::Contract(format!("eps {eps} outside (0, 1e-3]")));
    }

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = forward(&mut tape, &bound)?;
    let analytic = param_grads(&tape, loss, &bound, params)?;

    let eval_loss = |p: &ParamSet| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let loss = forward(&mut tape, &bound)?;
        tape.scalar_value(loss)
    };

    let names: Vec<&String> = params.iter().map(|(n, _)| n).collect();
    let sizes: Vec<usize> = params.iter().map(|(_, t)| t.data.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;

    for _ in 0..probe_count {
        let flat = rng.gen_range(0..total);
        let (mut idx, mut which) = (flat, 0usize);
        while idx >= sizes[which] {
            idx -= sizes[which];
            which += 1;
        }
        let name = names[which];

        let mut plus = params.clone();
        plus.entries.get_mut(name).unwrap().data[idx] += eps;
        let mut minus = params.clone();
        minus.entries.get_mut(name).unwrap().data[idx] -= eps;
        let numeric = (eval_loss(&plus)? - eval_loss(&minus)?) / (2.0 * eps);
        let exact = analytic.get(name).unwrap().data[idx];
        // the floor keeps roundoff noise on near-zero gradients from
        // dominating the relative error (the loss itself carries O(1e-15)
        // float resolution, so gradients far below eps are pure noise)
        let denom = exact.abs().max(numeric.abs()).max(1e-4);
        max_rel = max_rel.max((exact - numeric).abs() / denom);
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> Var {
        tape.leaf(&Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![-1.0, 0.0, 2.0]);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.data(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let i = leaf(&mut tape, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.data(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, vec![2, 2], vec![0.0; 4]);
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn segment_max_forward() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![4, 1], vec![1.0, 5.0, 3.0, 2.0]);
        let y = tape.segment_max(x, &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(tape.data(y), &[5.0, 3.0]);
    }

    #[test]
    fn segment_max_empty_segment_is_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 1], vec![-4.0, -7.0]);
        let y = tape.segment_max(x, &[0, 0], 2).unwrap();
        assert_eq!(tape.data(y), &[-4.0, 0.0]);
    }

    #[test]
    fn backward_square_sum() {
        // loss = sum(p^2), p = [3] -> grad [6]
        let mut params = ParamSet::new();
        params.insert("p", Tensor::vector(vec![3.0]));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let sq = tape.square(bound["p"]).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let grads = param_grads(&tape, loss, &bound, &params).unwrap();
        assert_eq!(grads.get("p").unwrap().data, vec![6.0]);
    }

    #[test]
    fn backward_zero_residual() {
        let mut params = ParamSet::new();
        params.insert("p", Tensor::vector(vec![2.0]));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let y = tape.constant(1, 1, vec![2.0]).unwrap();
        let d = tape.sub(bound["p"], y).unwrap();
        let sq = tape.square(d).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        let grads = param_grads(&tape, loss, &bound, &params).unwrap();
        assert_eq!(grads.get("p").unwrap().data, vec![0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn backward_unreached_param_zero_grad() {
        let mut params = ParamSet::new();
        params.insert("used", Tensor::vector(vec![1.0]));
        params.insert("unused", Tensor::vector(vec![5.0]));
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let loss = tape.square(bound["used"]).unwrap();
        let grads = param_grads(&tape, loss, &bound, &params).unwrap();
        assert_eq!(grads.get("unused").unwrap().data, vec![0.0]);
    }

    #[test]
    fn backward_linear_in_upstream_gradient() {
        let mut params = ParamSet::new();
        params.insert("p", Tensor::vector(vec![1.5, -2.0, 0.7]));
        let grad_for_scale = |scale: f64| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let sq = tape.square(bound["p"]).unwrap();
            let e = tape.exp(bound["p"]).unwrap();
            let s = tape.add(sq, e).unwrap();
            let sum = tape.sum_all(s).unwrap();
            let loss = tape.scalar_mul(sum, scale).unwrap();
            let grads = param_grads(&tape, loss, &bound, &params).unwrap();
            grads.get("p").unwrap().data.clone()
        };
        let g1 = grad_for_scale(1.0);
        let g2 = grad_for_scale(2.0);
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn sgd_basic() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![1.0]));
        let mut grads = GradMap::default();
        grads.entries.insert("w".into(), Tensor::vector(vec![2.0]));
        let next = sgd_step(&params, &grads, 0.5).unwrap();
        assert_eq!(next.get("w").unwrap().data, vec![0.0]);
        // input unchanged
        assert_eq!(params.get("w").unwrap().data, vec![1.0]);
    }

    #[test]
    fn sgd_componentwise() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![0.0, 0.0]));
        let mut grads = GradMap::default();
        grads.entries.insert("w".into(), Tensor::vector(vec![1.0, -1.0]));
        let next = sgd_step(&params, &grads, 0.1).unwrap();
        assert_eq!(next.get("w").unwrap().data, vec![-0.1, 0.1]);
    }

    #[test]
    fn sgd_zero_grad_fixed_point() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![3.0, -1.0]));
        let mut grads = GradMap::default();
        grads.entries.insert("w".into(), Tensor::vector(vec![0.0, 0.0]));
        let next = sgd_step(&params, &grads, 0.3).unwrap();
        assert_eq!(next, params);
    }

    #[test]
    fn sgd_missing_grad_is_contract_error() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![1.0]));
        let grads = GradMap::default();
        assert!(matches!(sgd_step(&params, &grads, 0.1), Err(TensorError::Contract(_))));
    }

    #[test]
    fn finite_diff_linear_model_exact() {
        // y = w . x is linear, central differences are exact
        let mut params = ParamSet::new();
        params.insert("w", Tensor::vector(vec![0.3, -1.2, 2.0]));
        let x = vec![1.0, 2.0, 3.0];
        let err = finite_diff_check(
            |tape, bound| {
                let xv = tape.constant(3, 1, x.clone())?;
                tape.matmul(bound["w"], xv)
            },
            &params,
            10,
            1e-5,
            7,
        )
        .unwrap();
        assert!(err < 1e-10, "linear model finite-diff error {err}");
    }

    #[test]
    fn finite_diff_composite() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::matrix(3, 2, vec![0.1, -0.4, 0.9, 0.2, -0.7, 0.5]).unwrap());
        params.insert("b", Tensor::vector(vec![0.1, -0.2]));
        let err = finite_diff_check(
            |tape, bound| {
                let x = tape.constant(4, 3, (0..12).map(|i| (i as f64) * 0.1 - 0.5).collect())?;
                let h = tape.matmul(x, bound["w"])?;
                let h = tape.add_bias(h, bound["b"])?;
                let h = tape.sigmoid(h)?;
                let sq = tape.square(h)?;
                tape.mean_all(sq)
            },
            &params,
            20,
            1e-5,
            11,
        )
        .unwrap();
        assert!(err < 1e-6, "composite finite-diff error {err}");
    }

    #[test]
    fn log_of_negative_is_domain_error() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1], vec![-1.0]);
        assert!(matches!(tape.log(x), Err(TensorError::Domain { op: "log", .. })));
    }

    #[test]
    fn div_by_zero_is_domain_error() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1], vec![1.0]);
        let b = leaf(&mut tape, vec![1], vec![0.0]);
        assert!(matches!(tape.div(a, b), Err(TensorError::Domain { op: "div", .. })));
    }

    #[test]
    fn segment_softmax_matches_bruteforce() {
        let mut tape = Tape::new();
        let scores = vec![0.5, -1.0, 2.0, 0.0, 1.0];
        let segs = vec![0usize, 0, 0, 1, 1];
        let x = leaf(&mut tape, vec![5, 1], scores.clone());
        let y = tape.segment_softmax(x, &segs, 2).unwrap();
        // brute force per segment
        let mut expect = vec![0.0; 5];
        for seg in 0..2 {
            let idx: Vec<usize> = (0..5).filter(|&i| segs[i] == seg).collect();
            let z: f64 = idx.iter().map(|&i| scores[i].exp()).sum();
            for &i in &idx {
                expect[i] = scores[i].exp() / z;
            }
        }
        for (a, b) in tape.data(y).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_gradient_matches_finite_diff() {
        let mut params = ParamSet::new();
        params.insert("s", Tensor::matrix(5, 1, vec![0.5, -1.0, 2.0, 0.0, 1.0]).unwrap());
        let segs = vec![0usize, 0, 0, 1, 1];
        let err = finite_diff_check(
            |tape, bound| {
                let alpha = tape.segment_softmax(bound["s"], &segs, 2)?;
                let w = tape.constant(5, 1, vec![1.0, -2.0, 0.5, 3.0, 0.25])?;
                let p = tape.mul(alpha, w)?;
                tape.sum_all(p)
            },
            &params,
            5,
            1e-5,
            3,
        )
        .unwrap();
        assert!(err < 1e-7, "softmax grad error {err}");
    }

    #[test]
    fn segment_ops_gradients_match_finite_diff() {
        let mut params = ParamSet::new();
        params.insert("x", Tensor::matrix(6, 2, vec![0.3, 1.0, -0.5, 0.2, 0.9, -1.1, 0.4, 0.4, -0.2, 0.8, 1.5, 0.0]).unwrap());
        let segs = vec![0usize, 1, 0, 2, 1, 2];
        let err = finite_diff_check(
            |tape, bound| {
                let smax = tape.segment_max(bound["x"], &segs, 3)?;
                let ssum = tape.segment_sum(bound["x"], &segs, 3)?;
                let joined = tape.concat_cols(&[smax, ssum])?;
                let sq = tape.square(joined)?;
                tape.mean_all(sq)
            },
            &params,
            12,
            1e-6,
            5,
        )
        .unwrap();
        assert!(err < 1e-6, "segment ops grad error {err}");
    }
}
