use super::{NumericsError, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddRow { a: Var, row: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Sigmoid { a: Var },
    BceLogits { logits: Var, labels: Vec<f64> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    Mean { a: Var },
    Sum { a: Var },
    SumCols { a: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation in execution order.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

/// Gradients of one backward pass with respect to the leaves of the tape.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `var`; `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient, or zeros of the given length when the loss does not reach `var`.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<T> {
        self.get(var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![T::zero(); len])
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn dims(op: &'static str, t: &Tensor<impl Scalar>) -> Result<(usize, usize), NumericsError> {
    t.dims2().ok_or_else(|| NumericsError::ShapeMismatch {
        op,
        left: t.shape().to_vec(),
        right: vec![],
    })
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x.re() >= 0.0 {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], var: Var, len: usize) -> &mut Vec<T> {
    grads[var.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a rank-0 or single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a·b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let op_name = if trans_b { "matmul_nt" } else { "matmul" };
        let (m, k) = dims(op_name, self.value(a))?;
        let (br, bc) = dims(op_name, self.value(b))?;
        let (kb, n, bs) = if trans_b {
            (bc, br, (1isize, bc as isize))
        } else {
            (br, bc, (bc as isize, 1isize))
        };
        if k != kb {
            return Err(NumericsError::ShapeMismatch {
                op: op_name,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            bs,
            &mut out,
            false,
        );
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    /// Element-wise sum of equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (m, n) = dims("add_row", self.value(a))?;
        if self.value(row).len() != n {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                left: self.shape(a).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, &b) in data[i * n..(i + 1) * n].iter_mut().zip(r) {
                *x += b;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::AddRow { a, row }, &[a, row]))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "mul",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let value = self.value(a).map(|x| x * f);
        self.push(value, Op::Scale { a, factor: f }, &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (m, n) = dims("softmax", self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row
                .iter()
                .copied()
                .fold(row[0], |acc, x| if x.re() > acc.re() { x } else { acc });
            let mut total = T::zero();
            for (o, &x) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (x - max).exp();
                total += *o;
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o = *o / total;
            }
        }
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(value, Op::Softmax { a }, &[a]))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (length = cols).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumericsError> {
        let (m, n) = dims("layer_norm", self.value(x))?;
        for p in [gamma, beta] {
            if self.value(p).len() != n {
                return Err(NumericsError::ShapeMismatch {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let inv_n = T::from_f64(1.0 / n as f64);
        let eps = T::from_f64(eps);
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean *= inv_n;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_n;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let value = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(value, Op::Gelu { a }, &[a])
    }

    /// Gathers rows of `table` (`V×d`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumericsError> {
        let (v, d) = dims("embedding", self.value(table))?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::OutOfRange {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor::matrix(ids.len(), d, out)?;
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. `None` targets are masked out of both sum and count.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, NumericsError> {
        let (m, n) = dims("cross_entropy", self.value(logits))?;
        if targets.len() != m {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(NumericsError::AllMasked);
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); m * n];
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= n {
                return Err(NumericsError::OutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: n,
                });
            }
            let row = &src[i * n..(i + 1) * n];
            let max = row
                .iter()
                .copied()
                .fold(row[0], |acc, x| if x.re() > acc.re() { x } else { acc });
            let mut z = T::zero();
            for (p, &x) in probs[i * n..(i + 1) * n].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in &mut probs[i * n..(i + 1) * n] {
                *p = *p / z;
            }
            total += z.ln() + max - row[t];
        }
        let loss = total / T::from_f64(count as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        ))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid { a }, &[a])
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `labels`,
    /// evaluated in logit space: `max(x,0) − x·y + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var, NumericsError> {
        let src = self.value(logits).data();
        if src.len() != labels.len() || labels.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "bce_with_logits",
                left: self.shape(logits).to_vec(),
                right: vec![labels.len()],
            });
        }
        let mut total = T::zero();
        for (&x, &y) in src.iter().zip(labels) {
            let (pos, abs) = if x.re() >= 0.0 { (x, x) } else { (T::zero(), -x) };
            total += pos - x * T::from_f64(y) + (T::one() + (-abs).exp()).ln();
        }
        let loss = total / T::from_f64(labels.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or_else(|| NumericsError::Invalid("concat_rows of nothing".into()))?;
        let (_, n) = dims("concat_rows", self.value(first))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = dims("concat_rows", self.value(p))?;
            if c != n {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::matrix(rows, n, data)?;
        Ok(self.push(value, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts.first().ok_or_else(|| NumericsError::Invalid("concat_cols of nothing".into()))?;
        let (m, _) = dims("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims("concat_cols", self.value(p))?;
            if r != m {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push(value, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (m, n) = dims("slice_rows", self.value(a))?;
        if start >= end || end > m {
            return Err(NumericsError::OutOfRange {
                op: "slice_rows",
                index: end,
                bound: m,
            });
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        let value = Tensor::matrix(end - start, n, data)?;
        Ok(self.push(value, Op::SliceRows { a, start }, &[a]))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let (m, n) = dims("slice_cols", self.value(a))?;
        if start >= end || end > n {
            return Err(NumericsError::OutOfRange {
                op: "slice_cols",
                index: end,
                bound: n,
            });
        }
        let src = self.value(a).data();
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let value = Tensor::matrix(m, w, data)?;
        Ok(self.push(value, Op::SliceCols { a, start }, &[a]))
    }

    /// Mean of all elements.
    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.value(a).data();
        let mut total = T::zero();
        for &x in src {
            total += x;
        }
        let value = Tensor::scalar(total / T::from_f64(src.len() as f64));
        self.push(value, Op::Mean { a }, &[a])
    }

    /// Sum of all elements.
    pub fn sum(&mut self, a: Var) -> Var {
        let mut total = T::zero();
        for &x in self.value(a).data() {
            total += x;
        }
        self.push(Tensor::scalar(total), Op::Sum { a }, &[a])
    }

    /// Row sums of an `m×n` matrix as an `m×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (m, n) = dims("sum_cols", self.value(a))?;
        let src = self.value(a).data();
        let data = (0..m)
            .map(|i| {
                let mut s = T::zero();
                for &x in &src[i * n..(i + 1) * n] {
                    s += x;
                }
                s
            })
            .collect();
        let value = Tensor::matrix(m, 1, data)?;
        Ok(self.push(value, Op::SumCols { a }, &[a]))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Without `retain` the tape is marked consumed and a second call fails.
    pub fn backward(&mut self, loss: Var, retain: bool) -> Result<Gradients<T>, NumericsError> {
        if self.consumed {
            return Err(NumericsError::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        if !retain {
            self.consumed = true;
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = va.dims2().unwrap();
                let n = node.value.dims2().unwrap().1;
                if self.needs(*a) {
                    let ga = acc(grads, *a, m * k);
                    if *trans_b {
                        // dA = dC·B, B is n×k
                        T::gemm(m, n, k, g, (n as isize, 1), vb.data(), (k as isize, 1), ga, true);
                    } else {
                        // dA = dC·Bᵀ, B is k×n
                        T::gemm(m, n, k, g, (n as isize, 1), vb.data(), (1, n as isize), ga, true);
                    }
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, k * n);
                    if *trans_b {
                        // dB = dCᵀ·A, n×k
                        T::gemm(n, m, k, g, (1, n as isize), va.data(), (k as isize, 1), gb, true);
                    } else {
                        // dB = Aᵀ·dC, k×n
                        T::gemm(k, m, n, va.data(), (1, k as isize), g, (n as isize, 1), gb, true);
                    }
                }
            }
            Op::Add { a, b } => {
                for p in [*a, *b] {
                    if self.needs(p) {
                        let gp = acc(grads, p, g.len());
                        for (x, &y) in gp.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            Op::AddRow { a, row } => {
                let n = self.value(*row).len();
                if self.needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if self.needs(*row) {
                    let gr = acc(grads, *row, n);
                    for chunk in g.chunks(n) {
                        for (x, &y) in gr.iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for ((x, &y), &o) in ga.iter_mut().zip(g).zip(vb) {
                        *x += y * o;
                    }
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, g.len());
                    for ((x, &y), &o) in gb.iter_mut().zip(g).zip(va) {
                        *x += y * o;
                    }
                }
            }
            Op::Scale { a, factor } => {
                let ga = acc(grads, *a, g.len());
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x += y * *factor;
                }
            }
            Op::Softmax { a } => {
                let (m, n) = node.value.dims2().unwrap();
                let y = node.value.data();
                let ga = acc(grads, *a, m * n);
                for i in 0..m {
                    let r = i * n..(i + 1) * n;
                    let mut dot = T::zero();
                    for (&gy, &yy) in g[r.clone()].iter().zip(&y[r.clone()]) {
                        dot += gy * yy;
                    }
                    for j in r {
                        ga[j] += y[j] * (g[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = node.value.dims2().unwrap();
                let gam = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let gg = acc(grads, *gamma, n);
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                }
                if self.needs(*beta) {
                    let gb = acc(grads, *beta, n);
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                }
                if self.needs(*x) {
                    let inv_n = T::from_f64(1.0 / n as f64);
                    let gx = acc(grads, *x, m * n);
                    let mut dxhat = vec![T::zero(); n];
                    for i in 0..m {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..n {
                            let d = g[i * n + j] * gam[j];
                            dxhat[j] = d;
                            mean_d += d;
                            mean_dx += d * xhat[i * n + j];
                        }
                        mean_d *= inv_n;
                        mean_dx *= inv_n;
                        for j in 0..n {
                            gx[i * n + j] += rstd[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Gelu { a } => {
                let c = T::from_f64(GELU_C);
                let k = T::from_f64(GELU_A);
                let half = T::from_f64(0.5);
                let three_k = T::from_f64(3.0 * GELU_A);
                let src = self.value(*a).data();
                let ga = acc(grads, *a, g.len());
                for ((dst, &gy), &x) in ga.iter_mut().zip(g).zip(src) {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let dt = (T::one() - t * t) * c * (T::one() + three_k * x * x);
                    *dst += gy * (half * (T::one() + t) + half * x * dt);
                }
            }
            Op::Embedding { table, ids } => {
                let (v, d) = self.value(*table).dims2().unwrap();
                let gt = acc(grads, *table, v * d);
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[row * d + j];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let (_, n) = self.value(*logits).dims2().unwrap();
                let scale = g[0] / T::from_f64(*count as f64);
                let gl = acc(grads, *logits, probs.len());
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..n {
                        gl[i * n + j] += scale * probs[i * n + j];
                    }
                    gl[i * n + t] -= scale;
                }
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                let ga = acc(grads, *a, g.len());
                for ((dst, &gy), &yy) in ga.iter_mut().zip(g).zip(y) {
                    *dst += gy * yy * (T::one() - yy);
                }
            }
            Op::BceLogits { logits, labels } => {
                let src = self.value(*logits).data();
                let scale = g[0] / T::from_f64(labels.len() as f64);
                let gl = acc(grads, *logits, src.len());
                for ((dst, &x), &y) in gl.iter_mut().zip(src).zip(labels) {
                    *dst += scale * (sigmoid(x) - T::from_f64(y));
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.needs(p) {
                        let gp = acc(grads, p, len);
                        for (x, &y) in gp.iter_mut().zip(&g[offset..offset + len]) {
                            *x += y;
                        }
                    }
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let (m, n) = node.value.dims2().unwrap();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).dims2().unwrap().1;
                    if self.needs(p) {
                        let gp = acc(grads, p, m * w);
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += g[i * n + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            Op::SliceRows { a, start } => {
                let (_, n) = node.value.dims2().unwrap();
                let len = self.value(*a).len();
                let ga = acc(grads, *a, len);
                for (x, &y) in ga[start * n..start * n + g.len()].iter_mut().zip(g) {
                    *x += y;
                }
            }
            Op::SliceCols { a, start } => {
                let (m, w) = node.value.dims2().unwrap();
                let (_, n) = self.value(*a).dims2().unwrap();
                let ga = acc(grads, *a, m * n);
                for i in 0..m {
                    for j in 0..w {
                        ga[i * n + start + j] += g[i * w + j];
                    }
                }
            }
            Op::Mean { a } => {
                let len = self.value(*a).len();
                let share = g[0] / T::from_f64(len as f64);
                let ga = acc(grads, *a, len);
                for x in ga.iter_mut() {
                    *x += share;
                }
            }
            Op::Sum { a } => {
                let len = self.value(*a).len();
                let ga = acc(grads, *a, len);
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
            Op::SumCols { a } => {
                let (m, n) = self.value(*a).dims2().unwrap();
                let ga = acc(grads, *a, m * n);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[i];
                    }
                }
            }
        }
    }
}
