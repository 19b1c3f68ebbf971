use super::kernels::{self, ConvGeometry};
use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{Element, Real};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy)]
enum Broadcast {
    /// `[n, d]` with a `[d]` vector.
    Rows { d: usize },
    /// `[n, c, h, w]` with a `[c]` vector.
    Channels { c: usize, hw: usize },
}

impl Broadcast {
    fn resolve(op: &'static str, a: &[usize], v: &[usize]) -> Result<Self> {
        match (a, v) {
            ([_, d], [vd]) if d == vd => Ok(Broadcast::Rows { d: *d }),
            ([_, c, h, w], [vc]) if c == vc => Ok(Broadcast::Channels { c: *c, hw: h * w }),
            _ => Err(Error::dim(op, a, v)),
        }
    }

    #[inline]
    fn index(&self, flat: usize) -> usize {
        match *self {
            Broadcast::Rows { d } => flat % d,
            Broadcast::Channels { c, hw } => (flat / hw) % c,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    /// `a[m×k] · b[n×k]ᵀ`
    MatMulT { a: usize, b: usize, m: usize, k: usize, n: usize },
    Conv2d { input: usize, kernel: usize, geom: ConvGeometry },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    BroadcastMul { a: usize, v: usize, how: Broadcast },
    BroadcastAdd { a: usize, v: usize, how: Broadcast },
    Scale { a: usize, c: T },
    AddScalar(usize),
    Relu(usize),
    Square(usize),
    Ln(usize),
    /// Stores the logistic slope of each input.
    Softplus { a: usize, slope: Vec<T> },
    SelectRow { a: usize, row: usize, cols: usize },
    SumRows { a: usize, cols: usize },
    Sum(usize),
    Reshape(usize),
    LogSoftmax { a: usize, cols: usize, probs: Vec<T> },
    Nll { logp: usize, targets: Vec<usize>, cols: usize },
    GaussianNll { pred: usize, residual_scaled: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Records a computation in topological order for reverse-mode differentiation.
///
/// Nodes are appended as operations are applied, so the node list is
/// acyclic and already topologically sorted. A graph is single-owner;
/// independent graphs can be built on separate threads.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> NodeId {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = match &op {
            Op::Leaf => false,
            op => op_inputs(op).iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Copies a tensor in as a leaf. Gradients are tracked iff the tensor requires them.
    pub fn leaf(&mut self, t: &Tensor<T>) -> NodeId {
        let id = self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf);
        self.nodes[id.0].requires_grad = t.requires_grad();
        id
    }

    /// A constant leaf; never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], values: Vec<T>) -> Result<NodeId> {
        if numel(shape) != values.len() {
            return Err(Error::dim("constant", shape, &[values.len()]));
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf))
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, id: NodeId) -> T {
        self.nodes[id.0].value[0]
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Copies a node out as a standalone tensor.
    pub fn to_tensor(&self, id: NodeId) -> Tensor<T> {
        let n = &self.nodes[id.0];
        Tensor::new(&n.shape, n.value.clone()).expect("graph node shapes are valid")
    }

    /// Adds the leaf gradient of `id` into `t`'s gradient buffer.
    pub fn accumulate_into(&self, id: NodeId, t: &mut Tensor<T>) -> Result<()> {
        match self.grad(id) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::dim("matmul", sa, sb)),
        };
        let value = kernels::gemm(self.value(a), self.value(b), m, k, n);
        Ok(self.push(vec![m, n], value, Op::MatMul { a: a.0, b: b.0, m, k, n }))
    }

    /// `a · bᵀ`, the dense-layer product with weights stored `[out, in]`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [n, k2]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::dim("matmul_t", sa, sb)),
        };
        let bt = kernels::transpose(self.value(b), n, k);
        let value = kernels::gemm(self.value(a), &bt, m, k, n);
        Ok(self.push(vec![m, n], value, Op::MatMulT { a: a.0, b: b.0, m, k, n }))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let (si, sk) = (self.shape(input), self.shape(kernel));
        if si.len() != 4 || sk.len() != 4 {
            return Err(Error::dim("conv2d", si, sk));
        }
        let geom = ConvGeometry::new(si, sk, stride, padding)
            .ok_or_else(|| Error::dim("conv2d", si, sk))?;
        let value = kernels::conv2d(self.value(input), self.value(kernel), &geom);
        let shape = vec![geom.n, geom.f, geom.oh, geom.ow];
        Ok(self.push(
            shape,
            value,
            Op::Conv2d {
                input: input.0,
                kernel: kernel.0,
                geom,
            },
        ))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> Vec<T> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(self.shape(a).to_vec(), v, Op::Mul(a.0, b.0)))
    }

    fn broadcast_with(
        &self,
        op: &'static str,
        a: NodeId,
        v: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Broadcast, Vec<T>)> {
        let how = Broadcast::resolve(op, self.shape(a), self.shape(v))?;
        let vv = self.value(v);
        let out = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vv[how.index(i)]))
            .collect();
        Ok((how, out))
    }

    /// Multiplies a per-node vector into every row (or every spatial position of a channel).
    pub fn broadcast_mul(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (how, out) = self.broadcast_with("broadcast_mul", a, v, |x, y| x * y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::BroadcastMul { a: a.0, v: v.0, how }))
    }

    pub fn broadcast_add(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (how, out) = self.broadcast_with("broadcast_add", a, v, |x, y| x + y)?;
        Ok(self.push(self.shape(a).to_vec(), out, Op::BroadcastAdd { a: a.0, v: v.0, how }))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).iter().map(|&x| x * c).collect();
        self.push(self.shape(a).to_vec(), v, Op::Scale { a: a.0, c })
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        let v = self.value(a).iter().map(|&x| x + c).collect();
        self.push(self.shape(a).to_vec(), v, Op::AddScalar(a.0))
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self
            .value(a)
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        self.push(self.shape(a).to_vec(), v, Op::Relu(a.0))
    }

    pub fn identity(&mut self, a: NodeId) -> NodeId {
        a
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|&x| x * x).collect();
        self.push(self.shape(a).to_vec(), v, Op::Square(a.0))
    }

    /// Row `row` of a `[rows, cols]` node, as a `[cols]` vector.
    pub fn select_row(&mut self, a: NodeId, row: usize) -> Result<NodeId> {
        let (rows, cols) = match self.shape(a) {
            [r, c] => (*r, *c),
            s => return Err(Error::dim("select_row", s, &[row])),
        };
        if row >= rows {
            return Err(Error::IndexOutOfRange {
                what: "select_row",
                index: row,
                len: rows,
            });
        }
        let v = self.value(a)[row * cols..(row + 1) * cols].to_vec();
        Ok(self.push(vec![cols], v, Op::SelectRow { a: a.0, row, cols }))
    }

    /// Column sums of a `[rows, cols]` node.
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let cols = match self.shape(a) {
            [_, c] => *c,
            s => return Err(Error::dim("sum_rows", s, &[])),
        };
        let mut v = vec![T::zero(); cols];
        for (i, &x) in self.value(a).iter().enumerate() {
            v[i % cols] = v[i % cols] + x;
        }
        Ok(self.push(vec![cols], v, Op::SumRows { a: a.0, cols }))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).iter().fold(T::zero(), |acc, &x| acc + x);
        self.push(vec![], vec![s], Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = T::from_count(self.value(a).len());
        let s = self.sum(a);
        self.scale(s, T::one() / n)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if numel(shape) != self.value(a).len() || shape.contains(&0) {
            return Err(Error::dim("reshape", self.shape(a), shape));
        }
        let v = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), v, Op::Reshape(a.0)))
    }

    /// Runs reverse-mode differentiation from a one-element root.
    ///
    /// Gradients of tracked leaves accumulate across calls; intermediate
    /// gradients are rebuilt each call.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::dim("backward", &self.nodes[root.0].shape, &[]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, &v)| *b = *b + v),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (input, contrib) in self.local_backward(idx, &g) {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a = *a + c),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Resets all accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Vector-Jacobian products of node `idx` for each of its inputs.
    fn local_backward(&self, idx: usize, g: &[T]) -> Vec<(usize, Vec<T>)> {
        let node = &self.nodes[idx];
        let val = |i: usize| self.nodes[i].value.as_slice();
        let map = |f: &dyn Fn(usize, T) -> T| -> Vec<T> {
            g.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect()
        };
        match &node.op {
            Op::Leaf => vec![],
            &Op::MatMul { a, b, m, k, n } => {
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                let bt = kernels::transpose(val(b), k, n);
                let da = kernels::gemm(g, &bt, m, n, k);
                let at = kernels::transpose(val(a), m, k);
                let db = kernels::gemm(&at, g, k, m, n);
                vec![(a, da), (b, db)]
            }
            &Op::MatMulT { a, b, m, k, n } => {
                // C = A·Bᵀ: dA = dC·B, dB = dCᵀ·A
                let da = kernels::gemm(g, val(b), m, n, k);
                let gt = kernels::transpose(g, m, n);
                let db = kernels::gemm(&gt, val(a), n, m, k);
                vec![(a, da), (b, db)]
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let (di, dk) = kernels::conv2d_backward(val(*input), val(*kernel), g, geom);
                vec![(*input, di), (*kernel, dk)]
            }
            &Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            &Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|&x| T::zero() - x).collect())],
            &Op::Mul(a, b) => {
                let (va, vb) = (val(a), val(b));
                vec![(a, map(&|i, gi| gi * vb[i])), (b, map(&|i, gi| gi * va[i]))]
            }
            &Op::BroadcastMul { a, v, how } => {
                let (va, vv) = (val(a), val(v));
                let da = map(&|i, gi| gi * vv[how.index(i)]);
                let mut dv = vec![T::zero(); vv.len()];
                for (i, &gi) in g.iter().enumerate() {
                    let j = how.index(i);
                    dv[j] = dv[j] + gi * va[i];
                }
                vec![(a, da), (v, dv)]
            }
            &Op::BroadcastAdd { a, v, how } => {
                let mut dv = vec![T::zero(); val(v).len()];
                for (i, &gi) in g.iter().enumerate() {
                    let j = how.index(i);
                    dv[j] = dv[j] + gi;
                }
                vec![(a, g.to_vec()), (v, dv)]
            }
            &Op::Scale { a, c } => vec![(a, g.iter().map(|&x| x * c).collect())],
            &Op::AddScalar(a) | &Op::Reshape(a) => vec![(a, g.to_vec())],
            &Op::Relu(a) => {
                let va = val(a);
                vec![(a, map(&|i, gi| if va[i] > T::zero() { gi } else { T::zero() }))]
            }
            &Op::Square(a) => {
                let va = val(a);
                let two = T::one() + T::one();
                vec![(a, map(&|i, gi| two * va[i] * gi))]
            }
            &Op::Ln(a) => {
                let va = val(a);
                vec![(a, map(&|i, gi| gi / va[i]))]
            }
            Op::Softplus { a, slope } => vec![(*a, map(&|i, gi| gi * slope[i]))],
            &Op::SelectRow { a, row, cols } => {
                let mut da = vec![T::zero(); val(a).len()];
                da[row * cols..(row + 1) * cols].copy_from_slice(g);
                vec![(a, da)]
            }
            &Op::SumRows { a, cols } => {
                let da = (0..val(a).len()).map(|i| g[i % cols]).collect();
                vec![(a, da)]
            }
            &Op::Sum(a) => vec![(a, vec![g[0]; val(a).len()])],
            Op::LogSoftmax { a, cols, probs } => {
                let mut da = vec![T::zero(); g.len()];
                for (r, grow) in g.chunks(*cols).enumerate() {
                    let total = grow.iter().fold(T::zero(), |s, &x| s + x);
                    for (c, &gc) in grow.iter().enumerate() {
                        let i = r * cols + c;
                        da[i] = gc - probs[i] * total;
                    }
                }
                vec![(*a, da)]
            }
            Op::Nll {
                logp,
                targets,
                cols,
            } => {
                let mut d = vec![T::zero(); val(*logp).len()];
                let w = g[0] / T::from_count(targets.len());
                for (r, &t) in targets.iter().enumerate() {
                    d[r * cols + t] = T::zero() - w;
                }
                vec![(*logp, d)]
            }
            Op::GaussianNll {
                pred,
                residual_scaled,
            } => vec![(*pred, residual_scaled.iter().map(|&r| r * g[0]).collect())],
        }
    }
}

impl<T: Real> Graph<T> {
    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        let v: Vec<T> = self.value(a).iter().map(|&x| x.ln()).collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("ln".into()));
        }
        Ok(self.push(self.shape(a).to_vec(), v, Op::Ln(a.0)))
    }

    /// `ln(1 + eˣ)` elementwise, evaluated without overflow.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let value = x.iter().map(|&v| softplus(v)).collect();
        let slope = x.iter().map(|&v| T::one() / (T::one() + (T::zero() - v).exp())).collect();
        self.push(self.shape(a).to_vec(), value, Op::Softplus { a: a.0, slope })
    }

    /// Row-wise log-softmax of a `[N, C]` node, stabilised by max subtraction.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (rows, cols) = match self.shape(a) {
            [r, c] if *c >= 1 => (*r, *c),
            s => return Err(Error::dim("log_softmax", s, &[])),
        };
        let x = self.value(a);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("log_softmax input".into()));
        }
        let mut out = vec![T::zero(); rows * cols];
        let mut probs = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for c in 0..cols {
                let lp = row[c] - lse;
                out[r * cols + c] = lp;
                probs[r * cols + c] = lp.exp();
            }
        }
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::LogSoftmax {
                a: a.0,
                cols,
                probs,
            },
        ))
    }

    /// Mean negative log-likelihood of class indices under `[N, C]` log-probabilities.
    pub fn nll_classification(&mut self, logp: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (rows, cols) = match self.shape(logp) {
            [r, c] => (*r, *c),
            s => return Err(Error::dim("nll_classification", s, &[targets.len()])),
        };
        if rows != targets.len() {
            return Err(Error::dim("nll_classification", self.shape(logp), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::IndexOutOfRange {
                what: "class label",
                index: bad,
                len: cols,
            });
        }
        let lp = self.value(logp);
        let total = targets
            .iter()
            .enumerate()
            .fold(T::zero(), |s, (r, &t)| s - lp[r * cols + t]);
        let v = total / T::from_count(rows);
        Ok(self.push(
            vec![],
            vec![v],
            Op::Nll {
                logp: logp.0,
                targets: targets.to_vec(),
                cols,
            },
        ))
    }

    /// Mean homoscedastic Gaussian negative log-likelihood with fixed `noise_std`.
    pub fn gaussian_nll(&mut self, pred: NodeId, targets: &[T], noise_std: T) -> Result<NodeId> {
        let p = self.value(pred);
        if p.len() != targets.len() {
            return Err(Error::dim("gaussian_nll", self.shape(pred), &[targets.len()]));
        }
        if !(noise_std > T::zero()) {
            return Err(Error::Config(format!("noise_std must be positive, got {noise_std}")));
        }
        let n = T::from_count(p.len());
        let var = noise_std * noise_std;
        let two = T::lit(2.0);
        let log_norm = (two * T::lit(std::f64::consts::PI) * var).ln() / two;
        let mut total = T::zero();
        let mut residual_scaled = Vec::with_capacity(p.len());
        for (&y, &t) in p.iter().zip(targets) {
            let r = y - t;
            total = total + log_norm + r * r / (two * var);
            residual_scaled.push(r / (var * n));
        }
        Ok(self.push(
            vec![],
            vec![total / n],
            Op::GaussianNll {
                pred: pred.0,
                residual_scaled,
            },
        ))
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b, .. } | Op::MatMulT { a, b, .. } => vec![*a, *b],
        Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::BroadcastMul { a, v, .. } | Op::BroadcastAdd { a, v, .. } => vec![*a, *v],
        Op::Scale { a, .. }
        | Op::AddScalar(a)
        | Op::Relu(a)
        | Op::Square(a)
        | Op::Ln(a)
        | Op::Softplus { a, .. }
        | Op::SelectRow { a, .. }
        | Op::SumRows { a, .. }
        | Op::Sum(a)
        | Op::Reshape(a)
        | Op::LogSoftmax { a, .. } => vec![*a],
        Op::Nll { logp, .. } => vec![*logp],
        Op::GaussianNll { pred, .. } => vec![*pred],
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (T::zero() - x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}
