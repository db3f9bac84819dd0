//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a Wengert tape: forward ops append nodes in topological
//! order (inputs always precede outputs), [`Graph::backward`] walks the tape
//! in reverse and accumulates gradients onto every `requires_grad` leaf
//! reachable from the seed. Training rebuilds a fresh graph every step;
//! parameters enter as leaves, so leaf gradients are what the optimizer
//! consumes.
//!
//! The primitive set is deliberately small: elementwise arithmetic, matmul,
//! conv2d, reshape/transpose, channel concat, the usual activations, channel
//! softmax, log/exp, reductions, average pooling, nearest 2x upsampling and
//! embedding lookup. Everything else in the crate composes these.
//!
//! Every forward op verifies its output is finite; NaN/Inf raises
//! [`Error::Numeric`] at the op that produced it. Gradients accumulate across
//! repeated `backward` calls until [`Graph::zero_grads`].

pub mod gradcheck;
pub mod kernels;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};
use kernels::ConvDims;

static GRAPH_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Node {
    graph: u64,
    idx: usize,
}

#[derive(Clone)]
enum Op<T> {
    Leaf,
    Add(Node, Node),
    Sub(Node, Node),
    Mul(Node, Node),
    ScalarMul(Node, T),
    Matmul(Node, Node),
    Transpose2d(Node),
    Reshape(Node),
    ConcatC(Vec<Node>),
    Relu(Node),
    LeakyRelu(Node, T),
    Tanh(Node),
    Sigmoid(Node),
    SoftmaxC(Node),
    Log(Node),
    Exp(Node),
    SumAxes(Node, #[allow(dead_code)] Vec<usize>),
    MeanAxes(Node, #[allow(dead_code)] Vec<usize>),
    AvgPool2d {
        x: Node,
        window: usize,
        stride: usize,
    },
    Upsample2x(Node),
    Conv2d {
        x: Node,
        w: Node,
        b: Option<Node>,
        dims: ConvDims,
    },
    Embedding {
        table: Node,
        ids: Arc<Vec<usize>>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::ScalarMul(..) => "scalar_mul",
            Op::Matmul(..) => "matmul",
            Op::Transpose2d(..) => "transpose2d",
            Op::Reshape(..) => "reshape",
            Op::ConcatC(..) => "concat_c",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::SoftmaxC(..) => "softmax_c",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::SumAxes(..) => "sum",
            Op::MeanAxes(..) => "mean",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::Upsample2x(..) => "upsample_nearest2x",
            Op::Conv2d { .. } => "conv2d",
            Op::Embedding { .. } => "embedding",
        }
    }
}

struct NodeData<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// The tape.
pub struct Graph<T: Scalar> {
    id: u64,
    nodes: Vec<NodeData<T>>,
    /// Test hook: scales the named op's input-gradient by 1.001 so that
    /// gradient checks can prove they would catch a broken backward rule.
    backward_fault: Option<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Graph<T> {
        Graph {
            id: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_fault: None,
        }
    }

    pub fn inject_backward_fault(&mut self, op_name: &str) {
        self.backward_fault = Some(op_name.to_string());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, n: Node) -> Result<usize> {
        if n.graph != self.id || n.idx >= self.nodes.len() {
            return Err(Error::graph("node does not belong to this graph"));
        }
        Ok(n.idx)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Node> {
        if !matches!(op, Op::Leaf) && !all_finite_fast(value.data()) {
            return Err(Error::numeric(format!(
                "non-finite output of `{}`",
                op.name()
            )));
        }
        self.nodes.push(NodeData {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Node {
            graph: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    fn rg(&self, n: Node) -> bool {
        self.nodes[n.idx].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Node {
        self.push(value, Op::Leaf, requires_grad).expect("leaf push")
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Node {
        self.leaf(value, false)
    }

    /// Cut the gradient path: same value, new non-grad leaf.
    pub fn detach(&mut self, n: Node) -> Result<Node> {
        let i = self.check(n)?;
        let v = self.nodes[i].value.clone();
        Ok(self.leaf(v, false))
    }

    pub fn value(&self, n: Node) -> &Tensor<T> {
        &self.nodes[n.idx].value
    }

    pub fn shape(&self, n: Node) -> &Shape {
        self.nodes[n.idx].value.shape()
    }

    pub fn grad(&self, n: Node) -> Option<Tensor<T>> {
        let nd = &self.nodes[n.idx];
        nd.grad
            .as_ref()
            .map(|g| Tensor::new(nd.value.shape().clone(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grads(&mut self) {
        for nd in &mut self.nodes {
            nd.grad = None;
        }
    }

    // -- primitive ops ------------------------------------------------------

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary(
        &mut self,
        a: Node,
        b: Node,
        f: impl Fn(T, T) -> T + Sync,
        op: Op<T>,
    ) -> Result<Node> {
        let ia = self.check(a)?;
        let ib = self.check(b)?;
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let (shape, data) = kernels::broadcast_binary(va.data(), va.shape(), vb.data(), vb.shape(), f)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, data)?, op, rg)
    }

    pub fn scalar_mul(&mut self, a: Node, c: T) -> Result<Node> {
        self.check(a)?;
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(v, Op::ScalarMul(a, c), rg)
    }

    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = match va.shape().dims() {
            &[m, k] => (m, k),
            other => return Err(Error::dim(format!("matmul lhs must be rank 2, got {other:?}"))),
        };
        let (k2, n) = match vb.shape().dims() {
            &[k2, n] => (k2, n),
            other => return Err(Error::dim(format!("matmul rhs must be rank 2, got {other:?}"))),
        };
        if k != k2 {
            return Err(Error::dim(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(va.data(), vb.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new([m, n], out)?, Op::Matmul(a, b), rg)
    }

    pub fn transpose2d(&mut self, a: Node) -> Result<Node> {
        self.check(a)?;
        let va = self.value(a);
        let (m, n) = match va.shape().dims() {
            &[m, n] => (m, n),
            other => return Err(Error::dim(format!("transpose2d needs rank 2, got {other:?}"))),
        };
        let src = va.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        self.push(Tensor::new([n, m], out)?, Op::Transpose2d(a), rg)
    }

    pub fn reshape(&mut self, a: Node, shape: impl Into<Shape>) -> Result<Node> {
        self.check(a)?;
        let v = self.value(a).reshaped(shape)?;
        let rg = self.rg(a);
        self.push(v, Op::Reshape(a), rg)
    }

    /// Concatenate along the channel axis (axis 1).
    pub fn concat_c(&mut self, parts: &[Node]) -> Result<Node> {
        if parts.is_empty() {
            return Err(Error::dim("concat_c of zero tensors"));
        }
        for &p in parts {
            self.check(p)?;
        }
        let first = self.value(parts[0]).shape().clone();
        if first.rank() < 2 {
            return Err(Error::dim("concat_c needs rank >= 2"));
        }
        let outer = first[0];
        let mut c_total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.rank() != first.rank() || s[0] != outer || s.dims()[2..] != first.dims()[2..] {
                return Err(Error::dim(format!(
                    "concat_c shape mismatch: {:?} vs {:?}",
                    s.dims(),
                    first.dims()
                )));
            }
            c_total += s[1];
        }
        let inner: usize = first.dims()[2..].iter().product();
        let mut dims = first.dims().to_vec();
        dims[1] = c_total;
        let mut out = vec![T::zero(); outer * c_total * inner];
        let mut offset = 0usize;
        for &p in parts {
            let v = self.value(p).clone();
            let c_p = v.shape()[1];
            for s in 0..outer {
                let src = &v.data()[s * c_p * inner..][..c_p * inner];
                let dst = &mut out[s * c_total * inner + offset * inner..][..c_p * inner];
                dst.copy_from_slice(src);
            }
            offset += c_p;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(
            Tensor::new(dims.as_slice(), out)?,
            Op::ConcatC(parts.to_vec()),
            rg,
        )
    }

    pub fn relu(&mut self, a: Node) -> Result<Node> {
        self.check(a)?;
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Node, slope: f64) -> Result<Node> {
        self.check(a)?;
        let s = T::from_f64(slope);
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * s });
        let rg = self.rg(a);
        self.push(v, Op::LeakyRelu(a, s), rg)
    }

    pub fn tanh(&mut self, a: Node) -> Result<Node> {
        self.check(a)?;
        let v = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Node) -> Result<Node> {
        self.check(a)?;
        let v = self
            .value(a)
            .map(|x| T::one() / (T::one() + (-x).exp()));
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    /// Softmax over axis 1 of a rank >= 2 tensor.
    pub fn softmax_c(&mut self, a: Node) -> Result<Node> {
        self.check(a)?;
        let va = self.value(a);
        let s = va.shape();
        if s.rank() < 2 {
            return Err(Error::dim("softmax_c needs rank >= 2"));
        }
        let (outer, ch) = (s[0], s[1]);
        let inner: usize = s.dims()[2..].iter().product();
        let out = kernels::softmax_channel_fwd(va.data(), outer, ch, inner);
        let rg = self.rg(a);
        self.push(Tensor::new(s.clone(), out)?, Op::SoftmaxC(a), rg)
    }

    pub fn log(&mut self, a: Node) -> Result<Node> {
        self.check(a)?;
        let v = self.value(a).map(|x| x.ln());
        let rg = self.rg(a);
        self.push(v, Op::Log(a), rg)
    }

    pub fn exp(&mut self, a: Node) -> Result<Node> {
        self.check(a)?;
        let v = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(v, Op::Exp(a), rg)
    }

    /// Sum over `axes`, keeping reduced dims as 1.
    pub fn sum_axes(&mut self, a: Node, axes: &[usize]) -> Result<Node> {
        self.check(a)?;
        let va = self.value(a);
        let (shape, data, _) = kernels::reduce_sum_axes(va.data(), va.shape(), axes)?;
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data)?, Op::SumAxes(a, axes.to_vec()), rg)
    }

    /// Mean over `axes`, keeping reduced dims as 1.
    pub fn mean_axes(&mut self, a: Node, axes: &[usize]) -> Result<Node> {
        self.check(a)?;
        let va = self.value(a);
        let (shape, data, count) = kernels::reduce_sum_axes(va.data(), va.shape(), axes)?;
        let inv = T::from_f64(1.0 / count as f64);
        let data = data.into_iter().map(|v| v * inv).collect();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data)?, Op::MeanAxes(a, axes.to_vec()), rg)
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum_all(&mut self, a: Node) -> Result<Node> {
        let rank = self.shape(a).rank();
        let axes: Vec<usize> = (0..rank).collect();
        let s = self.sum_axes(a, &axes)?;
        self.reshape(s, [1])
    }

    /// Mean of all elements, as a `[1]` scalar.
    pub fn mean_all(&mut self, a: Node) -> Result<Node> {
        let rank = self.shape(a).rank();
        let axes: Vec<usize> = (0..rank).collect();
        let m = self.mean_axes(a, &axes)?;
        self.reshape(m, [1])
    }

    pub fn avg_pool2d(&mut self, a: Node, window: usize, stride: usize) -> Result<Node> {
        self.check(a)?;
        let va = self.value(a);
        let (n, c, h, w) = va.shape().nchw()?;
        let (out, h_out, w_out) = kernels::avg_pool2d_fwd(va.data(), n, c, h, w, window, stride)?;
        let rg = self.rg(a);
        self.push(
            Tensor::new([n, c, h_out, w_out], out)?,
            Op::AvgPool2d { x: a, window, stride },
            rg,
        )
    }

    pub fn upsample_nearest2x(&mut self, a: Node) -> Result<Node> {
        self.check(a)?;
        let va = self.value(a);
        let (n, c, h, w) = va.shape().nchw()?;
        if h == 0 || w == 0 {
            return Err(Error::dim("upsample_nearest2x: empty spatial extent"));
        }
        let out = kernels::upsample2x_fwd(va.data(), n * c, h, w);
        let rg = self.rg(a);
        self.push(
            Tensor::new([n, c, 2 * h, 2 * w], out)?,
            Op::Upsample2x(a),
            rg,
        )
    }

    pub fn conv2d(
        &mut self,
        x: Node,
        w: Node,
        b: Option<Node>,
        stride: usize,
        pad: usize,
    ) -> Result<Node> {
        self.check(x)?;
        self.check(w)?;
        let dims = ConvDims::infer(self.shape(x), self.shape(w), stride, pad)?;
        if let Some(b) = b {
            self.check(b)?;
            let bs = self.shape(b);
            if bs.dims() != [dims.c_out] {
                return Err(Error::dim(format!(
                    "conv2d bias shape {:?}, want [{}]",
                    bs.dims(),
                    dims.c_out
                )));
            }
        }
        let bias_t = b.map(|bn| self.value(bn).clone());
        let mut out = vec![T::zero(); dims.n * dims.c_out * dims.spatial_out()];
        kernels::conv2d_fwd(
            self.value(x).data(),
            self.value(w).data(),
            bias_t.as_ref().map(|t| t.data()),
            &dims,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || b.map(|bn| self.rg(bn)).unwrap_or(false);
        self.push(
            Tensor::new([dims.n, dims.c_out, dims.h_out, dims.w_out], out)?,
            Op::Conv2d { x, w, b, dims },
            rg,
        )
    }

    /// Row lookup: `table[K,E]` gathered at `ids` -> `[len(ids), E]`.
    pub fn embedding(&mut self, table: Node, ids: &[usize]) -> Result<Node> {
        self.check(table)?;
        let vt = self.value(table);
        let (k, e) = match vt.shape().dims() {
            &[k, e] => (k, e),
            other => return Err(Error::dim(format!("embedding table must be rank 2, got {other:?}"))),
        };
        for &id in ids {
            if id >= k {
                return Err(Error::domain(format!(
                    "class id {id} out of range for {k} classes"
                )));
            }
        }
        let mut out = vec![T::zero(); ids.len() * e];
        for (i, &id) in ids.iter().enumerate() {
            out[i * e..][..e].copy_from_slice(&vt.data()[id * e..][..e]);
        }
        let rg = self.rg(table);
        self.push(
            Tensor::new([ids.len(), e], out)?,
            Op::Embedding {
                table,
                ids: Arc::new(ids.to_vec()),
            },
            rg,
        )
    }

    // -- composed conveniences (no new primitives) --------------------------

    pub fn neg(&mut self, a: Node) -> Result<Node> {
        self.scalar_mul(a, T::from_f64(-1.0))
    }

    pub fn add_scalar(&mut self, a: Node, c: f64) -> Result<Node> {
        let k = self.constant(Tensor::scalar(T::from_f64(c)));
        self.add(a, k)
    }

    /// c - a
    pub fn rsub_scalar(&mut self, c: f64, a: Node) -> Result<Node> {
        let k = self.constant(Tensor::scalar(T::from_f64(c)));
        self.sub(k, a)
    }

    /// |a| as relu(a) + relu(-a); the subgradient at 0 is 0.
    pub fn abs_t(&mut self, a: Node) -> Result<Node> {
        let p = self.relu(a)?;
        let n = self.neg(a)?;
        let n = self.relu(n)?;
        self.add(p, n)
    }

    /// 1/a for strictly positive a, as exp(-log a).
    pub fn recip_pos(&mut self, a: Node) -> Result<Node> {
        let l = self.log(a)?;
        let nl = self.neg(l)?;
        self.exp(nl)
    }

    /// sqrt(a) for strictly positive a, as exp(log(a)/2).
    pub fn sqrt_pos(&mut self, a: Node) -> Result<Node> {
        let l = self.log(a)?;
        let h = self.scalar_mul(l, T::from_f64(0.5))?;
        self.exp(h)
    }

    /// max(a, c) elementwise for constant c, as relu(a - c) + c.
    pub fn clamp_min(&mut self, a: Node, c: f64) -> Result<Node> {
        let shifted = self.add_scalar(a, -c)?;
        let r = self.relu(shifted)?;
        self.add_scalar(r, c)
    }

    /// Mean of scalar nodes.
    pub fn mean_nodes(&mut self, nodes: &[Node]) -> Result<Node> {
        if nodes.is_empty() {
            return Err(Error::domain("mean of zero nodes"));
        }
        let mut acc = nodes[0];
        for &n in &nodes[1..] {
            acc = self.add(acc, n)?;
        }
        self.scalar_mul(acc, T::from_f64(1.0 / nodes.len() as f64))
    }

    // -- backward ------------------------------------------------------------

    /// Seed must be a scalar recorded on this graph. Each call runs one full
    /// reverse pass with fresh internal accumulators and adds the result onto
    /// the stored gradients, so repeated calls accumulate until
    /// [`Graph::zero_grads`].
    pub fn backward(&mut self, seed: Node) -> Result<()> {
        let seed_idx = self.check(seed)?;
        if self.nodes[seed_idx].value.numel() != 1 {
            return Err(Error::graph(format!(
                "backward seed must be scalar, got shape {:?}",
                self.nodes[seed_idx].value.shape()
            )));
        }
        if !self.nodes[seed_idx].requires_grad {
            // Nothing reachable requires grad; a no-op pass.
            return Ok(());
        }
        let profile = std::env::var_os("TROIKA_BACKWARD_PROFILE").is_some();
        let mut op_times: std::collections::BTreeMap<&'static str, (f64, usize)> =
            std::collections::BTreeMap::new();
        let mut pass = PassGrads {
            bufs: (0..=seed_idx).map(|_| None).collect(),
        };
        pass.bufs[seed_idx] = Some(vec![T::one()]);
        for i in (0..=seed_idx).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = pass.bufs[i].take() else {
                continue;
            };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                let op = self.nodes[i].op.clone();
                let fault = self
                    .backward_fault
                    .as_deref()
                    .map(|f| f == op.name())
                    .unwrap_or(false);
                let t0 = profile.then(std::time::Instant::now);
                if fault {
                    let s = T::from_f64(1.001);
                    let g_used: Vec<T> = g.iter().map(|&v| v * s).collect();
                    self.backprop_op(i, &op, &g_used, &mut pass)?;
                } else {
                    self.backprop_op(i, &op, &g, &mut pass)?;
                }
                if let Some(t0) = t0 {
                    let e = op_times.entry(op.name()).or_insert((0.0, 0));
                    e.0 += t0.elapsed().as_secs_f64();
                    e.1 += 1;
                }
            }
            // Persist this pass's contribution.
            let nd = &mut self.nodes[i];
            match nd.grad.as_mut() {
                Some(stored) => {
                    for (sv, gv) in stored.iter_mut().zip(&g) {
                        *sv = *sv + *gv;
                    }
                }
                None => nd.grad = Some(g),
            }
        }
        if profile {
            let mut rows: Vec<_> = op_times.into_iter().collect();
            rows.sort_by(|a, b| b.1 .0.partial_cmp(&a.1 .0).unwrap());
            for (name, (secs, count)) in rows {
                eprintln!("backward {name:<20} {count:>5} calls {secs:>8.4}s");
            }
        }
        Ok(())
    }

    fn backprop_op(&self, idx: usize, op: &Op<T>, g: &[T], pass: &mut PassGrads<T>) -> Result<()> {
        let out_shape = self.nodes[idx].value.shape().clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    let r = kernels::reduce_to_shape(g, &out_shape, self.shape(*a));
                    pass.donate(self, *a, r);
                }
                if self.rg(*b) {
                    let r = kernels::reduce_to_shape(g, &out_shape, self.shape(*b));
                    pass.donate(self, *b, r);
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    let r = kernels::reduce_to_shape(g, &out_shape, self.shape(*a));
                    pass.donate(self, *a, r);
                }
                if self.rg(*b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    let r = kernels::reduce_to_shape(&neg, &out_shape, self.shape(*b));
                    pass.donate(self, *b, r);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let vb = self.value(*b).clone();
                    let (_, full) = kernels::broadcast_binary(
                        g,
                        &out_shape,
                        vb.data(),
                        vb.shape(),
                        |x, y| x * y,
                    )?;
                    if self.shape(*a) == &out_shape {
                        pass.donate(self, *a, full);
                    } else {
                        let r = kernels::reduce_to_shape(&full, &out_shape, self.shape(*a));
                        pass.donate(self, *a, r);
                    }
                }
                if self.rg(*b) {
                    let va = self.value(*a).clone();
                    let (_, full) = kernels::broadcast_binary(
                        g,
                        &out_shape,
                        va.data(),
                        va.shape(),
                        |x, y| x * y,
                    )?;
                    if self.shape(*b) == &out_shape {
                        pass.donate(self, *b, full);
                    } else {
                        let r = kernels::reduce_to_shape(&full, &out_shape, self.shape(*b));
                        pass.donate(self, *b, r);
                    }
                }
            }
            Op::ScalarMul(a, c) => {
                if self.rg(*a) {
                    let src: Vec<T> = g.iter().map(|&v| v * *c).collect();
                    pass.donate(self, *a, src);
                }
            }
            Op::Matmul(a, b) => {
                let va = self.value(*a).clone();
                let vb = self.value(*b).clone();
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                if self.rg(*a) {
                    let mut da = pass.take(self, *a);
                    kernels::matmul_bt_acc(g, vb.data(), &mut da, m, n, k);
                    pass.put(*a, da);
                }
                if self.rg(*b) {
                    let mut db = pass.take(self, *b);
                    kernels::matmul_at_acc(va.data(), g, &mut db, k, m, n);
                    pass.put(*b, db);
                }
            }
            Op::Transpose2d(a) => {
                if self.rg(*a) {
                    let (n, m) = (out_shape[0], out_shape[1]);
                    let mut da = vec![T::zero(); m * n];
                    for i in 0..n {
                        for j in 0..m {
                            da[j * n + i] = g[i * m + j];
                        }
                    }
                    pass.donate(self, *a, da);
                }
            }
            Op::Reshape(a) => {
                if self.rg(*a) {
                    pass.add(self, *a, g);
                }
            }
            Op::ConcatC(parts) => {
                let outer = out_shape[0];
                let c_total = out_shape[1];
                let inner: usize = out_shape.dims()[2..].iter().product();
                let mut offset = 0usize;
                for &p in parts {
                    let c_p = self.shape(p)[1];
                    if self.rg(p) {
                        let mut dp = vec![T::zero(); outer * c_p * inner];
                        for s in 0..outer {
                            let src = &g[s * c_total * inner + offset * inner..][..c_p * inner];
                            dp[s * c_p * inner..][..c_p * inner].copy_from_slice(src);
                        }
                        pass.donate(self, p, dp);
                    }
                    offset += c_p;
                }
            }
            Op::Relu(a) => {
                if self.rg(*a) {
                    let va = self.value(*a).clone();
                    let src: Vec<T> = va
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| if x > T::zero() { gv } else { T::zero() })
                        .collect();
                    pass.donate(self, *a, src);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.rg(*a) {
                    let va = self.value(*a).clone();
                    let s = *slope;
                    let src: Vec<T> = va
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| if x > T::zero() { gv } else { gv * s })
                        .collect();
                    pass.donate(self, *a, src);
                }
            }
            Op::Tanh(a) => {
                if self.rg(*a) {
                    let y = self.nodes[idx].value.clone();
                    let src: Vec<T> = y
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&yv, &gv)| gv * (T::one() - yv * yv))
                        .collect();
                    pass.donate(self, *a, src);
                }
            }
            Op::Sigmoid(a) => {
                if self.rg(*a) {
                    let y = self.nodes[idx].value.clone();
                    let src: Vec<T> = y
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&yv, &gv)| gv * yv * (T::one() - yv))
                        .collect();
                    pass.donate(self, *a, src);
                }
            }
            Op::SoftmaxC(a) => {
                if self.rg(*a) {
                    let p = self.nodes[idx].value.clone();
                    let s = p.shape();
                    let (outer, ch) = (s[0], s[1]);
                    let inner: usize = s.dims()[2..].iter().product();
                    let mut da = pass.take(self, *a);
                    kernels::softmax_channel_bwd(p.data(), g, &mut da, outer, ch, inner);
                    pass.put(*a, da);
                }
            }
            Op::Log(a) => {
                if self.rg(*a) {
                    let va = self.value(*a).clone();
                    let src: Vec<T> = va
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| gv / x)
                        .collect();
                    pass.donate(self, *a, src);
                }
            }
            Op::Exp(a) => {
                if self.rg(*a) {
                    let y = self.nodes[idx].value.clone();
                    let src: Vec<T> = y
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&yv, &gv)| gv * yv)
                        .collect();
                    pass.donate(self, *a, src);
                }
            }
            Op::SumAxes(a, _) => {
                if self.rg(*a) {
                    let target = self.shape(*a).clone();
                    let expanded = expand_from(g, &out_shape, &target, T::one());
                    pass.donate(self, *a, expanded);
                }
            }
            Op::MeanAxes(a, _) => {
                if self.rg(*a) {
                    let target = self.shape(*a).clone();
                    let count = target.numel() / out_shape.numel();
                    let scale = T::from_f64(1.0 / count as f64);
                    let expanded = expand_from(g, &out_shape, &target, scale);
                    pass.donate(self, *a, expanded);
                }
            }
            Op::AvgPool2d { x, window, stride } => {
                if self.rg(*x) {
                    let (_, _, h, w) = self.shape(*x).nchw()?;
                    let (_, _, h_out, w_out) = out_shape.nchw()?;
                    let mut dx = pass.take(self, *x);
                    kernels::avg_pool2d_bwd(g, &mut dx, h, w, h_out, w_out, *window, *stride);
                    pass.put(*x, dx);
                }
            }
            Op::Upsample2x(x) => {
                if self.rg(*x) {
                    let (_, _, h, w) = self.shape(*x).nchw()?;
                    let mut dx = pass.take(self, *x);
                    kernels::upsample2x_bwd(g, &mut dx, h, w);
                    pass.put(*x, dx);
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                let vx = self.value(*x).clone();
                let vw = self.value(*w).clone();
                let need_dx = self.rg(*x);
                let need_dw = self.rg(*w);
                let need_db = b.map(|bn| self.rg(bn)).unwrap_or(false);
                let mut dx = if need_dx { Some(pass.take(self, *x)) } else { None };
                let mut dw = if need_dw { Some(pass.take(self, *w)) } else { None };
                let mut db = if need_db {
                    Some(pass.take(self, b.unwrap()))
                } else {
                    None
                };
                kernels::conv2d_bwd(
                    vx.data(),
                    vw.data(),
                    g,
                    dims,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    pass.put(*x, dx);
                }
                if let Some(dw) = dw {
                    pass.put(*w, dw);
                }
                if let Some(db) = db {
                    pass.put(b.unwrap(), db);
                }
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let e = self.shape(*table)[1];
                    let mut dt = pass.take(self, *table);
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &g[i * e..][..e];
                        let dst = &mut dt[id * e..][..e];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                    pass.put(*table, dt);
                }
            }
        }
        Ok(())
    }
}

/// Per-pass upstream gradient buffers, separate from the persistent storage
/// so repeated backward calls accumulate instead of compounding.
struct PassGrads<T> {
    bufs: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> PassGrads<T> {
    fn add(&mut self, g: &Graph<T>, n: Node, src: &[T]) {
        if !g.nodes[n.idx].requires_grad {
            return;
        }
        match &mut self.bufs[n.idx] {
            Some(buf) => {
                for (b, &s) in buf.iter_mut().zip(src) {
                    *b = *b + s;
                }
            }
            slot => *slot = Some(src.to_vec()),
        }
    }

    /// Move an owned contribution in; avoids the zero-fill + add passes when
    /// this is the node's first (usually only) consumer.
    fn donate(&mut self, g: &Graph<T>, n: Node, src: Vec<T>) {
        if !g.nodes[n.idx].requires_grad {
            return;
        }
        match &mut self.bufs[n.idx] {
            Some(buf) => {
                for (b, s) in buf.iter_mut().zip(src) {
                    *b = *b + s;
                }
            }
            slot => *slot = Some(src),
        }
    }

    /// Take a buffer out (zeros if absent) for kernels that accumulate in
    /// place; pair with `put`.
    fn take(&mut self, g: &Graph<T>, n: Node) -> Vec<T> {
        self.bufs[n.idx]
            .take()
            .unwrap_or_else(|| vec![T::zero(); g.nodes[n.idx].value.numel()])
    }

    fn put(&mut self, n: Node, buf: Vec<T>) {
        self.bufs[n.idx] = Some(buf);
    }
}

/// Broadcast `g` (a keepdims-reduced shape) back up to `target`, scaled.
fn expand_from<T: Scalar>(g: &[T], gsh: &Shape, target: &Shape, scale: T) -> Vec<T> {
    let (_, out) = kernels::broadcast_binary(
        &vec![T::zero(); target.numel()],
        target,
        g,
        gsh,
        |_, y| y * scale,
    )
    .expect("keepdims shape always broadcasts");
    out
}

/// `sum(v * 0) == 0` iff every element is finite (Inf*0 and NaN*0 are NaN);
/// immune to overflow false-positives and fully vectorizable.
fn all_finite_fast<T: Scalar>(data: &[T]) -> bool {
    let zero = T::zero();
    let mut acc = [zero; 8];
    let mut chunks = data.chunks_exact(8);
    for c in chunks.by_ref() {
        for i in 0..8 {
            acc[i] = acc[i] + c[i] * zero;
        }
    }
    let mut total = zero;
    for a in acc {
        total = total + a;
    }
    for &v in chunks.remainder() {
        total = total + v * zero;
    }
    total == zero
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn square_gradient() {
        // f(x) = x^2 at x = 3 -> grad 6
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[12.0]);
        g.zero_grads();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn relu_subgradient_zero_at_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[-1.0, 2.0]), true);
        let r = g.relu(x).unwrap();
        let s = g.sum_all(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0]);

        // exactly zero input: subgradient 0
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1], &[0.0]), true);
        let r = g.relu(x).unwrap();
        let s = g.sum_all(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn foreign_seed_is_graph_error() {
        let mut g1 = Graph::<f64>::new();
        let mut g2 = Graph::<f64>::new();
        let x = g1.leaf(Tensor::scalar(1.0), true);
        let y = g1.mul(x, x).unwrap();
        let _ = g2.leaf(Tensor::scalar(1.0), true);
        assert!(matches!(g2.backward(y), Err(Error::Graph(_))));
    }

    #[test]
    fn non_scalar_seed_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::Graph(_))));
    }

    #[test]
    fn upsample_definition_and_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), true);
        let u = g.upsample_nearest2x(x).unwrap();
        assert_eq!(
            g.value(u).data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        let s = g.sum_all(u).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 4.0, 4.0, 4.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 1, 1, 1], &[5.0]), false);
        let u = g.upsample_nearest2x(x).unwrap();
        assert_eq!(g.value(u).data(), &[5.0; 4]);
    }

    #[test]
    fn avg_pool_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let p = g.avg_pool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(p).data(), &[2.5]);

        let c = g.leaf(Tensor::filled([1, 3, 4, 4], 7.0), false);
        let p = g.avg_pool2d(c, 2, 2).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 7.0).abs() < 1e-12));

        // window larger than extent
        let tiny = g.leaf(Tensor::filled([1, 1, 2, 2], 0.0), false);
        assert!(matches!(g.avg_pool2d(tiny, 3, 1), Err(Error::Dim(_))));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::filled([1, 1, 3, 3], 1.0), false);
        let w = g.leaf(t(&[1, 1, 1, 1], &[1.0]), false);
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y).shape().dims(), &[1, 1, 3, 3]);
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv_output_shape_formula() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([1, 3, 8, 8]), false);
        let w = g.leaf(Tensor::zeros([4, 3, 4, 4]), false);
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        assert_eq!(g.value(y).shape().dims(), &[1, 4, 4, 4]);
    }

    #[test]
    fn conv_channel_mismatch_is_dim_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros([1, 3, 8, 8]), false);
        let w = g.leaf(Tensor::zeros([4, 2, 3, 3]), false);
        assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Dim(_))));
    }

    #[test]
    fn nonfinite_forward_is_numeric_error() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::scalar(-1.0), false);
        // log(-1) = NaN
        assert!(matches!(g.log(x), Err(Error::Numeric(_))));
        let big = g.leaf(Tensor::scalar(1e308), false);
        let two = g.leaf(Tensor::scalar(1e308), false);
        let sum = g.add(big, two); // overflows to inf
        assert!(matches!(sum, Err(Error::Numeric(_))));
    }

    #[test]
    fn linearity_of_backward() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x0 = Tensor::<f64>::randn([6], 1.0, &mut rng);
        let (a, b) = (1.7, -0.6);

        // grad of a*f + b*g
        let mut g = Graph::<f64>::new();
        let x = g.leaf(x0.clone(), true);
        let f = {
            let sq = g.mul(x, x).unwrap();
            g.sum_all(sq).unwrap()
        };
        let h = {
            let t = g.tanh(x).unwrap();
            g.sum_all(t).unwrap()
        };
        let fa = g.scalar_mul(f, a).unwrap();
        let hb = g.scalar_mul(h, b).unwrap();
        let combo = g.add(fa, hb).unwrap();
        g.backward(combo).unwrap();
        let combined = g.grad(x).unwrap();

        // a*grad(f) + b*grad(g), separately
        let mut g1 = Graph::<f64>::new();
        let x1 = g1.leaf(x0.clone(), true);
        let sq = g1.mul(x1, x1).unwrap();
        let f1 = g1.sum_all(sq).unwrap();
        g1.backward(f1).unwrap();
        let gf = g1.grad(x1).unwrap();

        let mut g2 = Graph::<f64>::new();
        let x2 = g2.leaf(x0, true);
        let th = g2.tanh(x2).unwrap();
        let h2 = g2.sum_all(th).unwrap();
        g2.backward(h2).unwrap();
        let gh = g2.grad(x2).unwrap();

        for i in 0..combined.numel() {
            let want = a * gf.data()[i] + b * gh.data()[i];
            assert!((combined.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_and_split_gradients() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t(&[1, 1, 1, 2], &[1.0, 2.0]), true);
        let b = g.leaf(t(&[1, 2, 1, 2], &[3.0, 4.0, 5.0, 6.0]), true);
        let c = g.concat_c(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape().dims(), &[1, 3, 1, 2]);
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = g.leaf(t(&[1, 3, 1, 2], &[1.0, 10.0, 100.0, 1000.0, 2.0, 20.0]), false);
        let prod = g.mul(c, w).unwrap();
        let s = g.sum_all(prod).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 10.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[100.0, 1000.0, 2.0, 20.0]);
    }

    #[test]
    fn embedding_lookup_and_gradient() {
        let mut g = Graph::<f64>::new();
        let table = g.leaf(t(&[3, 2], &[0.0, 1.0, 10.0, 11.0, 20.0, 21.0]), true);
        let e = g.embedding(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(e).data(), &[20.0, 21.0, 0.0, 1.0, 20.0, 21.0]);
        let s = g.sum_all(e).unwrap();
        g.backward(s).unwrap();
        assert_eq!(
            g.grad(table).unwrap().data(),
            &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]
        );
        assert!(matches!(g.embedding(table, &[3]), Err(Error::Domain(_))));
    }

    #[test]
    fn softmax_channel_sums_to_one() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::randn([2, 3, 4, 4], 2.0, &mut rng), false);
        let p = g.softmax_c(x).unwrap();
        let v = g.value(p);
        for n in 0..2 {
            for i in 0..16 {
                let s: f64 = (0..3).map(|c| v.data()[n * 48 + c * 16 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn frozen_leaves_get_no_grad_buffers() {
        let mut g = Graph::<f64>::new();
        let frozen = g.leaf(t(&[2], &[1.0, 2.0]), false);
        let live = g.leaf(t(&[2], &[3.0, 4.0]), true);
        let prod = g.mul(frozen, live).unwrap();
        let s = g.sum_all(prod).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(frozen).is_none());
        assert_eq!(g.grad(live).unwrap().data(), &[1.0, 2.0]);
    }
}
