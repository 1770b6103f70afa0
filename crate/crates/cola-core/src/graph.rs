//! Define-by-run reverse-mode differentiation graph.
//!
//! A `Graph` is rebuilt per forward pass and records every primitive op in
//! topological order; `backward` replays the tape in reverse. Parameters are
//! registered through [`Graph::param`], which deduplicates by storage
//! identity so that aliased (shared) matrices accumulate gradients from every
//! pathway that uses them. A graph is confined to one thread.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{shape_str, Param, Tensor};

/// Index of a node in the graph. Nodes are appended in topological order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Element-wise nonlinearity kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::config(format!(
                "unknown activation kind '{other}' (expected gelu or relu)"
            ))),
        }
    }

    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                // exact GELU: 0.5 * x * (1 + erf(x / sqrt(2)))
                let half = T::from_f64(0.5);
                let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                half * x * (T::one() + (x * inv_sqrt2).erf())
            }
        }
    }

    #[inline]
    fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let half = T::from_f64(0.5);
                let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = T::from_f64(0.3989422804014327); // 1/sqrt(2*pi)
                half * (T::one() + (x * inv_sqrt2).erf())
                    + x * inv_sqrt_2pi * (-x * x * half).exp()
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C = A * B for 2-D A [m,k], B [k,n].
    Matmul { a: NodeId, b: NodeId },
    /// C = X * W^T with W stored [d_out, d_in]; X is [n, d_in] or [d_in].
    Linear { x: NodeId, w: NodeId },
    Add { a: NodeId, b: NodeId },
    /// Broadcast a [d] bias over the rows of x.
    AddBias { x: NodeId, b: NodeId },
    ScaleConst { x: NodeId, c: f64 },
    /// Multiply by a trainable scalar node (shape [1]).
    ScaleByScalar { s: NodeId, x: NodeId },
    SoftmaxRows { x: NodeId },
    LayerNorm {
        x: NodeId,
        gain: Option<NodeId>,
        bias: Option<NodeId>,
        eps: f64,
    },
    Act { x: NodeId, kind: Activation },
    Transpose { x: NodeId },
    Reshape { x: NodeId },
    MeanRows { x: NodeId },
    RowSelect { x: NodeId, idx: usize },
    ConcatVec { a: NodeId, b: NodeId },
    SumAll { x: NodeId },
    GatherRows { table: NodeId, ids: Vec<usize> },
    CrossEntropyLogits { logits: NodeId, target: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::Add { .. } => "add",
            Op::AddBias { .. } => "add_bias",
            Op::ScaleConst { .. } => "scale_const",
            Op::ScaleByScalar { .. } => "scale_by_scalar",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Act { .. } => "activation",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::MeanRows { .. } => "mean_rows",
            Op::RowSelect { .. } => "row_select",
            Op::ConcatVec { .. } => "concat_vec",
            Op::SumAll { .. } => "sum_all",
            Op::GatherRows { .. } => "gather_rows",
            Op::CrossEntropyLogits { .. } => "cross_entropy_logits",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    needs_grad: bool,
    op: Op,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    // param storage ptr -> node, so aliased params map to one leaf
    param_nodes: HashMap<usize, NodeId>,
    recording: bool,
}

/// Row-major matmul: A [m,k] * B [k,n] -> C [m,n].
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &apk) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += apk * bj;
            }
        }
    }
    c
}

/// C += A * B^T for A [m,k], B [n,k] (so C is [m,n]).
fn matmul_bt_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            crow[j] += s;
        }
    }
}

/// C += A^T * B for A [k,m], B [k,n] (so C is [m,n]).
fn matmul_at_acc<T: Scalar>(c: &mut [T], a: &[T], b: &[T], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += api * bj;
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records gradients.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            param_nodes: HashMap::new(),
            recording: true,
        }
    }

    /// A value-only graph: forward passes run, `backward` is an error.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            param_nodes: HashMap::new(),
            recording: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad: needs_grad && self.recording,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Register a constant input (no gradient).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Register a parameter leaf; aliased storage maps to a single node.
    pub fn param(&mut self, p: &Param<T>) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&p.ptr_id()) {
            return id;
        }
        let id = self.push(p.value().clone(), p.is_trainable(), Op::Leaf);
        self.param_nodes.insert(p.ptr_id(), id);
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Gradient of a node, if backward has populated it.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<T>> {
        let node = &self.nodes[id.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient for a registered parameter. Frozen or unused params yield None.
    pub fn grad_for(&self, p: &Param<T>) -> Option<Tensor<T>> {
        self.param_nodes.get(&p.ptr_id()).and_then(|&id| {
            if self.nodes[id.0].needs_grad {
                self.grad(id)
            } else {
                None
            }
        })
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// First node holding a non-finite value, for NaN diagnostics.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.all_finite() {
                None
            } else {
                Some(format!(
                    "node #{i} (op {}, shape {})",
                    n.op.name(),
                    shape_str(n.value.shape())
                ))
            }
        })
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape(format!(
                "matmul: incompatible shapes {} x {}",
                shape_str(av.shape()),
                shape_str(bv.shape())
            )));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let c = matmul_raw(av.data(), bv.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], c)?, needs, Op::Matmul { a, b }))
    }

    /// `x * W^T` with `W` stored `[d_out, d_in]`. 1-D `x` stays 1-D.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[1] {
            return Err(Error::shape(format!(
                "linear: input {} incompatible with weight {}",
                shape_str(xv.shape()),
                shape_str(wv.shape())
            )));
        }
        let (n, d_in, d_out) = (xv.rows(), xv.cols(), wv.shape()[0]);
        let mut c = vec![T::zero(); n * d_out];
        matmul_bt_acc(&mut c, xv.data(), wv.data(), n, d_in, d_out);
        let out_shape = if xv.shape().len() == 1 {
            vec![d_out]
        } else {
            vec![n, d_out]
        };
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(Tensor::new(out_shape, c)?, needs, Op::Linear { x, w }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "add: mismatched shapes {} vs {}",
                shape_str(av.shape()),
                shape_str(bv.shape())
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(av.shape().to_vec(), data)?,
            needs,
            Op::Add { a, b },
        ))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        if bv.shape().len() != 1 || xv.cols() != bv.shape()[0] {
            return Err(Error::shape(format!(
                "add_bias: input {} incompatible with bias {}",
                shape_str(xv.shape()),
                shape_str(bv.shape())
            )));
        }
        let d = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            for (v, &bj) in row.iter_mut().zip(bv.data()) {
                *v += bj;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(
            Tensor::new(xv.shape().to_vec(), data)?,
            needs,
            Op::AddBias { x, b },
        ))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let f = T::from_f64(c);
        let data = xv.data().iter().map(|&v| v * f).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("scale preserves shape");
        let needs = self.needs(x);
        self.push(t, needs, Op::ScaleConst { x, c })
    }

    /// Multiply every element of `x` by the scalar node `s` (shape `[1]`).
    pub fn scale_by(&mut self, s: NodeId, x: NodeId) -> Result<NodeId> {
        let sv = &self.nodes[s.0].value;
        if !sv.is_scalar() {
            return Err(Error::shape(format!(
                "scale_by: scalar operand has shape {}, expected [1]",
                shape_str(sv.shape())
            )));
        }
        let sc = sv.data()[0];
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| v * sc).collect();
        let needs = self.needs(s) || self.needs(x);
        Ok(self.push(
            Tensor::new(xv.shape().to_vec(), data)?,
            needs,
            Op::ScaleByScalar { s, x },
        ))
    }

    /// Row-wise softmax, stabilized by row-max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.cols() == 0 {
            return Err(Error::shape(format!(
                "softmax_rows: empty row dimension in shape {}",
                shape_str(xv.shape())
            )));
        }
        let d = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(xv.shape().to_vec(), data)?,
            needs,
            Op::SoftmaxRows { x },
        ))
    }

    /// Normalize the last dimension to mean 0 / variance 1, then apply the
    /// optional affine gain and bias.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: Option<NodeId>,
        bias: Option<NodeId>,
        eps: f64,
    ) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let d = xv.cols();
        if d == 0 {
            return Err(Error::shape(format!(
                "layer_norm: zero-width last dimension in shape {}",
                shape_str(xv.shape())
            )));
        }
        for (name, opt) in [("gain", gain), ("bias", bias)] {
            if let Some(g) = opt {
                let gv = &self.nodes[g.0].value;
                if gv.shape() != [d] {
                    return Err(Error::shape(format!(
                        "layer_norm: {name} shape {} does not match feature dim [{d}]",
                        shape_str(gv.shape())
                    )));
                }
            }
        }
        let epst = T::from_f64(eps);
        let dn = T::from_f64(d as f64);
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(d) {
            let mut mean = T::zero();
            for &v in row.iter() {
                mean += v;
            }
            mean /= dn;
            let mut var = T::zero();
            for &v in row.iter() {
                let c = v - mean;
                var += c * c;
            }
            var /= dn;
            let inv = T::one() / (var + epst).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        if let Some(g) = gain {
            let gv = self.nodes[g.0].value.data().to_vec();
            for row in data.chunks_mut(d) {
                for (v, &gj) in row.iter_mut().zip(&gv) {
                    *v *= gj;
                }
            }
        }
        if let Some(b) = bias {
            let bv = self.nodes[b.0].value.data().to_vec();
            for row in data.chunks_mut(d) {
                for (v, &bj) in row.iter_mut().zip(&bv) {
                    *v += bj;
                }
            }
        }
        let needs = self.needs(x)
            || gain.map_or(false, |g| self.needs(g))
            || bias.map_or(false, |b| self.needs(b));
        let shape = self.nodes[x.0].value.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, data)?,
            needs,
            Op::LayerNorm { x, gain, bias, eps },
        ))
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let data = xv.data().iter().map(|&v| kind.apply(v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).expect("act preserves shape");
        let needs = self.needs(x);
        self.push(t, needs, Op::Act { x, kind })
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.shape().len() != 2 {
            return Err(Error::shape(format!(
                "transpose: expected 2-D tensor, got {}",
                shape_str(xv.shape())
            )));
        }
        let (m, n) = (xv.shape()[0], xv.shape()[1]);
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xv.data()[i * n + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![n, m], data)?, needs, Op::Transpose { x }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let numel: usize = shape.iter().product();
        if numel != xv.numel() {
            return Err(Error::shape(format!(
                "reshape: {} cannot reshape to {}",
                shape_str(xv.shape()),
                shape_str(&shape)
            )));
        }
        let t = Tensor::new(shape, xv.data().to_vec())?;
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::Reshape { x }))
    }

    /// Column-wise mean over rows: `[n, d] -> [d]`.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.shape().len() != 2 || xv.shape()[0] == 0 {
            return Err(Error::shape(format!(
                "mean_rows: expected non-empty 2-D tensor, got {}",
                shape_str(xv.shape())
            )));
        }
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let inv = T::one() / T::from_f64(n as f64);
        let mut data = vec![T::zero(); d];
        for row in xv.data().chunks(d) {
            for (s, &v) in data.iter_mut().zip(row) {
                *s += v;
            }
        }
        for s in data.iter_mut() {
            *s *= inv;
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![d], data)?, needs, Op::MeanRows { x }))
    }

    /// Extract row `idx` of a 2-D tensor as a 1-D tensor.
    pub fn row(&mut self, x: NodeId, idx: usize) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        if xv.shape().len() != 2 || idx >= xv.shape()[0] {
            return Err(Error::shape(format!(
                "row: index {idx} out of bounds for shape {}",
                shape_str(xv.shape())
            )));
        }
        let d = xv.shape()[1];
        let data = xv.data()[idx * d..(idx + 1) * d].to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![d], data)?,
            needs,
            Op::RowSelect { x, idx },
        ))
    }

    /// Concatenate two 1-D tensors.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape().len() != 1 || bv.shape().len() != 1 {
            return Err(Error::shape(format!(
                "concat: expected 1-D tensors, got {} and {}",
                shape_str(av.shape()),
                shape_str(bv.shape())
            )));
        }
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let n = data.len();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![n], data)?, needs, Op::ConcatVec { a, b }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let mut s = T::zero();
        for &v in xv.data() {
            s += v;
        }
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), needs, Op::SumAll { x })
    }

    /// Gather rows of `table` (`[v, d]`) by index: outputs `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = &self.nodes[table.0].value;
        if tv.shape().len() != 2 {
            return Err(Error::shape(format!(
                "gather_rows: table must be 2-D, got {}",
                shape_str(tv.shape())
            )));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape(format!(
                "gather_rows: index {bad} out of bounds for table {}",
                shape_str(tv.shape())
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], data)?,
            needs,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Cross-entropy of 1-D logits against a class index, via log-sum-exp.
    pub fn cross_entropy_logits(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let zv = &self.nodes[logits.0].value;
        if zv.shape().len() != 1 || target >= zv.shape()[0] {
            return Err(Error::shape(format!(
                "cross_entropy_logits: target {target} incompatible with logits {}",
                shape_str(zv.shape())
            )));
        }
        let max = zv.data().iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for &v in zv.data() {
            sum += (v - max).exp();
        }
        let loss = max + sum.ln() - zv.data()[target];
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            needs,
            Op::CrossEntropyLogits { logits, target },
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    fn acc_grad(&mut self, id: NodeId, delta: impl Fn(usize) -> T) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        let numel = node.value.numel();
        let g = node.grad.get_or_insert_with(|| vec![T::zero(); numel]);
        for (i, gi) in g.iter_mut().enumerate() {
            *gi += delta(i);
        }
    }

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<T> {
        let numel = self.nodes[id.0].value.numel();
        self.nodes[id.0]
            .grad
            .get_or_insert_with(|| vec![T::zero(); numel])
    }

    /// Reverse pass from a scalar loss. Every trainable leaf reachable from
    /// the loss receives a gradient; frozen leaves receive none.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.recording {
            return Err(Error::usage("backward called on an inference graph"));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::shape(format!(
                "backward: loss must be a scalar, got shape {}",
                shape_str(self.nodes[loss.0].value.shape())
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            // loss disconnected from every trainable leaf; nothing to do
            return Ok(());
        }
        self.grad_buf(loss)[0] = T::one();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let out_grad = self.nodes[i].grad.clone().expect("checked above");
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}

                Op::Matmul { a, b } => {
                    let (m, k) = {
                        let s = self.nodes[a.0].value.shape();
                        (s[0], s[1])
                    };
                    let n = self.nodes[b.0].value.shape()[1];
                    if self.needs(a) {
                        // dA += dC * B^T
                        let bdat = self.nodes[b.0].value.data().to_vec();
                        matmul_bt_acc(self.grad_buf(a), &out_grad, &bdat, m, n, k);
                    }
                    if self.needs(b) {
                        // dB += A^T * dC
                        let adat = self.nodes[a.0].value.data().to_vec();
                        matmul_at_acc(self.grad_buf(b), &adat, &out_grad, m, k, n);
                    }
                }

                Op::Linear { x, w } => {
                    let n = self.nodes[x.0].value.rows();
                    let d_in = self.nodes[x.0].value.cols();
                    let d_out = self.nodes[w.0].value.shape()[0];
                    if self.needs(x) {
                        // dX += dC * W
                        let wdat = self.nodes[w.0].value.data().to_vec();
                        let dx = matmul_raw(&out_grad, &wdat, n, d_out, d_in);
                        self.acc_grad(x, |i| dx[i]);
                    }
                    if self.needs(w) {
                        // dW += dC^T * X
                        let xdat = self.nodes[x.0].value.data().to_vec();
                        matmul_at_acc(self.grad_buf(w), &out_grad, &xdat, n, d_out, d_in);
                    }
                }

                Op::Add { a, b } => {
                    self.acc_grad(a, |i| out_grad[i]);
                    self.acc_grad(b, |i| out_grad[i]);
                }

                Op::AddBias { x, b } => {
                    self.acc_grad(x, |i| out_grad[i]);
                    if self.needs(b) {
                        let d = self.nodes[b.0].value.numel();
                        let mut db = vec![T::zero(); d];
                        for row in out_grad.chunks(d) {
                            for (s, &g) in db.iter_mut().zip(row) {
                                *s += g;
                            }
                        }
                        self.acc_grad(b, |i| db[i]);
                    }
                }

                Op::ScaleConst { x, c } => {
                    let f = T::from_f64(c);
                    self.acc_grad(x, |i| out_grad[i] * f);
                }

                Op::ScaleByScalar { s, x } => {
                    if self.needs(s) {
                        let xdat = self.nodes[x.0].value.data();
                        let mut ds = T::zero();
                        for (&g, &xi) in out_grad.iter().zip(xdat) {
                            ds += g * xi;
                        }
                        self.acc_grad(s, |_| ds);
                    }
                    if self.needs(x) {
                        let sc = self.nodes[s.0].value.data()[0];
                        self.acc_grad(x, |i| out_grad[i] * sc);
                    }
                }

                Op::SoftmaxRows { x } => {
                    let d = self.nodes[i].value.cols();
                    let sdat = self.nodes[i].value.data().to_vec();
                    let mut dx = vec![T::zero(); sdat.len()];
                    for ((drow, srow), grow) in dx
                        .chunks_mut(d)
                        .zip(sdat.chunks(d))
                        .zip(out_grad.chunks(d))
                    {
                        let mut dot = T::zero();
                        for (&g, &s) in grow.iter().zip(srow) {
                            dot += g * s;
                        }
                        for ((dv, &g), &s) in drow.iter_mut().zip(grow).zip(srow) {
                            *dv = (g - dot) * s;
                        }
                    }
                    self.acc_grad(x, |i| dx[i]);
                }

                Op::LayerNorm { x, gain, bias, eps } => {
                    let d = self.nodes[x.0].value.cols();
                    let xdat = self.nodes[x.0].value.data().to_vec();
                    let gdat = gain.map(|g| self.nodes[g.0].value.data().to_vec());
                    let epst = T::from_f64(eps);
                    let dn = T::from_f64(d as f64);
                    let rows = xdat.len() / d;
                    let mut dx = vec![T::zero(); xdat.len()];
                    let mut dgain = vec![T::zero(); d];
                    let mut dbias = vec![T::zero(); d];
                    for r in 0..rows {
                        let xrow = &xdat[r * d..(r + 1) * d];
                        let grow = &out_grad[r * d..(r + 1) * d];
                        let mut mean = T::zero();
                        for &v in xrow {
                            mean += v;
                        }
                        mean /= dn;
                        let mut var = T::zero();
                        for &v in xrow {
                            let c = v - mean;
                            var += c * c;
                        }
                        var /= dn;
                        let inv = T::one() / (var + epst).sqrt();
                        // dxhat = dy * gain; accumulate affine grads
                        let mut dxhat = vec![T::zero(); d];
                        for j in 0..d {
                            let xhat = (xrow[j] - mean) * inv;
                            let g = grow[j];
                            dbias[j] += g;
                            dgain[j] += g * xhat;
                            dxhat[j] = match &gdat {
                                Some(gd) => g * gd[j],
                                None => g,
                            };
                        }
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xc = T::zero();
                        for j in 0..d {
                            sum_dxhat += dxhat[j];
                            sum_dxhat_xc += dxhat[j] * (xrow[j] - mean);
                        }
                        let half = T::from_f64(0.5);
                        let dvar = -half * inv * inv * inv * sum_dxhat_xc;
                        let two = T::from_f64(2.0);
                        let dmean = -inv * sum_dxhat;
                        for j in 0..d {
                            dx[r * d + j] = dxhat[j] * inv
                                + dvar * two * (xrow[j] - mean) / dn
                                + dmean / dn;
                        }
                    }
                    self.acc_grad(x, |i| dx[i]);
                    if let Some(g) = gain {
                        self.acc_grad(g, |i| dgain[i]);
                    }
                    if let Some(b) = bias {
                        self.acc_grad(b, |i| dbias[i]);
                    }
                }

                Op::Act { x, kind } => {
                    let xdat = self.nodes[x.0].value.data().to_vec();
                    self.acc_grad(x, |i| out_grad[i] * kind.derivative(xdat[i]));
                }

                Op::Transpose { x } => {
                    let (m, n) = {
                        let s = self.nodes[x.0].value.shape();
                        (s[0], s[1])
                    };
                    // out is [n, m]; dX[i,j] += dY[j,i]
                    self.acc_grad(x, |idx| {
                        let (ii, jj) = (idx / n, idx % n);
                        out_grad[jj * m + ii]
                    });
                }

                Op::Reshape { x } => {
                    self.acc_grad(x, |i| out_grad[i]);
                }

                Op::MeanRows { x } => {
                    let (n, d) = {
                        let s = self.nodes[x.0].value.shape();
                        (s[0], s[1])
                    };
                    let inv = T::one() / T::from_f64(n as f64);
                    self.acc_grad(x, |i| out_grad[i % d] * inv);
                }

                Op::RowSelect { x, idx } => {
                    let d = self.nodes[x.0].value.shape()[1];
                    self.acc_grad(x, |i| {
                        if i / d == idx {
                            out_grad[i % d]
                        } else {
                            T::zero()
                        }
                    });
                }

                Op::ConcatVec { a, b } => {
                    let na = self.nodes[a.0].value.numel();
                    self.acc_grad(a, |i| out_grad[i]);
                    self.acc_grad(b, |i| out_grad[na + i]);
                }

                Op::SumAll { x } => {
                    let g = out_grad[0];
                    self.acc_grad(x, |_| g);
                }

                Op::GatherRows { table, ids } => {
                    if self.needs(table) {
                        let d = self.nodes[table.0].value.shape()[1];
                        let numel = self.nodes[table.0].value.numel();
                        let mut dt = vec![T::zero(); numel];
                        for (r, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                dt[id * d + j] += out_grad[r * d + j];
                            }
                        }
                        self.acc_grad(table, |i| dt[i]);
                    }
                }

                Op::CrossEntropyLogits { logits, target } => {
                    let zdat = self.nodes[logits.0].value.data().to_vec();
                    let max = zdat.iter().cloned().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    let mut p: Vec<T> = zdat.iter().map(|&v| (v - max).exp()).collect();
                    for &v in &p {
                        sum += v;
                    }
                    for v in p.iter_mut() {
                        *v /= sum;
                    }
                    let g = out_grad[0];
                    self.acc_grad(logits, |i| {
                        let onehot = if i == target { T::one() } else { T::zero() };
                        (p[i] - onehot) * g
                    });
                }
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numgrad::{finite_diff_grad, max_rel_err};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn t2(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    /// Brute-force triple-loop reference for matmul.
    fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a.at2(i, p) * b.at2(p, j);
                }
            }
        }
        Tensor::new(vec![m, n], c).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut g = Graph::new();
        let i2 = g.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let x = g.constant(t2(&[vec![3.0, -1.5], vec![0.25, 7.0]]));
        let c = g.matmul(i2, x).unwrap();
        assert_eq!(g.value(c), g.value(x));
    }

    #[test]
    fn matmul_zero_annihilation() {
        let mut g = Graph::new();
        let a = g.constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let z = g.constant(t2(&[vec![0.0], vec![0.0]]));
        let c = g.matmul(a, z).unwrap();
        assert_eq!(g.value(c).data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let a = Tensor::<f64>::uniform(vec![3, 4], 2.0, &mut rng);
        let b = Tensor::<f64>::uniform(vec![4, 2], 2.0, &mut rng);
        let expect = matmul_oracle(&a, &b);
        let mut g = Graph::new();
        let (an, bn) = (g.constant(a), g.constant(b));
        let c = g.matmul(an, bn).unwrap();
        assert_eq!(g.value(c).data(), expect.data());
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 2]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    proptest! {
        #[test]
        fn matmul_exact_vs_oracle_all_small_shapes(
            m in 1usize..=8, k in 1usize..=8, n in 1usize..=8, seed in 0u64..1000
        ) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let a = Tensor::<f64>::uniform(vec![m, k], 3.0, &mut rng);
            let b = Tensor::<f64>::uniform(vec![k, n], 3.0, &mut rng);
            let expect = matmul_oracle(&a, &b);
            let mut g = Graph::new();
            let (an, bn) = (g.constant(a), g.constant(b));
            let c = g.matmul(an, bn).unwrap();
            prop_assert_eq!(g.value(c).data(), expect.data());
        }

        #[test]
        fn softmax_rows_sum_to_one_and_positive(seed in 0u64..1000, m in 1usize..6, n in 1usize..6) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::uniform(vec![m, n], 30.0, &mut rng);
            let mut g = Graph::new();
            let xn = g.constant(x);
            let s = g.softmax_rows(xn).unwrap();
            for row in g.value(s).data().chunks(n) {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| v > 0.0));
            }
        }

        #[test]
        fn softmax_shift_invariance(c in -50.0f64..50.0, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut g = Graph::new();
            let x0 = g.constant(t2(&[vec![a, b]]));
            let x1 = g.constant(t2(&[vec![a + c, b + c]]));
            let s0 = g.softmax_rows(x0).unwrap();
            let s1 = g.softmax_rows(x1).unwrap();
            let d: f64 = g.value(s0).data().iter().zip(g.value(s1).data())
                .map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            prop_assert!(d < 1e-12);
        }

        #[test]
        fn layer_norm_unit_stats(seed in 0u64..500, d in 2usize..12) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::uniform(vec![3, d], 4.0, &mut rng);
            let eps = 1e-5;
            let mut in_vars = Vec::new();
            for row in x.data().chunks(d) {
                let mean: f64 = row.iter().sum::<f64>() / d as f64;
                let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                prop_assume!(var >= 1e-3);
                in_vars.push(var);
            }
            let mut g = Graph::new();
            let xn = g.constant(x);
            let y = g.layer_norm(xn, None, None, eps).unwrap();
            for (row, &v_in) in g.value(y).data().chunks(d).zip(&in_vars) {
                let mean: f64 = row.iter().sum::<f64>() / d as f64;
                let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
                prop_assert!(mean.abs() < 1e-9, "mean {}", mean);
                // output variance is v/(v+eps) exactly; the eps bias only
                // allows the tight unit bound once v dominates eps
                prop_assert!((var - v_in / (v_in + eps)).abs() < 1e-9, "var {}", var);
                if v_in >= 10.0 {
                    prop_assert!((var - 1.0).abs() < 1e-6, "var {}", var);
                }
            }
        }
    }

    #[test]
    fn softmax_uniform_row() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[vec![0.0, 0.0, 0.0]]));
        let s = g.softmax_rows(x).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_direct_formula() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[vec![1.0, 2.0, 3.0]]));
        let s = g.softmax_rows(x).unwrap();
        // independent direct evaluation of exp/sum
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|&v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (got, want) in g.value(s).data().iter().zip(e.iter().map(|v| v / z)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_empty_row_dimension_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![2, 0]));
        assert!(matches!(g.softmax_rows(x), Err(Error::Shape(_))));
    }

    #[test]
    fn layer_norm_constant_vector_collapses_to_bias() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[vec![5.0, 5.0, 5.0]]));
        let y = g.layer_norm(x, None, None, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_direct_formula() {
        // x=[1,3], gain=[2,2], bias=[1,1], eps=1e-5: mean 2, var 1
        let mut g = Graph::new();
        let x = g.constant(t2(&[vec![1.0, 3.0]]));
        let gain = g.constant(Tensor::from_vec1(vec![2.0, 2.0]));
        let bias = g.constant(Tensor::from_vec1(vec![1.0, 1.0]));
        let y = g.layer_norm(x, Some(gain), Some(bias), 1e-5).unwrap();
        let xhat = 1.0 / (1.0f64 + 1e-5).sqrt();
        let want = [1.0 - 2.0 * xhat, 1.0 + 2.0 * xhat];
        for (got, want) in g.value(y).data().iter().zip(want) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn layer_norm_zero_width_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![2, 0]));
        assert!(matches!(g.layer_norm(x, None, None, 1e-5), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec1(vec![-1.0, 2.0]));
        let y = g.activation(x, Activation::Relu);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    /// erf via its Maclaurin series, independently of libm.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = 0.0;
        for n in 0..60 {
            sum += term / (2 * n + 1) as f64;
            term *= -x * x / (n + 1) as f64;
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn gelu_matches_erf_series_oracle() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec1(vec![0.0, 1.0, -0.7, 2.3]));
        let y = g.activation(x, Activation::Gelu);
        let got = g.value(y).data();
        assert_eq!(got[0], 0.0);
        for (&got, &xi) in got.iter().zip([0.0f64, 1.0, -0.7, 2.3].iter()) {
            let want = 0.5 * xi * (1.0 + erf_series(xi / std::f64::consts::SQRT_2));
            assert!((got - want).abs() < 1e-10, "gelu({xi}) = {got}, want {want}");
        }
    }

    #[test]
    fn unknown_activation_kind_is_config_error() {
        assert!(matches!(Activation::parse("swish"), Err(Error::Config(_))));
        assert!(matches!(Activation::parse("GELU"), Ok(Activation::Gelu)));
    }

    #[test]
    fn backward_sum_of_linear_map_matches_structure() {
        // loss = sum(W x): dW = outer(1, x); checked against finite differences
        let w0 = Tensor::<f64>::uniform(vec![3, 2], 1.0, &mut ChaCha20Rng::seed_from_u64(1));
        let x = t2(&[vec![0.3], vec![-1.2]]);
        let p = Param::trainable(w0.clone());
        let mut g = Graph::new();
        let wn = g.param(&p);
        let xn = g.constant(x.clone());
        let y = g.matmul(wn, xn).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        let grad = g.grad_for(&p).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((grad.at2(i, j) - x.data()[j]).abs() < 1e-14);
            }
        }
        let fd = finite_diff_grad(
            |w| {
                let mut gi = Graph::<f64>::inference();
                let wn = gi.constant(w.clone());
                let xn = gi.constant(x.clone());
                let y = gi.matmul(wn, xn).unwrap();
                let l = gi.sum_all(y);
                gi.value(l).data()[0]
            },
            &w0,
            1e-6,
        )
        .unwrap();
        assert!(max_rel_err(&grad, &fd, 1e-2) < 1e-7);
    }

    #[test]
    fn disconnected_parameter_gets_no_gradient() {
        let p = Param::<f64>::trainable(Tensor::zeros(vec![2]));
        let q = Param::<f64>::trainable(Tensor::full(vec![1], 3.0));
        let mut g = Graph::new();
        let _pn = g.param(&p);
        let qn = g.param(&q);
        let loss = g.sum_all(qn);
        g.backward(loss).unwrap();
        assert!(g.grad_for(&p).is_none());
        assert!(g.grad_for(&q).is_some());
    }

    #[test]
    fn frozen_leaf_receives_no_gradient() {
        let w = Param::<f64>::frozen(Tensor::full(vec![2, 2], 1.0));
        let mut g = Graph::new();
        let wn = g.param(&w);
        let x = g.constant(t2(&[vec![1.0], vec![2.0]]));
        let y = g.matmul(wn, x).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert!(g.grad_for(&w).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let p = Param::<f64>::trainable(Tensor::zeros(vec![3]));
        let mut g = Graph::new();
        let pn = g.param(&p);
        assert!(matches!(g.backward(pn), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_on_inference_graph_is_usage_error() {
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.backward(x), Err(Error::Usage(_))));
    }

    /// Composite chain: softmax -> layer_norm -> matmul -> gelu -> ce,
    /// gradient checked against central differences for >= 20 seeds.
    #[test]
    fn composite_chain_gradients_match_finite_differences() {
        let mut worst = 0.0f64;
        for seed in 0..24u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let theta = Tensor::<f64>::uniform(vec![4, 4], 1.0, &mut rng);
            let gain = Tensor::<f64>::uniform(vec![4], 0.5, &mut rng);
            let x = Tensor::<f64>::uniform(vec![3, 4], 1.5, &mut rng);

            let eval = |w: &Tensor<f64>, record: bool| -> (f64, Option<Tensor<f64>>) {
                let mut g = if record { Graph::new() } else { Graph::inference() };
                let p = Param::trainable(w.clone());
                let wn = g.param(&p);
                let gn = g.constant(gain.clone());
                let xn = g.constant(x.clone());
                let h = g.matmul(xn, wn).unwrap();
                let s = g.softmax_rows(h).unwrap();
                let ln = g.layer_norm(s, Some(gn), None, 1e-5).unwrap();
                let a = g.activation(ln, Activation::Gelu);
                let pooled = g.mean_rows(a).unwrap();
                let loss = g.cross_entropy_logits(pooled, 1).unwrap();
                if record {
                    g.backward(loss).unwrap();
                    (g.value(loss).data()[0], g.grad_for(&p))
                } else {
                    (g.value(loss).data()[0], None)
                }
            };

            let (_, grad) = eval(&theta, true);
            let grad = grad.unwrap();
            let fd = finite_diff_grad(|w| eval(w, false).0, &theta, 1e-6).unwrap();
            let err = max_rel_err(&grad, &fd, 1e-2);
            worst = worst.max(err);
        }
        assert!(worst < 1e-5, "max relative error {worst}");
    }

    /// Every primitive op's gradient vs central differences, >= 20 seeds.
    #[test]
    fn primitive_gradients_match_finite_differences_over_seeds() {
        for seed in 0..20u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(1000 + seed);
            let theta = Tensor::<f64>::uniform(vec![3, 3], 1.0, &mut rng);
            let aux = Tensor::<f64>::uniform(vec![3, 3], 1.0, &mut rng);
            let lam = Tensor::<f64>::uniform(vec![1], 1.0, &mut rng);

            type Builder =
                Box<dyn Fn(&mut Graph<f64>, NodeId, NodeId, NodeId) -> NodeId>;
            let cases: Vec<(&str, Builder)> = vec![
                ("matmul", Box::new(|g, t, a, _| g.matmul(t, a).unwrap())),
                ("linear", Box::new(|g, t, a, _| g.linear(a, t).unwrap())),
                ("add", Box::new(|g, t, a, _| g.add(t, a).unwrap())),
                ("transpose", Box::new(|g, t, _, _| g.transpose(t).unwrap())),
                ("softmax", Box::new(|g, t, _, _| g.softmax_rows(t).unwrap())),
                ("gelu", Box::new(|g, t, _, _| g.activation(t, Activation::Gelu))),
                ("relu", Box::new(|g, t, _, _| g.activation(t, Activation::Relu))),
                ("layer_norm", Box::new(|g, t, _, _| g.layer_norm(t, None, None, 1e-5).unwrap())),
                ("mean_rows", Box::new(|g, t, _, _| g.mean_rows(t).unwrap())),
                ("row", Box::new(|g, t, _, _| g.row(t, 1).unwrap())),
                ("scale", Box::new(|g, t, _, _| g.scale(t, 0.37))),
                ("scale_by", Box::new(|g, t, _, s| g.scale_by(s, t).unwrap())),
                ("reshape", Box::new(|g, t, _, _| g.reshape(t, vec![9]).unwrap())),
                ("gather", Box::new(|g, t, _, _| g.gather_rows(t, &[0, 2, 2]).unwrap())),
            ];

            for (name, build) in &cases {
                let eval = |w: &Tensor<f64>, record: bool| -> (f64, Option<Tensor<f64>>) {
                    let mut g = if record { Graph::new() } else { Graph::inference() };
                    let p = Param::trainable(w.clone());
                    let tn = g.param(&p);
                    let an = g.constant(aux.clone());
                    let sn = g.constant(lam.clone());
                    let out = build(&mut g, tn, an, sn);
                    // squash to scalar through a nonlinearity so grads vary
                    let sq = g.activation(out, Activation::Gelu);
                    let loss = g.sum_all(sq);
                    if record {
                        g.backward(loss).unwrap();
                        (g.value(loss).data()[0], g.grad_for(&p))
                    } else {
                        (g.value(loss).data()[0], None)
                    }
                };
                let (_, grad) = eval(&theta, true);
                let grad = grad.unwrap();
                let fd = finite_diff_grad(|w| eval(w, false).0, &theta, 1e-6).unwrap();
                let err = max_rel_err(&grad, &fd, 1e-2);
                assert!(err < 1e-5, "op {name} seed {seed}: max rel err {err}");
            }
        }
    }

    #[test]
    fn scalar_gate_gradient_flows_to_lambda() {
        // loss = sum(lambda * x): dlambda = sum(x) even when lambda = 0
        let lam = Param::<f64>::trainable(Tensor::scalar(0.0));
        let mut g = Graph::new();
        let ln = g.param(&lam);
        let x = g.constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let y = g.scale_by(ln, x).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad_for(&lam).unwrap().data()[0], 10.0);
    }

    #[test]
    fn aliased_param_accumulates_gradient_from_both_uses() {
        let p = Param::<f64>::trainable(Tensor::full(vec![1], 2.0));
        let alias = p.clone();
        let mut g = Graph::new();
        let a = g.param(&p);
        let b = g.param(&alias);
        // same node: registering an alias twice must not duplicate the leaf
        assert_eq!(a, b);
        let y = g.add(a, b).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad_for(&p).unwrap().data()[0], 2.0);
    }

    #[test]
    fn cross_entropy_matches_manual_log_softmax() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::from_vec1(vec![0.2, -0.7, 1.1]));
        let l = g.cross_entropy_logits(z, 2).unwrap();
        let zs = [0.2f64, -0.7, 1.1];
        let lse = zs.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((g.value(l).data()[0] - (lse - 1.1)).abs() < 1e-14);
    }

    #[test]
    fn first_non_finite_names_the_node() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec1(vec![1.0, f64::NAN]));
        let _ = g.scale(x, 2.0);
        let diag = g.first_non_finite().unwrap();
        assert!(diag.contains("node #0"), "{diag}");
    }

    #[test]
    fn forward_values_stay_finite_on_finite_inputs() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::uniform(vec![4, 4], 50.0, &mut rng));
        let s = g.softmax_rows(x).unwrap();
        let n = g.layer_norm(s, None, None, 1e-5).unwrap();
        let a = g.activation(n, Activation::Gelu);
        let m = g.matmul(a, s).unwrap();
        assert!(g.value(m).all_finite());
        assert!(g.first_non_finite().is_none());
    }
}
