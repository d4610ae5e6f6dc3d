//! Operation tape and backward rules.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grad::{Tensor, CLAMP_DELTA};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    MatMul(NodeId, NodeId),
    /// `[r x c] + [c]`, bias repeated across rows.
    AddRowBroadcast(NodeId, NodeId),
    /// `[b x ch x h x w] + [ch]`, bias repeated across batch and positions.
    AddChanBroadcast(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    /// `ln(max(x, CLAMP_DELTA))`; gradient is zero inside the clamp.
    Log(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    /// Row-wise max reduce `[r x c] -> [r]`; gradient flows to the argmax.
    MaxRows(NodeId, Vec<usize>),
    /// Numerically stable row softmax with fused backward.
    SoftmaxRows(NodeId),
    Reshape(NodeId),
    /// Multiply by a fixed mask (inverted-dropout scaling baked in).
    Dropout(NodeId, Vec<f64>),
    Conv2d {
        input: NodeId,
        weight: NodeId,
        stride: usize,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<usize>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward pass. Rebuilt per pass (define-by-run); one backward
/// sweep consumes it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    swept: bool,
}

const PAR_ROWS: usize = 32;

fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let body = |i: usize, row: &mut [f64]| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br.iter()) {
                *o += av * bv;
            }
        }
    };
    if m >= PAR_ROWS {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    out
}

/// `a [m x k]` times `b^T` where `b` is stored `[n x k]`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let body = |i: usize, row: &mut [f64]| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            *o = ar.iter().zip(br.iter()).map(|(x, y)| x * y).sum();
        }
    };
    if m >= PAR_ROWS {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    out
}

/// `a^T` times `b` where `a` is stored `[k x m]` and `b` is `[k x n]`.
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let body = |i: usize, row: &mut [f64]| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br.iter()) {
                *o += av * bv;
            }
        }
    };
    if m >= PAR_ROWS {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    out
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

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient of the last backward target w.r.t. this node, if recorded.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        if !self.swept || !self.nodes[id.0].needs_grad {
            return None;
        }
        Some(&self.grads[id.0])
    }

    /// Copy a node's value out as a detached tensor.
    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].value.clone())
            .expect("tape node holds a valid tensor")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Record a tensor as a tape input; gradient participation follows
    /// `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    /// Record a tensor that never receives gradient (labels, masks, frozen
    /// statistics).
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.push(vec![], vec![v], Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dimension {
                op,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let ng = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), v, Op::Scale(a, c), ng)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x + c).collect();
        let ng = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), v, Op::AddScalar(a), ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (r, k, c) = (sa[0], sa[1], sb[1]);
        let v = mm_nn(&self.nodes[a.0].value, &self.nodes[b.0].value, r, k, c);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![r, c], v, Op::MatMul(a, b), ng))
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[bias.0].shape);
        if sa.len() != 2 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "add_row_broadcast",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let mut v = self.nodes[a.0].value.clone();
        for row in v.chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(&self.nodes[bias.0].value) {
                *o += bv;
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(vec![r, c], v, Op::AddRowBroadcast(a, bias), ng))
    }

    pub fn add_chan_broadcast(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[bias.0].shape);
        if sa.len() != 4 || sb.len() != 1 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "add_chan_broadcast",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (b, ch, h, w) = (sa[0], sa[1], sa[2], sa[3]);
        let plane = h * w;
        let mut v = self.nodes[a.0].value.clone();
        for bi in 0..b {
            for ci in 0..ch {
                let base = (bi * ch + ci) * plane;
                let bv = self.nodes[bias.0].value[ci];
                for o in &mut v[base..base + plane] {
                    *o += bv;
                }
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(sa.clone(), v, Op::AddChanBroadcast(a, bias), ng))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.max(0.0)).collect();
        let ng = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), v, Op::Relu(a), ng)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.exp()).collect();
        let ng = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), v, Op::Exp(a), ng)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .map(|x| x.max(CLAMP_DELTA).ln())
            .collect();
        let ng = self.needs(a);
        self.push(self.nodes[a.0].shape.clone(), v, Op::Log(a), ng)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].value.iter().any(|&x| x < 0.0) {
            return Err(Error::Contract("sqrt of negative value".into()));
        }
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x.sqrt()).collect();
        let ng = self.needs(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Sqrt(a), ng))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.iter().sum();
        let ng = self.needs(a);
        self.push(vec![], vec![v], Op::Sum(a), ng)
    }

    pub fn max_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 2 || sa[1] == 0 {
            return Err(Error::Dimension {
                op: "max_rows",
                lhs: sa.clone(),
                rhs: vec![],
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let mut v = Vec::with_capacity(r);
        let mut argmax = Vec::with_capacity(r);
        for row in self.nodes[a.0].value.chunks(c) {
            let (mut bi, mut bv) = (0usize, row[0]);
            for (j, &x) in row.iter().enumerate().skip(1) {
                if x > bv {
                    bi = j;
                    bv = x;
                }
            }
            v.push(bv);
            argmax.push(bi);
        }
        let ng = self.needs(a);
        Ok(self.push(vec![r], v, Op::MaxRows(a, argmax), ng))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let sa = &self.nodes[a.0].shape;
        if sa.len() != 2 || sa[1] == 0 {
            return Err(Error::Dimension {
                op: "softmax_rows",
                lhs: sa.clone(),
                rhs: vec![],
            });
        }
        let c = sa[1];
        let mut v = self.nodes[a.0].value.clone();
        for row in v.chunks_mut(c) {
            softmax_row_in_place(row);
        }
        let ng = self.needs(a);
        Ok(self.push(sa.clone(), v, Op::SoftmaxRows(a), ng))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.len() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape,
            });
        }
        let v = self.nodes[a.0].value.clone();
        let ng = self.needs(a);
        Ok(self.push(shape, v, Op::Reshape(a), ng))
    }

    /// Elementwise multiply by a caller-supplied mask of the same length.
    /// The mask is baked into the op, so backward reuses it exactly.
    pub fn dropout_mask(&mut self, a: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        if mask.len() != self.nodes[a.0].value.len() {
            return Err(Error::Contract(format!(
                "dropout mask length {} does not match tensor length {}",
                mask.len(),
                self.nodes[a.0].value.len()
            )));
        }
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let ng = self.needs(a);
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Dropout(a, mask), ng))
    }

    /// Valid-padding 2-D convolution. Input `[b x cin x h x w]`, weight
    /// `[cout x cin x kh x kw]`.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, stride: usize) -> Result<NodeId> {
        let (si, sw) = (&self.nodes[input.0].shape, &self.nodes[weight.0].shape);
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] || stride == 0 {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: si.clone(),
                rhs: sw.clone(),
            });
        }
        let (b, cin, h, w) = (si[0], si[1], si[2], si[3]);
        let (cout, _, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if kh > h || kw > w {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: si.clone(),
                rhs: sw.clone(),
            });
        }
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let x = &self.nodes[input.0].value;
        let k = &self.nodes[weight.0].value;
        let mut v = vec![0.0; b * cout * oh * ow];
        for bi in 0..b {
            for oc in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ic in 0..cin {
                            for ky in 0..kh {
                                let iy = oy * stride + ky;
                                let xbase = ((bi * cin + ic) * h + iy) * w + ox * stride;
                                let kbase = ((oc * cin + ic) * kh + ky) * kw;
                                for kx in 0..kw {
                                    s += x[xbase + kx] * k[kbase + kx];
                                }
                            }
                        }
                        v[((bi * cout + oc) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        let ng = self.needs(input) || self.needs(weight);
        Ok(self.push(vec![b, cout, oh, ow], v, Op::Conv2d { input, weight, stride }, ng))
    }

    /// Non-overlapping or strided max pooling over `[b x c x h x w]`.
    pub fn maxpool2d(&mut self, input: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        let si = &self.nodes[input.0].shape;
        if si.len() != 4 || kernel == 0 || stride == 0 || kernel > si[2] || kernel > si[3] {
            return Err(Error::Dimension {
                op: "maxpool2d",
                lhs: si.clone(),
                rhs: vec![kernel, stride],
            });
        }
        let (b, c, h, w) = (si[0], si[1], si[2], si[3]);
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let x = &self.nodes[input.0].value;
        let mut v = vec![0.0; b * c * oh * ow];
        let mut argmax = vec![0usize; b * c * oh * ow];
        for bi in 0..b {
            for ci in 0..c {
                let plane = (bi * c + ci) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best_idx = plane + (oy * stride) * w + ox * stride;
                        let mut best = x[best_idx];
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let idx = plane + (oy * stride + ky) * w + (ox * stride + kx);
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((bi * c + ci) * oh + oy) * ow + ox;
                        v[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let ng = self.needs(input);
        Ok(self.push(vec![b, c, oh, ow], v, Op::MaxPool2d { input, argmax }, ng))
    }

    /// Reverse sweep from a scalar loss. Fills every grad buffer reachable
    /// from the loss; the tape is consumed (a second sweep is an error).
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.swept {
            return Err(Error::Contract("tape already consumed by backward".into()));
        }
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| {
                if n.needs_grad {
                    vec![0.0; n.value.len()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0][0] = 1.0;
        }

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            self.accumulate(i, &g, &mut grads);
            grads[i] = g;
        }

        self.grads = grads;
        self.swept = true;
        Ok(())
    }

    fn accumulate(&self, i: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let nodes = &self.nodes;
        fn add_into(
            nodes: &[Node],
            grads: &mut [Vec<f64>],
            id: NodeId,
            contrib: impl Fn(usize) -> f64,
        ) {
            if !nodes[id.0].needs_grad {
                return;
            }
            for (j, slot) in grads[id.0].iter_mut().enumerate() {
                *slot += contrib(j);
            }
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(nodes, grads, *a, |j| g[j]);
                add_into(nodes, grads, *b, |j| g[j]);
            }
            Op::Sub(a, b) => {
                add_into(nodes, grads, *a, |j| g[j]);
                add_into(nodes, grads, *b, |j| -g[j]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                add_into(nodes, grads, *a, |j| g[j] * vb[j]);
                add_into(nodes, grads, *b, |j| g[j] * va[j]);
            }
            Op::Scale(a, c) => {
                let c = *c;
                add_into(nodes, grads, *a, |j| g[j] * c);
            }
            Op::AddScalar(a) => add_into(nodes, grads, *a, |j| g[j]),
            Op::MatMul(a, b) => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (r, k, c) = (sa[0], sa[1], sb[1]);
                if nodes[a.0].needs_grad {
                    // dA = G . B^T
                    let da = mm_nt(g, &nodes[b.0].value, r, c, k);
                    for (slot, v) in grads[a.0].iter_mut().zip(da) {
                        *slot += v;
                    }
                }
                if nodes[b.0].needs_grad {
                    // dB = A^T . G
                    let db = mm_tn(&nodes[a.0].value, g, k, r, c);
                    for (slot, v) in grads[b.0].iter_mut().zip(db) {
                        *slot += v;
                    }
                }
            }
            Op::AddRowBroadcast(a, bias) => {
                add_into(nodes, grads, *a, |j| g[j]);
                if nodes[bias.0].needs_grad {
                    let c = nodes[bias.0].value.len();
                    let buf = &mut grads[bias.0];
                    for row in g.chunks(c) {
                        for (slot, &gv) in buf.iter_mut().zip(row) {
                            *slot += gv;
                        }
                    }
                }
            }
            Op::AddChanBroadcast(a, bias) => {
                add_into(nodes, grads, *a, |j| g[j]);
                if nodes[bias.0].needs_grad {
                    let sa = &nodes[a.0].shape;
                    let (b, ch, plane) = (sa[0], sa[1], sa[2] * sa[3]);
                    let buf = &mut grads[bias.0];
                    for bi in 0..b {
                        for (ci, slot) in buf.iter_mut().enumerate() {
                            let base = (bi * ch + ci) * plane;
                            *slot += g[base..base + plane].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Relu(a) => {
                let va = &nodes[a.0].value;
                add_into(nodes, grads, *a, |j| if va[j] > 0.0 { g[j] } else { 0.0 });
            }
            Op::Exp(a) => {
                let out = &nodes[i].value;
                add_into(nodes, grads, *a, |j| g[j] * out[j]);
            }
            Op::Log(a) => {
                let va = &nodes[a.0].value;
                add_into(nodes, grads, *a, |j| {
                    if va[j] > CLAMP_DELTA {
                        g[j] / va[j]
                    } else {
                        0.0
                    }
                });
            }
            Op::Sqrt(a) => {
                let out = &nodes[i].value;
                add_into(nodes, grads, *a, |j| g[j] * 0.5 / out[j]);
            }
            Op::Sum(a) => {
                let gv = g[0];
                add_into(nodes, grads, *a, |_| gv);
            }
            Op::MaxRows(a, argmax) => {
                if nodes[a.0].needs_grad {
                    let c = nodes[a.0].shape[1];
                    let buf = &mut grads[a.0];
                    for (r, &col) in argmax.iter().enumerate() {
                        buf[r * c + col] += g[r];
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if nodes[a.0].needs_grad {
                    let c = nodes[i].shape[1];
                    let p = &nodes[i].value;
                    let buf = &mut grads[a.0];
                    for r in 0..nodes[i].shape[0] {
                        let (pr, gr) = (&p[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for j in 0..c {
                            buf[r * c + j] += pr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Reshape(a) => add_into(nodes, grads, *a, |j| g[j]),
            Op::Dropout(a, mask) => {
                add_into(nodes, grads, *a, |j| g[j] * mask[j]);
            }
            Op::Conv2d { input, weight, stride } => {
                let si = &nodes[input.0].shape;
                let sw = &nodes[weight.0].shape;
                let so = &nodes[i].shape;
                let (b, cin, h, w) = (si[0], si[1], si[2], si[3]);
                let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
                let (oh, ow) = (so[2], so[3]);
                let s = *stride;
                if nodes[input.0].needs_grad {
                    let kv = &nodes[weight.0].value;
                    let buf = &mut grads[input.0];
                    for bi in 0..b {
                        for oc in 0..cout {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g[((bi * cout + oc) * oh + oy) * ow + ox];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ic in 0..cin {
                                        for ky in 0..kh {
                                            let ibase =
                                                ((bi * cin + ic) * h + oy * s + ky) * w + ox * s;
                                            let kbase = ((oc * cin + ic) * kh + ky) * kw;
                                            for kx in 0..kw {
                                                buf[ibase + kx] += gv * kv[kbase + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if nodes[weight.0].needs_grad {
                    let xv = &nodes[input.0].value;
                    let buf = &mut grads[weight.0];
                    for bi in 0..b {
                        for oc in 0..cout {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = g[((bi * cout + oc) * oh + oy) * ow + ox];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ic in 0..cin {
                                        for ky in 0..kh {
                                            let ibase =
                                                ((bi * cin + ic) * h + oy * s + ky) * w + ox * s;
                                            let kbase = ((oc * cin + ic) * kh + ky) * kw;
                                            for kx in 0..kw {
                                                buf[kbase + kx] += gv * xv[ibase + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if nodes[input.0].needs_grad {
                    let buf = &mut grads[input.0];
                    for (o, &src) in argmax.iter().enumerate() {
                        buf[src] += g[o];
                    }
                }
            }
        }
    }
}

/// In-place numerically stable softmax of one row.
pub fn softmax_row_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}
