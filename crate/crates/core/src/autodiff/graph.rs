//! Operation record for one forward pass and its reverse sweep.
//!
//! Every operator appends a node holding its output; nodes only reference
//! earlier nodes, so insertion order is a topological order and the reverse
//! sweep simply walks the node list backwards.

use crate::error::{Error, Result};
use crate::geometry::Region;

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    Relu(NodeId),
    MaxPool2d {
        input: NodeId,
        argmax: Vec<usize>,
    },
    RoiMaxPool {
        features: NodeId,
        argmax: Vec<usize>,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Reshape(NodeId),
    GatherRows {
        input: NodeId,
        rows: Vec<usize>,
    },
    ReduceMaxRows {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Add(NodeId, NodeId),
    Sum(Vec<NodeId>),
    Scale(NodeId, f64),
    SoftmaxLogLoss {
        input: NodeId,
        label: usize,
        probs: Vec<f64>,
    },
    SigmoidCrossEntropy {
        input: NodeId,
        labels: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Operator kinds, used for counting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    Relu,
    MaxPool2d,
    RoiMaxPool,
    Linear,
    Reshape,
    GatherRows,
    ReduceMaxRows,
    Add,
    Sum,
    Scale,
    SoftmaxLogLoss,
    SigmoidCrossEntropy,
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Relu(_) => OpKind::Relu,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::RoiMaxPool { .. } => OpKind::RoiMaxPool,
            Op::Linear { .. } => OpKind::Linear,
            Op::Reshape(_) => OpKind::Reshape,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::ReduceMaxRows { .. } => OpKind::ReduceMaxRows,
            Op::Add(..) => OpKind::Add,
            Op::Sum(_) => OpKind::Sum,
            Op::Scale(..) => OpKind::Scale,
            Op::SoftmaxLogLoss { .. } => OpKind::SoftmaxLogLoss,
            Op::SigmoidCrossEntropy { .. } => OpKind::SigmoidCrossEntropy,
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Index range `[start, end)` of bin `i` out of `bins` over `len` cells,
/// rounded outward so no bin is empty.
fn bin_range(start: usize, len: usize, i: usize, bins: usize) -> (usize, usize) {
    let lo = (i * len) / bins;
    let hi = ((i + 1) * len).div_ceil(bins);
    (start + lo, start + hi.max(lo + 1))
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = self.node(id);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape agrees with its value")
    }

    /// Number of recorded operators of the given kind.
    pub fn count(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    /// Constant input; no gradient is computed for it.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.values().to_vec(), false, Op::Leaf)
    }

    /// Differentiable leaf.
    pub fn variable(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.values().to_vec(), true, Op::Leaf)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    /// Cross-correlation of `input [C_in, H, W]` with `weight [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, bias: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        let bshape = self.shape(bias).to_vec();
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            left: ishape.clone(),
            right: wshape.clone(),
        };
        if ishape.len() != 3 || wshape.len() != 4 || wshape[1] != ishape[0] || wshape[2] != wshape[3] {
            return Err(mismatch());
        }
        if bshape != [wshape[0]] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: bshape,
                right: vec![wshape[0]],
            });
        }
        let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
        let (cout, k) = (wshape[0], wshape[2]);
        let (ho, wo) = match (conv_out(h, k, stride, padding), conv_out(w, k, stride, padding)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(mismatch()),
        };
        let padded = pad(self.value(input), cin, h, w, padding);
        let (hp, wp) = (h + 2 * padding, w + 2 * padding);
        let wv = self.value(weight);
        let bv = self.value(bias);
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            let oplane = &mut out[co * ho * wo..(co + 1) * ho * wo];
            oplane.fill(bv[co]);
            for ci in 0..cin {
                let iplane = &padded[ci * hp * wp..(ci + 1) * hp * wp];
                for ky in 0..k {
                    for kx in 0..k {
                        let wt = wv[((co * cin + ci) * k + ky) * k + kx];
                        for oy in 0..ho {
                            let irow = &iplane[(oy * stride + ky) * wp + kx..];
                            let orow = &mut oplane[oy * wo..(oy + 1) * wo];
                            if stride == 1 {
                                for (o, &x) in orow.iter_mut().zip(&irow[..wo]) {
                                    *o += wt * x;
                                }
                            } else {
                                for (ox, o) in orow.iter_mut().enumerate() {
                                    *o += wt * irow[ox * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            vec![cout, ho, wo],
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let n = self.node(input);
        let out = n.value.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, out, rg, Op::Relu(input))
    }

    /// Windowed max over `input [C, H, W]`. Ties go to the first element in
    /// row-major order.
    pub fn max_pool2d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 3 {
            return Err(Error::invalid("max_pool2d", format!("expected [C,H,W], got {shape:?}")));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let (ho, wo) = match (conv_out(h, window, stride, 0), conv_out(w, window, stride, 0)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::invalid(
                    "max_pool2d",
                    format!("window {window} (stride {stride}) does not fit input {shape:?}"),
                ))
            }
        };
        let v = self.value(input);
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for ky in 0..window {
                        let row = (ch * h + oy * stride + ky) * w + ox * stride;
                        for (kx, &x) in v[row..row + window].iter().enumerate() {
                            if best == usize::MAX || x > best_v {
                                best = row + kx;
                                best_v = x;
                            }
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
        let rg = self.needs(&[input]);
        Ok(self.push(vec![c, ho, wo], out, rg, Op::MaxPool2d { input, argmax }))
    }

    /// Adaptive max pooling of each region of `features [C, H, W]` into a
    /// `bins x bins` grid. Output shape `[K, C, bins, bins]`.
    ///
    /// A region maps to feature cells `floor(x1 * scale) .. ceil(x2 * scale)`,
    /// clamped to the grid; bins partition that span evenly and are rounded
    /// outward so every bin covers at least one cell.
    pub fn roi_max_pool(&mut self, features: NodeId, rois: &[Region], spatial_scale: f64, bins: usize) -> Result<NodeId> {
        let shape = self.shape(features).to_vec();
        if shape.len() != 3 {
            return Err(Error::invalid("roi_max_pool", format!("expected [C,H,W], got {shape:?}")));
        }
        if bins == 0 || !(spatial_scale > 0.0) {
            return Err(Error::invalid("roi_max_pool", "bins and spatial_scale must be positive"));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let v = self.value(features);
        let per = c * bins * bins;
        let mut out = Vec::with_capacity(rois.len() * per);
        let mut argmax = Vec::with_capacity(rois.len() * per);
        for roi in rois {
            let clamp = |x: f64, lim: usize| (x.max(0.0) as usize).min(lim);
            let x0 = clamp((roi.x1() * spatial_scale).floor(), w);
            let y0 = clamp((roi.y1() * spatial_scale).floor(), h);
            let x1 = clamp((roi.x2() * spatial_scale).ceil(), w);
            let y1 = clamp((roi.y2() * spatial_scale).ceil(), h);
            if x1 <= x0 || y1 <= y0 || roi.x2() <= 0.0 || roi.y2() <= 0.0 {
                return Err(Error::invalid(
                    "roi_max_pool",
                    format!("region {roi} lies outside the {h}x{w} feature map at scale {spatial_scale}"),
                ));
            }
            let (rh, rw) = (y1 - y0, x1 - x0);
            for ch in 0..c {
                let plane = ch * h * w;
                for i in 0..bins {
                    let (ya, yb) = bin_range(y0, rh, i, bins);
                    for j in 0..bins {
                        let (xa, xb) = bin_range(x0, rw, j, bins);
                        let mut best = plane + ya * w + xa;
                        let mut best_v = v[best];
                        for y in ya..yb {
                            for x in xa..xb {
                                let idx = plane + y * w + x;
                                if v[idx] > best_v {
                                    best = idx;
                                    best_v = v[idx];
                                }
                            }
                        }
                        out.push(best_v);
                        argmax.push(best);
                    }
                }
            }
        }
        let rg = self.needs(&[features]);
        Ok(self.push(
            vec![rois.len(), c, bins, bins],
            out,
            rg,
            Op::RoiMaxPool { features, argmax },
        ))
    }

    /// Affine map `weight [out, d] . x + bias` applied to `x [d]` or to each
    /// row of `x [K, d]`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let ishape = self.shape(input).to_vec();
        let wshape = self.shape(weight).to_vec();
        let bshape = self.shape(bias).to_vec();
        let (rows, d) = match ishape.as_slice() {
            [d] => (1, *d),
            [k, d] => (*k, *d),
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "linear",
                    left: ishape,
                    right: wshape,
                })
            }
        };
        if wshape.len() != 2 || wshape[1] != d || bshape != [wshape[0]] {
            return Err(Error::ShapeMismatch {
                op: "linear",
                left: ishape,
                right: wshape,
            });
        }
        let o = wshape[0];
        let (x, wv, bv) = (self.value(input), self.value(weight), self.value(bias));
        let mut out = Vec::with_capacity(rows * o);
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            for oi in 0..o {
                let wr = &wv[oi * d..(oi + 1) * d];
                out.push(bv[oi] + dot(wr, xr));
            }
        }
        let shape = if ishape.len() == 1 { vec![o] } else { vec![rows, o] };
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(shape, out, rg, Op::Linear { input, weight, bias }))
    }

    pub fn reshape(&mut self, input: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let n = self.node(input);
        if shape.iter().product::<usize>() != n.value.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: n.shape.clone(),
                right: shape,
            });
        }
        let (v, rg) = (n.value.clone(), n.requires_grad);
        Ok(self.push(shape, v, rg, Op::Reshape(input)))
    }

    /// Rows of a `[K, A]` matrix, in the given order.
    pub fn gather_rows(&mut self, input: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (k, a) = self.matrix_dims(input, "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= k) {
            return Err(Error::invalid("gather_rows", format!("row {bad} out of range for {k} rows")));
        }
        let v = self.value(input);
        let out = rows.iter().flat_map(|&r| v[r * a..(r + 1) * a].iter().copied()).collect();
        let rg = self.needs(&[input]);
        Ok(self.push(vec![rows.len(), a], out, rg, Op::GatherRows { input, rows: rows.to_vec() }))
    }

    fn matrix_dims(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(id) {
            [k, a] => Ok((*k, *a)),
            other => Err(Error::invalid(op, format!("expected [K, A], got {other:?}"))),
        }
    }

    /// Column-wise max of `scores [K, A]`; ties go to the lowest row.
    pub fn reduce_max_rows(&mut self, scores: NodeId) -> Result<NodeId> {
        let (k, a) = self.matrix_dims(scores, "reduce_max_rows")?;
        if k == 0 {
            return Err(Error::invalid("reduce_max_rows", "no rows"));
        }
        let all: Vec<usize> = (0..k).collect();
        let sets = vec![all; a];
        self.reduce_max_rows_among(scores, &sets)
    }

    /// Column-wise max where column `j` only considers rows `allowed[j]`.
    /// A singleton set picks that row outright.
    pub fn reduce_max_rows_among(&mut self, scores: NodeId, allowed: &[Vec<usize>]) -> Result<NodeId> {
        let (k, a) = self.matrix_dims(scores, "reduce_max_rows")?;
        if allowed.len() != a {
            return Err(Error::invalid(
                "reduce_max_rows",
                format!("{} row sets for {a} columns", allowed.len()),
            ));
        }
        let v = self.value(scores);
        let mut out = Vec::with_capacity(a);
        let mut argmax = Vec::with_capacity(a);
        for (col, rows) in allowed.iter().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for &r in rows {
                if r >= k {
                    return Err(Error::invalid("reduce_max_rows", format!("row {r} out of range for {k} rows")));
                }
                let x = v[r * a + col];
                // lowest row index wins ties regardless of set order
                let better = match best {
                    None => true,
                    Some((br, bv)) => x > bv || (x == bv && r < br),
                };
                if better {
                    best = Some((r, x));
                }
            }
            let (r, x) = best.ok_or_else(|| Error::invalid("reduce_max_rows", format!("column {col} has no rows")))?;
            out.push(x);
            argmax.push(r);
        }
        let rg = self.needs(&[scores]);
        Ok(self.push(vec![a], out, rg, Op::ReduceMaxRows { input: scores, argmax }))
    }

    /// Row index selected per column by a `reduce_max_rows` node.
    pub fn argmax(&self, id: NodeId) -> Option<&[usize]> {
        match &self.node(id).op {
            Op::ReduceMaxRows { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Add(a, b)))
    }

    /// Sum of scalar nodes.
    pub fn sum(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let mut total = 0.0;
        for &i in items {
            if self.value(i).len() != 1 {
                return Err(Error::invalid("sum", format!("expected scalars, got {:?}", self.shape(i))));
            }
            total += self.value(i)[0];
        }
        let rg = self.needs(items);
        Ok(self.push(vec![], vec![total], rg, Op::Sum(items.to_vec())))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let n = self.node(input);
        let out = n.value.iter().map(|x| x * factor).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push(shape, out, rg, Op::Scale(input, factor))
    }

    /// `-log softmax(scores)[label]`, computed with max subtraction.
    pub fn softmax_logloss(&mut self, scores: NodeId, label: usize) -> Result<NodeId> {
        let v = self.value(scores);
        if self.shape(scores).len() != 1 {
            return Err(Error::invalid("softmax_logloss", format!("expected [A], got {:?}", self.shape(scores))));
        }
        if label >= v.len() {
            return Err(Error::invalid("softmax_logloss", format!("label {label} out of range for {} classes", v.len())));
        }
        let probs = softmax(v)?;
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        let loss = lse - v[label];
        let rg = self.needs(&[scores]);
        Ok(self.push(
            vec![],
            vec![loss],
            rg,
            Op::SoftmaxLogLoss {
                input: scores,
                label,
                probs,
            },
        ))
    }

    /// Softmax probabilities recorded by a `softmax_logloss` node.
    pub fn probabilities(&self, id: NodeId) -> Option<&[f64]> {
        match &self.node(id).op {
            Op::SoftmaxLogLoss { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean binary cross-entropy of independent logistic outputs.
    pub fn sigmoid_cross_entropy(&mut self, scores: NodeId, labels: &[bool]) -> Result<NodeId> {
        let v = self.value(scores);
        if self.shape(scores).len() != 1 || labels.len() != v.len() || v.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "sigmoid_cross_entropy",
                left: self.shape(scores).to_vec(),
                right: vec![labels.len()],
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("sigmoid_cross_entropy", "non-finite score"));
        }
        let y: Vec<f64> = labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let loss = v.iter().zip(&y).map(|(&x, &t)| binary_cross_entropy(x, t)).sum::<f64>() / v.len() as f64;
        let rg = self.needs(&[scores]);
        Ok(self.push(vec![], vec![loss], rg, Op::SigmoidCrossEntropy { input: scores, labels: y }))
    }

    /// Discrete choices made by the forward pass: every max-type argmax and
    /// every ReLU activation pattern. Two evaluations with equal signatures
    /// lie on the same smooth piece.
    pub fn decision_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::MaxPool2d { argmax, .. } | Op::RoiMaxPool { argmax, .. } | Op::ReduceMaxRows { argmax, .. } => {
                    sig.extend_from_slice(argmax)
                }
                Op::Relu(_) => sig.extend(n.value.iter().map(|&x| (x > 0.0) as usize)),
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from a scalar `loss`; d(loss)/d(loss) = 1. Gradients are
    /// recomputed from scratch on every call.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::NoForward);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.nodes[loss.0].shape),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward loss with respect to `id`; `None` when
    /// the loss does not depend on it.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zero-filled when the loss does not depend on `id`.
    pub fn grad_or_zero(&self, id: NodeId) -> Vec<f64> {
        self.grad(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.value(id).len()])
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let ishape = &self.nodes[input.0].shape;
                let wshape = &self.nodes[weight.0].shape;
                let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
                let (cout, k) = (wshape[0], wshape[2]);
                let (ho, wo) = (node.shape[1], node.shape[2]);
                let (s, p) = (*stride, *padding);
                let (hp, wp) = (h + 2 * p, w + 2 * p);
                if wants(*bias) {
                    let gb: Vec<f64> = (0..cout).map(|co| g[co * ho * wo..(co + 1) * ho * wo].iter().sum()).collect();
                    accumulate(grads, *bias, &gb);
                }
                let padded = pad(self.value(*input), cin, h, w, p);
                if wants(*weight) {
                    let mut gw = vec![0.0; cout * cin * k * k];
                    for co in 0..cout {
                        let gplane = &g[co * ho * wo..(co + 1) * ho * wo];
                        for ci in 0..cin {
                            let iplane = &padded[ci * hp * wp..(ci + 1) * hp * wp];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let mut acc = 0.0;
                                    for oy in 0..ho {
                                        let irow = &iplane[(oy * s + ky) * wp + kx..];
                                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                                        if s == 1 {
                                            acc += dot(grow, &irow[..wo]);
                                        } else {
                                            for (ox, &gv) in grow.iter().enumerate() {
                                                acc += gv * irow[ox * s];
                                            }
                                        }
                                    }
                                    gw[((co * cin + ci) * k + ky) * k + kx] = acc;
                                }
                            }
                        }
                    }
                    accumulate(grads, *weight, &gw);
                }
                if wants(*input) {
                    let wv = self.value(*weight);
                    let mut gp = vec![0.0; cin * hp * wp];
                    for co in 0..cout {
                        let gplane = &g[co * ho * wo..(co + 1) * ho * wo];
                        for ci in 0..cin {
                            let iplane = &mut gp[ci * hp * wp..(ci + 1) * hp * wp];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let wt = wv[((co * cin + ci) * k + ky) * k + kx];
                                    for oy in 0..ho {
                                        let base = (oy * s + ky) * wp + kx;
                                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                                        if s == 1 {
                                            for (d, &gv) in iplane[base..base + wo].iter_mut().zip(grow) {
                                                *d += wt * gv;
                                            }
                                        } else {
                                            for (ox, &gv) in grow.iter().enumerate() {
                                                iplane[base + ox * s] += wt * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let gi = unpad(&gp, cin, h, w, p);
                    accumulate(grads, *input, &gi);
                }
            }
            Op::Relu(input) => {
                let gi: Vec<f64> = node.value.iter().zip(g).map(|(&y, &gv)| if y > 0.0 { gv } else { 0.0 }).collect();
                accumulate(grads, *input, &gi);
            }
            Op::MaxPool2d { input, argmax } | Op::RoiMaxPool { features: input, argmax } => {
                if wants(*input) {
                    let slot = grad_slot(grads, *input, self.nodes[input.0].value.len());
                    for (&src, &gv) in argmax.iter().zip(g) {
                        slot[src] += gv;
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let ishape = &self.nodes[input.0].shape;
                let d = *ishape.last().unwrap();
                let rows = if ishape.len() == 1 { 1 } else { ishape[0] };
                let o = self.nodes[weight.0].shape[0];
                let x = self.value(*input);
                let wv = self.value(*weight);
                if wants(*bias) {
                    let mut gb = vec![0.0; o];
                    for r in 0..rows {
                        gb.iter_mut().zip(&g[r * o..(r + 1) * o]).for_each(|(a, b)| *a += b);
                    }
                    accumulate(grads, *bias, &gb);
                }
                if wants(*weight) {
                    let mut gw = vec![0.0; o * d];
                    for r in 0..rows {
                        let xr = &x[r * d..(r + 1) * d];
                        for oi in 0..o {
                            let gv = g[r * o + oi];
                            if gv != 0.0 {
                                axpy(gv, xr, &mut gw[oi * d..(oi + 1) * d]);
                            }
                        }
                    }
                    accumulate(grads, *weight, &gw);
                }
                if wants(*input) {
                    let mut gx = vec![0.0; rows * d];
                    for r in 0..rows {
                        let gxr = &mut gx[r * d..(r + 1) * d];
                        for oi in 0..o {
                            let gv = g[r * o + oi];
                            if gv != 0.0 {
                                axpy(gv, &wv[oi * d..(oi + 1) * d], gxr);
                            }
                        }
                    }
                    accumulate(grads, *input, &gx);
                }
            }
            Op::Reshape(input) => accumulate(grads, *input, g),
            Op::GatherRows { input, rows } => {
                if wants(*input) {
                    let a = node.shape[1];
                    let slot = grad_slot(grads, *input, self.nodes[input.0].value.len());
                    for (i, &r) in rows.iter().enumerate() {
                        slot[r * a..(r + 1) * a]
                            .iter_mut()
                            .zip(&g[i * a..(i + 1) * a])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::ReduceMaxRows { input, argmax } => {
                if wants(*input) {
                    let a = argmax.len();
                    let slot = grad_slot(grads, *input, self.nodes[input.0].value.len());
                    for (col, &r) in argmax.iter().enumerate() {
                        slot[r * a + col] += g[col];
                    }
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::Sum(items) => {
                for &i in items {
                    accumulate(grads, i, g);
                }
            }
            Op::Scale(input, f) => {
                let gi: Vec<f64> = g.iter().map(|x| x * f).collect();
                accumulate(grads, *input, &gi);
            }
            Op::SoftmaxLogLoss { input, label, probs } => {
                let mut gi: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                gi[*label] -= g[0];
                accumulate(grads, *input, &gi);
            }
            Op::SigmoidCrossEntropy { input, labels } => {
                let x = self.value(*input);
                let n = x.len() as f64;
                let gi: Vec<f64> = x.iter().zip(labels).map(|(&xi, &t)| (sigmoid(xi) - t) * g[0] / n).collect();
                accumulate(grads, *input, &gi);
            }
        }
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
    match &mut grads[id.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn pad(v: &[f64], c: usize, h: usize, w: usize, p: usize) -> std::borrow::Cow<'_, [f64]> {
    if p == 0 {
        return std::borrow::Cow::Borrowed(v);
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; c * hp * wp];
    for ch in 0..c {
        for y in 0..h {
            let src = &v[(ch * h + y) * w..(ch * h + y + 1) * w];
            let dst = (ch * hp + y + p) * wp + p;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    std::borrow::Cow::Owned(out)
}

fn unpad(v: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    if p == 0 {
        return v.to_vec();
    }
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for y in 0..h {
            let src = (ch * hp + y + p) * wp + p;
            out.extend_from_slice(&v[src..src + w]);
        }
    }
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // eight independent accumulators let the compiler vectorize the reduction
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-[t log s(x) + (1 - t) log(1 - s(x))]` without overflow.
pub fn binary_cross_entropy(x: f64, t: f64) -> f64 {
    x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
}

/// Softmax with max subtraction; errors on non-finite input.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::invalid("softmax", "empty score vector"));
    }
    if scores.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("softmax", "non-finite score"));
    }
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / z).collect())
}
