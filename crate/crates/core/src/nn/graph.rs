//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] borrows the [`ParamStore`] for one forward/backward pass.
//! Parameter gradients are accumulated into the store; frozen parameters
//! receive none, and batch norms whose scale is frozen run on their running
//! statistics so frozen blocks are left bit-identical by training.

use super::gemm::gemm;
use super::params::{BufferId, ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Conv2d {
        x: NodeId,
        w: ParamId,
        b: Option<ParamId>,
        spec: Conv2dSpec,
    },
    Linear {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    Relu(NodeId),
    MaxPool {
        x: NodeId,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: NodeId,
        k: usize,
    },
    AdaptiveAvgPool {
        x: NodeId,
    },
    Add(NodeId, NodeId),
    Concat(Vec<NodeId>),
    BatchNorm {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Flatten(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

enum StoreRef<'s> {
    Shared(&'s ParamStore),
    Exclusive(&'s mut ParamStore),
}

/// Gradients of [`Graph::leaf`] inputs from one backward pass.
#[derive(Debug, Default)]
pub struct LeafGrads(Vec<(NodeId, Tensor)>);

impl LeafGrads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.0.iter().find(|(n, _)| *n == id).map(|(_, t)| t)
    }
}

pub struct Graph<'s> {
    store: StoreRef<'s>,
    training: bool,
    nodes: Vec<Node>,
}

fn out_dim(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= k, "kernel {k} larger than padded input {size}+2*{pad}");
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds one (C, H, W) image into a (C·kh·kw, Ho·Wo) matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f32], c: usize, h: usize, w: usize, kh: usize, kw: usize, spec: Conv2dSpec, cols: &mut [f32]) {
    let ho = out_dim(h, kh, spec.stride, spec.pad);
    let wo = out_dim(w, kw, spec.stride, spec.pad);
    let plane = ho * wo;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kj) as isize - spec.pad as isize;
                        *v = if ix < 0 || ix >= w as isize { 0.0 } else { srow[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f32], c: usize, h: usize, w: usize, kh: usize, kw: usize, spec: Conv2dSpec, dx: &mut [f32]) {
    let ho = out_dim(h, kh, spec.stride, spec.pad);
    let wo = out_dim(w, kw, spec.stride, spec.pad);
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * spec.stride + kj) as isize - spec.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(kh: usize, kw: usize, spec: Conv2dSpec) -> bool {
    kh == 1 && kw == 1 && spec.stride == 1 && spec.pad == 0
}

/// Bounds of adaptive pooling cell `i` of `out` cells over `size` inputs.
fn adaptive_range(i: usize, out: usize, size: usize) -> (usize, usize) {
    let start = i * size / out;
    let end = ((i + 1) * size).div_ceil(out);
    (start, end)
}

impl<'s> Graph<'s> {
    /// A graph that may update parameters' gradients and batch-norm statistics.
    pub fn new(store: &'s mut ParamStore, training: bool) -> Self {
        Graph {
            store: StoreRef::Exclusive(store),
            training,
            nodes: Vec::new(),
        }
    }

    /// Forward-only evaluation graph over a shared store.
    pub fn inference(store: &'s ParamStore) -> Self {
        Graph {
            store: StoreRef::Shared(store),
            training: false,
            nodes: Vec::new(),
        }
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        match &mut self.store {
            StoreRef::Exclusive(s) => s,
            StoreRef::Shared(_) => panic!("inference graphs cannot mutate parameters"),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &ParamStore {
        match &self.store {
            StoreRef::Shared(s) => s,
            StoreRef::Exclusive(s) => s,
        }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn trainable(&self, p: ParamId) -> bool {
        self.store().param(p).trainable
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Input whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input, true)
    }

    pub fn conv2d(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>, spec: Conv2dSpec) -> NodeId {
        let (n, c, h, wd) = self.value(x).dims4();
        let wshape = self.store().param(w).value.shape().to_vec();
        let (o, ci, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        assert_eq!(c, ci, "conv input channels {c} != weight channels {ci}");
        let ho = out_dim(h, kh, spec.stride, spec.pad);
        let wo = out_dim(wd, kw, spec.stride, spec.pad);
        let plane = ho * wo;
        let ckk = c * kh * kw;
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        let pointwise = is_pointwise(kh, kw, spec);
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; ckk * plane] };
        {
            let xv = self.nodes[x.0].value.data();
            let wv = self.store().param(w).value.data();
            let od = out.data_mut();
            for s in 0..n {
                let xs = &xv[s * c * h * wd..(s + 1) * c * h * wd];
                let os = &mut od[s * o * plane..(s + 1) * o * plane];
                if pointwise {
                    gemm(o, ckk, plane, wv, false, xs, false, os, 0.0);
                } else {
                    im2col(xs, c, h, wd, kh, kw, spec, &mut cols);
                    gemm(o, ckk, plane, wv, false, &cols, false, os, 0.0);
                }
            }
            if let Some(b) = b {
                let bv = self.store().param(b).value.data();
                for s in 0..n {
                    for oc in 0..o {
                        let bias = bv[oc];
                        od[(s * o + oc) * plane..(s * o + oc + 1) * plane]
                            .iter_mut()
                            .for_each(|v| *v += bias);
                    }
                }
            }
        }
        let rg = self.needs(x) || self.trainable(w) || b.is_some_and(|b| self.trainable(b));
        self.push(out, Op::Conv2d { x, w, b, spec }, rg)
    }

    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let (n, f) = self.value(x).dims2();
        let wshape = self.store().param(w).value.shape().to_vec();
        let o = wshape[0];
        assert_eq!(wshape[1], f, "linear expects {} features, got {f}", wshape[1]);
        let mut out = Tensor::zeros(&[n, o]);
        gemm(
            n,
            f,
            o,
            self.nodes[x.0].value.data(),
            false,
            self.store().param(w).value.data(),
            true,
            out.data_mut(),
            0.0,
        );
        let bv = self.store().param(b).value.data();
        for row in out.data_mut().chunks_mut(o) {
            for (v, bias) in row.iter_mut().zip(bv) {
                *v += bias;
            }
        }
        let rg = self.needs(x) || self.trainable(w) || self.trainable(b);
        self.push(out, Op::Linear { x, w, b }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.needs(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Max pooling with implicit -∞ padding.
    pub fn max_pool(&mut self, x: NodeId, k: usize, stride: usize, pad: usize) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        let ho = out_dim(h, k, stride, pad);
        let wo = out_dim(w, k, stride, pad);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0u32; n * c * ho * wo];
        let xv = self.value(x).data();
        let od = out.data_mut();
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ki in 0..k {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if src[idx] > best || best == f32::NEG_INFINITY {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = plane * ho * wo + oy * wo + ox;
                    od[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
        let rg = self.needs(x);
        self.push(out, Op::MaxPool { x, argmax }, rg)
    }

    /// Non-overlapping k×k average pooling (floor semantics).
    pub fn avg_pool(&mut self, x: NodeId, k: usize) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h / k, w / k);
        assert!(ho > 0 && wo > 0, "avg_pool window {k} exceeds {h}x{w}");
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let xv = self.value(x).data();
        let od = out.data_mut();
        let inv = 1.0 / (k * k) as f32;
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ki in 0..k {
                        for kj in 0..k {
                            acc += src[(oy * k + ki) * w + ox * k + kj];
                        }
                    }
                    od[plane * ho * wo + oy * wo + ox] = acc * inv;
                }
            }
        }
        let rg = self.needs(x);
        self.push(out, Op::AvgPool { x, k }, rg)
    }

    /// Average pooling to a fixed (oh, ow) grid; (1, 1) is global pooling.
    pub fn adaptive_avg_pool(&mut self, x: NodeId, oh: usize, ow: usize) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let xv = self.value(x).data();
        let od = out.data_mut();
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                let (y0, y1) = adaptive_range(oy, oh, h);
                for ox in 0..ow {
                    let (x0, x1) = adaptive_range(ox, ow, w);
                    let mut acc = 0.0f32;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            acc += src[iy * w + ix];
                        }
                    }
                    od[plane * oh * ow + oy * ow + ox] = acc / ((y1 - y0) * (x1 - x0)) as f32;
                }
            }
        }
        let rg = self.needs(x);
        self.push(out, Op::AdaptiveAvgPool { x }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape mismatch");
        out.add_assign(self.value(b));
        let rg = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Concatenation along the channel axis of NCHW tensors.
    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        let (n, _, h, w) = self.value(xs[0]).dims4();
        let total: usize = xs.iter().map(|&x| self.value(x).dims4().1).sum();
        let mut out = Tensor::zeros(&[n, total, h, w]);
        let plane = h * w;
        {
            let od = out.data_mut();
            for s in 0..n {
                let mut offset = 0;
                for &x in xs {
                    let (xn, c, xh, xw) = self.value(x).dims4();
                    assert_eq!((xn, xh, xw), (n, h, w), "concat shape mismatch");
                    let src = &self.value(x).data()[s * c * plane..(s + 1) * c * plane];
                    let start = (s * total + offset) * plane;
                    od[start..start + c * plane].copy_from_slice(src);
                    offset += c;
                }
            }
        }
        let rg = xs.iter().any(|&x| self.needs(x));
        self.push(out, Op::Concat(xs.to_vec()), rg)
    }

    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        let n = v.shape()[0];
        let f = v.len() / n.max(1);
        let out = v.reshape(&[n, f]).expect("flatten preserves size");
        let rg = self.needs(x);
        self.push(out, Op::Flatten(x), rg)
    }

    /// Per-channel batch normalization. Batch statistics are used (and the
    /// running statistics updated) only while training with a trainable scale.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        running_mean: BufferId,
        running_var: BufferId,
        momentum: f32,
        eps: f32,
    ) -> NodeId {
        let (n, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let count = (n * plane) as f32;
        let batch_stats = self.training && self.trainable(gamma) && matches!(self.store, StoreRef::Exclusive(_));
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        {
            let xv = self.value(x).data();
            if batch_stats {
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for s in 0..n {
                        let start = (s * c + ch) * plane;
                        acc += xv[start..start + plane].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let m = acc / count as f64;
                    let mut sq = 0.0f64;
                    for s in 0..n {
                        let start = (s * c + ch) * plane;
                        sq += xv[start..start + plane]
                            .iter()
                            .map(|&v| (v as f64 - m) * (v as f64 - m))
                            .sum::<f64>();
                    }
                    mean[ch] = m as f32;
                    var[ch] = (sq / count as f64) as f32;
                }
            } else {
                mean.copy_from_slice(self.store().buffer(running_mean).data());
                var.copy_from_slice(self.store().buffer(running_var).data());
            }
        }
        if batch_stats {
            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
            let rm = self.store_mut().buffer_mut(running_mean).data_mut();
            for ch in 0..c {
                rm[ch] = (1.0 - momentum) * rm[ch] + momentum * mean[ch];
            }
            let rv = self.store_mut().buffer_mut(running_var).data_mut();
            for ch in 0..c {
                rv[ch] = (1.0 - momentum) * rv[ch] + momentum * var[ch] * unbias;
            }
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0f32; n * c * plane];
        let mut out = Tensor::zeros(&[n, c, h, w]);
        {
            let xv = self.value(x).data();
            let g = self.store().param(gamma).value.data();
            let b = self.store().param(beta).value.data();
            let od = out.data_mut();
            for s in 0..n {
                for ch in 0..c {
                    let start = (s * c + ch) * plane;
                    for i in start..start + plane {
                        let xh = (xv[i] - mean[ch]) * inv_std[ch];
                        xhat[i] = xh;
                        od[i] = g[ch] * xh + b[ch];
                    }
                }
            }
        }
        let rg = self.needs(x) || self.trainable(gamma) || self.trainable(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        )
    }

    /// Back-propagates `seed` (d loss / d output) from `output`, accumulating
    /// gradients into trainable parameters. Returns the gradients reaching
    /// [`Graph::leaf`] inputs.
    pub fn backward(&mut self, output: NodeId, seed: Tensor) -> LeafGrads {
        assert_eq!(seed.shape(), self.value(output).shape(), "gradient seed shape mismatch");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves = LeafGrads(Vec::new());
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Input) {
                leaves.0.push((NodeId(idx), dy));
                continue;
            }
            self.backward_node(idx, &dy, &mut grads);
        }
        leaves
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&mut self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let store = match &mut self.store {
            StoreRef::Exclusive(s) => &mut **s,
            StoreRef::Shared(_) => panic!("inference graphs cannot back-propagate"),
        };
        let nodes = &self.nodes;
        match &nodes[idx].op {
            Op::Input => {}
            Op::Conv2d { x, w, b, spec } => {
                let xval = &nodes[x.0].value;
                let (n, c, h, wd) = xval.dims4();
                let wshape = store.param(*w).value.shape().to_vec();
                let (o, kh, kw) = (wshape[0], wshape[2], wshape[3]);
                let (_, _, ho, wo) = dy.dims4();
                let plane = ho * wo;
                let ckk = c * kh * kw;
                let pointwise = is_pointwise(kh, kw, *spec);
                let need_w = store.param(*w).trainable;
                let need_x = nodes[x.0].requires_grad;
                if let Some(b) = b {
                    if store.param(*b).trainable {
                        let gb = store.param_mut(*b).grad.data_mut();
                        for s in 0..n {
                            for oc in 0..o {
                                let start = (s * o + oc) * plane;
                                gb[oc] += dy.data()[start..start + plane].iter().sum::<f32>();
                            }
                        }
                    }
                }
                let mut cols = if pointwise { Vec::new() } else { vec![0.0; ckk * plane] };
                let mut dcols = if need_x && !pointwise { vec![0.0; ckk * plane] } else { Vec::new() };
                let mut dx = if need_x { Some(Tensor::zeros(&[n, c, h, wd])) } else { None };
                let mut gw = if need_w { vec![0.0f32; o * ckk] } else { Vec::new() };
                for s in 0..n {
                    let xs = &xval.data()[s * c * h * wd..(s + 1) * c * h * wd];
                    let ds = &dy.data()[s * o * plane..(s + 1) * o * plane];
                    if need_w {
                        let colsref: &[f32] = if pointwise {
                            xs
                        } else {
                            im2col(xs, c, h, wd, kh, kw, *spec, &mut cols);
                            &cols
                        };
                        gemm(o, plane, ckk, ds, false, colsref, true, &mut gw, 1.0);
                    }
                    if let Some(dx) = dx.as_mut() {
                        let wv = store.param(*w).value.data();
                        let dxs = &mut dx.data_mut()[s * c * h * wd..(s + 1) * c * h * wd];
                        if pointwise {
                            gemm(ckk, o, plane, wv, true, ds, false, dxs, 0.0);
                        } else {
                            gemm(ckk, o, plane, wv, true, ds, false, &mut dcols, 0.0);
                            col2im(&dcols, c, h, wd, kh, kw, *spec, dxs);
                        }
                    }
                }
                if need_w {
                    for (g, v) in store.param_mut(*w).grad.data_mut().iter_mut().zip(&gw) {
                        *g += v;
                    }
                }
                if let Some(dx) = dx {
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Linear { x, w, b } => {
                let xval = &nodes[x.0].value;
                let (n, f) = xval.dims2();
                let o = dy.dims2().1;
                if store.param(*b).trainable {
                    let gb = store.param_mut(*b).grad.data_mut();
                    for row in dy.data().chunks(o) {
                        for (g, v) in gb.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                }
                if store.param(*w).trainable {
                    let gw = store.param_mut(*w).grad.data_mut();
                    gemm(o, n, f, dy.data(), true, xval.data(), false, gw, 1.0);
                }
                if nodes[x.0].requires_grad {
                    let mut dx = Tensor::zeros(&[n, f]);
                    gemm(n, o, f, dy.data(), false, store.param(*w).value.data(), false, dx.data_mut(), 0.0);
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Relu(x) => {
                let mut dx = dy.clone();
                for (g, &y) in dx.data_mut().iter_mut().zip(nodes[idx].value.data()) {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let (n, c, h, w) = nodes[x.0].value.dims4();
                let (_, _, ho, wo) = dy.dims4();
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let dxd = dx.data_mut();
                for plane in 0..n * c {
                    for o in 0..ho * wo {
                        let oi = plane * ho * wo + o;
                        dxd[plane * h * w + argmax[oi] as usize] += dy.data()[oi];
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::AvgPool { x, k } => {
                let (n, c, h, w) = nodes[x.0].value.dims4();
                let (_, _, ho, wo) = dy.dims4();
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let dxd = dx.data_mut();
                let inv = 1.0 / (k * k) as f32;
                for plane in 0..n * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let g = dy.data()[plane * ho * wo + oy * wo + ox] * inv;
                            for ki in 0..*k {
                                for kj in 0..*k {
                                    dxd[plane * h * w + (oy * k + ki) * w + ox * k + kj] += g;
                                }
                            }
                        }
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::AdaptiveAvgPool { x } => {
                let (n, c, h, w) = nodes[x.0].value.dims4();
                let (_, _, oh, ow) = dy.dims4();
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let dxd = dx.data_mut();
                for plane in 0..n * c {
                    for oy in 0..oh {
                        let (y0, y1) = adaptive_range(oy, oh, h);
                        for ox in 0..ow {
                            let (x0, x1) = adaptive_range(ox, ow, w);
                            let g = dy.data()[plane * oh * ow + oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    dxd[plane * h * w + iy * w + ix] += g;
                                }
                            }
                        }
                    }
                }
                Self::accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                if nodes[a.0].requires_grad {
                    Self::accumulate(grads, *a, dy.clone());
                }
                if nodes[b.0].requires_grad {
                    Self::accumulate(grads, *b, dy.clone());
                }
            }
            Op::Concat(xs) => {
                let (n, total, h, w) = dy.dims4();
                let plane = h * w;
                let mut offset = 0;
                for x in xs {
                    let c = nodes[x.0].value.dims4().1;
                    if nodes[x.0].requires_grad {
                        let mut dx = Tensor::zeros(&[n, c, h, w]);
                        for s in 0..n {
                            let start = (s * total + offset) * plane;
                            dx.data_mut()[s * c * plane..(s + 1) * c * plane]
                                .copy_from_slice(&dy.data()[start..start + c * plane]);
                        }
                        Self::accumulate(grads, *x, dx);
                    }
                    offset += c;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = dy.dims4();
                let plane = h * w;
                let count = (n * plane) as f32;
                let mut sum_dy = vec![0.0f32; c];
                let mut sum_dy_xhat = vec![0.0f32; c];
                for s in 0..n {
                    for ch in 0..c {
                        let start = (s * c + ch) * plane;
                        for i in start..start + plane {
                            sum_dy[ch] += dy.data()[i];
                            sum_dy_xhat[ch] += dy.data()[i] * xhat[i];
                        }
                    }
                }
                if store.param(*gamma).trainable {
                    let gg = store.param_mut(*gamma).grad.data_mut();
                    for ch in 0..c {
                        gg[ch] += sum_dy_xhat[ch];
                    }
                }
                if store.param(*beta).trainable {
                    let gb = store.param_mut(*beta).grad.data_mut();
                    for ch in 0..c {
                        gb[ch] += sum_dy[ch];
                    }
                }
                if nodes[x.0].requires_grad {
                    let g = store.param(*gamma).value.data();
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    let dxd = dx.data_mut();
                    for s in 0..n {
                        for ch in 0..c {
                            let start = (s * c + ch) * plane;
                            let k = g[ch] * inv_std[ch];
                            for i in start..start + plane {
                                dxd[i] = if *batch_stats {
                                    k * (dy.data()[i] - sum_dy[ch] / count - xhat[i] * sum_dy_xhat[ch] / count)
                                } else {
                                    k * dy.data()[i]
                                };
                            }
                        }
                    }
                    Self::accumulate(grads, *x, dx);
                }
            }
            Op::Flatten(x) => {
                let shape = nodes[x.0].value.shape().to_vec();
                let dx = dy.clone().reshape(&shape).expect("flatten inverse");
                Self::accumulate(grads, *x, dx);
            }
        }
    }
}

/// Mean squared error over all entries and its gradient w.r.t. `pred`.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> (f64, Tensor) {
    assert_eq!(pred.shape(), target.shape(), "mse shape mismatch");
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0f64;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        loss += (d as f64) * (d as f64);
        *g = (2.0 * d as f64 / n) as f32;
    }
    (loss / n, grad)
}
