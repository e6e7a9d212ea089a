//! Reverse-mode automatic differentiation over a tape of coarse ops.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op computes its
//! value eagerly and records what backward needs. Parameters enter the
//! graph through [`Graph::param`], which memoizes per [`ParamId`], so a
//! parameter used by several branches accumulates all of their gradients.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Result};
use crate::grid::flip_buffer;
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// Sparse linear map over spatial positions: every output position is a
/// weighted sum of input positions. Used for trilinear warping and
/// upsampling.
#[derive(Clone, Debug, PartialEq)]
pub struct ResampleTable {
    pub in_dims: [usize; 3],
    pub out_dims: [usize; 3],
    /// CSR row offsets into `taps`, one row per output position.
    pub offsets: Vec<usize>,
    pub taps: Vec<(usize, f64)>,
}

impl ResampleTable {
    pub fn from_rows(in_dims: [usize; 3], out_dims: [usize; 3], rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut taps = Vec::new();
        offsets.push(0);
        for r in rows {
            taps.extend(r);
            offsets.push(taps.len());
        }
        Self { in_dims, out_dims, offsets, taps }
    }

    pub fn out_len(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn in_len(&self) -> usize {
        self.in_dims.iter().product()
    }
}

/// Target voxel for each `(depth bin, pixel)` pair of a lift, or `None`
/// when the 3D point falls outside the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatTable {
    pub bins: usize,
    pub pixels: usize,
    pub out_dims: [usize; 3],
    /// Indexed `d * pixels + p`.
    pub voxel: Vec<Option<u32>>,
}

pub const IGNORE_LABEL: u32 = u32::MAX;

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Concat(Vec<Var>),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(f64, f64)> },
    SoftmaxChannels(Var),
    Resample { x: Var, table: Arc<ResampleTable> },
    Splat { feat: Var, probs: Var, table: Arc<SplatTable> },
    RowLinear { x: Var, w: Var, b: Var },
    SegmentMax { x: Var, argmax: Vec<usize> },
    ScatterCells { x: Var, cells: Arc<Vec<usize>> },
    CrossEntropy { logits: Var, labels: Arc<Vec<u32>>, weights: Option<Arc<Vec<f64>>>, probs: Vec<f64>, norm: f64 },
    Sum(Var),
    Dot(Var, Tensor),
    Flip { x: Var, axis: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

/// Per-node gradients from one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.get(*v))
    }

    /// Gradient for every parameter that took part in the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().filter_map(|(p, v)| self.get(*v).map(|g| (*p, g)))
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn acc_data(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    acc(grads, v, Tensor::from_vec(shape, data).expect("gradient shape"));
}

/// Spatial dims of a `(C, ...)` tensor padded to three axes.
fn spatial3(shape: &[usize]) -> Option<[usize; 3]> {
    match shape.len() {
        3 => Some([shape[1], shape[2], 1]),
        4 => Some([shape[1], shape[2], shape[3]]),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted.
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if self.param_nodes.len() <= id.0 {
            self.param_nodes.resize(id.0 + 1, None);
        }
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Concatenates along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != first[1..] {
                return Err(shape_err("concat", format!("{:?} vs {:?}", s, first)));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = lead;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// 2D or 3D convolution with symmetric `kernel / 2` padding, so output
    /// extents are `ceil(in / stride)`.
    ///
    /// `x` is `(C, H, W)` or `(C, X, Y, Z)`; `w` is `(O, C, k...)`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let in_dims = spatial3(&xs).ok_or_else(|| shape_err("conv", format!("input {:?}", xs)))?;
        if ws.len() != xs.len() + 1 || ws[1] != xs[0] {
            return Err(shape_err("conv", format!("weight {:?} for input {:?}", ws, xs)));
        }
        let kernel = if xs.len() == 3 { [ws[2], ws[3], 1] } else { [ws[2], ws[3], ws[4]] };
        let mut st = [stride; 3];
        if xs.len() == 3 {
            st[2] = 1;
        }
        let geom = ConvGeom { in_dims, kernel, stride: st, pad: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2] };
        let out_ch = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [out_ch] {
                return Err(shape_err("conv", format!("bias {:?} for {} outputs", self.shape(b), out_ch)));
            }
        }
        let y = kernels::conv_forward(
            self.value(x).data(),
            xs[0],
            self.value(w).data(),
            out_ch,
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let od = geom.out_dims();
        let shape: Vec<usize> = if xs.len() == 3 { vec![out_ch, od[0], od[1]] } else { vec![out_ch, od[0], od[1], od[2]] };
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_vec(&shape, y)?, Op::Conv { x, w, b, geom }, rg))
    }

    /// Group normalization over `(C, ...)` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.shape(x)[0];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("group_norm", format!("affine for {} channels", c)));
        }
        let groups = kernels::norm_groups(c);
        let xv = self.value(x);
        let stats = kernels::group_stats(xv.data(), c, groups);
        let inner = xv.inner_len();
        let per_group = c / groups;
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xv.clone();
        for (ch, row) in out.data_mut().chunks_mut(inner).enumerate() {
            let (mean, rstd) = stats[ch / per_group];
            row.iter_mut().for_each(|v| *v = (*v - mean) * rstd * g[ch] + bt[ch]);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::GroupNorm { x, gamma, beta, groups, stats }, rg))
    }

    /// Softmax over axis 0 independently at every trailing position.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let k = xv.shape()[0];
        let n = xv.inner_len();
        let mut out = xv.clone();
        let d = out.data_mut();
        for p in 0..n {
            let m = (0..k).map(|c| d[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for c in 0..k {
                let e = libm::exp(d[c * n + p] - m);
                d[c * n + p] = e;
                s += e;
            }
            for c in 0..k {
                d[c * n + p] /= s;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::SoftmaxChannels(x), rg)
    }

    pub fn resample(&mut self, x: Var, table: Arc<ResampleTable>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[1..] != table.in_dims {
            return Err(shape_err("resample", format!("input {:?}, table expects {:?}", xs, table.in_dims)));
        }
        let (inl, outl) = (table.in_len(), table.out_len());
        let xv = self.value(x).data();
        let mut out = vec![0.0; xs[0] * outl];
        for c in 0..xs[0] {
            let src = &xv[c * inl..(c + 1) * inl];
            let dst = &mut out[c * outl..(c + 1) * outl];
            for (o, d) in dst.iter_mut().enumerate() {
                *d = table.taps[table.offsets[o]..table.offsets[o + 1]].iter().map(|&(i, w)| w * src[i]).sum();
            }
        }
        let od = table.out_dims;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[xs[0], od[0], od[1], od[2]], out)?, Op::Resample { x, table }, rg))
    }

    /// Lift: `out[c, v(d, p)] += probs[d, p] * feat[c, p]`.
    pub fn splat(&mut self, feat: Var, probs: Var, table: Arc<SplatTable>) -> Result<Var> {
        let fs = self.shape(feat).to_vec();
        let ps = self.shape(probs).to_vec();
        let pixels = fs[1..].iter().product::<usize>();
        if ps[0] != table.bins || pixels != table.pixels || ps[1..] != fs[1..] {
            return Err(shape_err("splat", format!("feat {:?}, probs {:?}, table {}x{}", fs, ps, table.bins, table.pixels)));
        }
        let c = fs[0];
        let od = table.out_dims;
        let nv = od[0] * od[1] * od[2];
        let mut out = vec![0.0; c * nv];
        let (f, pr) = (self.value(feat).data(), self.value(probs).data());
        for d in 0..table.bins {
            for p in 0..pixels {
                if let Some(v) = table.voxel[d * pixels + p] {
                    let w = pr[d * pixels + p];
                    for ch in 0..c {
                        out[ch * nv + v as usize] += w * f[ch * pixels + p];
                    }
                }
            }
        }
        let rg = self.rg(feat) || self.rg(probs);
        Ok(self.push(Tensor::from_vec(&[c, od[0], od[1], od[2]], out)?, Op::Splat { feat, probs, table }, rg))
    }

    /// `y (n, out) = x (n, in) * w^T + b`.
    pub fn row_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || self.shape(b) != [ws[0]] {
            return Err(shape_err("row_linear", format!("x {:?}, w {:?}", xs, ws)));
        }
        let (n, o) = (xs[0], ws[0]);
        let mut y = vec![0.0; n * o];
        let bv = self.value(b).data();
        for row in y.chunks_mut(o) {
            row.copy_from_slice(bv);
        }
        kernels::gemm(n, xs[1], o, self.value(x).data(), false, self.value(w).data(), true, 1.0, &mut y);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[n, o], y)?, Op::RowLinear { x, w, b }, rg))
    }

    /// Max over row segments `offsets[i]..offsets[i+1]` of `x (n, c)`;
    /// empty segments give zeros.
    pub fn segment_max(&mut self, x: Var, offsets: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || offsets.last().copied() != Some(xs[0]) {
            return Err(shape_err("segment_max", format!("x {:?} with {} rows in segments", xs, offsets.last().copied().unwrap_or(0))));
        }
        let c = xs[1];
        let nseg = offsets.len() - 1;
        let xv = self.value(x).data();
        let mut out = vec![0.0; nseg * c];
        let mut argmax = vec![usize::MAX; nseg * c];
        for s in 0..nseg {
            for r in offsets[s]..offsets[s + 1] {
                for ch in 0..c {
                    let v = xv[r * c + ch];
                    let slot = s * c + ch;
                    if argmax[slot] == usize::MAX || v > out[slot] {
                        out[slot] = v;
                        argmax[slot] = r;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[nseg, c], out)?, Op::SegmentMax { x, argmax }, rg))
    }

    /// Writes row `i` of `x (ncells, c)` to flat voxel `cells[i]` of a zero
    /// `(c, dims)` grid.
    pub fn scatter_cells(&mut self, x: Var, cells: Arc<Vec<usize>>, dims: [usize; 3]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let nv = dims[0] * dims[1] * dims[2];
        if xs.len() != 2 || xs[0] != cells.len() || cells.iter().any(|&i| i >= nv) {
            return Err(shape_err("scatter_cells", format!("x {:?} for {} cells", xs, cells.len())));
        }
        let mut seen = vec![false; nv];
        for &i in cells.iter() {
            if core::mem::replace(&mut seen[i], true) {
                return Err(crate::Error::DuplicateCell(i));
            }
        }
        let c = xs[1];
        let xv = self.value(x).data();
        let mut out = vec![0.0; c * nv];
        for (r, &cell) in cells.iter().enumerate() {
            for ch in 0..c {
                out[ch * nv + cell] = xv[r * c + ch];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[c, dims[0], dims[1], dims[2]], out)?, Op::ScatterCells { x, cells }, rg))
    }

    /// Mean cross-entropy of softmax over axis 0 against per-position
    /// labels. Labels equal to [`IGNORE_LABEL`] are skipped; optional class
    /// weights turn the mean into a weighted mean.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<Vec<u32>>, weights: Option<Arc<Vec<f64>>>) -> Result<Var> {
        let lv = self.value(logits);
        let k = lv.shape()[0];
        let n = lv.inner_len();
        if labels.len() != n {
            return Err(shape_err("cross_entropy", format!("{} labels for {} positions", labels.len(), n)));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_LABEL && l as usize >= k) {
            return Err(crate::Error::LabelOutOfRange { label: bad as usize, num_classes: k });
        }
        if weights.as_ref().is_some_and(|w| w.len() != k) {
            return Err(shape_err("cross_entropy", "class weight count".into()));
        }
        let d = lv.data();
        let mut probs = vec![0.0; k * n];
        let mut total = 0.0;
        let mut norm = 0.0;
        for p in 0..n {
            let m = (0..k).map(|c| d[c * n + p]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..k).map(|c| libm::exp(d[c * n + p] - m)).sum();
            let lse = m + libm::log(s);
            for c in 0..k {
                probs[c * n + p] = libm::exp(d[c * n + p] - lse);
            }
            let y = labels[p];
            if y == IGNORE_LABEL {
                continue;
            }
            let w = weights.as_ref().map_or(1.0, |w| w[y as usize]);
            total += w * (lse - d[y as usize * n + p]);
            norm += w;
        }
        let loss = if norm > 0.0 { total / norm } else { 0.0 };
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels, weights, probs, norm }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `sum(x * weights)` for a constant `weights` tensor.
    pub fn dot(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        if self.shape(x) != weights.shape() {
            return Err(shape_err("dot", format!("{:?} vs {:?}", self.shape(x), weights.shape())));
        }
        let s = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot(x, weights), rg))
    }

    /// Mirrors a `(C, X, Y, Z)` tensor along spatial axis 0 (x) or 1 (y).
    pub fn flip(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || axis > 1 {
            return Err(shape_err("flip", format!("{:?} along {}", xs, axis)));
        }
        let data = flip_buffer(self.value(x).data(), [xs[1], xs[2], xs[3]], axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&xs, data)?, Op::Flip { x, axis }, rg))
    }

    /// Backpropagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        let params = self
            .param_nodes
            .iter()
            .enumerate()
            .filter_map(|(p, v)| v.map(|v| (ParamId(p), v)))
            .collect();
        Gradients { grads, params }
    }

    fn backward_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let dy = gy.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        acc(grads, v, gy.clone());
                    }
                }
            }
            Op::Scale(a, s) => {
                let mut g = gy.clone();
                g.scale_assign(*s);
                acc(grads, *a, g);
            }
            Op::Relu(a) => {
                let mut g = gy.clone();
                for (gv, &y) in g.data_mut().iter_mut().zip(node.value.data()) {
                    if y <= 0.0 {
                        *gv = 0.0;
                    }
                }
                acc(grads, *a, g);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.rg(p) {
                        acc_data(grads, p, self.shape(p), dy[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::Conv { x, w, b, geom } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (dx, dw, db) = kernels::conv_backward(
                    xv.data(),
                    xv.shape()[0],
                    wv.data(),
                    wv.shape()[0],
                    dy,
                    geom,
                    self.rg(*x),
                );
                if let Some(dx) = dx {
                    acc_data(grads, *x, xv.shape(), dx);
                }
                if self.rg(*w) {
                    acc_data(grads, *w, wv.shape(), dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        acc_data(grads, *b, self.shape(*b), db);
                    }
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, stats } => {
                let xv = self.value(*x);
                let c = xv.shape()[0];
                let inner = xv.inner_len();
                let per_group = c / groups;
                let g = self.value(*gamma).data();
                let xd = xv.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; xd.len()];
                for (grp, &(mean, rstd)) in stats.iter().enumerate() {
                    let lo = grp * per_group * inner;
                    let hi = lo + per_group * inner;
                    let m = (hi - lo) as f64;
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for i in lo..hi {
                        let ch = i / inner;
                        let xhat = (xd[i] - mean) * rstd;
                        dgamma[ch] += dy[i] * xhat;
                        dbeta[ch] += dy[i];
                        let dxhat = dy[i] * g[ch];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for i in lo..hi {
                        let ch = i / inner;
                        let xhat = (xd[i] - mean) * rstd;
                        let dxhat = dy[i] * g[ch];
                        dx[i] = rstd / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                    }
                }
                if self.rg(*x) {
                    acc_data(grads, *x, xv.shape(), dx);
                }
                if self.rg(*gamma) {
                    acc_data(grads, *gamma, &[c], dgamma);
                }
                if self.rg(*beta) {
                    acc_data(grads, *beta, &[c], dbeta);
                }
            }
            Op::SoftmaxChannels(x) => {
                let y = node.value.data();
                let k = node.value.shape()[0];
                let n = node.value.inner_len();
                let mut dx = vec![0.0; y.len()];
                for p in 0..n {
                    let s: f64 = (0..k).map(|c| y[c * n + p] * dy[c * n + p]).sum();
                    for c in 0..k {
                        dx[c * n + p] = y[c * n + p] * (dy[c * n + p] - s);
                    }
                }
                acc_data(grads, *x, self.shape(*x), dx);
            }
            Op::Resample { x, table } => {
                let xs = self.shape(*x);
                let (inl, outl) = (table.in_len(), table.out_len());
                let mut dx = vec![0.0; xs[0] * inl];
                for c in 0..xs[0] {
                    let g = &dy[c * outl..(c + 1) * outl];
                    let d = &mut dx[c * inl..(c + 1) * inl];
                    for (o, &gv) in g.iter().enumerate() {
                        for &(i, w) in &table.taps[table.offsets[o]..table.offsets[o + 1]] {
                            d[i] += w * gv;
                        }
                    }
                }
                acc_data(grads, *x, xs, dx);
            }
            Op::Splat { feat, probs, table } => {
                let (f, pr) = (self.value(*feat), self.value(*probs));
                let c = f.shape()[0];
                let pixels = table.pixels;
                let nv: usize = table.out_dims.iter().product();
                let mut dfeat = vec![0.0; f.numel()];
                let mut dprobs = vec![0.0; pr.numel()];
                for d in 0..table.bins {
                    for p in 0..pixels {
                        if let Some(v) = table.voxel[d * pixels + p] {
                            let w = pr.data()[d * pixels + p];
                            let mut dp = 0.0;
                            for ch in 0..c {
                                let g = dy[ch * nv + v as usize];
                                dfeat[ch * pixels + p] += w * g;
                                dp += f.data()[ch * pixels + p] * g;
                            }
                            dprobs[d * pixels + p] += dp;
                        }
                    }
                }
                if self.rg(*feat) {
                    acc_data(grads, *feat, f.shape(), dfeat);
                }
                if self.rg(*probs) {
                    acc_data(grads, *probs, pr.shape(), dprobs);
                }
            }
            Op::RowLinear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, i, o) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * i];
                    kernels::gemm(n, o, i, dy, false, wv.data(), false, 0.0, &mut dx);
                    acc_data(grads, *x, xv.shape(), dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; o * i];
                    kernels::gemm(o, n, i, dy, true, xv.data(), false, 0.0, &mut dw);
                    acc_data(grads, *w, wv.shape(), dw);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; o];
                    for row in dy.chunks(o) {
                        for (a, v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    acc_data(grads, *b, &[o], db);
                }
            }
            Op::SegmentMax { x, argmax } => {
                let xs = self.shape(*x);
                let c = xs[1];
                let mut dx = vec![0.0; xs[0] * c];
                for (slot, &r) in argmax.iter().enumerate() {
                    if r != usize::MAX {
                        dx[r * c + slot % c] += dy[slot];
                    }
                }
                acc_data(grads, *x, xs, dx);
            }
            Op::ScatterCells { x, cells } => {
                let xs = self.shape(*x);
                let c = xs[1];
                let nv = node.value.inner_len();
                let mut dx = vec![0.0; xs[0] * c];
                for (r, &cell) in cells.iter().enumerate() {
                    for ch in 0..c {
                        dx[r * c + ch] = dy[ch * nv + cell];
                    }
                }
                acc_data(grads, *x, xs, dx);
            }
            Op::CrossEntropy { logits, labels, weights, probs, norm } => {
                let ls = self.shape(*logits);
                let k = ls[0];
                let n = probs.len() / k;
                let mut dx = vec![0.0; probs.len()];
                if *norm > 0.0 {
                    let scale = dy[0] / norm;
                    for p in 0..n {
                        let y = labels[p];
                        if y == IGNORE_LABEL {
                            continue;
                        }
                        let w = weights.as_ref().map_or(1.0, |w| w[y as usize]) * scale;
                        for c in 0..k {
                            let onehot = if c == y as usize { 1.0 } else { 0.0 };
                            dx[c * n + p] = w * (probs[c * n + p] - onehot);
                        }
                    }
                }
                acc_data(grads, *logits, ls, dx);
            }
            Op::Sum(x) => {
                let xs = self.shape(*x);
                acc(grads, *x, Tensor::full(xs, dy[0]));
            }
            Op::Dot(x, w) => {
                let mut g = w.clone();
                g.scale_assign(dy[0]);
                acc(grads, *x, g);
            }
            Op::Flip { x, axis } => {
                let s = node.value.shape();
                let data = flip_buffer(dy, [s[1], s[2], s[3]], *axis);
                acc_data(grads, *x, s, data);
            }
        }
    }
}
