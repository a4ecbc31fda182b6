//! Define-by-run computation tape with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are read by
//! reference from a [`ParamStore`]; each parameter gets at most one node per graph so
//! shared weights accumulate their gradients in one place.

use std::sync::Arc;

use crate::kernels::{self, ConvGeom};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::scalar::{gemm, gemm_strided, MatView, Scalar};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A region to resample, in the coordinate frame of feature level `level`
/// (pixel coordinates already divided by the level stride).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiSample {
    pub level: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddLast { x: Var, b: Var },
    MulLast { x: Var, v: Var },
    AddFirst { x: Var, b: Var },
    Scale { x: Var, c: T },
    Relu(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, rstd: Vec<T> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    Conv2d { x: Var, w: Var, cols: Vec<T>, geom: ConvGeom },
    Attention { q: Var, k: Var, v: Var, bias: Option<Var>, heads: usize, probs: Vec<T> },
    RelBias { table: Var, buckets: Arc<[u32]>, seq: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize, end: usize },
    Upsample2x(Var),
    RoiAlign { levels: Vec<Var>, rois: Vec<RoiSample>, out: usize, sampling: usize },
    SigmoidBce { logits: Var, targets: Vec<(usize, T)>, norm: T },
    SoftmaxCe { logits: Var, labels: Vec<(usize, usize)>, norm: T, probs: Vec<T> },
    SmoothL1 { pred: Var, targets: Vec<(usize, Vec<T>)>, beta: T, norm: T },
    Sum(Var),
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    pub params: ParamGrads<T>,
    leaves: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of an input created with [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(v.0).and_then(|g| g.as_ref())
    }
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Graph { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Parameter node; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Constant leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// `op(a)·op(b)` for matrices.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rank(), 2, "matmul lhs must be a matrix, got {:?}", av.shape());
        assert_eq!(bv.rank(), 2, "matmul rhs must be a matrix, got {:?}", bv.shape());
        let (m, k) = if ta { (av.dim(1), av.dim(0)) } else { (av.dim(0), av.dim(1)) };
        let (k2, n) = if tb { (bv.dim(1), bv.dim(0)) } else { (bv.dim(0), bv.dim(1)) };
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![T::zero(); m * n];
        gemm(ta, tb, m, n, k, T::one(), av.data(), bv.data(), T::zero(), &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::from_vec(&[m, n], out), Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    /// `x + b` with `b` broadcast along every axis but the last.
    pub fn add_last(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let d = xv.dim(-1);
        assert_eq!(bv.len(), d, "bias length {} vs last dim {}", bv.len(), d);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let t = Tensor::from_vec(xv.shape(), out);
        let ng = self.ng(x) || self.ng(b);
        self.push(t, Op::AddLast { x, b }, ng)
    }

    /// `x * v` with `v` broadcast along every axis but the last.
    pub fn mul_last(&mut self, x: Var, v: Var) -> Var {
        let (xv, vv) = (self.value(x), self.value(v));
        let d = xv.dim(-1);
        assert_eq!(vv.len(), d, "scale length {} vs last dim {}", vv.len(), d);
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, &s) in row.iter_mut().zip(vv.data()) {
                *o *= s;
            }
        }
        let t = Tensor::from_vec(xv.shape(), out);
        let ng = self.ng(x) || self.ng(v);
        self.push(t, Op::MulLast { x, v }, ng)
    }

    /// `x + b` with `b[c]` broadcast over all trailing axes of channel `c`.
    pub fn add_first(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.dim(0);
        assert_eq!(bv.len(), c, "channel bias length {} vs channels {}", bv.len(), c);
        let inner = xv.len() / c.max(1);
        let mut out = xv.data().to_vec();
        for (ch, plane) in out.chunks_mut(inner.max(1)).enumerate().take(c) {
            let bb = bv.data()[ch];
            for o in plane.iter_mut() {
                *o += bb;
            }
        }
        let t = Tensor::from_vec(xv.shape(), out);
        let ng = self.ng(x) || self.ng(b);
        self.push(t, Op::AddFirst { x, b }, ng)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        let t = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(t, Op::Scale { x, c }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.ng(x);
        self.push(t, Op::Relu(x), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::gelu);
        let ng = self.ng(x);
        self.push(t, Op::Gelu(x), ng)
    }

    /// Row-wise layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.dim(-1);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(gv.len(), d);
        assert_eq!(bv.len(), d);
        let (mean, rstd) = kernels::group_stats(xv.data(), d, T::from_f64_lossy(eps));
        let mut out = vec![T::zero(); xv.len()];
        for (r, (orow, xrow)) in out.chunks_mut(d).zip(xv.data().chunks(d)).enumerate() {
            for j in 0..d {
                orow[j] = (xrow[j] - mean[r]) * rstd[r] * gv[j] + bv[j];
            }
        }
        let t = Tensor::from_vec(xv.shape(), out);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(t, Op::LayerNorm { x, gamma, beta, mean, rstd }, ng)
    }

    /// Group normalization of a channel-first tensor `[C, ...]`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.dim(0);
        assert!(groups > 0 && c.is_multiple_of(groups), "{c} channels not divisible into {groups} groups");
        let inner = xv.len() / c;
        let glen = inner * (c / groups);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let (mean, rstd) = kernels::group_stats(xv.data(), glen, T::from_f64_lossy(eps));
        let mut out = vec![T::zero(); xv.len()];
        for ch in 0..c {
            let g = ch / (c / groups);
            let (m, r) = (mean[g], rstd[g]);
            let src = &xv.data()[ch * inner..(ch + 1) * inner];
            let dst = &mut out[ch * inner..(ch + 1) * inner];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - m) * r * gv[ch] + bv[ch];
            }
        }
        let t = Tensor::from_vec(xv.shape(), out);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(t, Op::GroupNorm { x, gamma, beta, groups, mean, rstd }, ng)
    }

    /// Convolution of `x: [C, H, W]` with `w: [Cout, C*k*k]` (no bias).
    pub fn conv2d(&mut self, x: Var, w: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rank(), 3, "conv2d input must be [C, H, W], got {:?}", xv.shape());
        let geom = ConvGeom { in_channels: xv.dim(0), height: xv.dim(1), width: xv.dim(2), kernel, stride, pad };
        let wv = self.value(w);
        assert_eq!(wv.rank(), 2);
        assert_eq!(wv.dim(1), geom.col_rows(), "conv weight {:?} vs geometry {:?}", wv.shape(), geom);
        let cout = wv.dim(0);
        let cols = kernels::im2col(xv.data(), &geom);
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![T::zero(); cout * ncols];
        gemm(false, false, cout, ncols, rows, T::one(), wv.data(), &cols, T::zero(), &mut out);
        let t = Tensor::from_vec(&[cout, geom.out_height(), geom.out_width()], out);
        let ng = self.ng(x) || self.ng(w);
        self.push(t, Op::Conv2d { x, w, cols, geom }, ng)
    }

    /// Multi-head scaled dot-product attention over `[S, D]` queries/keys/values.
    ///
    /// `bias` is an optional `[H, S, S]` additive logit bias; keys with
    /// `key_mask[j] == false` are excluded from every softmax.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Option<Var>, heads: usize, key_mask: &[bool]) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (s, d) = (qv.dim(0), qv.dim(1));
        assert_eq!(kv.shape(), qv.shape(), "attention q/k shape mismatch");
        assert_eq!(vv.shape(), qv.shape(), "attention q/v shape mismatch");
        assert!(heads > 0 && d % heads == 0, "dim {d} not divisible by {heads} heads");
        assert_eq!(key_mask.len(), s, "key mask length");
        if let Some(b) = bias {
            assert_eq!(self.value(b).shape(), &[heads, s, s], "attention bias shape");
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![T::zero(); heads * s * s];
        let mut out = vec![T::zero(); s * d];
        for h in 0..heads {
            let head_view = MatView { offset: h * dh, rows: s, cols: dh, row_stride: d, col_stride: 1 };
            let p = &mut probs[h * s * s..(h + 1) * s * s];
            gemm_strided(scale, qv.data(), head_view, kv.data(), head_view.t(), T::zero(), p, MatView::dense(s, s));
            if let Some(b) = bias {
                let bt = &self.value(b).data()[h * s * s..(h + 1) * s * s];
                for (pp, &bb) in p.iter_mut().zip(bt) {
                    *pp += bb;
                }
            }
            for row in p.chunks_mut(s) {
                for (j, val) in row.iter_mut().enumerate() {
                    if !key_mask[j] {
                        *val += T::MASK_NEG;
                    }
                }
                kernels::softmax_row_in_place(row);
            }
            gemm_strided(T::one(), p, MatView::dense(s, s), vv.data(), head_view, T::zero(), &mut out, head_view);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v) || bias.is_some_and(|b| self.ng(b));
        self.push(Tensor::from_vec(&[s, d], out), Op::Attention { q, k, v, bias, heads, probs }, ng)
    }

    /// Gathers `table[h, buckets[i*S + j]]` into an `[H, S, S]` bias tensor.
    pub fn rel_bias(&mut self, table: Var, buckets: Arc<[u32]>, seq: usize) -> Var {
        let tv = self.value(table);
        assert_eq!(tv.rank(), 2);
        assert_eq!(buckets.len(), seq * seq);
        let (h, nb) = (tv.dim(0), tv.dim(1));
        let mut out = vec![T::zero(); h * seq * seq];
        for hh in 0..h {
            let row = &tv.data()[hh * nb..(hh + 1) * nb];
            for (o, &bk) in out[hh * seq * seq..(hh + 1) * seq * seq].iter_mut().zip(buckets.iter()) {
                *o = row[bk as usize];
            }
        }
        let ng = self.ng(table);
        self.push(Tensor::from_vec(&[h, seq, seq], out), Op::RelBias { table, buckets, seq }, ng)
    }

    /// Row lookup `table[ids[i]]`. Panics on out-of-range ids.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let (v, d) = (tv.dim(0), tv.dim(1));
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "token id {id} out of range for vocabulary of {v}");
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let ng = self.ng(table);
        self.push(Tensor::from_vec(&[ids.len(), d], out), Op::Embedding { table, ids: ids.to_vec() }, ng)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose2();
        let ng = self.ng(x);
        self.push(t, Op::Transpose(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape);
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Concatenation along axis 0; trailing shapes must agree.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let tail = self.value(xs[0]).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let xv = self.value(x);
            assert_eq!(&xv.shape()[1..], &tail[..], "concat_rows trailing shape mismatch");
            rows += xv.dim(0);
            data.extend_from_slice(xv.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let ng = xs.iter().any(|&x| self.ng(x));
        self.push(Tensor::from_vec(&shape, data), Op::ConcatRows(xs.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xv = self.value(x);
        assert!(start <= end && end <= xv.dim(0), "slice {start}..{end} of {:?}", xv.shape());
        let inner = xv.len() / xv.dim(0).max(1);
        let mut shape = xv.shape().to_vec();
        shape[0] = end - start;
        let t = Tensor::from_vec(&shape, xv.data()[start * inner..end * inner].to_vec());
        let ng = self.ng(x);
        self.push(t, Op::SliceRows { x, start, end }, ng)
    }

    /// Nearest-neighbour 2× upsampling of `[C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2));
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); c * h2 * w2];
        for ch in 0..c {
            for y in 0..h2 {
                for xx in 0..w2 {
                    out[(ch * h2 + y) * w2 + xx] = xv.data()[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[c, h2, w2], out), Op::Upsample2x(x), ng)
    }

    /// Bilinear region resampling (RoIAlign, half-pixel aligned) from a set of
    /// `[C, H, W]` maps. Output `[N, C*out*out]`, channel-major per row.
    /// Regions with non-positive width or height produce zero rows.
    pub fn roi_align(&mut self, levels: &[Var], rois: &[RoiSample], out: usize, sampling: usize) -> Var {
        let c = self.value(levels[0]).dim(0);
        for &l in levels {
            assert_eq!(self.value(l).dim(0), c, "roi_align levels must share channel count");
        }
        let row_len = c * out * out;
        let mut data = vec![T::zero(); rois.len() * row_len];
        for (r, roi) in rois.iter().enumerate() {
            let lv = self.value(levels[roi.level]);
            let (h, w) = (lv.dim(1), lv.dim(2));
            let plane = h * w;
            let row = &mut data[r * row_len..(r + 1) * row_len];
            for_each_roi_tap(roi, out, sampling, h, w, |bin, taps, wt| {
                for ch in 0..c {
                    let src = &lv.data()[ch * plane..(ch + 1) * plane];
                    let mut acc = T::zero();
                    for &(idx, tw) in taps.iter() {
                        acc += tw * src[idx];
                    }
                    row[ch * out * out + bin] += acc * wt;
                }
            });
        }
        let ng = levels.iter().any(|&l| self.ng(l));
        self.push(
            Tensor::from_vec(&[rois.len(), row_len], data),
            Op::RoiAlign { levels: levels.to_vec(), rois: rois.to_vec(), out, sampling },
            ng,
        )
    }

    /// `sum_i BCEWithLogits(logits[i], y_i) / norm` over the listed flat indices.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &[(usize, f64)], norm: f64) -> Var {
        let lv = self.value(logits).data();
        let norm = T::from_f64_lossy(norm);
        let targets: Vec<(usize, T)> = targets.iter().map(|&(i, y)| (i, T::from_f64_lossy(y))).collect();
        let mut loss = T::zero();
        for &(i, y) in &targets {
            let x = lv[i];
            let relu = if x > T::zero() { x } else { T::zero() };
            loss += relu - x * y + kernels::log1p_exp_neg_abs(x);
        }
        let ng = self.ng(logits);
        self.push(Tensor::scalar(loss / norm), Op::SigmoidBce { logits, targets, norm }, ng)
    }

    /// `sum_r -log softmax(logits[r])[class_r] / norm` over the listed rows.
    pub fn softmax_ce(&mut self, logits: Var, labels: &[(usize, usize)], norm: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rank(), 2);
        let k = lv.dim(1);
        let norm = T::from_f64_lossy(norm);
        let mut probs = Vec::with_capacity(labels.len() * k);
        let mut loss = T::zero();
        for &(r, cls) in labels {
            assert!(cls < k, "class {cls} out of range {k}");
            let row = &lv.data()[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[cls];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let ng = self.ng(logits);
        self.push(Tensor::scalar(loss / norm), Op::SoftmaxCe { logits, labels: labels.to_vec(), norm, probs }, ng)
    }

    /// Smooth-L1 (Huber with transition `beta`; `beta == 0` is plain L1) between
    /// listed rows of `pred` and their targets, summed and divided by `norm`.
    pub fn smooth_l1(&mut self, pred: Var, targets: &[(usize, Vec<f64>)], beta: f64, norm: f64) -> Var {
        let pv = self.value(pred);
        let w = pv.dim(-1);
        let beta_t = T::from_f64_lossy(beta);
        let norm_t = T::from_f64_lossy(norm);
        let targets: Vec<(usize, Vec<T>)> = targets
            .iter()
            .map(|(r, t)| {
                assert_eq!(t.len(), w, "smooth_l1 target width");
                (*r, t.iter().map(|&v| T::from_f64_lossy(v)).collect())
            })
            .collect();
        let half = T::from_f64_lossy(0.5);
        let mut loss = T::zero();
        for (r, t) in &targets {
            for (&p, &y) in pv.data()[r * w..(r + 1) * w].iter().zip(t) {
                let d = (p - y).abs();
                loss += if d < beta_t { half * d * d / beta_t } else { d - half * beta_t };
            }
        }
        let ng = self.ng(pred);
        self.push(Tensor::scalar(loss / norm_t), Op::SmoothL1 { pred, targets, beta: beta_t, norm: norm_t }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads = ParamGrads::empty(self.params.len());
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if let Some(g) = grads[i].take() {
                        param_grads.accumulate_owned(*id, g);
                    }
                    continue;
                }
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_op(&node.op, g, &mut grads);
        }
        let leaves = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match self.nodes[i].op {
                Op::Leaf => g,
                _ => None,
            })
            .collect();
        Gradients { params: param_grads, leaves }
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_op(&self, op: &Op<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = (g.dim(0), g.dim(1));
                let k = if *ta { av.dim(0) } else { av.dim(1) };
                if self.ng(*a) {
                    let mut da = vec![T::zero(); av.len()];
                    if !*ta {
                        // dA[m,k] = dC · op(B)^T
                        gemm(false, !*tb, m, k, n, T::one(), g.data(), bv.data(), T::zero(), &mut da);
                    } else {
                        // A is [k,m]: dA = op(B) · dC^T
                        gemm(*tb, true, k, m, n, T::one(), bv.data(), g.data(), T::zero(), &mut da);
                    }
                    self.accum(grads, *a, Tensor::from_vec(av.shape(), da));
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); bv.len()];
                    if !*tb {
                        // dB[k,n] = op(A)^T · dC
                        gemm(!*ta, false, k, n, m, T::one(), av.data(), g.data(), T::zero(), &mut db);
                    } else {
                        // B is [n,k]: dB = dC^T · op(A)
                        gemm(true, *ta, n, k, m, T::one(), g.data(), av.data(), T::zero(), &mut db);
                    }
                    self.accum(grads, *b, Tensor::from_vec(bv.shape(), db));
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *a, Tensor::from_vec(av.shape(), d));
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *b, Tensor::from_vec(bv.shape(), d));
                }
            }
            Op::AddLast { x, b } => {
                let bv = self.value(*b);
                if self.ng(*b) {
                    let d = bv.len();
                    let mut db = vec![T::zero(); d];
                    for row in g.data().chunks(d) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accum(grads, *b, Tensor::from_vec(bv.shape(), db));
                }
                self.accum(grads, *x, g);
            }
            Op::MulLast { x, v } => {
                let (xv, vv) = (self.value(*x), self.value(*v));
                let d = vv.len();
                if self.ng(*v) {
                    let mut dv = vec![T::zero(); d];
                    for (grow, xrow) in g.data().chunks(d).zip(xv.data().chunks(d)) {
                        for j in 0..d {
                            dv[j] += grow[j] * xrow[j];
                        }
                    }
                    self.accum(grads, *v, Tensor::from_vec(vv.shape(), dv));
                }
                if self.ng(*x) {
                    let mut dx = g.into_data();
                    for row in dx.chunks_mut(d) {
                        for (o, &s) in row.iter_mut().zip(vv.data()) {
                            *o *= s;
                        }
                    }
                    self.accum(grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
            }
            Op::AddFirst { x, b } => {
                let bv = self.value(*b);
                if self.ng(*b) {
                    let c = bv.len();
                    let inner = g.len() / c.max(1);
                    let db: Vec<T> = g.data().chunks(inner.max(1)).take(c).map(|p| p.iter().copied().sum()).collect();
                    self.accum(grads, *b, Tensor::from_vec(bv.shape(), db));
                }
                self.accum(grads, *x, g);
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accum(grads, *x, g.map(|v| v * c));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gg, &v)| if v > T::zero() { gg } else { T::zero() })
                    .collect();
                self.accum(grads, *x, Tensor::from_vec(xv.shape(), d));
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = g.data().iter().zip(xv.data()).map(|(&gg, &v)| gg * kernels::gelu_grad(v)).collect();
                self.accum(grads, *x, Tensor::from_vec(xv.shape(), d));
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let xv = self.value(*x);
                let d = xv.dim(-1);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); xv.len()];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..xv.len() / d.max(1) {
                    let xrow = &xv.data()[r * d..(r + 1) * d];
                    let grow = &g.data()[r * d..(r + 1) * d];
                    for j in 0..d {
                        let xh = (xrow[j] - mean[r]) * rstd[r];
                        dgamma[j] += grow[j] * xh;
                        dbeta[j] += grow[j];
                        dxhat[j] = grow[j] * gv[j];
                    }
                    kernels::norm_backward_group(xrow, &dxhat, mean[r], rstd[r], &mut dx[r * d..(r + 1) * d]);
                }
                self.accum(grads, *gamma, Tensor::from_vec(&[d], dgamma));
                self.accum(grads, *beta, Tensor::from_vec(&[d], dbeta));
                self.accum(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let xv = self.value(*x);
                let c = xv.dim(0);
                let inner = xv.len() / c;
                let cpg = c / groups;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); xv.len()];
                for ch in 0..c {
                    let grp = ch / cpg;
                    for s in 0..inner {
                        let idx = ch * inner + s;
                        let xh = (xv.data()[idx] - mean[grp]) * rstd[grp];
                        dgamma[ch] += g.data()[idx] * xh;
                        dbeta[ch] += g.data()[idx];
                        dxhat[idx] = g.data()[idx] * gv[ch];
                    }
                }
                let mut dx = vec![T::zero(); xv.len()];
                let glen = inner * cpg;
                for grp in 0..*groups {
                    let r = grp * glen..(grp + 1) * glen;
                    kernels::norm_backward_group(
                        &xv.data()[r.clone()],
                        &dxhat[r.clone()],
                        mean[grp],
                        rstd[grp],
                        &mut dx[r],
                    );
                }
                self.accum(grads, *gamma, Tensor::from_vec(&[c], dgamma));
                self.accum(grads, *beta, Tensor::from_vec(&[c], dbeta));
                self.accum(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::Conv2d { x, w, cols, geom } => {
                let wv = self.value(*w);
                let cout = wv.dim(0);
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                if self.ng(*w) {
                    let mut dw = vec![T::zero(); wv.len()];
                    gemm(false, true, cout, rows, ncols, T::one(), g.data(), cols, T::zero(), &mut dw);
                    self.accum(grads, *w, Tensor::from_vec(wv.shape(), dw));
                }
                if self.ng(*x) {
                    let mut dcols = vec![T::zero(); rows * ncols];
                    gemm(true, false, rows, ncols, cout, T::one(), wv.data(), g.data(), T::zero(), &mut dcols);
                    let xv = self.value(*x);
                    let mut dx = vec![T::zero(); xv.len()];
                    kernels::col2im_add(&dcols, geom, &mut dx);
                    self.accum(grads, *x, Tensor::from_vec(xv.shape(), dx));
                }
            }
            Op::Attention { q, k, v, bias, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (s, d) = (qv.dim(0), qv.dim(1));
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let mut dq = vec![T::zero(); s * d];
                let mut dk = vec![T::zero(); s * d];
                let mut dv = vec![T::zero(); s * d];
                let want_bias = bias.is_some_and(|b| self.ng(b));
                let mut dbias = if want_bias { vec![T::zero(); heads * s * s] } else { Vec::new() };
                let mut dp = vec![T::zero(); s * s];
                for h in 0..*heads {
                    let hv = MatView { offset: h * dh, rows: s, cols: dh, row_stride: d, col_stride: 1 };
                    let p = &probs[h * s * s..(h + 1) * s * s];
                    // dP = dO · V^T
                    gemm_strided(T::one(), g.data(), hv, vv.data(), hv.t(), T::zero(), &mut dp, MatView::dense(s, s));
                    // dV += P^T · dO
                    gemm_strided(T::one(), p, MatView::dense(s, s).t(), g.data(), hv, T::one(), &mut dv, hv);
                    // dS = P ⊙ (dP - rowdot)
                    for (prow, dprow) in p.chunks(s).zip(dp.chunks_mut(s)) {
                        let dot: T = prow.iter().zip(dprow.iter()).map(|(&a, &b)| a * b).sum();
                        for (dpv, &pv) in dprow.iter_mut().zip(prow) {
                            *dpv = pv * (*dpv - dot);
                        }
                    }
                    if want_bias {
                        dbias[h * s * s..(h + 1) * s * s].copy_from_slice(&dp);
                    }
                    // dQ = scale * dS · K ; dK = scale * dS^T · Q
                    gemm_strided(scale, &dp, MatView::dense(s, s), kv.data(), hv, T::one(), &mut dq, hv);
                    gemm_strided(scale, &dp, MatView::dense(s, s).t(), qv.data(), hv, T::one(), &mut dk, hv);
                }
                self.accum(grads, *q, Tensor::from_vec(&[s, d], dq));
                self.accum(grads, *k, Tensor::from_vec(&[s, d], dk));
                self.accum(grads, *v, Tensor::from_vec(&[s, d], dv));
                if let (Some(b), true) = (bias, want_bias) {
                    self.accum(grads, *b, Tensor::from_vec(&[*heads, s, s], dbias));
                }
            }
            Op::RelBias { table, buckets, seq } => {
                let tv = self.value(*table);
                let (h, nb) = (tv.dim(0), tv.dim(1));
                let mut dt = vec![T::zero(); h * nb];
                for hh in 0..h {
                    let gs = &g.data()[hh * seq * seq..(hh + 1) * seq * seq];
                    for (&gv, &bk) in gs.iter().zip(buckets.iter()) {
                        dt[hh * nb + bk as usize] += gv;
                    }
                }
                self.accum(grads, *table, Tensor::from_vec(tv.shape(), dt));
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.dim(1);
                let mut dt = vec![T::zero(); tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g.data()[r * d + j];
                    }
                }
                self.accum(grads, *table, Tensor::from_vec(tv.shape(), dt));
            }
            Op::Transpose(x) => {
                self.accum(grads, *x, g.transpose2());
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accum(grads, *x, g.reshaped(&shape));
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let xv = self.value(x);
                    let n = xv.len();
                    if self.ng(x) {
                        self.accum(grads, x, Tensor::from_vec(xv.shape(), g.data()[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start, end } => {
                let xv = self.value(*x);
                let inner = xv.len() / xv.dim(0).max(1);
                let mut dx = vec![T::zero(); xv.len()];
                dx[start * inner..end * inner].copy_from_slice(g.data());
                self.accum(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::Upsample2x(x) => {
                let xv = self.value(*x);
                let (c, h, w) = (xv.dim(0), xv.dim(1), xv.dim(2));
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![T::zero(); xv.len()];
                for ch in 0..c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            dx[(ch * h + y / 2) * w + xx / 2] += g.data()[(ch * h2 + y) * w2 + xx];
                        }
                    }
                }
                self.accum(grads, *x, Tensor::from_vec(xv.shape(), dx));
            }
            Op::RoiAlign { levels, rois, out, sampling } => {
                let c = self.value(levels[0]).dim(0);
                let row_len = c * out * out;
                let mut dlevels: Vec<Option<Vec<T>>> = levels
                    .iter()
                    .map(|&l| if self.ng(l) { Some(vec![T::zero(); self.value(l).len()]) } else { None })
                    .collect();
                for (r, roi) in rois.iter().enumerate() {
                    let Some(dl) = dlevels[roi.level].as_mut() else { continue };
                    let lv = self.value(levels[roi.level]);
                    let (h, w) = (lv.dim(1), lv.dim(2));
                    let plane = h * w;
                    let grow = &g.data()[r * row_len..(r + 1) * row_len];
                    for_each_roi_tap(roi, *out, *sampling, h, w, |bin, taps, wt| {
                        for ch in 0..c {
                            let gv = grow[ch * out * out + bin] * wt;
                            let dst = &mut dl[ch * plane..(ch + 1) * plane];
                            for &(idx, tw) in taps.iter() {
                                dst[idx] += tw * gv;
                            }
                        }
                    });
                }
                for (l, dl) in levels.iter().zip(dlevels) {
                    if let Some(dl) = dl {
                        let shape = self.value(*l).shape().to_vec();
                        self.accum(grads, *l, Tensor::from_vec(&shape, dl));
                    }
                }
            }
            Op::SigmoidBce { logits, targets, norm } => {
                let lv = self.value(*logits);
                let scale = g.item() / *norm;
                let mut dl = vec![T::zero(); lv.len()];
                for &(i, y) in targets {
                    dl[i] += (kernels::sigmoid(lv.data()[i]) - y) * scale;
                }
                self.accum(grads, *logits, Tensor::from_vec(lv.shape(), dl));
            }
            Op::SoftmaxCe { logits, labels, norm, probs } => {
                let lv = self.value(*logits);
                let k = lv.dim(1);
                let scale = g.item() / *norm;
                let mut dl = vec![T::zero(); lv.len()];
                for (n, &(r, cls)) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == cls { T::one() } else { T::zero() };
                        dl[r * k + j] += (probs[n * k + j] - onehot) * scale;
                    }
                }
                self.accum(grads, *logits, Tensor::from_vec(lv.shape(), dl));
            }
            Op::SmoothL1 { pred, targets, beta, norm } => {
                let pv = self.value(*pred);
                let w = pv.dim(-1);
                let scale = g.item() / *norm;
                let mut dp = vec![T::zero(); pv.len()];
                for (r, t) in targets {
                    for j in 0..w {
                        let diff = pv.data()[r * w + j] - t[j];
                        let dd = if diff.abs() < *beta {
                            diff / *beta
                        } else if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        dp[r * w + j] += dd * scale;
                    }
                }
                self.accum(grads, *pred, Tensor::from_vec(pv.shape(), dp));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.accum(grads, *x, Tensor::full(xv.shape(), g.item()));
            }
        }
    }
}

/// Visits every bilinear sample of a region: `f(bin_index, taps, weight)` where
/// `weight` folds in the per-bin averaging.
fn for_each_roi_tap<T: Scalar>(
    roi: &RoiSample,
    out: usize,
    sampling: usize,
    height: usize,
    width: usize,
    mut f: impl FnMut(usize, &kernels::Taps<T>, T),
) {
    // half-pixel alignment: continuous coordinate c maps to sample grid c - 0.5
    let (x1, y1) = (roi.x1 - 0.5, roi.y1 - 0.5);
    let (rw, rh) = (roi.x2 - roi.x1, roi.y2 - roi.y1);
    if rw <= 0.0 || rh <= 0.0 || !(rw.is_finite() && rh.is_finite()) {
        return;
    }
    let (bw, bh) = (rw / out as f64, rh / out as f64);
    let wt = T::from_f64_lossy(1.0 / (sampling * sampling) as f64);
    for by in 0..out {
        for bx in 0..out {
            let bin = by * out + bx;
            for iy in 0..sampling {
                let y = y1 + by as f64 * bh + (iy as f64 + 0.5) * bh / sampling as f64;
                for ix in 0..sampling {
                    let x = x1 + bx as f64 * bw + (ix as f64 + 0.5) * bw / sampling as f64;
                    if let Some(taps) =
                        kernels::bilinear_taps(T::from_f64_lossy(y), T::from_f64_lossy(x), height, width)
                    {
                        f(bin, &taps, wt);
                    }
                }
            }
        }
    }
}
