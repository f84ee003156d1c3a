use std::collections::BTreeMap;

use crate::kernels::{self, ConvGeometry};
use crate::{ParamId, ParamStore, Real, Tensor};

/// Node handle on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Add(Var, Var),
    AddChannel { x: Var, bias: Var },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry, cols: Vec<T> },
    Linear { x: Var, w: Var, b: Option<Var> },
    Silu(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    ConcatCols(Vec<Var>),
    Embedding { table: Var, ids: Vec<usize> },
    ScaleRows { x: Var, factors: Vec<T> },
    Mse { pred: Var, target: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], keyed by parameter.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
    touched_rows: BTreeMap<ParamId, Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    /// Rows of a row-sparse parameter that were looked up in the forward pass.
    pub fn touched_rows(&self, id: ParamId) -> Option<&[usize]> {
        self.touched_rows.get(&id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::all_finite)
    }
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// A tape built with [`Tape::inference`] drops the caches only the backward
/// pass needs.
pub struct Tape<'p, T: Real> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    training: bool,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new(), training: true }
    }

    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new(), training: false }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.training });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.value(id).clone();
        self.push(value, Op::Param(id), true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// `x[B,C,H,W] + bias[B,C]` broadcast over the spatial dimensions.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Var {
        let vx = self.value(x);
        let vb = self.value(bias);
        let (b, c) = (vx.dim(0), vx.dim(1));
        assert_eq!(vb.shape(), &[b, c], "add_channel: bias must be [B, C]");
        let spatial = vx.len() / (b * c);
        let mut data = vx.data().to_vec();
        for (i, plane) in data.chunks_mut(spatial).enumerate() {
            let add = vb.data()[i];
            plane.iter_mut().for_each(|v| *v += add);
        }
        let value = Tensor::new(vx.shape().to_vec(), data);
        let ng = self.needs(x) || self.needs(bias);
        self.push(value, Op::AddChannel { x, bias }, ng)
    }

    /// Square-kernel 2d convolution over an NCHW batch with `w[Co, Ci, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        assert_eq!(vx.shape().len(), 4, "conv2d: input must be NCHW");
        assert_eq!(vw.shape().len(), 4, "conv2d: weight must be [Co, Ci, k, k]");
        assert_eq!(vx.dim(1), vw.dim(1), "conv2d: channel mismatch");
        let geom = ConvGeometry {
            in_channels: vx.dim(1),
            height: vx.dim(2),
            width: vx.dim(3),
            kernel: vw.dim(2),
            stride,
            pad,
        };
        let co = vw.dim(0);
        let batch = vx.dim(0);
        let bias = b.map(|b| self.value(b).data());
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let keep = self.training && ng;
        let (y, cols) = kernels::conv2d_forward(vx.data(), batch, &geom, vw.data(), bias, co, keep);
        let value = Tensor::new(vec![batch, co, geom.out_height(), geom.out_width()], y);
        self.push(value, Op::Conv2d { x, w, b, geom, cols }, ng)
    }

    /// `x[B,I] @ w[O,I]^T + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let vx = self.value(x);
        let vw = self.value(w);
        let (batch, inp) = (vx.dim(0), vx.dim(1));
        let out = vw.dim(0);
        assert_eq!(vw.dim(1), inp, "linear: width mismatch");
        let mut y = vec![T::zero(); batch * out];
        if let Some(b) = b {
            let vb = self.value(b).data();
            for row in y.chunks_mut(out) {
                row.copy_from_slice(vb);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(batch, inp, out, T::one(), vx.data(), inp as isize, 1, vw.data(), 1, inp as isize, beta, &mut y, out as isize, 1);
        let value = Tensor::new(vec![batch, out], y);
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(value, Op::Linear { x, w, b }, ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| kernels::silu(*v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data);
        let ng = self.needs(x);
        self.push(value, Op::Silu(x), ng)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let vx = self.value(x);
        let (b, c) = (vx.dim(0), vx.dim(1));
        assert!(groups > 0 && c % groups == 0, "group_norm: {c} channels not divisible into {groups} groups");
        let spatial = vx.len() / (b * c);
        let (mean, rstd) = kernels::group_stats(vx.data(), b, c, spatial, groups, GROUP_NORM_EPS);
        let vg = self.value(gamma).data();
        let vb = self.value(beta).data();
        let cpg = c / groups;
        let mut data = vx.data().to_vec();
        for bi in 0..b {
            for ch in 0..c {
                let gi = bi * groups + ch / cpg;
                let (m, r) = (mean[gi], rstd[gi]);
                let (ga, be) = (vg[ch], vb[ch]);
                let start = (bi * c + ch) * spatial;
                for v in &mut data[start..start + spatial] {
                    *v = (*v - m) * r * ga + be;
                }
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), data);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(value, Op::GroupNorm { x, gamma, beta, groups, mean, rstd }, ng)
    }

    /// Nearest-neighbour 2x upsampling of an NCHW batch.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let (b, c, h, w) = (vx.dim(0), vx.dim(1), vx.dim(2), vx.dim(3));
        let mut data = vec![T::zero(); b * c * 4 * h * w];
        for (plane_in, plane_out) in vx.data().chunks(h * w).zip(data.chunks_mut(4 * h * w)) {
            for y in 0..2 * h {
                for xo in 0..2 * w {
                    plane_out[y * 2 * w + xo] = plane_in[(y / 2) * w + xo / 2];
                }
            }
        }
        let value = Tensor::new(vec![b, c, 2 * h, 2 * w], data);
        let ng = self.needs(x);
        self.push(value, Op::Upsample2x(x), ng)
    }

    /// Concatenate two NCHW batches along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(0), vb.dim(0));
        assert_eq!(&va.shape()[2..], &vb.shape()[2..], "concat_channels: spatial mismatch");
        let batch = va.dim(0);
        let la = va.len() / batch;
        let lb = vb.len() / batch;
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for i in 0..batch {
            data.extend_from_slice(&va.data()[i * la..(i + 1) * la]);
            data.extend_from_slice(&vb.data()[i * lb..(i + 1) * lb]);
        }
        let mut shape = va.shape().to_vec();
        shape[1] += vb.dim(1);
        let value = Tensor::new(shape, data);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::ConcatChannels(a, b), ng)
    }

    /// Concatenate `[B, D_i]` matrices along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols: nothing to concatenate");
        let batch = self.value(parts[0]).dim(0);
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let v = self.value(*p);
                assert_eq!(v.shape().len(), 2);
                assert_eq!(v.dim(0), batch, "concat_cols: batch mismatch");
                v.dim(1)
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(batch * total);
        for i in 0..batch {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        self.push(Tensor::new(vec![batch, total], data), Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Row lookup `table[ids[i]]`. Ids must already be validated against the table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let (rows, width) = (vt.dim(0), vt.dim(1));
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            assert!(id < rows, "embedding: id {id} outside table of {rows} rows");
            data.extend_from_slice(&vt.data()[id * width..(id + 1) * width]);
        }
        let ng = self.needs(table);
        self.push(Tensor::new(vec![ids.len(), width], data), Op::Embedding { table, ids: ids.to_vec() }, ng)
    }

    /// Multiply each leading-axis slice of `x` by a constant factor.
    pub fn scale_rows(&mut self, x: Var, factors: &[T]) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.dim(0), factors.len());
        let row = vx.len() / factors.len();
        let mut data = vx.data().to_vec();
        for (chunk, f) in data.chunks_mut(row).zip(factors) {
            chunk.iter_mut().for_each(|v| *v *= *f);
        }
        let value = Tensor::new(vx.shape().to_vec(), data);
        let ng = self.needs(x);
        self.push(value, Op::ScaleRows { x, factors: factors.to_vec() }, ng)
    }

    /// Mean squared error over every element.
    pub fn mse(&mut self, pred: Var, target: Var) -> Var {
        let (vp, vt) = (self.value(pred), self.value(target));
        assert_eq!(vp.shape(), vt.shape(), "mse: shape mismatch");
        let n = vp.len() as f64;
        let s: f64 = vp.data().iter().zip(vt.data()).map(|(p, t)| (p.as_f64() - t.as_f64()).powi(2)).sum();
        let ng = self.needs(pred) || self.needs(target);
        self.push(Tensor::scalar(T::of_f64(s / n)), Op::Mse { pred, target }, ng)
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert!(self.training, "backward on an inference tape");
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![T::one()]));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = g.reshape(node.value.shape().to_vec());
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    match out.grads.get_mut(id) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            out.grads.insert(*id, g);
                        }
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.data());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.data());
                    }
                }
                Op::AddChannel { x, bias } => {
                    if self.needs(*bias) {
                        let n = self.value(*bias).len();
                        let spatial = g.len() / n;
                        let db: Vec<T> = g.data().chunks(spatial).map(|c| c.iter().copied().sum()).collect();
                        accumulate(&mut grads, *bias, &db);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g.data());
                    }
                }
                Op::Conv2d { x, w, b, geom, cols } => self.conv2d_backward(&mut grads, &g, *x, *w, *b, geom, cols),
                Op::Linear { x, w, b } => {
                    let vx = self.value(*x);
                    let vw = self.value(*w);
                    let (batch, inp) = (vx.dim(0), vx.dim(1));
                    let out_w = vw.dim(0);
                    if self.needs(*w) {
                        // dW[O,I] = g^T[O,B] x[B,I]
                        let mut dw = vec![T::zero(); out_w * inp];
                        T::gemm(out_w, batch, inp, T::one(), g.data(), 1, out_w as isize, vx.data(), inp as isize, 1, T::zero(), &mut dw, inp as isize, 1);
                        accumulate(&mut grads, *w, &dw);
                    }
                    if let Some(b) = b {
                        if self.needs(*b) {
                            let mut db = vec![T::zero(); out_w];
                            for row in g.data().chunks(out_w) {
                                db.iter_mut().zip(row).for_each(|(d, v)| *d += *v);
                            }
                            accumulate(&mut grads, *b, &db);
                        }
                    }
                    if self.needs(*x) {
                        // dX[B,I] = g[B,O] W[O,I]
                        let mut dx = vec![T::zero(); batch * inp];
                        T::gemm(batch, out_w, inp, T::one(), g.data(), out_w as isize, 1, vw.data(), inp as isize, 1, T::zero(), &mut dx, inp as isize, 1);
                        accumulate(&mut grads, *x, &dx);
                    }
                }
                Op::Silu(x) => {
                    let vx = self.value(*x);
                    let dx: Vec<T> = vx
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(v, gv)| {
                            let s = kernels::sigmoid(*v);
                            *gv * s * (T::one() + *v * (T::one() - s))
                        })
                        .collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                    self.group_norm_backward(&mut grads, &g, *x, *gamma, *beta, *groups, mean, rstd)
                }
                Op::Upsample2x(x) => {
                    let vx = self.value(*x);
                    let (h, w) = (vx.dim(2), vx.dim(3));
                    let mut dx = vec![T::zero(); vx.len()];
                    for (pin, pout) in dx.chunks_mut(h * w).zip(g.data().chunks(4 * h * w)) {
                        for y in 0..2 * h {
                            for xo in 0..2 * w {
                                pin[(y / 2) * w + xo / 2] += pout[y * 2 * w + xo];
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::ConcatChannels(a, b) => {
                    let batch = g.dim(0);
                    let la = self.value(*a).len() / batch;
                    let lb = self.value(*b).len() / batch;
                    if self.needs(*a) {
                        let da: Vec<T> = (0..batch).flat_map(|i| g.data()[i * (la + lb)..i * (la + lb) + la].iter().copied()).collect();
                        accumulate(&mut grads, *a, &da);
                    }
                    if self.needs(*b) {
                        let db: Vec<T> = (0..batch).flat_map(|i| g.data()[i * (la + lb) + la..(i + 1) * (la + lb)].iter().copied()).collect();
                        accumulate(&mut grads, *b, &db);
                    }
                }
                Op::ConcatCols(parts) => {
                    let batch = g.dim(0);
                    let total = g.dim(1);
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).dim(1);
                        if self.needs(*p) {
                            let dp: Vec<T> = (0..batch).flat_map(|i| g.data()[i * total + offset..i * total + offset + w].iter().copied()).collect();
                            accumulate(&mut grads, *p, &dp);
                        }
                        offset += w;
                    }
                }
                Op::Embedding { table, ids } => {
                    let vt = self.value(*table);
                    let width = vt.dim(1);
                    let mut dt = vec![T::zero(); vt.len()];
                    for (row, &id) in ids.iter().enumerate() {
                        for (d, v) in dt[id * width..(id + 1) * width].iter_mut().zip(&g.data()[row * width..(row + 1) * width]) {
                            *d += *v;
                        }
                    }
                    accumulate(&mut grads, *table, &dt);
                    if let Op::Param(pid) = self.nodes[table.0].op {
                        let rows = out.touched_rows.entry(pid).or_default();
                        rows.extend_from_slice(ids);
                        rows.sort_unstable();
                        rows.dedup();
                    }
                }
                Op::ScaleRows { x, factors } => {
                    let row = g.len() / factors.len();
                    let mut dx = g.data().to_vec();
                    for (chunk, f) in dx.chunks_mut(row).zip(factors) {
                        chunk.iter_mut().for_each(|v| *v *= *f);
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Mse { pred, target } => {
                    let (vp, vt) = (self.value(*pred), self.value(*target));
                    let scale = g.data()[0] * T::of_f64(2.0 / vp.len() as f64);
                    let diff: Vec<T> = vp.data().iter().zip(vt.data()).map(|(p, t)| (*p - *t) * scale).collect();
                    if self.needs(*pred) {
                        accumulate(&mut grads, *pred, &diff);
                    }
                    if self.needs(*target) {
                        let neg: Vec<T> = diff.iter().map(|v| -*v).collect();
                        accumulate(&mut grads, *target, &neg);
                    }
                }
            }
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        g: &Tensor<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeometry,
        cols: &[T],
    ) {
        let vx = self.value(x);
        let vw = self.value(w);
        let batch = vx.dim(0);
        let co = vw.dim(0);
        let klen = geom.patch_len();
        let hw_out = geom.out_height() * geom.out_width();
        let in_len = geom.in_channels * geom.height * geom.width;
        let out_len = co * hw_out;
        let pointwise = geom.is_pointwise();

        if let Some(b) = b {
            if self.needs(b) {
                let mut db = vec![T::zero(); co];
                for gb in g.data().chunks(out_len) {
                    for (o, row) in gb.chunks(hw_out).enumerate() {
                        db[o] += row.iter().copied().sum::<T>();
                    }
                }
                accumulate(grads, b, &db);
            }
        }
        if self.needs(w) {
            let mut dw = vec![T::zero(); co * klen];
            for bi in 0..batch {
                let gb = &g.data()[bi * out_len..(bi + 1) * out_len];
                let cb = if pointwise { &vx.data()[bi * in_len..(bi + 1) * in_len] } else { &cols[bi * klen * hw_out..(bi + 1) * klen * hw_out] };
                // dW[Co,K] += g_b[Co,HW] cols_b^T[HW,K]
                T::gemm(co, hw_out, klen, T::one(), gb, hw_out as isize, 1, cb, 1, hw_out as isize, T::one(), &mut dw, klen as isize, 1);
            }
            accumulate(grads, w, &dw);
        }
        if self.needs(x) {
            let mut dx = vec![T::zero(); vx.len()];
            let mut dcols = vec![T::zero(); klen * hw_out];
            for bi in 0..batch {
                let gb = &g.data()[bi * out_len..(bi + 1) * out_len];
                // dcols[K,HW] = W^T[K,Co] g_b[Co,HW]
                let dxb = &mut dx[bi * in_len..(bi + 1) * in_len];
                if pointwise {
                    T::gemm(klen, co, hw_out, T::one(), vw.data(), 1, klen as isize, gb, hw_out as isize, 1, T::zero(), dxb, hw_out as isize, 1);
                } else {
                    T::gemm(klen, co, hw_out, T::one(), vw.data(), 1, klen as isize, gb, hw_out as isize, 1, T::zero(), &mut dcols, hw_out as isize, 1);
                    kernels::col2im_add(&dcols, geom, dxb);
                }
            }
            accumulate(grads, x, &dx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn group_norm_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        g: &Tensor<T>,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: &[T],
        rstd: &[T],
    ) {
        let vx = self.value(x);
        let vg = self.value(gamma).data();
        let (b, c) = (vx.dim(0), vx.dim(1));
        let spatial = vx.len() / (b * c);
        let cpg = c / groups;
        let n = T::of_f64((cpg * spatial) as f64);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = vec![T::zero(); vx.len()];
        for bi in 0..b {
            for gi in 0..groups {
                let (m, r) = (mean[bi * groups + gi], rstd[bi * groups + gi]);
                let start = (bi * c + gi * cpg) * spatial;
                let len = cpg * spatial;
                let xs = &vx.data()[start..start + len];
                let gs = &g.data()[start..start + len];
                let mut sum_dxhat = T::zero();
                let mut sum_dxhat_xhat = T::zero();
                for (j, (xv, gv)) in xs.iter().zip(gs).enumerate() {
                    let ch = gi * cpg + j / spatial;
                    let xhat = (*xv - m) * r;
                    dgamma[ch] += *gv * xhat;
                    dbeta[ch] += *gv;
                    let dxhat = *gv * vg[ch];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                let dxs = &mut dx[start..start + len];
                for (j, (d, (xv, gv))) in dxs.iter_mut().zip(xs.iter().zip(gs)).enumerate() {
                    let ch = gi * cpg + j / spatial;
                    let xhat = (*xv - m) * r;
                    let dxhat = *gv * vg[ch];
                    *d = r / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                }
            }
        }
        if self.needs(gamma) {
            accumulate(grads, gamma, &dgamma);
        }
        if self.needs(beta) {
            accumulate(grads, beta, &dbeta);
        }
        if self.needs(x) {
            accumulate(grads, x, &dx);
        }
    }
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, delta: &[T]) {
    match &mut grads[v.0] {
        Some(acc) => acc.data_mut().iter_mut().zip(delta).for_each(|(a, d)| *a += *d),
        slot @ None => *slot = Some(Tensor::new(vec![delta.len()], delta.to_vec())),
    }
}
