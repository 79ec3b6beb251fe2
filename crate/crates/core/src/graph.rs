//! Reverse-mode automatic differentiation over single-sample tensors.
//!
//! A [`Graph`] records every intermediate value of one forward pass. Feature
//! maps are `[C, H, W]`, token sequences are `[N, D]`. Batching is done by the
//! callers by looping over samples and accumulating parameter gradients, so no
//! operator here needs a batch axis.
//!
//! Nodes whose inputs never require a gradient are marked constant and are
//! skipped entirely by [`Graph::backward`]; that is how frozen weights stay
//! gradient-free.

use crate::tensor::{gemm, Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    UpsampleNearest2x { x: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<T>, rstd: Vec<T> },
    Silu { x: Var },
    Add { a: Var, b: Var },
    AddChannelBias { x: Var, v: Var },
    MaskScale { x: Var, mask: Vec<T>, scale: T },
    Scale { x: Var, s: T },
    Concat { parts: Vec<Var> },
    Linear { x: Var, w: Var, b: Option<Var> },
    MatMul { a: Var, b: Var, trans_a: bool, trans_b: bool },
    SoftmaxRows { x: Var },
    Transpose { x: Var },
    Reshape { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is wanted.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// 2-D convolution. `x: [Cin, H, W]`, `w: [Cout, Cin, k, k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 3, "conv2d input must be [C,H,W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Cout,Cin,k,k]");
        assert_eq!(xs[0], ws[1], "conv2d channel mismatch");
        let geo = ConvGeom::new(xs[0], xs[1], xs[2], ws[2], stride, pad);
        let cout = ws[0];
        let mut out = vec![T::zero(); cout * geo.n_out()];
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), cout, "conv2d bias size");
            for (row, &bv) in out.chunks_mut(geo.n_out()).zip(bias) {
                row.fill(bv);
            }
        }
        let wd = self.value(w).data();
        let beta = if b.is_some() { T::one() } else { T::zero() };
        if geo.is_pointwise() {
            gemm(cout, geo.k_rows(), geo.n_out(), T::one(), wd, false, self.value(x).data(), false, beta, &mut out);
        } else {
            let col = geo.im2col(self.value(x).data());
            gemm(cout, geo.k_rows(), geo.n_out(), T::one(), wd, false, &col, false, beta, &mut out);
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        self.push(Tensor::new(&[cout, geo.ho, geo.wo], out), Op::Conv2d { x, w, b, stride, pad }, rg)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (c, h, w) = chw(v.shape());
        let src = v.data();
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                let srow = &src[ch * h * w + (y / 2) * w..][..w];
                let drow = &mut out[ch * 4 * h * w + y * 2 * w..][..2 * w];
                for (xx, d) in drow.iter_mut().enumerate() {
                    *d = srow[xx / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[c, 2 * h, 2 * w], out), Op::UpsampleNearest2x { x }, rg)
    }

    /// Group normalization over `[C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Var {
        let v = self.value(x);
        let c = v.dim(0);
        assert!(c.is_multiple_of(groups), "group_norm: {c} channels not divisible by {groups}");
        let per_c = v.len() / c;
        let gsize = (c / groups) * per_c;
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        assert_eq!(g.len(), c, "group_norm gamma size");
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        let mut means = Vec::with_capacity(groups);
        let mut rstds = Vec::with_capacity(groups);
        let n = T::of(gsize as f64);
        for gi in 0..groups {
            let chunk = &src[gi * gsize..(gi + 1) * gsize];
            let mean = chunk.iter().copied().sum::<T>() / n;
            let var = chunk.iter().map(|&a| (a - mean) * (a - mean)).sum::<T>() / n;
            let rstd = T::one() / (var + T::of(eps)).sqrt();
            means.push(mean);
            rstds.push(rstd);
            for cl in 0..c / groups {
                let ch = gi * (c / groups) + cl;
                let off = ch * per_c;
                let (gm, bb) = (g[ch], bt[ch]);
                for (o, &a) in out[off..off + per_c].iter_mut().zip(&src[off..off + per_c]) {
                    *o = (a - mean) * rstd * gm + bb;
                }
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let shape = v.shape().to_vec();
        self.push(
            Tensor::new(&shape, out),
            Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds },
            rg,
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|a| a / (T::one() + (-a).exp()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Silu { x }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add { a, b }, rg)
    }

    /// `x[c, ...] + v[c]`.
    pub fn add_channel_bias(&mut self, x: Var, v: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.dim(0);
        let vals = self.value(v).data();
        assert_eq!(vals.len(), c, "add_channel_bias size");
        let per_c = out.len() / c;
        for (row, &bv) in out.data_mut().chunks_mut(per_c).zip(vals) {
            for a in row {
                *a += bv;
            }
        }
        let rg = self.rg(&[x, v]);
        self.push(out, Op::AddChannelBias { x, v }, rg)
    }

    /// `scale * mask ⊙ x` with a constant spatial mask broadcast over channels.
    pub fn mask_scale(&mut self, x: Var, mask: &[T], scale: T) -> Var {
        let v = self.value(x);
        let c = v.dim(0);
        let per_c = v.len() / c;
        assert_eq!(mask.len(), per_c, "mask_scale: mask size");
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(per_c) {
            for (a, &m) in row.iter_mut().zip(mask) {
                *a = scale * (m * *a);
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::MaskScale { x, mask: mask.to_vec(), scale }, rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|a| a * s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, s }, rg)
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let tail = self.value(parts[0]).shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], &tail[..], "concat trailing shape mismatch");
            lead += v.dim(0);
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg(parts);
        self.push(Tensor::new(&shape, data), Op::Concat { parts: parts.to_vec() }, rg)
    }

    /// `x: [N, Din]`, `w: [Dout, Din]`, `b: [Dout]` → `[N, Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (n, din) = mat(self.value(x).shape());
        let (dout, din_w) = mat(self.value(w).shape());
        assert_eq!(din, din_w, "linear: input width mismatch");
        let mut out = vec![T::zero(); n * dout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(n, din, dout, T::one(), self.value(x).data(), false, self.value(w).data(), true, beta, &mut out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        self.push(Tensor::new(&[n, dout], out), Op::Linear { x, w, b }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let (ar, ac) = mat(self.value(a).shape());
        let (br, bc) = mat(self.value(b).shape());
        let (m, k) = if trans_a { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if trans_b { (bc, br) } else { (br, bc) };
        assert_eq!(k, k2, "matmul inner dimension mismatch");
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, T::one(), self.value(a).data(), trans_a, self.value(b).data(), trans_b, T::zero(), &mut out);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(&[m, n], out), Op::MatMul { a, b, trans_a, trans_b }, rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (_, cols) = mat(v.shape());
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(cols) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &a| m.max(a));
            let mut s = T::zero();
            for a in row.iter_mut() {
                *a = (*a - mx).exp();
                s += *a;
            }
            for a in row.iter_mut() {
                *a = *a / s;
            }
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows { x }, rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (r, c) = mat(v.shape());
        let out = transpose2d(r, c, v.data());
        let rg = self.rg(&[x]);
        self.push(Tensor::new(&[c, r], out), Op::Transpose { x }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape { x }, rg)
    }

    /// Backpropagate `seed` (the gradient of some scalar w.r.t. `root`).
    pub fn backward(&self, root: Var, seed: Tensor<T>) -> Grads<T> {
        assert_eq!(seed.shape(), self.value(root).shape(), "backward seed shape");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Grads { grads };
        }
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backward_node(node, &gout, &mut grads);
        }
        Grads { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        debug_assert_eq!(g.shape(), self.value(v).shape(), "gradient shape");
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (cin, h, wd) = chw(xv.shape());
                let geo = ConvGeom::new(cin, h, wd, wv.dim(2), *stride, *pad);
                let cout = wv.dim(0);
                let n = geo.n_out();
                let go = gout.data();
                if let Some(b) = b {
                    if rg(*b) {
                        let gb: Vec<T> = go.chunks(n).map(|r| r.iter().copied().sum()).collect();
                        self.accum(grads, *b, Tensor::new(&[cout], gb));
                    }
                }
                let need_w = rg(*w);
                let need_x = rg(*x);
                if need_w {
                    let mut gw = vec![T::zero(); cout * geo.k_rows()];
                    if geo.is_pointwise() {
                        gemm(cout, n, geo.k_rows(), T::one(), go, false, xv.data(), true, T::zero(), &mut gw);
                    } else {
                        let col = geo.im2col(xv.data());
                        gemm(cout, n, geo.k_rows(), T::one(), go, false, &col, true, T::zero(), &mut gw);
                    }
                    self.accum(grads, *w, Tensor::new(wv.shape(), gw));
                }
                if need_x {
                    let mut gcol = vec![T::zero(); geo.k_rows() * n];
                    gemm(geo.k_rows(), cout, n, T::one(), wv.data(), true, go, false, T::zero(), &mut gcol);
                    let gx = if geo.is_pointwise() { gcol } else { geo.col2im(&gcol) };
                    self.accum(grads, *x, Tensor::new(xv.shape(), gx));
                }
            }
            Op::UpsampleNearest2x { x } => {
                let (c, h, w) = chw(self.value(*x).shape());
                let go = gout.data();
                let mut gx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        let grow = &go[ch * 4 * h * w + y * 2 * w..][..2 * w];
                        let drow = &mut gx[ch * h * w + (y / 2) * w..][..w];
                        for (xx, &g) in grow.iter().enumerate() {
                            drow[xx / 2] += g;
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(&[c, h, w], gx));
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let xv = self.value(*x);
                let c = xv.dim(0);
                let per_c = xv.len() / c;
                let cpg = c / groups;
                let gsize = cpg * per_c;
                let gm = self.value(*gamma).data();
                let src = xv.data();
                let go = gout.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut gx = vec![T::zero(); src.len()];
                let nf = T::of(gsize as f64);
                for gi in 0..*groups {
                    let (mu, rs) = (mean[gi], rstd[gi]);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for cl in 0..cpg {
                        let ch = gi * cpg + cl;
                        let off = ch * per_c;
                        let mut dgc = T::zero();
                        let mut dbc = T::zero();
                        for j in off..off + per_c {
                            let xhat = (src[j] - mu) * rs;
                            dgc += go[j] * xhat;
                            dbc += go[j];
                            let dxhat = go[j] * gm[ch];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        dgamma[ch] = dgc;
                        dbeta[ch] = dbc;
                    }
                    if rg(*x) {
                        for cl in 0..cpg {
                            let ch = gi * cpg + cl;
                            let off = ch * per_c;
                            for j in off..off + per_c {
                                let xhat = (src[j] - mu) * rs;
                                let dxhat = go[j] * gm[ch];
                                gx[j] = rs / nf * (nf * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
                            }
                        }
                    }
                    let _ = gsize;
                }
                if rg(*gamma) {
                    self.accum(grads, *gamma, Tensor::new(&[c], dgamma));
                }
                if rg(*beta) {
                    self.accum(grads, *beta, Tensor::new(&[c], dbeta));
                }
                if rg(*x) {
                    self.accum(grads, *x, Tensor::new(xv.shape(), gx));
                }
            }
            Op::Silu { x } => {
                let xv = self.value(*x);
                let gx: Vec<T> = xv
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(&a, &g)| {
                        let s = T::one() / (T::one() + (-a).exp());
                        g * s * (T::one() + a * (T::one() - s))
                    })
                    .collect();
                self.accum(grads, *x, Tensor::new(xv.shape(), gx));
            }
            Op::Add { a, b } => {
                if rg(*a) {
                    self.accum(grads, *a, gout.clone());
                }
                if rg(*b) {
                    self.accum(grads, *b, gout.clone());
                }
            }
            Op::AddChannelBias { x, v } => {
                if rg(*x) {
                    self.accum(grads, *x, gout.clone());
                }
                if rg(*v) {
                    let c = gout.dim(0);
                    let per_c = gout.len() / c;
                    let gv: Vec<T> = gout.data().chunks(per_c).map(|r| r.iter().copied().sum()).collect();
                    let shape = self.value(*v).shape().to_vec();
                    self.accum(grads, *v, Tensor::new(&shape, gv));
                }
            }
            Op::MaskScale { x, mask, scale } => {
                let per_c = mask.len();
                let mut gx = gout.clone();
                for row in gx.data_mut().chunks_mut(per_c) {
                    for (g, &m) in row.iter_mut().zip(mask) {
                        *g = *scale * (m * *g);
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::Scale { x, s } => {
                self.accum(grads, *x, gout.map(|g| g * *s));
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let len = self.value(p).len();
                    if rg(p) {
                        self.accum(grads, p, Tensor::new(&shape, gout.data()[off..off + len].to_vec()));
                    }
                    off += len;
                }
            }
            Op::Linear { x, w, b } => {
                let (n, din) = mat(self.value(*x).shape());
                let (dout, _) = mat(self.value(*w).shape());
                let go = gout.data();
                if let Some(b) = b {
                    if rg(*b) {
                        let mut gb = vec![T::zero(); dout];
                        for row in go.chunks(dout) {
                            for (a, &g) in gb.iter_mut().zip(row) {
                                *a += g;
                            }
                        }
                        self.accum(grads, *b, Tensor::new(&[dout], gb));
                    }
                }
                if rg(*w) {
                    let mut gw = vec![T::zero(); dout * din];
                    gemm(dout, n, din, T::one(), go, true, self.value(*x).data(), false, T::zero(), &mut gw);
                    self.accum(grads, *w, Tensor::new(&[dout, din], gw));
                }
                if rg(*x) {
                    let mut gx = vec![T::zero(); n * din];
                    gemm(n, dout, din, T::one(), go, false, self.value(*w).data(), false, T::zero(), &mut gx);
                    let shape = self.value(*x).shape().to_vec();
                    self.accum(grads, *x, Tensor::new(&shape, gx));
                }
            }
            Op::MatMul { a, b, trans_a, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, n) = mat(gout.shape());
                let (ar, ac) = mat(av.shape());
                let k = if *trans_a { ar } else { ac };
                let go = gout.data();
                if rg(*a) {
                    // C = op(A) op(B): dop(A) = G op(B)^T
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), go, false, bv.data(), !*trans_b, T::zero(), &mut ga);
                    let ga = if *trans_a { transpose2d(m, k, &ga) } else { ga };
                    self.accum(grads, *a, Tensor::new(av.shape(), ga));
                }
                if rg(*b) {
                    // dop(B) = op(A)^T G
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, T::one(), av.data(), !*trans_a, go, false, T::zero(), &mut gb);
                    let gb = if *trans_b { transpose2d(k, n, &gb) } else { gb };
                    self.accum(grads, *b, Tensor::new(bv.shape(), gb));
                }
            }
            Op::SoftmaxRows { x } => {
                let y = &node.value;
                let (_, cols) = mat(y.shape());
                let mut gx = gout.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&g, &p)| g * p).sum();
                    for (g, &p) in grow.iter_mut().zip(yrow) {
                        *g = p * (*g - dot);
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::Transpose { x } => {
                let (r, c) = mat(gout.shape());
                let shape = self.value(*x).shape().to_vec();
                self.accum(grads, *x, Tensor::new(&shape, transpose2d(r, c, gout.data())));
            }
            Op::Reshape { x } => {
                let shape = self.value(*x).shape().to_vec();
                self.accum(grads, *x, gout.clone().reshape(&shape));
            }
        }
    }
}

fn chw(s: &[usize]) -> (usize, usize, usize) {
    assert_eq!(s.len(), 3, "expected [C,H,W], got {s:?}");
    (s[0], s[1], s[2])
}

fn mat(s: &[usize]) -> (usize, usize) {
    assert_eq!(s.len(), 2, "expected a matrix, got {s:?}");
    (s[0], s[1])
}

pub(crate) fn transpose2d<T: Copy + Default>(r: usize, c: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::default(); r * c];
    const B: usize = 32;
    for i0 in (0..r).step_by(B) {
        for j0 in (0..c).step_by(B) {
            for i in i0..(i0 + B).min(r) {
                for j in j0..(j0 + B).min(c) {
                    out[j * r + i] = src[i * c + j];
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "conv2d kernel larger than padded input");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        Self { cin, h, w, k, stride, pad, ho, wo }
    }

    fn n_out(&self) -> usize {
        self.ho * self.wo
    }

    fn k_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `kk`.
    fn valid(&self, kk: usize, len: usize, out_len: usize) -> (usize, usize) {
        // input index = o*stride + kk - pad must lie in [0, len)
        let lo = if self.pad > kk { (self.pad - kk).div_ceil(self.stride) } else { 0 };
        let hi = if len + self.pad > kk { ((len + self.pad - kk - 1) / self.stride + 1).min(out_len) } else { 0 };
        (lo, hi.max(lo))
    }

    fn im2col<T: Float>(&self, x: &[T]) -> Vec<T> {
        let n = self.n_out();
        let mut col = vec![T::zero(); self.k_rows() * n];
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                let (ylo, yhi) = self.valid(ki, self.h, self.ho);
                for kj in 0..self.k {
                    let (xlo, xhi) = self.valid(kj, self.w, self.wo);
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut col[row * n..(row + 1) * n];
                    for oy in ylo..yhi {
                        let iy = oy * self.stride + ki - self.pad;
                        let srow = &plane[iy * self.w..(iy + 1) * self.w];
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if self.stride == 1 {
                            let ix0 = xlo + kj - self.pad;
                            drow[xlo..xhi].copy_from_slice(&srow[ix0..ix0 + (xhi - xlo)]);
                        } else {
                            for ox in xlo..xhi {
                                drow[ox] = srow[ox * self.stride + kj - self.pad];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im<T: Float>(&self, col: &[T]) -> Vec<T> {
        let n = self.n_out();
        let mut x = vec![T::zero(); self.cin * self.h * self.w];
        for c in 0..self.cin {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                let (ylo, yhi) = self.valid(ki, self.h, self.ho);
                for kj in 0..self.k {
                    let (xlo, xhi) = self.valid(kj, self.w, self.wo);
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &col[row * n..(row + 1) * n];
                    for oy in ylo..yhi {
                        let iy = oy * self.stride + ki - self.pad;
                        let prow = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let srow = &src[oy * self.wo..(oy + 1) * self.wo];
                        for ox in xlo..xhi {
                            prow[ox * self.stride + kj - self.pad] += srow[ox];
                        }
                    }
                }
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Direct-loop convolution oracle.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
        let (cin, h, wd) = chw(x.shape());
        let (cout, k) = (w.dim(0), w.dim(2));
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b[co];
                    for ci in 0..cin {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += w.data()[((co * cin + ci) * k + ki) * k + kj]
                                        * x.data()[(ci * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = s;
                }
            }
        }
        Tensor::new(&[cout, ho, wo], out)
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(cin, cout, h, w, k, stride, pad) in
            &[(3, 4, 7, 6, 3, 1, 1), (2, 5, 8, 8, 3, 2, 1), (4, 3, 5, 5, 1, 1, 0), (2, 2, 8, 8, 4, 4, 0)]
        {
            let x = rand_tensor(&mut rng, &[cin, h, w]);
            let wt = rand_tensor(&mut rng, &[cout, cin, k, k]);
            let b = rand_tensor(&mut rng, &[cout]);
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.input(x.clone()), g.input(wt.clone()), g.input(b.clone()));
            let y = g.conv2d(xv, wv, Some(bv), stride, pad);
            let want = conv_naive(&x, &wt, b.data(), stride, pad);
            assert!(g.value(y).max_abs_diff(&want) < 1e-12);
        }
    }

    /// Scalar objective `sum(r ⊙ f(inputs))` differentiated analytically and by
    /// central differences on every input coordinate.
    fn check_grads(
        inputs: Vec<Tensor<f64>>,
        f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars);
        let r = rand_tensor(&mut rng, g.value(out).shape());
        let grads = g.backward(out, r.clone());
        let objective = |ins: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone(), true)).collect();
            let o = f(&mut g, &vars);
            g.value(o).data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-6;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).expect("gradient present");
            for j in 0..t.len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let an = analytic.data()[j];
                let tol = 1e-6 * (1.0 + fd.abs());
                assert!((fd - an).abs() < tol, "input {i} coord {j}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1)] {
            let x = rand_tensor(&mut rng, &[2, 5, 5]);
            let w = rand_tensor(&mut rng, &[3, 2, k, k]);
            let b = rand_tensor(&mut rng, &[3]);
            check_grads(vec![x, w, b], move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad));
        }
    }

    #[test]
    fn group_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[4, 3, 3]);
        let gm = rand_tensor(&mut rng, &[4]);
        let bt = rand_tensor(&mut rng, &[4]);
        check_grads(vec![x, gm, bt], |g, v| g.group_norm(v[0], v[1], v[2], 2, 1e-5));
    }

    #[test]
    fn elementwise_and_shape_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[2, 3, 3]);
        let y = rand_tensor(&mut rng, &[2, 3, 3]);
        let v = rand_tensor(&mut rng, &[2]);
        check_grads(vec![x.clone(), y.clone(), v], |g, v| {
            let s = g.silu(v[0]);
            let a = g.add(s, v[1]);
            let b = g.add_channel_bias(a, v[2]);
            let u = g.upsample_nearest2x(b);
            let m: Vec<f64> = (0..36).map(|i| (i % 3 == 0) as u8 as f64).collect();
            let ms = g.mask_scale(u, &m, 0.7);
            let c = g.concat(&[ms, u]);
            g.scale(c, -1.3)
        });
    }

    #[test]
    fn attention_path_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[4, 2, 3]);
        let ctx = rand_tensor(&mut rng, &[5, 6]);
        let wq = rand_tensor(&mut rng, &[4, 4]);
        let wk = rand_tensor(&mut rng, &[4, 6]);
        let wv = rand_tensor(&mut rng, &[4, 6]);
        let bo = rand_tensor(&mut rng, &[4]);
        check_grads(vec![x, ctx, wq, wk, wv, bo], |g, v| {
            let flat = g.reshape(v[0], &[4, 6]);
            let tok = g.transpose(flat);
            let q = g.linear(tok, v[2], None);
            let k = g.linear(v[1], v[3], None);
            let val = g.linear(v[1], v[4], Some(v[5]));
            let s = g.matmul(q, k, false, true);
            let s = g.scale(s, 0.5);
            let p = g.softmax_rows(s);
            let o = g.matmul(p, val, false, false);
            let back = g.transpose(o);
            g.reshape(back, &[4, 2, 3])
        });
    }

    #[test]
    fn matmul_transposed_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[5, 3]);
        check_grads(vec![a, b], |g, v| g.matmul(v[0], v[1], true, true));
    }

    #[test]
    fn constant_branches_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let frozen = g.input(Tensor::full(&[1, 2, 2], 1.0));
        let w = g.leaf(Tensor::full(&[1, 1, 1, 1], 2.0), true);
        let y0 = g.silu(frozen);
        let y1 = g.conv2d(y0, w, None, 1, 0);
        let grads = g.backward(y1, Tensor::full(&[1, 2, 2], 1.0));
        assert!(grads.get(frozen).is_none());
        assert!(grads.get(y0).is_none());
        assert!(grads.get(w).is_some());
    }
}
