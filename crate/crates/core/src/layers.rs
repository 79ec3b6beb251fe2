//! Building blocks shared by the backbone UNet and the control branch.

use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::params::{Binder, Init, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

pub const NORM_GROUPS: usize = 8;
pub const NORM_EPS: f64 = 1e-5;

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, T> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Float> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        Builder { store: self.store, rng: self.rng, prefix }
    }

    fn add(&mut self, name: &str, t: Tensor<T>) -> ParamId {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        self.store.add(full, t)
    }

    fn init(&mut self) -> Init<'_> {
        Init { rng: self.rng }
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<T: Float>(bld: &mut Builder<T>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        let fan = cin * k * k;
        let w = bld.init().fan_in(&[cout, cin, k, k], fan);
        let b = bld.init().fan_in(&[cout], fan);
        Self { w: bld.add("w", w), b: bld.add("b", b), stride, pad: k / 2 }
    }

    /// A 1×1 convolution whose weights and bias start at exactly zero.
    pub fn zeros<T: Float>(bld: &mut Builder<T>, channels: usize) -> Self {
        let w = bld.add("w", Tensor::zeros(&[channels, channels, 1, 1]));
        let b = bld.add("b", Tensor::zeros(&[channels]));
        Self { w, b, stride: 1, pad: 0 }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var) -> Var {
        let w = p.var(g, self.w);
        let b = p.var(g, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Float>(bld: &mut Builder<T>, c: usize) -> Self {
        Self { gamma: bld.add("gamma", Tensor::full(&[c], T::one())), beta: bld.add("beta", Tensor::zeros(&[c])) }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var) -> Var {
        let gm = p.var(g, self.gamma);
        let bt = p.var(g, self.beta);
        g.group_norm(x, gm, bt, NORM_GROUPS, NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Float>(bld: &mut Builder<T>, din: usize, dout: usize, bias: bool) -> Self {
        let w = bld.init().fan_in(&[dout, din], din);
        let w = bld.add("w", w);
        let b = bias.then(|| {
            let b = bld.init().fan_in(&[dout], din);
            bld.add("b", b)
        });
        Self { w, b }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var) -> Var {
        let w = p.var(g, self.w);
        let b = self.b.map(|b| p.var(g, b));
        g.linear(x, w, b)
    }
}

/// Sinusoidal timestep features followed by a two-layer projection.
#[derive(Debug, Clone)]
pub struct TimeEmbed {
    pub freq_dim: usize,
    pub lin1: Linear,
    pub lin2: Linear,
}

impl TimeEmbed {
    pub fn new<T: Float>(bld: &mut Builder<T>, freq_dim: usize, dim: usize) -> Self {
        Self {
            freq_dim,
            lin1: Linear::new(&mut bld.sub("lin1"), freq_dim, dim, true),
            lin2: Linear::new(&mut bld.sub("lin2"), dim, dim, true),
        }
    }

    pub fn sinusoidal<T: Float>(t: usize, dim: usize) -> Tensor<T> {
        let half = dim / 2;
        let mut out = vec![T::zero(); dim];
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            let arg = t as f64 * freq;
            out[i] = T::of(arg.cos());
            out[half + i] = T::of(arg.sin());
        }
        Tensor::new(&[1, dim], out)
    }

    /// Returns `silu(emb)` of shape `[1, dim]`, the form every block consumes.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &mut Binder<T>, t: usize) -> Var {
        let x = g.input(Self::sinusoidal(t, self.freq_dim));
        let h = self.lin1.forward(g, p, x);
        let h = g.silu(h);
        let h = self.lin2.forward(g, p, h);
        g.silu(h)
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub norm1: Norm,
    pub conv1: Conv,
    pub temb: Linear,
    pub norm2: Norm,
    pub conv2: Conv,
    pub skip: Option<Conv>,
    pub cout: usize,
}

impl ResBlock {
    pub fn new<T: Float>(bld: &mut Builder<T>, cin: usize, cout: usize, temb_dim: usize) -> Self {
        Self {
            norm1: Norm::new(&mut bld.sub("norm1"), cin),
            conv1: Conv::new(&mut bld.sub("conv1"), cin, cout, 3, 1),
            temb: Linear::new(&mut bld.sub("temb"), temb_dim, cout, true),
            norm2: Norm::new(&mut bld.sub("norm2"), cout),
            conv2: Conv::new(&mut bld.sub("conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv::new(&mut bld.sub("skip"), cin, cout, 1, 1)),
            cout,
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var, temb: Var) -> Var {
        let h = self.norm1.forward(g, p, x);
        let h = g.silu(h);
        let h = self.conv1.forward(g, p, h);
        let tb = self.temb.forward(g, p, temb);
        let tb = g.reshape(tb, &[self.cout]);
        let h = g.add_channel_bias(h, tb);
        let h = self.norm2.forward(g, p, h);
        let h = g.silu(h);
        let h = self.conv2.forward(g, p, h);
        let skip = match &self.skip {
            Some(s) => s.forward(g, p, x),
            None => x,
        };
        g.add(skip, h)
    }
}

/// Single-head cross-attention from spatial positions to a token context,
/// added residually.
#[derive(Debug, Clone)]
pub struct CrossAttn {
    pub norm: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub channels: usize,
}

impl CrossAttn {
    pub fn new<T: Float>(bld: &mut Builder<T>, channels: usize, ctx_dim: usize) -> Self {
        Self {
            norm: Norm::new(&mut bld.sub("norm"), channels),
            q: Linear::new(&mut bld.sub("q"), channels, channels, false),
            k: Linear::new(&mut bld.sub("k"), ctx_dim, channels, false),
            v: Linear::new(&mut bld.sub("v"), ctx_dim, channels, false),
            out: Linear::new(&mut bld.sub("out"), channels, channels, true),
            channels,
        }
    }

    /// The projection parameters (the norm is not part of the projections).
    pub fn projection_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.q.w, self.k.w, self.v.w, self.out.w];
        ids.extend(self.out.b);
        ids
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var, ctx: Var) -> Var {
        let shape = g.value(x).shape().to_vec();
        let (c, hw) = (shape[0], shape[1] * shape[2]);
        let h = self.norm.forward(g, p, x);
        let h = g.reshape(h, &[c, hw]);
        let tokens = g.transpose(h);
        let q = self.q.forward(g, p, tokens);
        let k = self.k.forward(g, p, ctx);
        let v = self.v.forward(g, p, ctx);
        let scores = g.matmul(q, k, false, true);
        let scores = g.scale(scores, T::of(1.0 / (self.channels as f64).sqrt()));
        let attn = g.softmax_rows(scores);
        let o = g.matmul(attn, v, false, false);
        let o = self.out.forward(g, p, o);
        let o = g.transpose(o);
        let o = g.reshape(o, &shape);
        g.add(x, o)
    }
}

/// A residual block followed by cross-attention.
#[derive(Debug, Clone)]
pub struct Block {
    pub res: ResBlock,
    pub attn: CrossAttn,
}

impl Block {
    pub fn new<T: Float>(bld: &mut Builder<T>, cin: usize, cout: usize, temb_dim: usize, ctx_dim: usize) -> Self {
        Self {
            res: ResBlock::new(&mut bld.sub("res"), cin, cout, temb_dim),
            attn: CrossAttn::new(&mut bld.sub("attn"), cout, ctx_dim),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &mut Binder<T>, x: Var, temb: Var, ctx: Var) -> Var {
        let h = self.res.forward(g, p, x, temb);
        self.attn.forward(g, p, h, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn sinusoidal_embedding_at_zero() {
        let e: Tensor<f64> = TimeEmbed::sinusoidal(0, 8);
        assert_eq!(e.data(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_conv_outputs_zero() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv::zeros(&mut Builder::new(&mut store, &mut rng).sub("z"), 4);
        let mut g = Graph::new();
        let mut p = Binder::frozen(&store);
        let x = g.input(Tensor::full(&[4, 3, 3], 7.5));
        let y = conv.forward(&mut g, &mut p, x);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert_eq!(store.name(conv.w), "z.w");
    }

    #[test]
    fn block_preserves_spatial_shape() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut bld = Builder::new(&mut store, &mut rng);
        let block = Block::new(&mut bld.sub("blk"), 8, 16, 12, 10);
        let temb = TimeEmbed::new(&mut bld.sub("t"), 6, 12);
        let mut g = Graph::new();
        let mut p = Binder::frozen(&store);
        let x = g.input(Tensor::full(&[8, 5, 4], 0.3));
        let ctx = g.input(Tensor::full(&[3, 10], 0.1));
        let te = temb.forward(&mut g, &mut p, 17);
        let y = block.forward(&mut g, &mut p, x, te, ctx);
        assert_eq!(g.value(y).shape(), &[16, 5, 4]);
        assert!(g.value(y).all_finite());
    }
}
