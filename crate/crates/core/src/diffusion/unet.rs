//! The text-conditioned denoising UNet.
//!
//! Four resolution levels (64, 32, 16, 8 px) with three residual +
//! cross-attention blocks each on both the encoder and decoder side, plus a
//! middle block at 8 px. The encoder exposes 13 tap points:
//!
//! | tap | feature                     | resolution |
//! |-----|-----------------------------|------------|
//! | c0  | middle block output         | 8 px       |
//! | c1..c3   | encoder skips 12..10   | 8 px       |
//! | c4..c6   | encoder skips 9..7     | 16 px      |
//! | c7..c9   | encoder skips 6..4     | 32 px      |
//! | c10..c12 | encoder skips 3..1     | 64 px      |
//!
//! Skip `k` is the output of the `k`-th encoder block counted from the
//! shallowest. Tap `i >= 1` is added to the skip consumed by the `i`-th
//! decoder block, so taps run deepest to shallowest.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Block, Builder, Conv, CrossAttn, Norm, ResBlock, TimeEmbed};
use crate::params::{Binder, ParamStore};
use crate::tensor::Float;

pub const NUM_TAPS: usize = 13;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub widths: [usize; 4],
    pub blocks_per_level: usize,
    pub time_freq_dim: usize,
    pub time_dim: usize,
    pub ctx_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            in_channels: 3,
            widths: [32, 64, 96, 128],
            blocks_per_level: 3,
            time_freq_dim: 32,
            time_dim: 128,
            ctx_dim: 128,
        }
    }
}

impl UNetConfig {
    /// `(channels, resolution)` of tap `i`.
    pub fn tap_shape(&self, tap: usize) -> (usize, usize) {
        assert!(tap < NUM_TAPS, "tap index {tap} out of range");
        if tap == 0 {
            return (self.widths[3], self.image_size >> 3);
        }
        let level = 3 - (tap - 1) / self.blocks_per_level;
        (self.widths[level], self.image_size >> level)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks_per_level * 4 + 1 != NUM_TAPS {
            return Err(Error::validation("blocks_per_level", "must give 13 tap points"));
        }
        if !self.image_size.is_multiple_of(8) {
            return Err(Error::validation("image_size", "must be divisible by 8"));
        }
        Ok(())
    }
}

pub(crate) fn check_finite<T: Float>(g: &Graph<T>, v: Var, layer: &str) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { layer: layer.to_string() })
    }
}

/// Outputs of the downsampling half.
pub struct EncoderOut {
    /// Shallowest first, `4 * blocks_per_level` entries.
    pub skips: Vec<Var>,
    pub mid: Var,
    pub temb: Var,
}

/// Time embedding, input convolution, downsampling path and middle block.
/// Shared verbatim by the backbone and the control branch, which is what
/// makes copying weights between them a name-for-name operation.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub time: TimeEmbed,
    pub conv_in: Conv,
    pub levels: Vec<Vec<Block>>,
    pub down: Vec<Conv>,
    pub mid_res1: ResBlock,
    pub mid_attn: CrossAttn,
    pub mid_res2: ResBlock,
}

impl Encoder {
    pub fn new<T: Float>(bld: &mut Builder<T>, cfg: &UNetConfig) -> Self {
        let w = cfg.widths;
        let time = TimeEmbed::new(&mut bld.sub("time"), cfg.time_freq_dim, cfg.time_dim);
        let conv_in = Conv::new(&mut bld.sub("conv_in"), cfg.in_channels, w[0], 3, 1);
        let mut levels = Vec::new();
        let mut down = Vec::new();
        for lvl in 0..4 {
            let mut blocks = Vec::new();
            for i in 0..cfg.blocks_per_level {
                let cin = if i == 0 && lvl > 0 { w[lvl - 1] } else { w[lvl] };
                blocks.push(Block::new(&mut bld.sub(&format!("enc.{lvl}.{i}")), cin, w[lvl], cfg.time_dim, cfg.ctx_dim));
            }
            levels.push(blocks);
            if lvl < 3 {
                down.push(Conv::new(&mut bld.sub(&format!("down.{lvl}")), w[lvl], w[lvl], 3, 2));
            }
        }
        Self {
            time,
            conv_in,
            levels,
            down,
            mid_res1: ResBlock::new(&mut bld.sub("mid.res1"), w[3], w[3], cfg.time_dim),
            mid_attn: CrossAttn::new(&mut bld.sub("mid.attn"), w[3], cfg.ctx_dim),
            mid_res2: ResBlock::new(&mut bld.sub("mid.res2"), w[3], w[3], cfg.time_dim),
        }
    }

    /// Every cross-attention layer, encoder blocks first, then the middle.
    pub fn attentions(&self) -> Vec<&CrossAttn> {
        let mut out: Vec<&CrossAttn> = self.levels.iter().flatten().map(|b| &b.attn).collect();
        out.push(&self.mid_attn);
        out
    }

    /// `input_add`, when present, is added to the output of `conv_in`.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        z: Var,
        t: usize,
        ctx: Var,
        input_add: Option<Var>,
    ) -> Result<EncoderOut> {
        let temb = self.time.forward(g, p, t);
        let mut h = self.conv_in.forward(g, p, z);
        if let Some(a) = input_add {
            h = g.add(h, a);
        }
        let mut skips = Vec::new();
        for (lvl, blocks) in self.levels.iter().enumerate() {
            if lvl > 0 {
                h = self.down[lvl - 1].forward(g, p, h);
            }
            for (i, block) in blocks.iter().enumerate() {
                h = block.forward(g, p, h, temb, ctx);
                check_finite(g, h, &format!("enc.{lvl}.{i}"))?;
                skips.push(h);
            }
        }
        let h = self.mid_res1.forward(g, p, h, temb);
        let h = self.mid_attn.forward(g, p, h, ctx);
        let mid = self.mid_res2.forward(g, p, h, temb);
        check_finite(g, mid, "mid")?;
        Ok(EncoderOut { skips, mid, temb })
    }
}

/// The frozen backbone ε_θ(z_t, t, c).
#[derive(Debug, Clone)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub encoder: Encoder,
    pub dec: Vec<Vec<Block>>,
    pub up: Vec<Conv>,
    pub out_norm: Norm,
    pub out_conv: Conv,
}

impl UNet {
    /// Register a freshly initialized backbone into `store`.
    pub fn build<T: Float>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &UNetConfig) -> Self {
        let mut bld = Builder::new(store, rng);
        let encoder = Encoder::new(&mut bld, cfg);
        let w = cfg.widths;
        let mut dec = vec![Vec::new(); 4];
        let mut up = Vec::new();
        let mut prev = w[3];
        for lvl in (0..4).rev() {
            for i in 0..cfg.blocks_per_level {
                let cin = prev + w[lvl];
                dec[lvl].push(Block::new(&mut bld.sub(&format!("dec.{lvl}.{i}")), cin, w[lvl], cfg.time_dim, cfg.ctx_dim));
                prev = w[lvl];
            }
            if lvl > 0 {
                up.push(Conv::new(&mut bld.sub(&format!("up.{lvl}")), w[lvl], w[lvl], 3, 1));
            }
        }
        Self {
            cfg: cfg.clone(),
            encoder,
            dec,
            up,
            out_norm: Norm::new(&mut bld.sub("out.norm"), w[0]),
            out_conv: Conv::new(&mut bld.sub("out.conv"), w[0], cfg.in_channels, 3, 1),
        }
    }

    /// Rebuild the layer structure without keeping the random values; used
    /// when parameters come from a checkpoint.
    pub fn structure(cfg: &UNetConfig) -> (Self, ParamStore<f32>) {
        use rand::SeedableRng;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Self::build(&mut store, &mut rng, cfg);
        (net, store)
    }

    /// Forward pass. `controls[i]`, when present, is added at tap `i`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        z: Var,
        t: usize,
        ctx: Var,
        controls: Option<&[Option<Var>]>,
    ) -> Result<Var> {
        if let Some(c) = controls {
            assert_eq!(c.len(), NUM_TAPS, "controls must have one slot per tap");
        }
        let tap = |i: usize| controls.and_then(|c| c[i]);
        let EncoderOut { mut skips, mid, temb } = self.encoder.forward(g, p, z, t, ctx, None)?;
        let mut h = mid;
        if let Some(c) = tap(0) {
            h = g.add(h, c);
        }
        let mut up = self.up.iter();
        for lvl in (0..4).rev() {
            for (i, block) in self.dec[lvl].iter().enumerate() {
                let mut s = skips.pop().expect("one skip per decoder block");
                if let Some(c) = tap(NUM_TAPS - 1 - skips.len()) {
                    s = g.add(s, c);
                }
                let x = g.concat(&[h, s]);
                h = block.forward(g, p, x, temb, ctx);
                check_finite(g, h, &format!("dec.{lvl}.{i}"))?;
            }
            if lvl > 0 {
                h = g.upsample_nearest2x(h);
                h = up.next().expect("one upsampler per level").forward(g, p, h);
            }
        }
        let h = self.out_norm.forward(g, p, h);
        let h = g.silu(h);
        let out = self.out_conv.forward(g, p, h);
        check_finite(g, out, "out")?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    fn small_cfg() -> UNetConfig {
        UNetConfig { image_size: 16, widths: [8, 8, 16, 16], time_freq_dim: 8, time_dim: 16, ctx_dim: 8, ..Default::default() }
    }

    #[test]
    fn tap_shapes_run_deep_to_shallow() {
        let cfg = UNetConfig::default();
        assert_eq!(cfg.tap_shape(0), (128, 8));
        assert_eq!(cfg.tap_shape(3), (128, 8));
        assert_eq!(cfg.tap_shape(4), (96, 16));
        assert_eq!(cfg.tap_shape(9), (64, 32));
        assert_eq!(cfg.tap_shape(10), (32, 64));
        assert_eq!(cfg.tap_shape(12), (32, 64));
    }

    #[test]
    fn encoder_emits_twelve_skips_matching_tap_shapes() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f32>::new();
        let net = UNet::build(&mut store, &mut ChaCha8Rng::seed_from_u64(1), &cfg);
        let mut g = Graph::new();
        let mut p = Binder::frozen(&store);
        let z = g.input(Tensor::full(&[3, 16, 16], 0.1));
        let ctx = g.input(Tensor::full(&[4, 8], 0.2));
        let out = net.encoder.forward(&mut g, &mut p, z, 5, ctx, None).unwrap();
        assert_eq!(out.skips.len(), 12);
        let (c, r) = cfg.tap_shape(0);
        assert_eq!(g.value(out.mid).shape(), &[c, r, r]);
        for tap in 1..NUM_TAPS {
            let (c, r) = cfg.tap_shape(tap);
            assert_eq!(g.value(out.skips[12 - tap]).shape(), &[c, r, r], "tap {tap}");
        }
    }

    #[test]
    fn output_shape_matches_input_and_is_deterministic() {
        let cfg = small_cfg();
        let mut store = ParamStore::<f32>::new();
        let net = UNet::build(&mut store, &mut ChaCha8Rng::seed_from_u64(1), &cfg);
        let run = || {
            let mut g = Graph::new();
            let mut p = Binder::frozen(&store);
            let z = g.input(Tensor::new(&[3, 16, 16], (0..768).map(|i| (i as f32 * 0.01).sin()).collect()));
            let ctx = g.input(Tensor::full(&[4, 8], 0.2));
            let y = net.forward(&mut g, &mut p, z, 9, ctx, None).unwrap();
            g.value(y).clone()
        };
        let a = run();
        assert_eq!(a.shape(), &[3, 16, 16]);
        assert!(a.bit_eq(&run()));
    }
}
