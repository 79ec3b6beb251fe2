use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{resize_mask, ControlScales};
use crate::diffusion::unet::{check_finite, Encoder};
use crate::diffusion::{UNet, UNetConfig, NUM_TAPS};
use crate::encoders::{encode_style_set, Reduction, StyleEncoder, VisualEmbedding};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::layers::{Builder, Conv};
use crate::params::{Binder, ParamId, ParamStore};
use crate::scenegen::StyleImageSet;
use crate::tensor::Float;

const POSE_HIDDEN: usize = 16;

/// What the branch's cross-attention reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchConditioning {
    /// 8 reduced local tokens per style image.
    #[default]
    Local,
    /// One mean-pooled token per style image.
    Global,
    /// The text prompt, as in a plain text-conditioned control branch.
    Text,
}

/// Trainable copy of the backbone encoder with a pose adapter and 13 zero
/// 1×1 convolutions, one per tap.
#[derive(Debug, Clone)]
pub struct ControlBranch {
    pub cfg: UNetConfig,
    pub conditioning: BranchConditioning,
    pub encoder: Encoder,
    pub pose1: Conv,
    pub pose2: Conv,
    pub zero: Vec<Conv>,
    pub reduction: Reduction,
}

impl ControlBranch {
    fn build<T: Float>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &UNetConfig,
        conditioning: BranchConditioning,
    ) -> Self {
        let mut bld = Builder::new(store, rng);
        let encoder = Encoder::new(&mut bld, cfg);
        let pose1 = Conv::new(&mut bld.sub("pose.conv1"), cfg.in_channels, POSE_HIDDEN, 3, 1);
        let pose2 = Conv::new(&mut bld.sub("pose.conv2"), POSE_HIDDEN, cfg.widths[0], 3, 1);
        let zero = (0..NUM_TAPS).map(|i| Conv::zeros(&mut bld.sub(&format!("zero.{i}")), cfg.tap_shape(i).0)).collect();
        let reduction = Reduction::new(bld.store);
        Self { cfg: cfg.clone(), conditioning, encoder, pose1, pose2, zero, reduction }
    }

    /// Copy the backbone's encoder and middle block. Cross-attention
    /// projections and the pose adapter keep fresh values drawn from `seed`;
    /// zero convolutions start at exactly zero.
    pub fn init_from_backbone<T: Float>(
        backbone: &UNet,
        backbone_store: &ParamStore<T>,
        seed: u64,
        conditioning: BranchConditioning,
    ) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let branch = Self::build(&mut store, &mut rng, &backbone.cfg, conditioning);
        let fresh: Vec<ParamId> = branch.encoder.attentions().iter().flat_map(|a| a.projection_ids()).collect();
        let names: Vec<String> = branch.encoder_param_names(&store);
        for name in names {
            let id = store.id(&name).expect("own parameter");
            if fresh.contains(&id) {
                continue;
            }
            let src = backbone_store
                .by_name(&name)
                .ok_or_else(|| Error::validation("backbone", format!("missing parameter {name}")))?;
            if src.shape() != store.get(id).shape() {
                return Err(Error::shape(name, store.get(id).shape(), src.shape()));
            }
            *store.get_mut(id) = src.clone();
        }
        Ok((branch, store))
    }

    /// Layer structure for loading saved parameters.
    pub fn structure(cfg: &UNetConfig, conditioning: BranchConditioning) -> (Self, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let branch = Self::build(&mut store, &mut ChaCha8Rng::seed_from_u64(0), cfg, conditioning);
        (branch, store)
    }

    /// Names of the parameters shared with the backbone encoder.
    pub fn encoder_param_names<T: Float>(&self, store: &ParamStore<T>) -> Vec<String> {
        let own = ["pose.", "zero.", Reduction::NAME];
        store.iter().map(|(n, _)| n).filter(|n| !own.iter().any(|p| n.starts_with(p))).map(String::from).collect()
    }

    pub fn cross_attention_ids(&self) -> Vec<ParamId> {
        self.encoder.attentions().iter().flat_map(|a| a.projection_ids()).collect()
    }

    pub fn zero_conv_ids(&self) -> Vec<ParamId> {
        self.zero.iter().flat_map(|c| [c.w, c.b]).collect()
    }

    /// Conditioning tokens for inference.
    pub fn embed_style(
        &self,
        store: &ParamStore<f32>,
        enc: &StyleEncoder,
        set: &StyleImageSet,
    ) -> Result<VisualEmbedding> {
        match self.conditioning {
            BranchConditioning::Local => encode_style_set(enc, &self.reduction, store, set),
            BranchConditioning::Global => enc.encode_global(set),
            BranchConditioning::Text => {
                Err(Error::validation("style_refs", "this branch is conditioned on text, not style images"))
            }
        }
    }

    /// The 13 raw features, `c0` (middle) first, then skips deepest to
    /// shallowest, each after its zero convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn features<T: Float>(
        &self,
        g: &mut Graph<T>,
        p: &mut Binder<T>,
        z: Var,
        t: usize,
        pose: Var,
        ctx: Var,
    ) -> Result<Vec<Var>> {
        let h = self.pose1.forward(g, p, pose);
        let h = g.silu(h);
        let hint = self.pose2.forward(g, p, h);
        let out = self.encoder.forward(g, p, z, t, ctx, Some(hint))?;
        let mut raw = vec![out.mid];
        raw.extend(out.skips.iter().rev());
        let mut feats = Vec::with_capacity(NUM_TAPS);
        for (i, (f, conv)) in raw.into_iter().zip(&self.zero).enumerate() {
            let y = conv.forward(g, p, f);
            check_finite(g, y, &format!("zero.{i}"))?;
            feats.push(y);
        }
        Ok(feats)
    }
}

/// Apply the resized mask and the scales in the graph. Taps with a zero
/// scale or an empty resized mask are dropped, so they add nothing at all.
pub fn inject<T: Float>(
    g: &mut Graph<T>,
    feats: &[Var],
    mask: Option<&[u8]>,
    scales: &ControlScales,
) -> Vec<Option<Var>> {
    feats
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            let s = scales.get(i);
            if s == 0.0 {
                return None;
            }
            match mask {
                Some(m) => {
                    let r = g.value(f).dim(1);
                    let size = (m.len() as f64).sqrt() as usize;
                    let rm: Vec<T> = resize_mask(m, size, r);
                    if rm.iter().all(|&v| v == T::zero()) {
                        return None;
                    }
                    Some(g.mask_scale(f, &rm, T::of(s as f64)))
                }
                None if s == 1.0 => Some(f),
                None => Some(g.scale(f, T::of(s as f64))),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::UNetConfig;
    use crate::tensor::Tensor;

    fn small() -> (UNet, ParamStore<f32>) {
        let cfg = UNetConfig { image_size: 16, widths: [8, 8, 16, 16], time_freq_dim: 8, time_dim: 16, ctx_dim: 8, ..Default::default() };
        let mut store = ParamStore::new();
        let net = UNet::build(&mut store, &mut ChaCha8Rng::seed_from_u64(3), &cfg);
        (net, store)
    }

    #[test]
    fn copy_contract() {
        let (net, bstore) = small();
        let (br, store) = ControlBranch::init_from_backbone(&net, &bstore, 99, BranchConditioning::Local).unwrap();
        let fresh = br.cross_attention_ids();
        for name in br.encoder_param_names(&store) {
            let id = store.id(&name).unwrap();
            let same = store.get(id).bit_eq(bstore.by_name(&name).unwrap());
            assert_eq!(same, !fresh.contains(&id), "{name}");
        }
        for id in br.zero_conv_ids() {
            assert!(store.get(id).data().iter().all(|&v| v == 0.0));
        }
        assert_eq!(
            store.checksum_prefix("enc.0.0.res"),
            bstore.checksum_prefix("enc.0.0.res"),
        );
    }

    #[test]
    fn zero_convs_output_zero_at_init() {
        let (net, bstore) = small();
        let (br, store) = ControlBranch::init_from_backbone(&net, &bstore, 1, BranchConditioning::Local).unwrap();
        let mut g = Graph::new();
        let mut p = Binder::new(&store, true);
        let z = g.input(Tensor::full(&[3, 16, 16], 0.3));
        let pose = g.input(Tensor::full(&[3, 16, 16], 1.0));
        let ctx = g.input(Tensor::full(&[5, 8], -0.2));
        let feats = br.features(&mut g, &mut p, z, 10, pose, ctx).unwrap();
        assert_eq!(feats.len(), NUM_TAPS);
        for (i, f) in feats.iter().enumerate() {
            let (c, r) = net.cfg.tap_shape(i);
            assert_eq!(g.value(*f).shape(), &[c, r, r]);
            assert!(g.value(*f).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn structure_names_match_init() {
        let (net, bstore) = small();
        let (_, a) = ControlBranch::init_from_backbone(&net, &bstore, 1, BranchConditioning::Local).unwrap();
        let (_, b) = ControlBranch::structure(&net.cfg, BranchConditioning::Local);
        let na: Vec<&str> = a.iter().map(|(n, _)| n).collect();
        let nb: Vec<&str> = b.iter().map(|(n, _)| n).collect();
        assert_eq!(na, nb);
    }
}
