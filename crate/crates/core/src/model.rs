//! The assembled generator: frozen backbone and encoders plus an optional
//! control branch, with noise prediction and sampling entry points.

use crate::control::{inject, BranchConditioning, ControlBranch, ControlContext, ControlScales};
use crate::diffusion::sampler::{ddpm_sample, guide};
use crate::diffusion::{LatentCodec, NoiseSchedule, PixelCodec, UNet, UNetConfig, NUM_TAPS};
use crate::encoders::{StyleEncoder, TextEmbedding, TextEncoder, VisualEmbedding, STYLE_ENCODER_SEED, TEXT_ENCODER_SEED};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::params::{Binder, ParamStore};
use crate::scenegen::{StyleImageSet, IMAGE_SIZE, NUM_CATEGORIES};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Branch {
    pub net: ControlBranch,
    pub store: ParamStore<f32>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub unet: UNet,
    pub backbone: ParamStore<f32>,
    pub style: StyleEncoder,
    pub text: TextEncoder,
    pub schedule: NoiseSchedule,
    pub branch: Option<Branch>,
}

/// One generation request after validation.
#[derive(Debug, Clone)]
pub struct SampleRequest {
    pub prompt: String,
    pub negative_prompt: String,
    pub guidance: f32,
    pub steps: usize,
    pub seed: u64,
    pub control: Option<ControlContext>,
}

impl SampleRequest {
    pub fn new(prompt: impl Into<String>, steps: usize, seed: u64) -> Self {
        Self { prompt: prompt.into(), negative_prompt: String::new(), guidance: 1.0, steps, seed, control: None }
    }
}

impl Model {
    /// A randomly initialized backbone with the default encoders.
    pub fn new(cfg: &UNetConfig, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut backbone = ParamStore::new();
        let unet = UNet::build(&mut backbone, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed), cfg);
        Self {
            unet,
            backbone,
            style: StyleEncoder::new(STYLE_ENCODER_SEED),
            text: TextEncoder::new(TEXT_ENCODER_SEED),
            schedule: NoiseSchedule::default(),
            branch: None,
        }
    }

    /// Attach a branch copied from the current backbone.
    pub fn attach_branch(&mut self, seed: u64, conditioning: BranchConditioning) -> Result<()> {
        let (net, store) = ControlBranch::init_from_backbone(&self.unet, &self.backbone, seed, conditioning)?;
        self.branch = Some(Branch { net, store });
        Ok(())
    }

    pub fn branch(&self) -> Result<&Branch> {
        self.branch.as_ref().ok_or_else(|| Error::validation("checkpoint", "no control branch loaded"))
    }

    pub fn encode_text(&self, prompt: &str) -> Result<TextEmbedding> {
        self.text.encode(prompt)
    }

    /// Branch conditioning tokens for a style set, or for `prompt` when the
    /// branch reads text.
    pub fn embed_condition(&self, set: &StyleImageSet, prompt: &str) -> Result<VisualEmbedding> {
        let b = self.branch()?;
        match b.net.conditioning {
            BranchConditioning::Text => Ok(VisualEmbedding {
                tokens: self.text.encode(prompt)?.tokens,
                source_present: [false; NUM_CATEGORIES],
            }),
            _ => b.net.embed_style(&b.store, &self.style, set),
        }
    }

    fn check_latent(&self, z: &Tensor<f32>) -> Result<()> {
        let n = self.unet.cfg.image_size;
        let want = [self.unet.cfg.in_channels, n, n];
        if z.shape() != want {
            return Err(Error::shape("z_t", &want, z.shape()));
        }
        Ok(())
    }

    /// ε_θ(z_t, t, c).
    pub fn predict_noise(&self, z: &Tensor<f32>, t: usize, c: &TextEmbedding) -> Result<Tensor<f32>> {
        self.predict_with(z, t, c, None)
    }

    fn predict_with(
        &self,
        z: &Tensor<f32>,
        t: usize,
        c: &TextEmbedding,
        controls: Option<&[Option<Tensor<f32>>]>,
    ) -> Result<Tensor<f32>> {
        self.check_latent(z)?;
        self.schedule.check_t(t)?;
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.backbone);
        let zv = g.input(z.clone());
        let cv = g.input(c.tokens.clone());
        let taps = controls.map(|cs| cs.iter().map(|c| c.as_ref().map(|t| g.input(t.clone()))).collect::<Vec<_>>());
        let out = self.unet.forward(&mut g, &mut p, zv, t, cv, taps.as_deref())?;
        Ok(g.value(out).clone())
    }

    fn run_branch<R>(
        &self,
        z: &Tensor<f32>,
        t: usize,
        ctx: &ControlContext,
        finish: impl FnOnce(&mut Graph<f32>, &[Var]) -> R,
    ) -> Result<R> {
        ctx.validate()?;
        self.check_latent(z)?;
        self.schedule.check_t(t)?;
        let b = self.branch()?;
        let mut g = Graph::new();
        let mut p = Binder::frozen(&b.store);
        let zv = g.input(z.clone());
        let pose = g.input(ctx.pose_map.to_chw());
        let cv = g.input(ctx.visual.tokens.clone());
        let feats = b.net.features(&mut g, &mut p, zv, t, pose, cv)?;
        Ok(finish(&mut g, &feats))
    }

    /// The branch's 13 raw features, before masking and scaling.
    pub fn control_features(&self, z: &Tensor<f32>, t: usize, ctx: &ControlContext) -> Result<Vec<Tensor<f32>>> {
        self.run_branch(z, t, ctx, |g, feats| feats.iter().map(|&f| g.value(f).clone()).collect())
    }

    /// Masked and scaled features; `None` where a tap contributes nothing.
    pub fn injected_features(
        &self,
        z: &Tensor<f32>,
        t: usize,
        ctx: &ControlContext,
    ) -> Result<Vec<Option<Tensor<f32>>>> {
        ctx.validate()?;
        if ctx.scales.is_zero() || ctx.mask.iter().all(|&m| m == 0) {
            return Ok(vec![None; NUM_TAPS]);
        }
        self.run_branch(z, t, ctx, |g, feats| {
            let taps = inject(g, feats, Some(&ctx.mask), &ctx.scales);
            taps.into_iter().map(|v| v.map(|v| g.value(v).clone())).collect()
        })
    }

    /// ε_θ with the branch's masked, scaled features added at the taps.
    pub fn predict_noise_controlled(
        &self,
        z: &Tensor<f32>,
        t: usize,
        c: &TextEmbedding,
        ctx: &ControlContext,
    ) -> Result<Tensor<f32>> {
        let taps = self.injected_features(z, t, ctx)?;
        self.predict_taps(z, t, c, &taps)
    }

    fn predict_taps(
        &self,
        z: &Tensor<f32>,
        t: usize,
        c: &TextEmbedding,
        taps: &[Option<Tensor<f32>>],
    ) -> Result<Tensor<f32>> {
        if taps.iter().all(Option::is_none) {
            self.predict_with(z, t, c, None)
        } else {
            self.predict_with(z, t, c, Some(taps))
        }
    }

    /// Classifier-free guidance. The branch runs once and feeds both passes;
    /// with `g = 1` the negative pass is skipped.
    pub fn cfg_noise(
        &self,
        z: &Tensor<f32>,
        t: usize,
        pos: &TextEmbedding,
        neg: &TextEmbedding,
        g: f32,
        ctx: Option<&ControlContext>,
    ) -> Result<Tensor<f32>> {
        let taps = match ctx {
            Some(c) => self.injected_features(z, t, c)?,
            None => vec![None; NUM_TAPS],
        };
        let ep = self.predict_taps(z, t, pos, &taps)?;
        if g == 1.0 {
            return Ok(ep);
        }
        let en = self.predict_taps(z, t, neg, &taps)?;
        Ok(guide(&ep, &en, g))
    }

    /// Generate one image in `[0, 1]`.
    pub fn sample(&self, req: &SampleRequest) -> Result<Image> {
        if !(req.guidance.is_finite() && req.guidance >= 0.0) {
            return Err(Error::validation("guidance", "must be a finite value ≥ 0"));
        }
        if req.steps == 0 || req.steps > self.schedule.steps() {
            return Err(Error::validation("steps", format!("must be in 1..={}", self.schedule.steps())));
        }
        let pos = self.text.encode(&req.prompt)?;
        let neg = self.text.encode(&req.negative_prompt)?;
        if let Some(c) = &req.control {
            c.validate()?;
            self.branch()?;
        }
        let n = self.unet.cfg.image_size;
        let shape = [self.unet.cfg.in_channels, n, n];
        let z = ddpm_sample(&self.schedule, req.steps, req.seed, &shape, |z, t| {
            self.cfg_noise(z, t, &pos, &neg, req.guidance, req.control.as_ref())
        })?;
        Image::from_chw(&PixelCodec.decode(&z))
    }

    /// A context for a style set, pose, mask and scales.
    pub fn control_context(
        &self,
        pose_map: Image,
        set: &StyleImageSet,
        prompt: &str,
        mask: Vec<u8>,
        scales: ControlScales,
    ) -> Result<ControlContext> {
        let ctx = ControlContext { pose_map, visual: self.embed_condition(set, prompt)?, mask, scales };
        ctx.validate()?;
        Ok(ctx)
    }
}

pub fn full_mask() -> Vec<u8> {
    vec![1; IMAGE_SIZE * IMAGE_SIZE]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ControlScales;
    use crate::scenegen::{generate_scene, DatasetConfig, SceneSpec};
    use rand::{Rng, SeedableRng};

    /// A model whose zero convolutions hold small random values, so the
    /// branch actually contributes.
    fn live_model() -> Model {
        let mut m = Model::new(&UNetConfig::default(), 5);
        m.attach_branch(6, BranchConditioning::Local).unwrap();
        let b = m.branch.as_mut().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for id in b.net.zero_conv_ids() {
            for v in b.store.get_mut(id).data_mut() {
                *v = rng.random_range(-0.05..0.05);
            }
        }
        m
    }

    fn context(m: &Model, seed: u64, scales: ControlScales) -> ControlContext {
        let s = generate_scene(&SceneSpec::sample(seed, &DatasetConfig::default())).unwrap();
        m.control_context(s.pose_map, &s.style_set, "a person, red plain", s.human_mask, scales).unwrap()
    }

    fn noisy(seed: u64) -> Tensor<f32> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        crate::diffusion::sampler::gaussian(&mut rng, &[3, 64, 64])
    }

    #[test]
    fn zero_scales_or_empty_mask_give_backbone_output() {
        let m = live_model();
        let z = noisy(1);
        let c = m.encode_text("a person, blue stripes").unwrap();
        let base = m.predict_noise(&z, 500, &c).unwrap();
        let off = context(&m, 2, ControlScales::zeros());
        assert!(m.predict_noise_controlled(&z, 500, &c, &off).unwrap().bit_eq(&base));
        let mut empty = context(&m, 2, ControlScales::uniform(2.0).unwrap());
        empty.mask.fill(0);
        assert!(m.predict_noise_controlled(&z, 500, &c, &empty).unwrap().bit_eq(&base));
        let on = context(&m, 2, ControlScales::ones());
        assert!(!m.predict_noise_controlled(&z, 500, &c, &on).unwrap().bit_eq(&base));
    }

    #[test]
    fn features_vanish_outside_mask() {
        let m = live_model();
        let ctx = context(&m, 3, ControlScales::ones());
        let taps = m.injected_features(&noisy(2), 300, &ctx).unwrap();
        for (i, t) in taps.iter().enumerate() {
            let t = t.as_ref().expect("all taps active");
            let r = t.dim(1);
            let rm: Vec<f32> = crate::control::resize_mask(&ctx.mask, 64, r);
            for row in t.data().chunks(r * r) {
                for (v, mm) in row.iter().zip(&rm) {
                    if *mm == 0.0 {
                        assert_eq!(*v, 0.0, "tap {i}");
                    }
                }
            }
        }
    }

    #[test]
    fn doubling_one_tap_doubles_its_contribution() {
        let m = live_model();
        let z = noisy(3);
        let mut s1 = ControlScales::zeros();
        s1.set(6, 0.5).unwrap();
        let mut s2 = ControlScales::zeros();
        s2.set(6, 1.0).unwrap();
        let a = m.injected_features(&z, 200, &context(&m, 4, s1)).unwrap();
        let b = m.injected_features(&z, 200, &context(&m, 4, s2)).unwrap();
        for (i, f) in a.iter().enumerate() {
            assert_eq!(f.is_some(), i == 6);
        }
        let (a, b) = (a[6].as_ref().unwrap(), b[6].as_ref().unwrap());
        assert!(a.data().iter().any(|&v| v != 0.0));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn guidance_one_matches_plain_prediction() {
        let m = live_model();
        let z = noisy(4);
        let c = m.encode_text("a person, green gradient").unwrap();
        let neg = m.encode_text("").unwrap();
        let direct = m.predict_noise(&z, 10, &c).unwrap();
        assert!(m.cfg_noise(&z, 10, &c, &c, 1.0, None).unwrap().bit_eq(&direct));
        let g0 = m.cfg_noise(&z, 10, &c, &neg, 0.0, None).unwrap();
        assert!(g0.bit_eq(&m.predict_noise(&z, 10, &neg).unwrap()));
    }

    #[test]
    fn sampling_is_deterministic_and_zero_scale_matches_uncontrolled() {
        let m = live_model();
        let mut req = SampleRequest::new("a person, red plain", 3, 11);
        let plain = m.sample(&req).unwrap();
        assert_eq!(plain, m.sample(&req).unwrap());
        assert!(plain.data.iter().all(|v| (0.0..=1.0).contains(v)));
        req.control = Some(context(&m, 5, ControlScales::zeros()));
        assert_eq!(m.sample(&req).unwrap(), plain);
    }

    #[test]
    fn empty_mask_sampling_ignores_pose_and_style() {
        let m = live_model();
        let mut req = SampleRequest::new("a person, red plain", 2, 12);
        let mut a = context(&m, 6, ControlScales::ones());
        a.mask.fill(0);
        let mut b = context(&m, 7, ControlScales::ones());
        b.mask.fill(0);
        req.control = Some(a);
        let ia = m.sample(&req).unwrap();
        req.control = Some(b);
        assert_eq!(ia, m.sample(&req).unwrap());
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let m = live_model();
        let mut req = SampleRequest::new("a person, red plain", 0, 1);
        assert!(matches!(m.sample(&req), Err(Error::Validation { field, .. }) if field == "steps"));
        req.steps = 2;
        req.guidance = -1.0;
        assert!(matches!(m.sample(&req), Err(Error::Validation { field, .. }) if field == "guidance"));
        req.guidance = 1.0;
        req.prompt = "a unicorn".into();
        assert!(matches!(m.sample(&req), Err(Error::OutOfVocabulary(_))));
    }
}
