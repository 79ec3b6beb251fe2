//! Frozen style-image encoder and the learned token reduction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::layers::{Builder, Conv, Linear};
use crate::params::{Binder, ParamId, ParamStore};
use crate::scenegen::{StyleImageSet, NUM_CATEGORIES, STYLE_SIZE};
use crate::tensor::{gemm, Float, Tensor};

pub const EMBED_DIM: usize = 128;
pub const PATCH: usize = 4;
pub const GRID: usize = STYLE_SIZE / PATCH;
pub const NUM_PATCHES: usize = GRID * GRID;
/// Class token plus patch tokens.
pub const TOKENS_IN: usize = NUM_PATCHES + 1;
pub const TOKENS_OUT: usize = 8;

const HIDDEN1: usize = 32;
const HIDDEN2: usize = 64;
pub const STYLE_ENCODER_SEED: u64 = 0x5e_1e_c7;

/// `T_in × D` tokens of one style image. Row 0 is the class token, row
/// `1 + gy * GRID + gx` the patch at grid cell `(gx, gy)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTokens {
    pub tokens: Tensor<f32>,
}

impl LocalTokens {
    pub fn patch_row(gx: usize, gy: usize) -> usize {
        1 + gy * GRID + gx
    }
}

/// Conditioning tokens for the control branch.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualEmbedding {
    /// `64 × D` in local mode, `8 × D` in global mode.
    pub tokens: Tensor<f32>,
    pub source_present: [bool; NUM_CATEGORIES],
}

/// Pointwise convolution, a 4×4 stride-4 patch convolution and two fixed
/// projections, all seeded and never trained. The patch kernel is symmetric
/// under 180° rotation.
#[derive(Debug, Clone)]
pub struct StyleEncoder {
    pub store: ParamStore<f32>,
    conv1: Conv,
    conv2: Conv,
    proj: Linear,
    cls: Linear,
    pos: ParamId,
    blank: LocalTokens,
}

impl StyleEncoder {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bld = Builder::new(&mut store, &mut rng);
        let conv1 = Conv::new(&mut bld.sub("style.conv1"), 3, HIDDEN1, 1, 1);
        let mut conv2 = Conv::new(&mut bld.sub("style.conv2"), HIDDEN1, HIDDEN2, PATCH, PATCH);
        conv2.pad = 0;
        let proj = Linear::new(&mut bld.sub("style.proj"), HIDDEN2, EMBED_DIM, true);
        let cls = Linear::new(&mut bld.sub("style.cls"), HIDDEN2, EMBED_DIM, true);
        let pos = {
            let t = crate::params::Init { rng: bld.rng }.fan_in(&[NUM_PATCHES, EMBED_DIM], HIDDEN2);
            bld.store.add("style.pos", t)
        };
        let w = store.get_mut(conv2.w);
        let k = PATCH * PATCH;
        let d = w.data_mut();
        for block in d.chunks_mut(k) {
            for i in 0..k / 2 {
                let m = 0.5 * (block[i] + block[k - 1 - i]);
                block[i] = m;
                block[k - 1 - i] = m;
            }
        }
        let mut enc = Self { store, conv1, conv2, proj, cls, pos, blank: LocalTokens { tokens: Tensor::zeros(&[1]) } };
        enc.blank = enc.forward(&Image::new(STYLE_SIZE, STYLE_SIZE));
        enc
    }

    /// Rebuild from saved weights.
    pub fn from_store(store: &ParamStore<f32>) -> Result<Self> {
        let mut enc = Self::new(STYLE_ENCODER_SEED);
        enc.store.load_from(store).map_err(|e| Error::validation("style encoder", e))?;
        enc.blank = enc.forward(&Image::new(STYLE_SIZE, STYLE_SIZE));
        Ok(enc)
    }

    fn forward(&self, img: &Image) -> LocalTokens {
        let mut g = Graph::new();
        let mut p = Binder::frozen(&self.store);
        let x = g.input(img.to_chw());
        let h = self.conv1.forward(&mut g, &mut p, x);
        let h = g.input(g.value(h).map(|v| v.max(0.0)));
        let h = self.conv2.forward(&mut g, &mut p, h);
        let f = g.value(h).map(|v| v.max(0.0)).reshape(&[HIDDEN2, NUM_PATCHES]);
        let mean: Vec<f32> = f
            .data()
            .chunks(NUM_PATCHES)
            .map(|row| (row.iter().map(|&v| v as f64).sum::<f64>() / NUM_PATCHES as f64) as f32)
            .collect();
        let f = g.input(f);
        let ft = g.transpose(f);
        let patches = self.proj.forward(&mut g, &mut p, ft);
        let pos = p.var(&mut g, self.pos);
        let patches = g.add(patches, pos);
        let m = g.input(Tensor::new(&[1, HIDDEN2], mean));
        let cls = self.cls.forward(&mut g, &mut p, m);
        let out = g.concat(&[cls, patches]);
        LocalTokens { tokens: g.value(out).clone() }
    }

    /// Tokens of one `S×S` image.
    pub fn encode(&self, img: &Image) -> Result<LocalTokens> {
        if img.width != STYLE_SIZE || img.height != STYLE_SIZE {
            return Err(Error::validation(
                "style image",
                format!("expected {STYLE_SIZE}x{STYLE_SIZE}, got {}x{}", img.width, img.height),
            ));
        }
        if img.is_blank() {
            return Ok(self.blank.clone());
        }
        Ok(self.forward(img))
    }

    /// The constant tokens of an all-zero image.
    pub fn blank_tokens(&self) -> &LocalTokens {
        &self.blank
    }

    pub fn encode_set(&self, set: &StyleImageSet) -> Result<Vec<LocalTokens>> {
        set.images.iter().map(|img| self.encode(img)).collect()
    }

    /// Mean of the patch tokens of each image: `8 × D`.
    pub fn encode_global(&self, set: &StyleImageSet) -> Result<VisualEmbedding> {
        let locals = self.encode_set(set)?;
        let mut out = Vec::with_capacity(NUM_CATEGORIES * EMBED_DIM);
        for l in &locals {
            out.extend(global_token(l));
        }
        Ok(VisualEmbedding {
            tokens: Tensor::new(&[NUM_CATEGORIES, EMBED_DIM], out),
            source_present: set.present,
        })
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }
}

/// Mean of the patch rows (class token excluded).
pub fn global_token(l: &LocalTokens) -> Vec<f32> {
    let d = l.tokens.data();
    (0..EMBED_DIM)
        .map(|c| {
            let s: f64 = (1..TOKENS_IN).map(|r| d[r * EMBED_DIM + c] as f64).sum();
            (s / NUM_PATCHES as f64) as f32
        })
        .collect()
}

/// `weights · tokens`, a plain linear combination of rows.
pub fn reduce_tokens<T: Float>(tokens: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let (tin, d) = (tokens.dim(0), tokens.dim(1));
    if weights.shape().len() != 2 || weights.dim(1) != tin {
        return Err(Error::shape("reduction weights", &[TOKENS_OUT, tin], weights.shape()));
    }
    let k = weights.dim(0);
    let mut out = Tensor::zeros(&[k, d]);
    gemm(k, tin, d, T::one(), weights.data(), false, tokens.data(), false, T::zero(), out.data_mut());
    Ok(out)
}

/// The shared `8 × T_in` reduction matrix, initialized to uniform averaging.
#[derive(Debug, Clone)]
pub struct Reduction {
    pub w: ParamId,
}

impl Reduction {
    pub const NAME: &'static str = "reduce.w";

    pub fn new<T: Float>(store: &mut ParamStore<T>) -> Self {
        let w = Tensor::full(&[TOKENS_OUT, TOKENS_IN], T::of(1.0 / TOKENS_IN as f64));
        Self { w: store.add(Self::NAME, w) }
    }

    /// Reduce each image's tokens and stack them: `8·8 × D`.
    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &mut Binder<T>, locals: &[Tensor<T>]) -> Var {
        let w = p.var(g, self.w);
        let parts: Vec<Var> = locals
            .iter()
            .map(|t| {
                let x = g.input(t.clone());
                g.matmul(w, x, false, false)
            })
            .collect();
        g.concat(&parts)
    }

    pub fn embed(&self, store: &ParamStore<f32>, locals: &[LocalTokens], present: [bool; NUM_CATEGORIES]) -> VisualEmbedding {
        let mut g = Graph::new();
        let mut p = Binder::frozen(store);
        let ts: Vec<Tensor<f32>> = locals.iter().map(|l| l.tokens.clone()).collect();
        let v = self.forward(&mut g, &mut p, &ts);
        VisualEmbedding { tokens: g.value(v).clone(), source_present: present }
    }
}

/// Encode and reduce all eight style images.
pub fn encode_style_set(
    enc: &StyleEncoder,
    reduction: &Reduction,
    store: &ParamStore<f32>,
    set: &StyleImageSet,
) -> Result<VisualEmbedding> {
    let locals = enc.encode_set(set)?;
    Ok(reduction.embed(store, &locals, set.present))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::Category;
    use proptest::prelude::*;

    fn encoder() -> StyleEncoder {
        StyleEncoder::new(STYLE_ENCODER_SEED)
    }

    fn textured(seed: u32) -> Image {
        let mut img = Image::new(STYLE_SIZE, STYLE_SIZE);
        for y in 0..STYLE_SIZE {
            for x in 0..STYLE_SIZE {
                let v = ((x as u32 * 7 + y as u32 * 13 + seed * 31) % 17) as f32 / 17.0;
                img.set(x, y, [v, 1.0 - v, (x % 3) as f32 / 3.0]);
            }
        }
        img
    }

    #[test]
    fn token_shape_and_determinism() {
        let e = encoder();
        let a = e.encode(&textured(1)).unwrap();
        assert_eq!(a.tokens.shape(), &[TOKENS_IN, EMBED_DIM]);
        assert!(a.tokens.bit_eq(&encoder().encode(&textured(1)).unwrap().tokens));
        assert!(a.tokens.all_finite());
    }

    #[test]
    fn blank_image_gives_blank_constant() {
        let e = encoder();
        let blank = e.encode(&Image::new(STYLE_SIZE, STYLE_SIZE)).unwrap();
        assert!(blank.tokens.bit_eq(&e.forward(&Image::new(STYLE_SIZE, STYLE_SIZE)).tokens));
    }

    #[test]
    fn wrong_shape_is_rejected() {
        assert!(matches!(encoder().encode(&Image::new(16, 32)), Err(Error::Validation { .. })));
    }

    #[test]
    fn white_patch_changes_only_its_rows() {
        let e = encoder();
        let mut a = Image::new(STYLE_SIZE, STYLE_SIZE);
        let mut b = Image::new(STYLE_SIZE, STYLE_SIZE);
        for y in 0..PATCH {
            for x in 0..PATCH {
                a.set(x, y, [1.0; 3]);
                b.set(3 * PATCH + x, 3 * PATCH + y, [1.0; 3]);
            }
        }
        let ta = e.encode(&a).unwrap().tokens;
        let tb = e.encode(&b).unwrap().tokens;
        let blank = e.blank_tokens().tokens.clone();
        let row = |t: &Tensor<f32>, r: usize| t.data()[r * EMBED_DIM..(r + 1) * EMBED_DIM].to_vec();
        let (r00, r33) = (LocalTokens::patch_row(0, 0), LocalTokens::patch_row(3, 3));
        assert_ne!(row(&ta, r00), row(&tb, r00));
        assert_ne!(row(&ta, r33), row(&tb, r33));
        // Direct evaluation: each patch row depends on its own patch only.
        for r in 1..TOKENS_IN {
            if r != r00 {
                assert_eq!(row(&ta, r), row(&blank, r), "row {r}");
            }
            if r != r33 {
                assert_eq!(row(&tb, r), row(&blank, r), "row {r}");
            }
        }
    }

    #[test]
    fn global_token_is_rotation_invariant_local_is_not() {
        let e = encoder();
        let img = textured(3);
        let mut rot = Image::new(STYLE_SIZE, STYLE_SIZE);
        for y in 0..STYLE_SIZE {
            for x in 0..STYLE_SIZE {
                rot.set(STYLE_SIZE - 1 - x, STYLE_SIZE - 1 - y, img.get(x, y));
            }
        }
        let (la, lb) = (e.encode(&img).unwrap(), e.encode(&rot).unwrap());
        let (ga, gb) = (global_token(&la), global_token(&lb));
        let gdiff = ga.iter().zip(&gb).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(gdiff <= 1e-5, "global diff {gdiff}");
        assert!(la.tokens.max_abs_diff(&lb.tokens) > 1e-2);
        // Mean oracle.
        let d = la.tokens.data();
        for c in 0..EMBED_DIM {
            let m = (1..TOKENS_IN).map(|r| d[r * EMBED_DIM + c]).sum::<f32>() / NUM_PATCHES as f32;
            assert!((m - ga[c]).abs() <= 1e-5);
        }
    }

    #[test]
    fn reduce_one_hot_uniform_and_zero() {
        let e = encoder();
        let l = e.encode(&textured(5)).unwrap().tokens;
        let mut w = Tensor::zeros(&[TOKENS_OUT, TOKENS_IN]);
        w.data_mut()[0] = 1.0;
        for j in 0..TOKENS_IN {
            w.data_mut()[TOKENS_IN + j] = 1.0 / TOKENS_IN as f32;
        }
        let out = reduce_tokens(&l, &w).unwrap();
        assert_eq!(&out.data()[..EMBED_DIM], &l.data()[..EMBED_DIM]);
        for c in 0..EMBED_DIM {
            let mean = (0..TOKENS_IN).map(|r| l.data()[r * EMBED_DIM + c] as f64).sum::<f64>() / TOKENS_IN as f64;
            assert!((out.data()[EMBED_DIM + c] as f64 - mean).abs() < 1e-5);
        }
        assert!(out.data()[2 * EMBED_DIM..].iter().all(|&v| v == 0.0));
        assert!(reduce_tokens(&l, &Tensor::zeros(&[8, 64])).is_err());
    }

    #[test]
    fn set_embedding_blocks_follow_category_order() {
        let e = encoder();
        let mut store = ParamStore::new();
        let red = Reduction::new(&mut store);
        let mut set = StyleImageSet::blank();
        set.set(Category::Hair, textured(1)).unwrap();
        let a = encode_style_set(&e, &red, &store, &set).unwrap();
        set.set(Category::Top, textured(2)).unwrap();
        let b = encode_style_set(&e, &red, &store, &set).unwrap();
        assert_eq!(a.tokens.shape(), &[NUM_CATEGORIES * TOKENS_OUT, EMBED_DIM]);
        let top = Category::Top.index();
        for r in 0..NUM_CATEGORIES * TOKENS_OUT {
            let ra = &a.tokens.data()[r * EMBED_DIM..(r + 1) * EMBED_DIM];
            let rb = &b.tokens.data()[r * EMBED_DIM..(r + 1) * EMBED_DIM];
            assert_eq!(ra == rb, !(top * 8..top * 8 + 8).contains(&r), "row {r}");
        }
        assert!(b.source_present[top]);
    }

    #[test]
    fn swapping_identical_content_swaps_blocks() {
        let e = encoder();
        let mut store = ParamStore::new();
        let red = Reduction::new(&mut store);
        let mut s1 = StyleImageSet::blank();
        s1.set(Category::Hair, textured(4)).unwrap();
        s1.set(Category::Shoes, textured(9)).unwrap();
        let mut s2 = StyleImageSet::blank();
        s2.set(Category::Hair, textured(9)).unwrap();
        s2.set(Category::Shoes, textured(4)).unwrap();
        let a = encode_style_set(&e, &red, &store, &s1).unwrap();
        let b = encode_style_set(&e, &red, &store, &s2).unwrap();
        let block = |t: &Tensor<f32>, c: usize| t.data()[c * 8 * EMBED_DIM..(c + 1) * 8 * EMBED_DIM].to_vec();
        let (h, s) = (Category::Hair.index(), Category::Shoes.index());
        assert_eq!(block(&a.tokens, h), block(&b.tokens, s));
        assert_eq!(block(&a.tokens, s), block(&b.tokens, h));
    }

    #[test]
    fn all_blank_set_repeats_blank_reduction() {
        let e = encoder();
        let mut store = ParamStore::new();
        let red = Reduction::new(&mut store);
        let v = encode_style_set(&e, &red, &store, &StyleImageSet::blank()).unwrap();
        let one = reduce_tokens(&e.blank_tokens().tokens, store.get(red.w)).unwrap();
        for c in 0..NUM_CATEGORIES {
            assert_eq!(&v.tokens.data()[c * 8 * EMBED_DIM..(c + 1) * 8 * EMBED_DIM], one.data());
        }
        let g = e.encode_global(&StyleImageSet::blank()).unwrap();
        assert_eq!(g.tokens.shape(), &[NUM_CATEGORIES, EMBED_DIM]);
        assert_eq!(&g.tokens.data()[..EMBED_DIM], global_token(e.blank_tokens()).as_slice());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn reduction_is_linear(
            x in proptest::collection::vec(-2.0f64..2.0, TOKENS_IN * 4),
            y in proptest::collection::vec(-2.0f64..2.0, TOKENS_IN * 4),
            w in proptest::collection::vec(-1.0f64..1.0, TOKENS_OUT * TOKENS_IN),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let tx = Tensor::new(&[TOKENS_IN, 4], x.clone());
            let ty = Tensor::new(&[TOKENS_IN, 4], y.clone());
            let tw = Tensor::new(&[TOKENS_OUT, TOKENS_IN], w);
            let mix = Tensor::new(&[TOKENS_IN, 4], x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect());
            let lhs = reduce_tokens(&mix, &tw).unwrap();
            let rx = reduce_tokens(&tx, &tw).unwrap();
            let ry = reduce_tokens(&ty, &tw).unwrap();
            for i in 0..lhs.len() {
                let rhs = a * rx.data()[i] + b * ry.data()[i];
                prop_assert!((lhs.data()[i] - rhs).abs() <= 1e-9 * (1.0 + rhs.abs()));
            }
        }
    }
}
