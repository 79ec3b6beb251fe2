//! The visually conditioned control branch and its masking and scaling.

mod branch;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffusion::NUM_TAPS;
use crate::encoders::VisualEmbedding;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scenegen::IMAGE_SIZE;
use crate::tensor::{Float, Tensor};

pub use branch::{inject, BranchConditioning, ControlBranch};

pub const SCALE_MAX: f32 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ScaleGroup {
    /// Low block, `c0..=c3`.
    Lb,
    /// Middle block, `c4..=c8`.
    Mb,
    /// High block, `c9..=c12`.
    Hb,
}

impl ScaleGroup {
    pub const ALL: [ScaleGroup; 3] = [ScaleGroup::Lb, ScaleGroup::Mb, ScaleGroup::Hb];

    pub fn taps(self) -> std::ops::Range<usize> {
        match self {
            ScaleGroup::Lb => 0..4,
            ScaleGroup::Mb => 4..9,
            ScaleGroup::Hb => 9..NUM_TAPS,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScaleGroup::Lb => "LB",
            ScaleGroup::Mb => "MB",
            ScaleGroup::Hb => "HB",
        }
    }
}

/// Per-tap control strengths `c0..c12`, each in `[0, 2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct ControlScales {
    values: [f32; NUM_TAPS],
}

impl TryFrom<Vec<f32>> for ControlScales {
    type Error = Error;

    fn try_from(v: Vec<f32>) -> Result<Self> {
        let values: [f32; NUM_TAPS] = v
            .try_into()
            .map_err(|v: Vec<f32>| Error::validation("scales", format!("expected {NUM_TAPS} values, got {}", v.len())))?;
        Self::new(values)
    }
}

impl From<ControlScales> for Vec<f32> {
    fn from(s: ControlScales) -> Self {
        s.values.to_vec()
    }
}

fn check_scale(field: String, v: f32) -> Result<f32> {
    if v.is_finite() && (0.0..=SCALE_MAX).contains(&v) {
        Ok(v)
    } else {
        Err(Error::validation(field, format!("{v} outside [0, {SCALE_MAX}]")))
    }
}

impl ControlScales {
    pub fn new(values: [f32; NUM_TAPS]) -> Result<Self> {
        for (i, &v) in values.iter().enumerate() {
            check_scale(format!("scales[{i}]"), v)?;
        }
        Ok(Self { values })
    }

    pub fn uniform(v: f32) -> Result<Self> {
        Self::new([v; NUM_TAPS])
    }

    pub fn ones() -> Self {
        Self { values: [1.0; NUM_TAPS] }
    }

    pub fn zeros() -> Self {
        Self { values: [0.0; NUM_TAPS] }
    }

    pub fn groups(lb: f32, mb: f32, hb: f32) -> Result<Self> {
        let mut s = Self::zeros();
        s.set_group(ScaleGroup::Lb, lb)?;
        s.set_group(ScaleGroup::Mb, mb)?;
        s.set_group(ScaleGroup::Hb, hb)?;
        Ok(s)
    }

    pub fn values(&self) -> &[f32; NUM_TAPS] {
        &self.values
    }

    pub fn get(&self, tap: usize) -> f32 {
        self.values[tap]
    }

    pub fn set(&mut self, tap: usize, v: f32) -> Result<()> {
        if tap >= NUM_TAPS {
            return Err(Error::validation("tap", format!("{tap} out of range")));
        }
        self.values[tap] = check_scale(format!("scales[{tap}]"), v)?;
        Ok(())
    }

    /// Write `v` to every member of the group.
    pub fn set_group(&mut self, group: ScaleGroup, v: f32) -> Result<()> {
        let v = check_scale(group.name().to_string(), v)?;
        for i in group.taps() {
            self.values[i] = v;
        }
        Ok(())
    }

    /// The group's value when all members agree.
    pub fn group(&self, group: ScaleGroup) -> Option<f32> {
        let v = self.values[group.taps().start];
        group.taps().all(|i| self.values[i] == v).then_some(v)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// Preset file shipped with the crate.
pub const PRESETS: &str = include_str!("../../assets/presets.toml");

#[derive(Debug, Deserialize)]
struct PresetFile {
    presets: BTreeMap<String, ControlScales>,
}

/// Parse a preset file: a `[presets]` table of 13-element arrays.
pub fn parse_presets(text: &str) -> Result<BTreeMap<String, ControlScales>> {
    let f: PresetFile = toml::from_str(text).map_err(|e| Error::validation("presets", e.to_string()))?;
    Ok(f.presets)
}

pub fn default_presets() -> BTreeMap<String, ControlScales> {
    parse_presets(PRESETS).expect("shipped presets parse")
}

pub fn preset(name: &str) -> Result<ControlScales> {
    default_presets().remove(name).ok_or_else(|| Error::validation("scales", format!("unknown preset {name}")))
}

/// Everything the branch consumes besides the noisy image.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlContext {
    pub pose_map: Image,
    pub visual: VisualEmbedding,
    /// `64 × 64`, values 0 or 1.
    pub mask: Vec<u8>,
    pub scales: ControlScales,
}

impl ControlContext {
    pub fn validate(&self) -> Result<()> {
        if self.pose_map.width != IMAGE_SIZE || self.pose_map.height != IMAGE_SIZE {
            return Err(Error::shape("pose_map", &[IMAGE_SIZE, IMAGE_SIZE, 3], &[self.pose_map.height, self.pose_map.width, 3]));
        }
        if self.mask.len() != IMAGE_SIZE * IMAGE_SIZE {
            return Err(Error::shape("mask", &[IMAGE_SIZE, IMAGE_SIZE], &[self.mask.len()]));
        }
        if self.mask.iter().any(|&m| m > 1) {
            return Err(Error::validation("mask", "must be binary"));
        }
        Ok(())
    }
}

/// Nearest-neighbor resize of a square binary mask to `out × out`.
pub fn resize_mask<T: Float>(mask: &[u8], size: usize, out: usize) -> Vec<T> {
    assert_eq!(mask.len(), size * size, "mask size");
    let src = |i: usize| ((2 * i + 1) * size) / (2 * out);
    let mut v = Vec::with_capacity(out * out);
    for y in 0..out {
        let sy = src(y);
        for x in 0..out {
            v.push(if mask[sy * size + src(x)] != 0 { T::one() } else { T::zero() });
        }
    }
    v
}

/// `out_i = s_i · (resize_i(mask) ⊙ f_i)` on plain tensors `[C, R, R]`.
pub fn mask_and_scale<T: Float>(features: &[Tensor<T>], mask: &[u8], scales: &ControlScales) -> Result<Vec<Tensor<T>>> {
    if features.len() != NUM_TAPS {
        return Err(Error::shape("control features", &[NUM_TAPS], &[features.len()]));
    }
    let size = (mask.len() as f64).sqrt() as usize;
    if size * size != mask.len() {
        return Err(Error::validation("mask", "must be square"));
    }
    features
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let s = f.shape();
            if s.len() != 3 || s[1] != s[2] {
                return Err(Error::shape(format!("control feature {i}"), &[0, 0, 0], s));
            }
            let m: Vec<T> = resize_mask(mask, size, s[1]);
            let scale = T::of(scales.get(i) as f64);
            let mut out = f.clone();
            for row in out.data_mut().chunks_mut(m.len()) {
                for (a, &mm) in row.iter_mut().zip(&m) {
                    *a = scale * (mm * *a);
                }
            }
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn range_is_enforced() {
        assert!(ControlScales::uniform(2.0).is_ok());
        assert!(matches!(ControlScales::uniform(2.01), Err(Error::Validation { .. })));
        assert!(ControlScales::uniform(-0.1).is_err());
        assert!(ControlScales::uniform(f32::NAN).is_err());
        let mut s = ControlScales::ones();
        assert!(s.set(3, 5.0).is_err());
        assert_eq!(s, ControlScales::ones());
    }

    #[test]
    fn group_setters_write_through() {
        let mut s = ControlScales::zeros();
        s.set_group(ScaleGroup::Mb, 0.5).unwrap();
        for i in 0..NUM_TAPS {
            assert_eq!(s.get(i), if (4..9).contains(&i) { 0.5 } else { 0.0 });
        }
        assert_eq!(s.group(ScaleGroup::Mb), Some(0.5));
        s.set(5, 1.0).unwrap();
        assert_eq!(s.group(ScaleGroup::Mb), None);
    }

    #[test]
    fn shipped_presets() {
        let p = default_presets();
        assert_eq!(p["faithful"], ControlScales::groups(0.0, 1.0, 1.0).unwrap());
        assert_eq!(p["stylize"], ControlScales::groups(0.0, 0.5, 0.0).unwrap());
        assert!(p["off"].is_zero());
        assert!(p.contains_key("pose_only"));
        assert!(parse_presets("[presets]\nbad = [1, 2]\n").is_err());
        assert!(parse_presets("[presets]\nbad = [0,0,0,0,0,0,0,0,0,0,0,0,3]\n").is_err());
    }

    #[test]
    fn two_by_two_hand_computed() {
        let mut feats: Vec<Tensor<f64>> = (0..NUM_TAPS).map(|_| Tensor::zeros(&[1, 2, 2])).collect();
        feats[7] = Tensor::new(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0]);
        let mut scales = ControlScales::zeros();
        scales.set(7, 0.5).unwrap();
        let out = mask_and_scale(&feats, &[1, 0, 0, 1], &scales).unwrap();
        assert_eq!(out[7].data(), &[0.5, 0.0, 0.0, 2.0, -0.5, 0.0, 0.0, -2.0]);
    }

    #[test]
    fn identity_and_zero() {
        let feats: Vec<Tensor<f32>> =
            (0..NUM_TAPS).map(|i| Tensor::new(&[2, 4, 4], (0..32).map(|k| (k + i) as f32).collect())).collect();
        let ones = vec![1u8; 64 * 64];
        let same = mask_and_scale(&feats, &ones, &ControlScales::ones()).unwrap();
        assert_eq!(same, feats);
        let zero = mask_and_scale(&feats, &ones, &ControlScales::zeros()).unwrap();
        assert!(zero.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn nearest_resize_keeps_binary_and_blocks() {
        let mut m = vec![0u8; 64 * 64];
        for y in 0..32 {
            for x in 0..32 {
                m[y * 64 + x] = 1;
            }
        }
        let r: Vec<f32> = resize_mask(&m, 64, 8);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(r[y * 8 + x], if x < 4 && y < 4 { 1.0 } else { 0.0 });
            }
        }
    }
}
