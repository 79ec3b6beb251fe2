//! On-disk datasets.
//!
//! A dataset directory holds `manifest.json` plus one record per sample,
//! `sample_{index:06}.bin`. A record is little-endian:
//!
//! ```text
//! magic "VSMP" | u32 version
//! u32 array count, then per array:
//!   u16 name length | name | u8 dtype (0 = u8) | u8 ndim | u32 dims[ndim] | u64 byte length | bytes
//! u32 string count, then per string:
//!   u16 name length | name | u64 byte length | UTF-8 bytes
//! ```
//!
//! Arrays: `image` `[64,64,3]`, `segment_map` `[64,64]`, `pose_map`
//! `[64,64,3]`, `human_mask` `[64,64]`, `style_images` `[8,32,32,3]`,
//! `style_present` `[8]`. Color arrays hold 8-bit levels, which is exact
//! because every rendered value is a multiple of 1/255. Strings:
//! `text_label` and `palette_meta` (JSON).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    color_by_name, generate_scene, PaletteMeta, Rgb, Sample, SceneSpec, StyleImageSet, BackgroundKind, IMAGE_SIZE,
    NUM_CATEGORIES, STYLE_SIZE,
};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::hex_digest;

const MAGIC: &[u8; 4] = b"VSMP";
const RECORD_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

/// Forbids one background style for scenes whose top color is in a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutRule {
    pub top_colors: Vec<String>,
    pub background: BackgroundKind,
}

impl HoldoutRule {
    pub fn applies_to(&self, top: Rgb) -> bool {
        self.top_colors.iter().any(|n| color_by_name(n) == Some(top))
    }
}

/// Sampling ranges for random scene specs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub figure_scale: (f32, f32),
    pub torso_dx: (f32, f32),
    pub lean: (f32, f32),
    pub shoulder: (f32, f32),
    pub elbow: (f32, f32),
    pub hip: (f32, f32),
    pub knee: (f32, f32),
    pub p_striped_garment: f64,
    pub p_outerwear: f64,
    pub p_shoes: f64,
    pub p_headwear: f64,
    pub p_accessories: f64,
    pub holdout: Vec<HoldoutRule>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let group = |names: &[&str], background| HoldoutRule {
            top_colors: names.iter().map(|s| s.to_string()).collect(),
            background,
        };
        Self {
            holdout: vec![
                group(&["red", "orange", "yellow", "green"], BackgroundKind::Stripes),
                group(&["blue", "purple", "pink", "brown"], BackgroundKind::Gradient),
                group(&["black", "white", "gray", "cyan"], BackgroundKind::Plain),
            ],
            ..Self::unrestricted()
        }
    }
}

impl DatasetConfig {
    /// The default ranges with every background allowed for every color.
    pub fn unrestricted() -> Self {
        Self {
            figure_scale: (0.6, 0.9),
            torso_dx: (-4.0, 4.0),
            lean: (-0.15, 0.15),
            shoulder: (0.1, 1.3),
            elbow: (0.0, 1.0),
            hip: (0.0, 0.4),
            knee: (0.0, 0.5),
            p_striped_garment: 0.3,
            p_outerwear: 0.3,
            p_shoes: 0.7,
            p_headwear: 0.3,
            p_accessories: 0.3,
            holdout: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, (lo, hi): (f32, f32)| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                Err(Error::validation(name, format!("invalid range ({lo}, {hi})")))
            }
        };
        range("figure_scale", self.figure_scale)?;
        if self.figure_scale.0 < 0.4 || self.figure_scale.1 > 0.9 {
            return Err(Error::validation("figure_scale", "must lie within [0.4, 0.9]"));
        }
        range("torso_dx", self.torso_dx)?;
        range("lean", self.lean)?;
        range("shoulder", self.shoulder)?;
        range("elbow", self.elbow)?;
        range("hip", self.hip)?;
        range("knee", self.knee)?;
        for (name, p) in [
            ("p_striped_garment", self.p_striped_garment),
            ("p_outerwear", self.p_outerwear),
            ("p_shoes", self.p_shoes),
            ("p_headwear", self.p_headwear),
            ("p_accessories", self.p_accessories),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(name, format!("{p} is not a probability")));
            }
        }
        for (i, rule) in self.holdout.iter().enumerate() {
            if let Some(bad) = rule.top_colors.iter().find(|n| color_by_name(n).is_none()) {
                return Err(Error::validation(format!("holdout[{i}].top_colors"), format!("unknown color {bad}")));
            }
        }
        let mut forbidden = std::collections::BTreeMap::<&str, usize>::new();
        for rule in &self.holdout {
            for n in &rule.top_colors {
                *forbidden.entry(n).or_default() += 1;
            }
        }
        if let Some((n, _)) = forbidden.iter().find(|(_, &k)| k >= BackgroundKind::ALL.len()) {
            return Err(Error::validation("holdout", format!("every background is forbidden for {n}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    /// Even spec seeds train, odd ones test.
    pub fn of_seed(seed: u64) -> Self {
        if seed.is_multiple_of(2) {
            Split::Train
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub index: usize,
    pub seed: u64,
    pub split: Split,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub seed: u64,
    pub count: usize,
    pub config: DatasetConfig,
    pub samples: Vec<ManifestEntry>,
}

/// Spec seed of sample `index` in a dataset built with `seed`.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    (seed << 32) | index as u64
}

/// Generate `n` samples and write them under `out`.
pub fn build_dataset(n: usize, config: &DatasetConfig, seed: u64, out: &Path) -> Result<Manifest> {
    if n == 0 {
        return Err(Error::validation("n", "must be at least 1"));
    }
    if n > u32::MAX as usize || seed > u32::MAX as u64 {
        return Err(Error::validation("seed", "seed and n must fit in 32 bits"));
    }
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut samples = Vec::with_capacity(n);
    for index in 0..n {
        let s = sample_seed(seed, index);
        let spec = SceneSpec::sample(s, config);
        let sample = generate_scene(&spec)?;
        let file = format!("sample_{index:06}.bin");
        let bytes = encode_sample(&sample);
        let path = out.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        samples.push(ManifestEntry { index, seed: s, split: Split::of_seed(s), file, sha256: sha256_hex(&bytes) });
    }
    let manifest = Manifest { version: MANIFEST_VERSION, seed, count: n, config: config.clone(), samples };
    let path = out.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex_digest(&Sha256::digest(bytes))
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::format(&path, format!("unsupported manifest version {}", m.version)));
    }
    if m.samples.len() != m.count {
        return Err(Error::format(&path, "sample count mismatch"));
    }
    Ok(m)
}

/// A dataset whose verified records are held in memory and decoded on demand.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    records: Vec<Vec<u8>>,
}

impl Dataset {
    /// Load every record, verifying hashes.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = load_manifest(dir)?;
        let mut records = Vec::with_capacity(manifest.count);
        for e in &manifest.samples {
            let path = dir.join(&e.file);
            let bytes = fs::read(&path).map_err(|err| Error::io(&path, err))?;
            if sha256_hex(&bytes) != e.sha256 {
                return Err(Error::format(&path, "hash mismatch"));
            }
            decode_sample(&bytes, &path)?;
            records.push(bytes);
        }
        Ok(Self { dir: dir.to_path_buf(), manifest, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<Sample> {
        let bytes = self.records.get(index).ok_or_else(|| Error::validation("index", format!("{index} out of range")))?;
        decode_sample(bytes, &self.dir.join(&self.manifest.samples[index].file))
    }

    /// Indices of the samples in `split`, in manifest order.
    pub fn split(&self, split: Split) -> Vec<usize> {
        self.manifest.samples.iter().filter(|e| e.split == split).map(|e| e.index).collect()
    }

    /// Rebuild the spec of a sample from its manifest seed.
    pub fn spec(&self, index: usize) -> SceneSpec {
        SceneSpec::sample(self.manifest.samples[index].seed, &self.manifest.config)
    }
}

pub fn write_sample(path: &Path, sample: &Sample) -> Result<()> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&encode_sample(sample)))
        .map_err(|e| Error::io(path, e))
}

pub fn read_sample(path: &Path) -> Result<Sample> {
    let mut bytes = Vec::new();
    fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    decode_sample(&bytes, path)
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_array(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[u8]) {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    put_name(out, name);
    out.push(0);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    out.extend_from_slice(data);
}

fn put_string(out: &mut Vec<u8>, name: &str, s: &str) {
    put_name(out, name);
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_sample(s: &Sample) -> Vec<u8> {
    let n = IMAGE_SIZE;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&RECORD_VERSION.to_le_bytes());
    out.extend_from_slice(&6u32.to_le_bytes());
    put_array(&mut out, "image", &[n, n, 3], &s.image.to_rgb8());
    put_array(&mut out, "segment_map", &[n, n], &s.segment_map);
    put_array(&mut out, "pose_map", &[n, n, 3], &s.pose_map.to_rgb8());
    put_array(&mut out, "human_mask", &[n, n], &s.human_mask);
    let styles: Vec<u8> = s.style_set.images.iter().flat_map(Image::to_rgb8).collect();
    put_array(&mut out, "style_images", &[NUM_CATEGORIES, STYLE_SIZE, STYLE_SIZE, 3], &styles);
    let present: Vec<u8> = s.style_set.present.iter().map(|&p| p as u8).collect();
    put_array(&mut out, "style_present", &[NUM_CATEGORIES], &present);
    out.extend_from_slice(&2u32.to_le_bytes());
    put_string(&mut out, "text_label", &s.text_label);
    put_string(&mut out, "palette_meta", &serde_json::to_string(&s.palette_meta).expect("palette serializes"));
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "truncated record"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "name is not UTF-8"))
    }
}

pub fn decode_sample(bytes: &[u8], path: &Path) -> Result<Sample> {
    let mut c = Cursor { buf: bytes, pos: 0, path };
    if c.take(4)? != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = c.u32()?;
    if version != RECORD_VERSION {
        return Err(Error::format(path, format!("unsupported record version {version}")));
    }
    let mut arrays = std::collections::BTreeMap::new();
    for _ in 0..c.u32()? {
        let name = c.name()?;
        if c.u8()? != 0 {
            return Err(Error::format(path, format!("array {name}: unsupported dtype")));
        }
        let ndim = c.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(c.u32()? as usize);
        }
        let len = c.u64()? as usize;
        if dims.iter().product::<usize>() != len {
            return Err(Error::format(path, format!("array {name}: byte length disagrees with shape")));
        }
        arrays.insert(name, (dims, c.take(len)?.to_vec()));
    }
    let mut strings = std::collections::BTreeMap::new();
    for _ in 0..c.u32()? {
        let name = c.name()?;
        let len = c.u64()? as usize;
        let s = String::from_utf8(c.take(len)?.to_vec()).map_err(|_| Error::format(path, "string is not UTF-8"))?;
        strings.insert(name, s);
    }
    let n = IMAGE_SIZE;
    let mut array = |name: &str, dims: &[usize]| -> Result<Vec<u8>> {
        match arrays.remove(name) {
            Some((d, data)) if d == dims => Ok(data),
            Some(_) => Err(Error::format(path, format!("array {name}: unexpected shape"))),
            None => Err(Error::format(path, format!("missing array {name}"))),
        }
    };
    let image = Image::from_rgb8(n, n, &array("image", &[n, n, 3])?)?;
    let segment_map = array("segment_map", &[n, n])?;
    let pose_map = Image::from_rgb8(n, n, &array("pose_map", &[n, n, 3])?)?;
    let human_mask = array("human_mask", &[n, n])?;
    let styles = array("style_images", &[NUM_CATEGORIES, STYLE_SIZE, STYLE_SIZE, 3])?;
    let present_raw = array("style_present", &[NUM_CATEGORIES])?;
    let per = STYLE_SIZE * STYLE_SIZE * 3;
    let images = styles
        .chunks(per)
        .map(|ch| Image::from_rgb8(STYLE_SIZE, STYLE_SIZE, ch))
        .collect::<Result<Vec<_>>>()?;
    let mut present = [false; NUM_CATEGORIES];
    for (p, &r) in present.iter_mut().zip(&present_raw) {
        *p = r != 0;
    }
    let text_label = strings.remove("text_label").ok_or_else(|| Error::format(path, "missing text_label"))?;
    let meta = strings.remove("palette_meta").ok_or_else(|| Error::format(path, "missing palette_meta"))?;
    let palette_meta: PaletteMeta = serde_json::from_str(&meta).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Sample {
        image,
        segment_map,
        pose_map,
        human_mask,
        style_set: StyleImageSet { images, present },
        text_label,
        palette_meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_round_trip_is_exact() {
        let spec = SceneSpec::sample(42, &DatasetConfig::default());
        let s = generate_scene(&spec).unwrap();
        let back = decode_sample(&encode_sample(&s), Path::new("mem")).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn truncated_record_is_rejected() {
        let s = generate_scene(&SceneSpec::sample(1, &DatasetConfig::default())).unwrap();
        let bytes = encode_sample(&s);
        let err = decode_sample(&bytes[..bytes.len() - 3], Path::new("x.bin")).unwrap_err();
        assert!(err.to_string().contains("x.bin"));
    }

    #[test]
    fn holdouts_are_respected() {
        let cfg = DatasetConfig::default();
        for seed in 0..300 {
            let spec = SceneSpec::sample(seed, &cfg);
            let top = spec.segment_palette[&super::super::Category::Top].color;
            for rule in &cfg.holdout {
                if rule.applies_to(top) {
                    assert_ne!(spec.background_style.kind(), rule.background);
                }
            }
        }
    }

    #[test]
    fn parity_split() {
        assert_eq!(Split::of_seed(sample_seed(7, 0)), Split::Train);
        assert_eq!(Split::of_seed(sample_seed(7, 3)), Split::Test);
    }

    #[test]
    fn config_validation_names_field() {
        let c = DatasetConfig { p_headwear: 1.5, ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Validation { field, .. }) if field == "p_headwear"));
    }
}
