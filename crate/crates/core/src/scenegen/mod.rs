//! Procedural articulated-figure scenes with exact segment maps, masks,
//! skeleton pose maps and per-category style crops.

mod dataset;
mod figure;
mod raster;
mod style;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use dataset::{
    build_dataset, decode_sample, encode_sample, load_manifest, read_sample, sample_seed, write_sample, Dataset,
    DatasetConfig, HoldoutRule, Manifest, ManifestEntry, Split,
};
pub use figure::Skeleton;
pub use style::{extract_style_images, STYLE_SIZE};

pub const IMAGE_SIZE: usize = 64;
pub const NUM_CATEGORIES: usize = 8;

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Hair,
    Face,
    Top,
    Bottom,
    Outerwear,
    Headwear,
    Shoes,
    Accessories,
}

impl Category {
    /// Fixed order used by style sets and embeddings.
    pub const ALL: [Category; NUM_CATEGORIES] = [
        Category::Hair,
        Category::Face,
        Category::Top,
        Category::Bottom,
        Category::Outerwear,
        Category::Headwear,
        Category::Shoes,
        Category::Accessories,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Segment label, `1..=8`; `0` is background.
    pub fn label(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_label(label: u8) -> Option<Self> {
        (1..=NUM_CATEGORIES as u8).contains(&label).then(|| Self::ALL[label as usize - 1])
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Hair => "hair",
            Category::Face => "face",
            Category::Top => "top",
            Category::Bottom => "bottom",
            Category::Outerwear => "outerwear",
            Category::Headwear => "headwear",
            Category::Shoes => "shoes",
            Category::Accessories => "accessories",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

/// The closed color vocabulary shared by garments, backgrounds and prompts.
pub const NAMED_COLORS: [(&str, Rgb); 12] = [
    ("red", [210, 40, 40]),
    ("orange", [240, 140, 30]),
    ("yellow", [235, 215, 50]),
    ("green", [40, 160, 60]),
    ("blue", [40, 80, 210]),
    ("purple", [130, 50, 170]),
    ("pink", [240, 130, 180]),
    ("brown", [120, 75, 40]),
    ("black", [25, 25, 25]),
    ("white", [240, 240, 240]),
    ("gray", [128, 128, 128]),
    ("cyan", [40, 200, 210]),
];

pub const SKIN_TONES: [Rgb; 4] = [[241, 194, 160], [224, 172, 105], [172, 116, 72], [110, 70, 45]];

pub fn color_by_name(name: &str) -> Option<Rgb> {
    NAMED_COLORS.iter().find(|(n, _)| *n == name).map(|&(_, c)| c)
}

pub fn color_name(rgb: Rgb) -> Option<&'static str> {
    NAMED_COLORS.iter().find(|(_, c)| *c == rgb).map(|&(n, _)| n)
}

pub fn rgb_f32(c: Rgb) -> [f32; 3] {
    [c[0] as f32 / 255.0, c[1] as f32 / 255.0, c[2] as f32 / 255.0]
}

/// Horizontal stripes painted over a garment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GarmentStripes {
    pub color: Rgb,
    pub period_px: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paint {
    pub color: Rgb,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stripes: Option<GarmentStripes>,
}

impl Paint {
    pub fn solid(color: Rgb) -> Self {
        Self { color, stripes: None }
    }

    pub fn colors(&self) -> Vec<Rgb> {
        let mut v = vec![self.color];
        v.extend(self.stripes.map(|s| s.color));
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundKind {
    Plain,
    Stripes,
    Gradient,
}

impl BackgroundKind {
    pub const ALL: [BackgroundKind; 3] = [BackgroundKind::Plain, BackgroundKind::Stripes, BackgroundKind::Gradient];

    pub fn word(self) -> &'static str {
        match self {
            BackgroundKind::Plain => "plain",
            BackgroundKind::Stripes => "stripes",
            BackgroundKind::Gradient => "gradient",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.word() == s)
    }
}

/// Background painting. Stripes are vertical bands alternating every half
/// period; gradients run top to bottom.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Background {
    Plain { color: Rgb },
    Stripes { color1: Rgb, color2: Rgb, period_px: u32 },
    Gradient { color1: Rgb, color2: Rgb },
}

impl Background {
    pub fn kind(&self) -> BackgroundKind {
        match self {
            Background::Plain { .. } => BackgroundKind::Plain,
            Background::Stripes { .. } => BackgroundKind::Stripes,
            Background::Gradient { .. } => BackgroundKind::Gradient,
        }
    }

    pub fn colors(&self) -> Vec<Rgb> {
        match *self {
            Background::Plain { color } => vec![color],
            Background::Stripes { color1, color2, .. } | Background::Gradient { color1, color2 } => {
                vec![color1, color2]
            }
        }
    }

    /// Pixel color at integer position `(x, y)` of a `size`-pixel square.
    /// Gradients are rounded to 8-bit levels.
    pub fn color_at(&self, x: usize, y: usize, size: usize) -> [f32; 3] {
        match *self {
            Background::Plain { color } => rgb_f32(color),
            Background::Stripes { color1, color2, period_px } => {
                let p = period_px as usize;
                if (x % p) < p / 2 {
                    rgb_f32(color1)
                } else {
                    rgb_f32(color2)
                }
            }
            Background::Gradient { color1, color2 } => {
                let f = if size > 1 { y as f32 / (size - 1) as f32 } else { 0.0 };
                let mix = |i: usize| {
                    let v = color1[i] as f32 + (color2[i] as f32 - color1[i] as f32) * f;
                    v.round() / 255.0
                };
                [mix(0), mix(1), mix(2)]
            }
        }
    }

    /// Prompt words after "a person,". Colors without a name are omitted.
    pub fn describe(&self) -> String {
        let mut words: Vec<&str> = self.colors().into_iter().filter_map(color_name).collect();
        if words.len() != self.colors().len() {
            words.clear();
        }
        words.push(self.kind().word());
        words.join(" ")
    }

    pub fn render(&self, size: usize) -> Image {
        let mut img = Image::new(size, size);
        for y in 0..size {
            for x in 0..size {
                img.set(x, y, self.color_at(x, y, size));
            }
        }
        img
    }
}

/// Articulation parameters. Angles in radians; limb angles are measured
/// from straight down, positive pointing away from the body's midline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Pelvis position in pixels.
    pub torso_x: f32,
    pub torso_y: f32,
    pub lean: f32,
    pub neck: f32,
    /// `[left, right]`.
    pub shoulder: [f32; 2],
    pub elbow: [f32; 2],
    pub hip: [f32; 2],
    pub knee: [f32; 2],
}

pub struct PoseLimits;

impl PoseLimits {
    pub const LEAN: (f32, f32) = (-0.4, 0.4);
    pub const NECK: (f32, f32) = (-0.5, 0.5);
    pub const SHOULDER: (f32, f32) = (-0.3, 2.8);
    pub const ELBOW: (f32, f32) = (0.0, 2.5);
    pub const HIP: (f32, f32) = (-0.3, 0.8);
    pub const KNEE: (f32, f32) = (0.0, 1.5);
}

impl Pose {
    pub fn validate(&self) -> Result<()> {
        let within = |name: &str, v: f32, (lo, hi): (f32, f32)| {
            if v.is_finite() && v >= lo && v <= hi {
                Ok(())
            } else {
                Err(Error::validation(format!("figure_pose.{name}"), format!("{v} outside [{lo}, {hi}]")))
            }
        };
        let size = IMAGE_SIZE as f32;
        within("torso_x", self.torso_x, (0.0, size))?;
        within("torso_y", self.torso_y, (0.0, size))?;
        within("lean", self.lean, PoseLimits::LEAN)?;
        within("neck", self.neck, PoseLimits::NECK)?;
        for side in 0..2 {
            within("shoulder", self.shoulder[side], PoseLimits::SHOULDER)?;
            within("elbow", self.elbow[side], PoseLimits::ELBOW)?;
            within("hip", self.hip[side], PoseLimits::HIP)?;
            within("knee", self.knee[side], PoseLimits::KNEE)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub figure_pose: Pose,
    pub segment_palette: BTreeMap<Category, Paint>,
    pub background_style: Background,
    /// Figure height as a fraction of the image height.
    pub figure_scale: f32,
    pub rng_seed: u64,
}

/// Palette and background colors of a sample, kept for the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteMeta {
    pub segment_palette: BTreeMap<Category, Paint>,
    pub background: Background,
}

impl PaletteMeta {
    pub fn foreground_colors(&self) -> Vec<Rgb> {
        let mut v: Vec<Rgb> = self.segment_palette.values().flat_map(Paint::colors).collect();
        v.sort();
        v.dedup();
        v
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        self.figure_pose.validate()?;
        if !(0.4..=0.9).contains(&self.figure_scale) {
            return Err(Error::validation("figure_scale", format!("{} outside [0.4, 0.9]", self.figure_scale)));
        }
        for (cat, paint) in &self.segment_palette {
            if let Some(s) = paint.stripes {
                if s.period_px < 2 {
                    return Err(Error::validation(
                        format!("segment_palette.{}.stripes.period_px", cat.name()),
                        "must be at least 2",
                    ));
                }
            }
        }
        if let Background::Stripes { period_px, .. } = self.background_style {
            if period_px < 2 {
                return Err(Error::validation("background_style.period_px", "must be at least 2"));
            }
        }
        Ok(())
    }

    pub fn text_label(&self) -> String {
        format!("a person, {}", self.background_style.describe())
    }

    /// Draw a random spec from the configured distribution.
    pub fn sample(seed: u64, cfg: &DatasetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let figure_scale = rng.random_range(cfg.figure_scale.0..=cfg.figure_scale.1);
        let mut range = |(lo, hi): (f32, f32)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let lean = range(cfg.lean);
        let neck = range((-0.3, 0.3));
        let shoulder = [range(cfg.shoulder), range(cfg.shoulder)];
        let elbow = [range(cfg.elbow), range(cfg.elbow)];
        let hip = [range(cfg.hip), range(cfg.hip)];
        let knee = [range(cfg.knee), range(cfg.knee)];
        let (up, down) = figure::extent_units();
        let unit = figure_scale * IMAGE_SIZE as f32 / (up + down);
        let top = range((1.0, (IMAGE_SIZE as f32 - (up + down) * unit - 1.0).max(1.0)));
        let torso_y = top + up * unit;
        let torso_x = IMAGE_SIZE as f32 / 2.0 + range(cfg.torso_dx);
        let figure_pose = Pose { torso_x, torso_y, lean, neck, shoulder, elbow, hip, knee };

        let garment = |rng: &mut ChaCha8Rng, exclude: &[Rgb]| loop {
            let (_, c) = NAMED_COLORS[rng.random_range(0..NAMED_COLORS.len())];
            if !exclude.contains(&c) {
                break c;
            }
        };
        let mut palette = BTreeMap::new();
        let hair = [color_by_name("black"), color_by_name("brown"), color_by_name("yellow"), color_by_name("orange")]
            [rng.random_range(0..4)]
        .expect("named");
        palette.insert(Category::Hair, Paint::solid(hair));
        palette.insert(Category::Face, Paint::solid(SKIN_TONES[rng.random_range(0..SKIN_TONES.len())]));
        let top_color = garment(&mut rng, &[]);
        let striped = |rng: &mut ChaCha8Rng, base: Rgb, p: f64| {
            if rng.random_bool(p) {
                let c = garment(rng, &[base]);
                let period = [4u32, 6][rng.random_range(0..2)];
                Paint { color: base, stripes: Some(GarmentStripes { color: c, period_px: period }) }
            } else {
                Paint::solid(base)
            }
        };
        let top = striped(&mut rng, top_color, cfg.p_striped_garment);
        palette.insert(Category::Top, top);
        let bottom_color = garment(&mut rng, &[top_color]);
        let bottom = striped(&mut rng, bottom_color, cfg.p_striped_garment);
        palette.insert(Category::Bottom, bottom);
        if rng.random_bool(cfg.p_shoes) {
            palette.insert(Category::Shoes, Paint::solid(garment(&mut rng, &[])));
        }
        if rng.random_bool(cfg.p_outerwear) {
            palette.insert(Category::Outerwear, Paint::solid(garment(&mut rng, &[top_color])));
        }
        if rng.random_bool(cfg.p_headwear) {
            palette.insert(Category::Headwear, Paint::solid(garment(&mut rng, &[hair])));
        }
        if rng.random_bool(cfg.p_accessories) {
            palette.insert(Category::Accessories, Paint::solid(garment(&mut rng, &[top_color])));
        }

        let forbidden: Vec<BackgroundKind> =
            cfg.holdout.iter().filter(|r| r.applies_to(top_color)).map(|r| r.background).collect();
        let kinds: Vec<BackgroundKind> =
            BackgroundKind::ALL.into_iter().filter(|k| !forbidden.contains(k)).collect();
        let kind = kinds[rng.random_range(0..kinds.len())];
        let c1 = garment(&mut rng, &[]);
        let c2 = garment(&mut rng, &[c1]);
        let background_style = match kind {
            BackgroundKind::Plain => Background::Plain { color: c1 },
            BackgroundKind::Stripes => {
                Background::Stripes { color1: c1, color2: c2, period_px: [8u32, 12, 16][rng.random_range(0..3)] }
            }
            BackgroundKind::Gradient => Background::Gradient { color1: c1, color2: c2 },
        };
        Self { figure_pose, segment_palette: palette, background_style, figure_scale, rng_seed: seed }
    }
}

/// Exact 3-channel style crops of the 8 categories, fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleImageSet {
    pub images: Vec<Image>,
    pub present: [bool; NUM_CATEGORIES],
}

impl StyleImageSet {
    pub fn blank() -> Self {
        Self {
            images: (0..NUM_CATEGORIES).map(|_| Image::new(STYLE_SIZE, STYLE_SIZE)).collect(),
            present: [false; NUM_CATEGORIES],
        }
    }

    pub fn get(&self, c: Category) -> &Image {
        &self.images[c.index()]
    }

    /// Replace one category's crop; an all-zero image unsets it.
    pub fn set(&mut self, c: Category, img: Image) -> Result<()> {
        if img.width != STYLE_SIZE || img.height != STYLE_SIZE {
            return Err(Error::shape(
                format!("style image {}", c.name()),
                &[STYLE_SIZE, STYLE_SIZE, 3],
                &[img.height, img.width, 3],
            ));
        }
        self.present[c.index()] = !img.is_blank();
        self.images[c.index()] = img;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// `H×W` labels, `0` background, `1..=8` categories.
    pub segment_map: Vec<u8>,
    pub pose_map: Image,
    /// `H×W`, 1 on the person.
    pub human_mask: Vec<u8>,
    pub style_set: StyleImageSet,
    pub text_label: String,
    pub palette_meta: PaletteMeta,
}

impl Sample {
    pub fn mask_f32(&self) -> Vec<f32> {
        self.human_mask.iter().map(|&m| m as f32).collect()
    }

    pub fn mask_coverage(&self) -> f64 {
        self.human_mask.iter().map(|&m| m as usize).sum::<usize>() as f64 / self.human_mask.len() as f64
    }
}

/// Render a scene. Pure function of `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let size = IMAGE_SIZE;
    let mut image = spec.background_style.render(size);
    let figure = figure::Figure::layout(&spec.figure_pose, spec.figure_scale);
    let segment_map = figure.segment(size, &spec.segment_palette);
    for y in 0..size {
        for x in 0..size {
            if let Some(cat) = Category::from_label(segment_map[y * size + x]) {
                let paint = &spec.segment_palette[&cat];
                image.set(x, y, figure.paint_at(paint, x, y));
            }
        }
    }
    let human_mask = segment_map.iter().map(|&l| (l != 0) as u8).collect();
    let pose_map = figure.skeleton().render(size);
    let style_set = extract_style_images(&image, &segment_map)?;
    Ok(Sample {
        image,
        segment_map,
        pose_map,
        human_mask,
        style_set,
        text_label: spec.text_label(),
        palette_meta: PaletteMeta {
            segment_palette: spec.segment_palette.clone(),
            background: spec.background_style,
        },
    })
}
