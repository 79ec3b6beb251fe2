//! Figure layout: joints from pose parameters, paintable capsules per
//! category, and the colored skeleton.

use std::collections::BTreeMap;

use super::raster::{dist2_to_segment, Capsule, Point};
use super::{rgb_f32, Category, Paint, Pose, IMAGE_SIZE};
use crate::image::Image;

// Body proportions in figure units, measured from the pelvis.
const TORSO: f32 = 3.0;
const HEAD_OFFSET: f32 = 1.0;
const UPPER_ARM: f32 = 1.6;
const FOREARM: f32 = 1.5;
const THIGH: f32 = 2.0;
const SHIN: f32 = 2.0;
const SHOULDER_HALF: f32 = 1.0;
const HIP_HALF: f32 = 0.5;
const EXTENT_UP: f32 = 5.5;
const EXTENT_DOWN: f32 = 4.4;

const STROKE_RADIUS: f32 = 1.0;

/// Figure extent above and below the pelvis, in units.
pub fn extent_units() -> (f32, f32) {
    (EXTENT_UP, EXTENT_DOWN)
}

#[derive(Debug, Clone, Copy)]
pub struct Primitive {
    pub category: Category,
    pub shape: Capsule,
}

impl Primitive {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        self.shape.contains(x, y)
    }
}

#[derive(Debug, Clone)]
pub struct Figure {
    unit: f32,
    up: (f32, f32),
    side: (f32, f32),
    pelvis: Point,
    neck: Point,
    head: Point,
    head_up: (f32, f32),
    shoulders: [Point; 2],
    elbows: [Point; 2],
    wrists: [Point; 2],
    hips: [Point; 2],
    knees: [Point; 2],
    ankles: [Point; 2],
}

/// Direction of a limb at `angle` from straight down; side 0 swings left.
fn limb_dir(angle: f32, side: usize) -> (f32, f32) {
    let s = if side == 0 { -1.0 } else { 1.0 };
    (s * angle.sin(), angle.cos())
}

impl Figure {
    pub fn layout(pose: &Pose, scale: f32) -> Self {
        let unit = scale * IMAGE_SIZE as f32 / (EXTENT_UP + EXTENT_DOWN);
        let up = (pose.lean.sin(), -pose.lean.cos());
        let side = (-up.1, up.0);
        let pelvis = Point::new(pose.torso_x, pose.torso_y);
        let neck = pelvis.offset(up, TORSO * unit);
        let ha = pose.lean + pose.neck;
        let head_up = (ha.sin(), -ha.cos());
        let head = neck.offset(head_up, HEAD_OFFSET * unit);
        let chest = pelvis.offset(up, (TORSO - 0.4) * unit);
        let mut f = Self {
            unit,
            up,
            side,
            pelvis,
            neck,
            head,
            head_up,
            shoulders: [chest; 2],
            elbows: [chest; 2],
            wrists: [chest; 2],
            hips: [pelvis; 2],
            knees: [pelvis; 2],
            ankles: [pelvis; 2],
        };
        for s in 0..2 {
            let sgn = if s == 0 { -1.0 } else { 1.0 };
            f.shoulders[s] = chest.offset(side, sgn * SHOULDER_HALF * unit);
            f.elbows[s] = f.shoulders[s].offset(limb_dir(pose.shoulder[s], s), UPPER_ARM * unit);
            f.wrists[s] = f.elbows[s].offset(limb_dir(pose.shoulder[s] + pose.elbow[s], s), FOREARM * unit);
            f.hips[s] = pelvis.offset(side, sgn * HIP_HALF * unit);
            f.knees[s] = f.hips[s].offset(limb_dir(pose.hip[s], s), THIGH * unit);
            f.ankles[s] = f.knees[s].offset(limb_dir(pose.hip[s] - pose.knee[s], s), SHIN * unit);
        }
        f
    }

    fn cap(&self, category: Category, a: Point, b: Point, r: f32) -> Primitive {
        Primitive { category, shape: Capsule { a, b, r: r * self.unit } }
    }

    fn along(&self, d: f32) -> Point {
        self.pelvis.offset(self.up, d * self.unit)
    }

    /// Paintable shapes in drawing order, restricted to categories present
    /// in `palette`. Later shapes cover earlier ones.
    pub fn primitives(&self, palette: &BTreeMap<Category, Paint>) -> Vec<Primitive> {
        use Category::*;
        let u = self.unit;
        let across = |p: Point, half: f32| (p.offset(self.side, -half * u), p.offset(self.side, half * u));
        let mut v = Vec::new();

        v.push(self.cap(Hair, self.head.offset(self.head_up, 0.25 * u), self.head.offset(self.head_up, 0.25 * u), 0.95));
        for s in 0..2 {
            v.push(self.cap(Bottom, self.hips[s], self.knees[s], 0.5));
            v.push(self.cap(Bottom, self.knees[s], self.ankles[s], 0.45));
        }
        let (hl, hr) = across(self.along(0.3), 0.45);
        v.push(self.cap(Bottom, hl, hr, 0.7));
        for s in 0..2 {
            let sgn = if s == 0 { -1.0 } else { 1.0 };
            let toe = self.ankles[s].offset(self.side, sgn * 0.5 * u);
            v.push(self.cap(Shoes, self.ankles[s], toe, 0.35));
        }
        v.push(self.cap(Top, self.along(1.0), self.along(TORSO - 0.3), 1.05));
        for s in 0..2 {
            v.push(self.cap(Top, self.shoulders[s], self.elbows[s], 0.38));
            v.push(self.cap(Top, self.elbows[s], self.wrists[s], 0.33));
        }
        for s in 0..2 {
            let sgn = if s == 0 { -1.0 } else { 1.0 };
            let a = self.along(1.0).offset(self.side, sgn * 0.8 * u);
            let b = self.along(TORSO - 0.35).offset(self.side, sgn * 0.8 * u);
            v.push(self.cap(Outerwear, a, b, 0.42));
            v.push(self.cap(Outerwear, self.shoulders[s], self.elbows[s], 0.43));
        }
        let (bl, br) = across(self.along(1.0), 1.0);
        v.push(self.cap(Accessories, bl, br, 0.22));
        v.push(self.cap(Face, self.neck.offset(self.up, -0.3 * u), self.neck.offset(self.head_up, 0.3 * u), 0.32));
        let chin = self.head.offset(self.head_up, -0.1 * u);
        v.push(self.cap(Face, chin, chin, 0.75));
        let brim_c = self.head.offset(self.head_up, 0.7 * u);
        let hside = (-self.head_up.1, self.head_up.0);
        v.push(self.cap(Headwear, brim_c.offset(hside, -1.05 * u), brim_c.offset(hside, 1.05 * u), 0.25));
        let crown = self.head.offset(self.head_up, 0.95 * u);
        v.push(self.cap(Headwear, crown, crown, 0.55));

        v.retain(|p| palette.contains_key(&p.category));
        v
    }

    /// Per-pixel labels; the last covering primitive wins.
    pub fn segment(&self, size: usize, palette: &BTreeMap<Category, Paint>) -> Vec<u8> {
        let mut map = vec![0u8; size * size];
        for p in self.primitives(palette) {
            let (x0, x1, y0, y1) = p.shape.bounds(size);
            for y in y0..y1 {
                for x in x0..x1 {
                    if p.contains(x as f32 + 0.5, y as f32 + 0.5) {
                        map[y * size + x] = p.category.label();
                    }
                }
            }
        }
        map
    }

    /// Garment color at a pixel. Stripes are horizontal bands in image rows.
    pub fn paint_at(&self, paint: &Paint, _x: usize, y: usize) -> [f32; 3] {
        match paint.stripes {
            Some(s) if (y as u32 % s.period_px) >= s.period_px / 2 => rgb_f32(s.color),
            _ => rgb_f32(paint.color),
        }
    }

    pub fn skeleton(&self) -> Skeleton {
        let mut limbs = vec![(self.pelvis, self.neck), (self.neck, self.head), (self.shoulders[0], self.shoulders[1])];
        limbs.push((self.hips[0], self.hips[1]));
        for s in 0..2 {
            limbs.push((self.shoulders[s], self.elbows[s]));
            limbs.push((self.elbows[s], self.wrists[s]));
            limbs.push((self.hips[s], self.knees[s]));
            limbs.push((self.knees[s], self.ankles[s]));
        }
        Skeleton { limbs }
    }
}

/// Limb strokes of a figure, each drawn in its own color.
#[derive(Debug, Clone)]
pub struct Skeleton {
    limbs: Vec<(Point, Point)>,
}

/// Limb colors, all nonzero.
pub const LIMB_COLORS: [[u8; 3]; 12] = [
    [255, 0, 0],
    [255, 128, 0],
    [255, 255, 0],
    [128, 255, 0],
    [0, 255, 0],
    [0, 255, 128],
    [0, 255, 255],
    [0, 128, 255],
    [0, 0, 255],
    [128, 0, 255],
    [255, 0, 255],
    [255, 0, 128],
];

impl Skeleton {
    pub fn covers(&self, x: usize, y: usize) -> bool {
        let p = Point::new(x as f32 + 0.5, y as f32 + 0.5);
        self.limbs.iter().any(|&(a, b)| dist2_to_segment(p, a, b) <= STROKE_RADIUS * STROKE_RADIUS)
    }

    pub fn render(&self, size: usize) -> Image {
        let mut img = Image::new(size, size);
        for (i, &(a, b)) in self.limbs.iter().enumerate() {
            let color = rgb_f32(LIMB_COLORS[i % LIMB_COLORS.len()]);
            let shape = Capsule { a, b, r: STROKE_RADIUS };
            let (x0, x1, y0, y1) = shape.bounds(size);
            for y in y0..y1 {
                for x in x0..x1 {
                    if shape.contains(x as f32 + 0.5, y as f32 + 0.5) {
                        img.set(x, y, color);
                    }
                }
            }
        }
        img
    }
}
