//! Hard-edged primitive rasterization. A pixel belongs to a shape when its
//! center lies inside it.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
}

impl Point {
    pub fn new(x: f32, y: f32) -> Self {
        Self { x, y }
    }

    pub fn offset(self, dir: (f32, f32), d: f32) -> Self {
        Self { x: self.x + dir.0 * d, y: self.y + dir.1 * d }
    }
}

/// Squared distance from `p` to segment `a`–`b`.
pub fn dist2_to_segment(p: Point, a: Point, b: Point) -> f32 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (cx, cy) = (a.x + t * dx, a.y + t * dy);
    (p.x - cx) * (p.x - cx) + (p.y - cy) * (p.y - cy)
}

/// A segment swept by a disc. `a == b` gives a disc.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub a: Point,
    pub b: Point,
    pub r: f32,
}

impl Capsule {
    pub fn contains(&self, x: f32, y: f32) -> bool {
        dist2_to_segment(Point::new(x, y), self.a, self.b) <= self.r * self.r
    }

    /// Pixel index range `[x0, x1) × [y0, y1)` that can contain the shape.
    pub fn bounds(&self, size: usize) -> (usize, usize, usize, usize) {
        let clampi = |v: f32| v.floor().clamp(0.0, size as f32) as usize;
        let x0 = clampi(self.a.x.min(self.b.x) - self.r - 1.0);
        let x1 = clampi(self.a.x.max(self.b.x) + self.r + 2.0);
        let y0 = clampi(self.a.y.min(self.b.y) - self.r - 1.0);
        let y1 = clampi(self.a.y.max(self.b.y) + self.r + 2.0);
        (x0, x1, y0, y1)
    }
}
