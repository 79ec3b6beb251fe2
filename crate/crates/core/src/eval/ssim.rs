//! Multiscale structural similarity and the person-crop similarity built on it.

use crate::error::{Error, Result};
use crate::image::Image;

pub const WINDOW: usize = 7;
pub const SIGMA: f64 = 1.5;
pub const SCALES: usize = 3;
/// Side of the square both person crops are resampled to.
pub const PERSON_BOX: usize = 48;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
/// The first three standard five-scale exponents, renormalized.
const WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Smallest side accepted by [`ms_ssim`].
pub fn min_side() -> usize {
    WINDOW << (SCALES - 1)
}

fn kernel() -> [f64; WINDOW] {
    let c = (WINDOW / 2) as f64;
    let mut k = [0.0; WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// One channel as a `w × h` plane.
#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn channel(img: &Image, c: usize) -> Self {
        Self { w: img.width, h: img.height, v: img.data.chunks(3).map(|p| p[c] as f64).collect() }
    }

    fn map2(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane { w: self.w, h: self.h, v: self.v.iter().zip(&o.v).map(|(&a, &b)| f(a, b)).collect() }
    }

    /// Separable Gaussian filter, valid region only.
    fn blur(&self, k: &[f64; WINDOW]) -> Plane {
        let (w, h) = (self.w - WINDOW + 1, self.h - WINDOW + 1);
        let mut rows = vec![0.0; w * self.h];
        for y in 0..self.h {
            for x in 0..w {
                rows[y * w + x] = (0..WINDOW).map(|i| k[i] * self.v[y * self.w + x + i]).sum();
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = (0..WINDOW).map(|i| k[i] * rows[(y + i) * w + x]).sum();
            }
        }
        Plane { w, h, v: out }
    }

    fn halve(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let at = |dx: usize, dy: usize| self.v[(2 * y + dy) * self.w + 2 * x + dx];
                v.push(0.25 * (at(0, 0) + at(1, 0) + at(0, 1) + at(1, 1)));
            }
        }
        Plane { w, h, v }
    }
}

/// Mean luminance-similarity and contrast-structure terms at one scale.
fn ssim_terms(a: &Plane, b: &Plane, k: &[f64; WINDOW]) -> (f64, f64) {
    let ma = a.blur(k);
    let mb = b.blur(k);
    let saa = a.map2(a, |x, y| x * y).blur(k);
    let sbb = b.map2(b, |x, y| x * y).blur(k);
    let sab = a.map2(b, |x, y| x * y).blur(k);
    let n = ma.v.len() as f64;
    let (mut l, mut cs) = (0.0, 0.0);
    for i in 0..ma.v.len() {
        let (ua, ub) = (ma.v[i], mb.v[i]);
        let va = saa.v[i] - ua * ua;
        let vb = sbb.v[i] - ub * ub;
        let cov = sab.v[i] - ua * ub;
        l += (2.0 * ua * ub + C1) / (ua * ua + ub * ub + C1);
        cs += (2.0 * cov + C2) / (va + vb + C2);
    }
    (l / n, cs / n)
}

fn ms_ssim_plane(a: &Plane, b: &Plane) -> f64 {
    let k = kernel();
    let total: f64 = WEIGHTS[..SCALES].iter().sum();
    let (mut a, mut b) = (a.clone(), b.clone());
    let mut score = 1.0;
    for (j, w) in WEIGHTS[..SCALES].iter().map(|w| w / total).enumerate() {
        let (l, cs) = ssim_terms(&a, &b, &k);
        let term = if j + 1 == SCALES { l * cs } else { cs };
        score *= term.max(0.0).powf(w);
        if j + 1 < SCALES {
            a = a.halve();
            b = b.halve();
        }
    }
    score
}

/// Three-scale MS-SSIM with a 7×7 Gaussian window (σ = 1.5), averaged over
/// the RGB channels. Values lie in `[0, 1]`; identical images score 1.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::shape("image", &[a.height, a.width, 3], &[b.height, b.width, 3]));
    }
    let m = min_side();
    if a.width < m || a.height < m {
        return Err(Error::validation("image", format!("{}x{} is below the {m}x{m} minimum", a.width, a.height)));
    }
    let s: f64 = (0..3).map(|c| ms_ssim_plane(&Plane::channel(a, c), &Plane::channel(b, c))).sum();
    Ok((s / 3.0).clamp(0.0, 1.0))
}

/// Tight bounding box `(x0, y0, x1, y1)` (exclusive) of the on pixels.
pub fn mask_bbox(mask: &[u8], width: usize) -> Option<(usize, usize, usize, usize)> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m != 0) {
        let (x, y) = (i % width, i / width);
        b = Some(match b {
            None => (x, y, x + 1, y + 1),
            Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
        });
    }
    b
}

/// Bilinear resampling with half-pixel centers.
pub fn resize_bilinear(img: &Image, w: usize, h: usize) -> Image {
    let mut out = Image::new(w, h);
    let sx = img.width as f64 / w as f64;
    let sy = img.height as f64 / h as f64;
    for y in 0..h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height - 1) as f64);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(img.height - 1);
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width - 1) as f64);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(img.width - 1);
            let (p00, p10, p01, p11) = (img.get(x0, y0), img.get(x1, y0), img.get(x0, y1), img.get(x1, y1));
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - tx) + p10[c] as f64 * tx;
                let bot = p01[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
                px[c] = (top * (1.0 - ty) + bot * ty) as f32;
            }
            out.set(x, y, px);
        }
    }
    out
}

/// The person's bounding box with everything off the mask set to black,
/// resampled to `PERSON_BOX × PERSON_BOX`.
pub fn person_crop(img: &Image, mask: &[u8]) -> Result<Image> {
    if mask.len() != img.width * img.height {
        return Err(Error::shape("mask", &[img.height, img.width], &[mask.len()]));
    }
    let (x0, y0, x1, y1) = mask_bbox(mask, img.width).ok_or_else(|| Error::validation("mask", "no person pixels"))?;
    let mut crop = Image::new(x1 - x0, y1 - y0);
    for y in y0..y1 {
        for x in x0..x1 {
            if mask[y * img.width + x] != 0 {
                crop.set(x - x0, y - y0, img.get(x, y));
            }
        }
    }
    Ok(resize_bilinear(&crop, PERSON_BOX, PERSON_BOX))
}

/// MS-SSIM between the two person crops.
pub fn person_similarity(generated: &Image, generated_mask: &[u8], reference: &Image, reference_mask: &[u8]) -> Result<f64> {
    ms_ssim(&person_crop(generated, generated_mask)?, &person_crop(reference, reference_mask)?)
}
