//! Deterministic background-style classifier and the palette leak measure.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::scenegen::{BackgroundKind, Rgb};

/// Minimum variance per pixel (summed over channels) a structured model
/// must explain before a background counts as striped or graded.
pub const MIN_EXPLAINED: f64 = 2e-3;
/// Minimum fraction of the variance it must explain.
pub const MIN_R2: f64 = 0.5;

/// Variance decomposition of the background pixels under the three styles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StyleFit {
    pub pixels: usize,
    /// Residual sum of squares around the per-channel mean.
    pub sse_plain: f64,
    /// Residual with a per-channel linear trend in `y`.
    pub sse_gradient: f64,
    /// Residual with a per-channel mean per column.
    pub sse_stripes: f64,
}

impl StyleFit {
    pub fn of(img: &Image, mask: &[u8]) -> Result<Self> {
        if mask.len() != img.width * img.height {
            return Err(Error::shape("mask", &[img.height, img.width], &[mask.len()]));
        }
        let bg: Vec<(usize, usize)> = (0..mask.len()).filter(|&i| mask[i] == 0).map(|i| (i % img.width, i / img.width)).collect();
        if bg.len() < 2 {
            return Err(Error::validation("mask", "too few background pixels"));
        }
        let n = bg.len() as f64;
        let (mut plain, mut grad, mut stripes) = (0.0, 0.0, 0.0);
        for c in 0..3 {
            let v: Vec<f64> = bg.iter().map(|&(x, y)| img.get(x, y)[c] as f64).collect();
            let mean = v.iter().sum::<f64>() / n;
            plain += v.iter().map(|a| (a - mean).powi(2)).sum::<f64>();

            let my = bg.iter().map(|&(_, y)| y as f64).sum::<f64>() / n;
            let syy: f64 = bg.iter().map(|&(_, y)| (y as f64 - my).powi(2)).sum();
            let sxy: f64 = bg.iter().zip(&v).map(|(&(_, y), a)| (y as f64 - my) * (a - mean)).sum();
            let slope = if syy > 0.0 { sxy / syy } else { 0.0 };
            grad += bg.iter().zip(&v).map(|(&(_, y), a)| (a - mean - slope * (y as f64 - my)).powi(2)).sum::<f64>();

            let mut col_sum = vec![0.0; img.width];
            let mut col_n = vec![0usize; img.width];
            for (&(x, _), a) in bg.iter().zip(&v) {
                col_sum[x] += a;
                col_n[x] += 1;
            }
            stripes += bg.iter().zip(&v).map(|(&(x, _), a)| (a - col_sum[x] / col_n[x] as f64).powi(2)).sum::<f64>();
        }
        Ok(Self { pixels: bg.len(), sse_plain: plain, sse_gradient: grad, sse_stripes: stripes })
    }

    /// Plain unless the better structured model explains at least
    /// [`MIN_R2`] of the variance and [`MIN_EXPLAINED`] per pixel.
    pub fn classify(&self) -> BackgroundKind {
        if self.sse_plain <= 0.0 {
            return BackgroundKind::Plain;
        }
        let (kind, sse) = if self.sse_stripes < self.sse_gradient {
            (BackgroundKind::Stripes, self.sse_stripes)
        } else {
            (BackgroundKind::Gradient, self.sse_gradient)
        };
        let explained = self.sse_plain - sse;
        if explained / self.sse_plain >= MIN_R2 && explained / self.pixels as f64 >= MIN_EXPLAINED {
            kind
        } else {
            BackgroundKind::Plain
        }
    }
}

/// Style of the pixels where `mask` is 0.
pub fn classify_background(img: &Image, mask: &[u8]) -> Result<BackgroundKind> {
    Ok(StyleFit::of(img, mask)?.classify())
}

/// Fraction of images whose background classifies as `target`.
pub fn style_faithfulness(images: &[Image], masks: &[&[u8]], target: BackgroundKind) -> Result<f64> {
    if images.is_empty() || images.len() != masks.len() {
        return Err(Error::validation("batch", "need one mask per image and at least one image"));
    }
    let mut hits = 0;
    for (img, m) in images.iter().zip(masks) {
        if classify_background(img, m)? == target {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len() as f64)
}

fn dist2(p: [f32; 3], c: Rgb) -> f64 {
    (0..3).map(|i| (p[i] as f64 * 255.0 - c[i] as f64).powi(2)).sum()
}

/// Fraction of background pixels whose nearest color among
/// `fg_palette ∪ bg_expected` is a foreground color. Ties go to the
/// background.
pub fn background_leak(img: &Image, mask: &[u8], fg_palette: &[Rgb], bg_expected: &[Rgb]) -> Result<f64> {
    if mask.len() != img.width * img.height {
        return Err(Error::shape("mask", &[img.height, img.width], &[mask.len()]));
    }
    if fg_palette.is_empty() || bg_expected.is_empty() {
        return Err(Error::validation("palette", "foreground and background palettes must be non-empty"));
    }
    let (mut bg, mut leak) = (0usize, 0usize);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m == 0) {
        let p = img.get(i % img.width, i / img.width);
        let near = |pal: &[Rgb]| pal.iter().map(|&c| dist2(p, c)).fold(f64::INFINITY, f64::min);
        bg += 1;
        if near(fg_palette) < near(bg_expected) {
            leak += 1;
        }
    }
    if bg == 0 {
        return Err(Error::validation("mask", "no background pixels"));
    }
    Ok(leak as f64 / bg as f64)
}

/// Spearman rank correlation with average ranks for ties; 0 when either
/// side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman operands differ in length");
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}
