//! Per-category style crops.

use super::{Category, StyleImageSet};
use crate::error::{Error, Result};
use crate::image::Image;

pub const STYLE_SIZE: usize = 32;

/// Content box of an aspect-preserving fit of `w×h` into `S×S`:
/// `(width, height, x offset, y offset)`.
pub fn fit_box(w: usize, h: usize) -> (usize, usize, usize, usize) {
    let s = STYLE_SIZE as f64;
    let scale = (s / w as f64).min(s / h as f64);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, STYLE_SIZE);
    let nh = ((h as f64 * scale).round() as usize).clamp(1, STYLE_SIZE);
    (nw, nh, (STYLE_SIZE - nw) / 2, (STYLE_SIZE - nh) / 2)
}

/// Tight crop of each category, fitted nearest-neighbor into `S×S`,
/// centered and zero-padded; pixels of other labels are zeroed.
pub fn extract_style_images(image: &Image, segment_map: &[u8]) -> Result<StyleImageSet> {
    let (w, h) = (image.width, image.height);
    if segment_map.len() != w * h {
        return Err(Error::shape("segment_map", &[h, w], &[segment_map.len()]));
    }
    let mut set = StyleImageSet::blank();
    for (ci, cat) in Category::ALL.into_iter().enumerate() {
        let label = cat.label();
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..h {
            for x in 0..w {
                if segment_map[y * w + x] == label {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        if x0 == usize::MAX {
            continue;
        }
        let (bw, bh) = (x1 - x0, y1 - y0);
        let (nw, nh, ox, oy) = fit_box(bw, bh);
        let mut out = Image::new(STYLE_SIZE, STYLE_SIZE);
        for ty in 0..nh {
            let sy = y0 + (ty * bh) / nh;
            for tx in 0..nw {
                let sx = x0 + (tx * bw) / nw;
                if segment_map[sy * w + sx] == label {
                    out.set(ox + tx, oy + ty, image.get(sx, sy));
                }
            }
        }
        set.images[ci] = out;
        set.present[ci] = true;
    }
    Ok(set)
}
