//! RGB float images in `H×W×3` layout and PNG encoding.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major, interleaved RGB, values in `[0, 1]`.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape("image", &[height, width, 3], &[data.len()]));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn is_blank(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// `[3, H, W]` tensor for the networks.
    pub fn to_chw(&self) -> Tensor<f32> {
        let n = self.width * self.height;
        let mut out = vec![0.0; 3 * n];
        for (p, px) in self.data.chunks(3).enumerate() {
            for c in 0..3 {
                out[c * n + p] = px[c];
            }
        }
        Tensor::new(&[3, self.height, self.width], out)
    }

    pub fn from_chw(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("chw image", &[3, 0, 0], s));
        }
        let (h, w) = (s[1], s[2]);
        let n = h * w;
        let mut data = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                data[p * 3 + c] = t.data()[c * n + p];
            }
        }
        Ok(Self { width: w, height: h, data })
    }

    /// 8-bit quantization used by PNG output.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::from_data(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn to_png(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().expect("in-memory png header");
            w.write_image_data(&self.to_rgb8()).expect("in-memory png data");
        }
        out
    }

    pub fn from_png(bytes: &[u8]) -> Result<Self> {
        let bad = |e: String| Error::validation("png", e);
        let dec = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = dec.read_info().map_err(|e| bad(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
        let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
        if info.bit_depth != png::BitDepth::Eight {
            return Err(bad("only 8-bit PNG is supported".into()));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let px = &buf[..info.buffer_size()];
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => px.to_vec(),
            png::ColorType::Rgba => px.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
            other => return Err(bad(format!("unsupported color type {other:?}"))),
        };
        Self::from_rgb8(w, h, &rgb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chw_round_trip() {
        let mut img = Image::new(3, 2);
        img.set(2, 1, [0.1, 0.2, 0.3]);
        let t = img.to_chw();
        assert_eq!(t.shape(), &[3, 2, 3]);
        assert_eq!(t.data()[5], 0.1);
        assert_eq!(Image::from_chw(&t).unwrap(), img);
    }

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let data: Vec<f32> = (0..4 * 4 * 3).map(|i| (i * 5 % 256) as f32 / 255.0).collect();
        let img = Image::from_data(4, 4, data).unwrap();
        let back = Image::from_png(&img.to_png()).unwrap();
        assert_eq!(back.to_rgb8(), img.to_rgb8());
    }
}
