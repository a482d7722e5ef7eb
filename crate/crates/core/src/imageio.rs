//! Float images in interleaved (HWC) layout, PNG and raw buffer I/O.

use std::fs;
use std::io::Write;
use std::path::Path;

use hvtr_tensor::Tensor;
use image::{ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};

const RAW_HEADER: &str = "HVTRRAW1";

#[derive(Clone, Debug, PartialEq)]
pub struct ImageF32 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageF32 {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        ImageF32 { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn at(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// `[1, C, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (w, h, c) = (self.width, self.height, self.channels);
        Tensor::from_fn(&[1, c, h, w], |i| {
            let (ch, p) = (i / (w * h), i % (w * h));
            self.data[p * c + ch]
        })
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let [n, c, h, w] = t.dims4("image")?;
        if n != 1 {
            return Err(Error::invalid("image tensor", format!("batch of {n}")));
        }
        let mut img = ImageF32::new(w, h, c);
        for ch in 0..c {
            for p in 0..w * h {
                img.data[p * c + ch] = t.data()[ch * w * h + p];
            }
        }
        Ok(img)
    }

    /// Mean over `factor x factor` blocks.
    pub fn area_downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.width.is_multiple_of(factor) || !self.height.is_multiple_of(factor) {
            return Err(Error::invalid("downsampling factor", format!("{factor} for {}x{}", self.width, self.height)));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = ImageF32::new(w, h, self.channels);
        let norm = 1.0 / (factor * factor) as f32;
        for y in 0..h {
            for x in 0..w {
                for dy in 0..factor {
                    for dx in 0..factor {
                        let src = self.at(x * factor + dx, y * factor + dy).to_vec();
                        for (o, s) in out.at_mut(x, y).iter_mut().zip(src) {
                            *o += s * norm;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Write 1- or 3-channel images as 8-bit PNG, clamping to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        match self.channels {
            1 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| q(v)).collect();
                ImageBuffer::<Luma<u8>, _>::from_raw(self.width as u32, self.height as u32, buf).expect("buffer size").save(path)?;
            }
            3 => {
                let buf: Vec<u8> = self.data.iter().map(|&v| q(v)).collect();
                ImageBuffer::<Rgb<u8>, _>::from_raw(self.width as u32, self.height as u32, buf).expect("buffer size").save(path)?;
            }
            c => return Err(Error::invalid("png", format!("cannot store {c} channels"))),
        }
        Ok(())
    }

    /// 16-bit PNG of 1 or 3 channels in `[0, 1]`.
    pub fn save_png16(&self, path: &Path) -> Result<()> {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        let buf: Vec<u16> = self.data.iter().map(|&v| q(v)).collect();
        match self.channels {
            1 => ImageBuffer::<Luma<u16>, _>::from_raw(self.width as u32, self.height as u32, buf).expect("buffer size").save(path)?,
            3 => ImageBuffer::<Rgb<u16>, _>::from_raw(self.width as u32, self.height as u32, buf).expect("buffer size").save(path)?,
            c => return Err(Error::invalid("png", format!("cannot store {c} channels"))),
        }
        Ok(())
    }

    /// Load an 8- or 16-bit PNG as floats in `[0, 1]`, keeping gray as one channel.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if img.color().channel_count() == 1 {
            let g = img.into_luma16();
            Ok(ImageF32 { width: w, height: h, channels: 1, data: g.into_raw().iter().map(|&v| v as f32 / 65535.0).collect() })
        } else {
            let rgb = img.into_rgb16();
            Ok(ImageF32 { width: w, height: h, channels: 3, data: rgb.into_raw().iter().map(|&v| v as f32 / 65535.0).collect() })
        }
    }

    /// Raw little-endian f32 buffer behind a one-line text header.
    pub fn save_raw(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        writeln!(f, "{RAW_HEADER} {} {} {}", self.width, self.height, self.channels)?;
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::data(path, "missing header"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::data(path, e))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let dims: Vec<usize> = fields.iter().skip(1).filter_map(|s| s.parse().ok()).collect();
        if fields.first() != Some(&RAW_HEADER) || dims.len() != 3 {
            return Err(Error::data(path, format!("bad header `{header}`")));
        }
        let body = &bytes[nl + 1..];
        let n = dims[0] * dims[1] * dims[2];
        if body.len() != n * 4 {
            return Err(Error::data(path, format!("expected {} bytes, found {}", n * 4, body.len())));
        }
        let data = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(ImageF32 { width: dims[0], height: dims[1], channels: dims[2], data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_keeps_layout() {
        let mut img = ImageF32::new(3, 2, 2);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f32;
        }
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[1, 2, 2, 3]);
        // Channel 1 of pixel (x=2, y=1).
        assert_eq!(t.data()[6 + 5], img.at(2, 1)[1]);
        assert_eq!(ImageF32::from_tensor(&t).unwrap(), img);
    }

    #[test]
    fn png_and_raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = ImageF32::new(4, 3, 3);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 7) as f32 / 6.0;
        }
        img.save_png(&dir.path().join("a.png")).unwrap();
        let back = ImageF32::load_png(&dir.path().join("a.png")).unwrap();
        for (a, b) in back.data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        img.save_raw(&dir.path().join("a.raw")).unwrap();
        assert_eq!(ImageF32::load_raw(&dir.path().join("a.raw")).unwrap(), img);
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let mut img = ImageF32::new(4, 2, 1);
        img.data = vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        let d = img.area_downsample(2).unwrap();
        assert_eq!(d.data, vec![2.5, 4.5]);
        assert!(img.area_downsample(3).is_err());
    }
}
