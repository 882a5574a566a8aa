//! In-memory RGB images with values in `[0, 1]` and PNG I/O.

use std::path::Path;

use titkit_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// Height x width x 3 image, row-major with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), height * width * CHANNELS, "image buffer size");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; height * width * CHANNELS])
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let o = (y * self.width + x) * CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * CHANNELS;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Rounds every value to the nearest 8-bit level so PNG storage is lossless.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = quantize_level(*v);
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect();
        Ok(Self::new(h as usize, w as usize, data))
    }

    /// Batches images into an NCHW tensor.
    pub fn batch_nchw<T: Scalar>(images: &[&Image]) -> Tensor<T> {
        assert!(!images.is_empty(), "empty image batch");
        let (h, w) = (images[0].height, images[0].width);
        let mut data = Vec::with_capacity(images.len() * CHANNELS * h * w);
        for img in images {
            assert!(img.height == h && img.width == w, "mixed image sizes in batch");
            for c in 0..CHANNELS {
                data.extend(img.data.iter().skip(c).step_by(CHANNELS).map(|&v| T::of(f64::from(v))));
            }
        }
        Tensor::new(vec![images.len(), CHANNELS, h, w], data)
    }

    /// Inverse of [`Image::batch_nchw`] for one entry of a `[B, 3, H, W]` tensor.
    pub fn from_nchw<T: Scalar>(t: &Tensor<T>, index: usize) -> Self {
        let s = t.shape();
        assert!(s.len() == 4 && s[1] == CHANNELS, "expected [B, 3, H, W], got {s:?}");
        let (h, w) = (s[2], s[3]);
        let plane = h * w;
        let base = index * CHANNELS * plane;
        let mut data = vec![0.0; plane * CHANNELS];
        for c in 0..CHANNELS {
            for p in 0..plane {
                data[p * CHANNELS + c] = t.data()[base + c * plane + p].as_f64() as f32;
            }
        }
        Self::new(h, w, data)
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn quantize_level(v: f32) -> f32 {
    f32::from(to_u8(v)) / 255.0
}

/// Corner-aligned bilinear resize, evaluated directly per output pixel.
pub fn bilinear_resize(img: &Image, out_h: usize, out_w: usize) -> Image {
    let mut out = Image::filled(out_h, out_w, 0.0);
    let scale = |o: usize, n_out: usize, n_in: usize| -> f64 {
        if n_out <= 1 {
            0.0
        } else {
            o as f64 * (n_in as f64 - 1.0) / (n_out as f64 - 1.0)
        }
    };
    for y in 0..out_h {
        let sy = scale(y, out_h, img.height);
        let y0 = (sy.floor() as usize).min(img.height - 1);
        let y1 = (y0 + 1).min(img.height - 1);
        let fy = sy - y0 as f64;
        for x in 0..out_w {
            let sx = scale(x, out_w, img.width);
            let x0 = (sx.floor() as usize).min(img.width - 1);
            let x1 = (x0 + 1).min(img.width - 1);
            let fx = sx - x0 as f64;
            let (p00, p01, p10, p11) = (img.pixel(y0, x0), img.pixel(y0, x1), img.pixel(y1, x0), img.pixel(y1, x1));
            let mut rgb = [0f32; 3];
            for c in 0..3 {
                let top = f64::from(p00[c]) * (1.0 - fx) + f64::from(p01[c]) * fx;
                let bot = f64::from(p10[c]) * (1.0 - fx) + f64::from(p11[c]) * fx;
                rgb[c] = (top * (1.0 - fy) + bot * fy) as f32;
            }
            out.set_pixel(y, x, rgb);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_exact_after_quantize() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = Image::new(2, 3, (0..18).map(|i| i as f32 / 17.0).collect());
        img.quantize();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        assert_eq!(Image::load_png(&p).unwrap(), img);
    }

    #[test]
    fn nchw_roundtrip() {
        let img = Image::new(2, 2, (0..12).map(|i| i as f32).collect());
        let t = Image::batch_nchw::<f32>(&[&img, &img]);
        assert_eq!(t.shape(), &[2, 3, 2, 2]);
        assert_eq!(Image::from_nchw(&t, 1), img);
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = Image::new(3, 4, (0..36).map(|i| i as f32 / 36.0).collect());
        assert_eq!(bilinear_resize(&img, 3, 4), img);
    }
}
