use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

use super::{CANVAS_HEIGHT, CANVAS_WIDTH};

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{} pixels for a {height}x{width} image",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Bilinear lookup at continuous coordinates where pixel `(y, x)` covers
    /// `[x, x+1) x [y, y+1)`. Outside the image reads as background (0).
    pub fn sample(&self, x: f64, y: f64) -> f64 {
        let (fx, fy) = (x - 0.5, y - 0.5);
        let (x0, y0) = (fx.floor(), fy.floor());
        let (tx, ty) = (fx - x0, fy - y0);
        let px = |xi: f64, yi: f64| -> f64 {
            if xi < 0.0 || yi < 0.0 || xi >= self.width as f64 || yi >= self.height as f64 {
                0.0
            } else {
                self.get(yi as usize, xi as usize) as f64
            }
        };
        let top = px(x0, y0) * (1.0 - tx) + px(x0 + 1.0, y0) * tx;
        let bot = px(x0, y0 + 1.0) * (1.0 - tx) + px(x0 + 1.0, y0 + 1.0) * tx;
        top * (1.0 - ty) + bot * ty
    }

    /// Inverse-mapped resampling: `src(x, y)` gives the source point for the
    /// destination pixel center `(x, y)`.
    pub fn warp(&self, src: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let mut out = Self::new(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let (sx, sy) = src(x as f64 + 0.5, y as f64 + 0.5);
                out.set(y, x, self.sample(sx, sy).clamp(0.0, 1.0) as f32);
            }
        }
        out
    }

    /// Separable Gaussian blur with edge clamping.
    pub fn gaussian_blur(&self, sigma: f64) -> Self {
        let r = (3.0 * sigma).ceil().max(1.0) as isize;
        let mut k: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        let (h, w) = (self.height as isize, self.width as isize);
        let pass = |img: &Self, horizontal: bool| {
            let mut out = Self::new(img.height, img.width);
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (j, kv) in k.iter().enumerate() {
                        let o = j as isize - r;
                        let (yy, xx) = if horizontal {
                            (y, (x + o).clamp(0, w - 1))
                        } else {
                            ((y + o).clamp(0, h - 1), x)
                        };
                        acc += kv * img.get(yy as usize, xx as usize) as f64;
                    }
                    out.set(y as usize, x as usize, acc.clamp(0.0, 1.0) as f32);
                }
            }
            out
        };
        pass(&pass(self, true), false)
    }

    /// Bilinear resize to `height x width`.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let (sy, sx) = (self.height as f64 / height as f64, self.width as f64 / width as f64);
        let mut out = Self::new(height, width);
        for y in 0..height {
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx).clamp(0.5, self.width as f64 - 0.5);
                let fy = ((y as f64 + 0.5) * sy).clamp(0.5, self.height as f64 - 0.5);
                out.set(y, x, self.sample(fx, fy).clamp(0.0, 1.0) as f32);
            }
        }
        out
    }

    pub fn fit_canvas(self) -> Self {
        self.resize(CANVAS_HEIGHT, CANVAS_WIDTH)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// 8-bit grayscale PNG.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let bad = |e: png::EncodingError| Error::Image {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let mut w = enc.write_header().map_err(bad)?;
        w.write_image_data(&self.to_bytes()).map_err(bad)?;
        w.finish().map_err(bad)
    }

    /// Any PNG; colour is reduced to luma.
    pub fn read_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let bad = |reason: String| Error::Image {
            path: path.to_path_buf(),
            reason,
        };
        let mut dec = png::Decoder::new(BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(|e| bad(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| bad("image too large".into()))?];
        let info = reader.next_frame(&mut buf).map_err(|e| bad(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let ch = info.color_type.samples();
        let bytes = &buf[..info.buffer_size()];
        let data = bytes
            .chunks_exact(ch)
            .take(w * h)
            .map(|px| {
                let v = match ch {
                    1 | 2 => px[0] as f32,
                    _ => 0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32,
                };
                v / 255.0
            })
            .collect::<Vec<_>>();
        if data.len() != w * h || w == 0 || h == 0 {
            return Err(bad("unexpected pixel buffer size".into()));
        }
        Ok(Self {
            height: h,
            width: w,
            data,
        })
    }
}
