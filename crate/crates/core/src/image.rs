//! Interleaved `H×W×C` rasters.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image<P = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<P>,
}

/// 8-bit storage used by datasets.
pub type Raster = Image<u8>;

impl<P: Copy> Image<P> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<P>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} raster needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: P) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[P] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [P] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<P> {
        self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[P] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [P] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn map<Q: Copy>(&self, f: impl Fn(P) -> Q) -> Image<Q> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.pixel_mut(y, x)
                    .copy_from_slice(self.pixel(y, self.width - 1 - x));
            }
        }
        out
    }
}

impl Raster {
    pub fn to_float(&self) -> Image<f32> {
        self.map(|p| p as f32 / 255.0)
    }
}

impl Image<f32> {
    pub fn to_raster(&self) -> Raster {
        self.map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
    }

    /// Bilinear resample of the window `(y0, x0, h, w)` to `out_h × out_w`
    /// using pixel-centre alignment.
    pub fn resize_window(
        &self,
        y0: f32,
        x0: f32,
        h: f32,
        w: f32,
        out_h: usize,
        out_w: usize,
    ) -> Image<f32> {
        let c = self.channels;
        let mut out = Image::filled(out_h, out_w, c, 0.0);
        let sy = h / out_h as f32;
        let sx = w / out_w as f32;
        let max_y = (self.height - 1) as f32;
        let max_x = (self.width - 1) as f32;
        for oy in 0..out_h {
            let fy = (y0 + (oy as f32 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let y_lo = fy.floor() as usize;
            let y_hi = (y_lo + 1).min(self.height - 1);
            let ty = fy - y_lo as f32;
            for ox in 0..out_w {
                let fx = (x0 + (ox as f32 + 0.5) * sx - 0.5).clamp(0.0, max_x);
                let x_lo = fx.floor() as usize;
                let x_hi = (x_lo + 1).min(self.width - 1);
                let tx = fx - x_lo as f32;
                for ch in 0..c {
                    let a = self.pixel(y_lo, x_lo)[ch];
                    let b = self.pixel(y_lo, x_hi)[ch];
                    let d = self.pixel(y_hi, x_lo)[ch];
                    let e = self.pixel(y_hi, x_hi)[ch];
                    let top = a + (b - a) * tx;
                    let bot = d + (e - d) * tx;
                    out.pixel_mut(oy, ox)[ch] = top + (bot - top) * ty;
                }
            }
        }
        out
    }

    pub fn resize(&self, out_h: usize, out_w: usize) -> Image<f32> {
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        self.resize_window(0.0, 0.0, self.height as f32, self.width as f32, out_h, out_w)
    }
}
