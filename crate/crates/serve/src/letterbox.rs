//! Aspect-preserving fit of an arbitrary image into the square model input, and back.

use mst_core::raster::{Image, Plane};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    /// Original image size.
    pub width: usize,
    pub height: usize,
    /// Model input side.
    pub side: usize,
    /// Size of the resized content inside the square.
    pub content: (usize, usize),
    /// Top-left corner of the content inside the square.
    pub offset: (usize, usize),
}

impl Letterbox {
    pub fn new(width: usize, height: usize, side: usize) -> Self {
        let scale = side as f64 / width.max(height) as f64;
        let fit = |v: usize| ((v as f64 * scale).round() as usize).clamp(1, side);
        let content = (fit(width), fit(height));
        Self {
            width,
            height,
            side,
            content,
            offset: ((side - content.0) / 2, (side - content.1) / 2),
        }
    }

    /// The image resized into the square, padded with its mean colour.
    pub fn apply(&self, image: &Image) -> Image {
        let mut out = Image::filled(self.side, self.side, image.mean_color());
        let resized = image.resize(self.content.0, self.content.1);
        for c in 0..3 {
            for y in 0..self.content.1 {
                for x in 0..self.content.0 {
                    out.set(c, x + self.offset.0, y + self.offset.1, resized.get(c, x, y));
                }
            }
        }
        out
    }

    /// Model pixel holding original pixel `(x, y)`.
    pub fn to_model(&self, x: usize, y: usize) -> (usize, usize) {
        let map = |v: usize, src: usize, dst: usize, off: usize| {
            let m = ((v as f64 + 0.5) * dst as f64 / src as f64).floor() as usize;
            off + m.min(dst - 1)
        };
        (
            map(x, self.width, self.content.0, self.offset.0),
            map(y, self.height, self.content.1, self.offset.1),
        )
    }

    /// A model-resolution map resampled (bilinearly, within the content) to the original size.
    pub fn to_original(&self, plane: &Plane) -> Plane {
        let (cw, ch) = self.content;
        let sample = |u: f64, v: f64| -> f32 {
            let u = u.clamp(0.0, (cw - 1) as f64);
            let v = v.clamp(0.0, (ch - 1) as f64);
            let (x0, y0) = (u.floor() as usize, v.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(cw - 1), (y0 + 1).min(ch - 1));
            let (fx, fy) = ((u - x0 as f64) as f32, (v - y0 as f64) as f32);
            let at = |x: usize, y: usize| plane.get(x + self.offset.0, y + self.offset.1);
            let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
            let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
            top * (1.0 - fy) + bottom * fy
        };
        let sx = cw as f64 / self.width as f64;
        let sy = ch as f64 / self.height as f64;
        let mut data = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                data.push(sample((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5));
            }
        }
        Plane {
            width: self.width,
            height: self.height,
            data,
        }
    }
}
