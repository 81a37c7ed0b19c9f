//! Click state and its rasterised encoding.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::raster::Plane;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub x: usize,
    pub y: usize,
    pub positive: bool,
}

impl Click {
    pub fn positive(x: usize, y: usize) -> Self {
        Self { x, y, positive: true }
    }

    pub fn negative(x: usize, y: usize) -> Self {
        Self {
            x,
            y,
            positive: false,
        }
    }
}

/// Ordered clicks plus the previous soft mask `x_m` (zeros before the first prediction).
#[derive(Debug, Clone, PartialEq)]
pub struct ClickState {
    pub width: usize,
    pub height: usize,
    pub clicks: Vec<Click>,
    pub prev_mask: Plane,
}

impl ClickState {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            clicks: Vec::new(),
            prev_mask: Plane::zeros(width, height),
        }
    }

    pub fn with_mask(mut self, mask: Plane) -> Result<Self> {
        self.set_mask(mask)?;
        Ok(self)
    }

    pub fn push(&mut self, click: Click) -> Result<()> {
        if click.x >= self.width || click.y >= self.height {
            return Err(contract(format!(
                "click ({}, {}) outside {}x{} image",
                click.x, click.y, self.width, self.height
            )));
        }
        self.clicks.push(click);
        Ok(())
    }

    pub fn set_mask(&mut self, mask: Plane) -> Result<()> {
        if mask.width != self.width || mask.height != self.height {
            return Err(contract("previous mask size differs from the click canvas"));
        }
        if mask.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(contract("previous mask values must lie in [0, 1]"));
        }
        self.prev_mask = mask;
        Ok(())
    }

    /// Pixel-centre coordinates of the positive clicks.
    pub fn positive_points(&self) -> Vec<(f64, f64)> {
        self.clicks
            .iter()
            .filter(|c| c.positive)
            .map(|c| (c.x as f64 + 0.5, c.y as f64 + 0.5))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.clicks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
    }
}

/// Disk radius in pixels: 5 px at 448, scaled with the image side, at least 1.
pub fn click_radius(image_size: usize) -> usize {
    ((5.0 * image_size as f64 / 448.0).round() as usize).max(1)
}

/// `[2, H, W]` maps: channel 0 the union of positive disks, channel 1 the negative ones.
pub fn encode_clicks<T: Real>(
    clicks: &[Click],
    width: usize,
    height: usize,
    radius: usize,
) -> Result<Tensor<T>> {
    let mut out = Tensor::zeros(&[2, height, width]);
    let r = radius as i64;
    let plane = width * height;
    for c in clicks {
        if c.x >= width || c.y >= height {
            return Err(contract(format!(
                "click ({}, {}) outside {width}x{height} image",
                c.x, c.y
            )));
        }
        let ch = if c.positive { 0 } else { 1 };
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let (x, y) = (c.x as i64 + dx, c.y as i64 + dy);
                if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                    continue;
                }
                out.data_mut()[ch * plane + y as usize * width + x as usize] = T::one();
            }
        }
    }
    Ok(out)
}
