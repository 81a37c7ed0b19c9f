//! Selection dumps: per-block overlays of the selected auxiliary tokens and their scores.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::clicks::ClickState;
use crate::error::{contract, Result};
use crate::model::SelectionSummary;
use crate::mst::Scale;
use crate::raster::Image;

const TINT: [f32; 3] = [1.0, 0.85, 0.0];
const POSITIVE: [u8; 3] = [0, 220, 0];
const NEGATIVE: [u8; 3] = [230, 0, 0];

/// The image with every selected `p×p` cell tinted in proportion to its score and the
/// clicks drawn as small squares.
pub fn selection_overlay(
    image: &Image,
    selected: &[(usize, f64)],
    patch: usize,
    clicks: &ClickState,
) -> Result<RgbImage> {
    let grid = image.width / patch;
    if grid == 0 || image.width != image.height {
        return Err(contract("overlays need a square image at least one patch wide"));
    }
    let mut out = image.to_rgb8();
    for &(index, score) in selected {
        if index >= grid * grid {
            return Err(contract(format!("token {index} outside the {grid}x{grid} grid")));
        }
        let (gx, gy) = (index % grid, index / grid);
        let alpha = (0.25 + 0.5 * score.clamp(0.0, 1.0)) as f32;
        for y in gy * patch..(gy + 1) * patch {
            for x in gx * patch..(gx + 1) * patch {
                let px = out.get_pixel_mut(x as u32, y as u32);
                for c in 0..3 {
                    let v = px.0[c] as f32 / 255.0;
                    px.0[c] = (((1.0 - alpha) * v + alpha * TINT[c]) * 255.0).round() as u8;
                }
            }
        }
    }
    for c in &clicks.clicks {
        let color = if c.positive { POSITIVE } else { NEGATIVE };
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (x, y) = (c.x as i64 + dx, c.y as i64 + dy);
                if x >= 0 && y >= 0 && (x as usize) < image.width && (y as usize) < image.height {
                    out.put_pixel(x as u32, y as u32, Rgb(color));
                }
            }
        }
    }
    Ok(out)
}

/// Writes `block<b>_<scale>.png` for every block and scale plus `selection.csv` with
/// columns `block, scale, chosen, index, score`.
pub fn write_selection_dump(
    dir: &Path,
    image: &Image,
    clicks: &ClickState,
    summaries: &[SelectionSummary],
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = csv::Writer::from_path(dir.join("selection.csv"))?;
    csv.write_record(["block", "scale", "chosen", "index", "score"])?;
    for s in summaries {
        for scale in [Scale::Tiny, Scale::Large] {
            let selected = s.for_scale(scale);
            selection_overlay(image, selected, scale.patch(), clicks)?
                .save(dir.join(format!("block{}_{}.png", s.block, scale.name())))
                .map_err(|e| crate::error::Error::Image(e.to_string()))?;
            for &(index, score) in selected {
                csv.write_record([
                    s.block.to_string(),
                    scale.name().to_string(),
                    u8::from(s.chosen == scale).to_string(),
                    index.to_string(),
                    score.to_string(),
                ])?;
            }
        }
    }
    csv.flush()?;
    Ok(())
}
