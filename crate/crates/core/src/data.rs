//! Synthetic instance-segmentation samples and training-time augmentation.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::raster::{Image, Mask};

/// Target scale ratios are drawn uniformly from this range.
pub const RATIO_RANGE: (f64, f64) = (0.01, 0.8);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Rectangle,
    Polygon,
    /// Loaded from disk; geometry unknown.
    External,
}

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Polygon => "polygon",
            ShapeKind::External => "external",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
    pub kind: ShapeKind,
}

impl Sample {
    /// Target area over image area.
    pub fn scale_ratio(&self) -> f64 {
        self.mask.ratio()
    }
}

/// A closed shape in unit-free image coordinates, scaled about its centre.
#[derive(Debug, Clone)]
struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    /// Unit-scale outline: ellipse/rectangle half-axes, or polygon vertices around the centre.
    half: (f64, f64),
    angle: f64,
    vertices: Vec<(f64, f64)>,
}

impl Shape {
    fn random(rng: &mut impl Rng, kind: ShapeKind, side: f64) -> Self {
        let aspect: f64 = rng.random_range(0.5..2.0);
        let vertices = if kind == ShapeKind::Polygon {
            // jittered, evenly spread angles keep the polygon star-shaped around its centre,
            // so the covered area grows monotonically with scale
            let n = rng.random_range(5..10);
            (0..n)
                .map(|i| {
                    let a = 2.0 * PI * (i as f64 + rng.random_range(0.0..0.8)) / n as f64;
                    let r = rng.random_range(0.6..1.0);
                    (r * a.cos() * aspect.sqrt(), r * a.sin() / aspect.sqrt())
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            kind,
            cx: rng.random_range(0.25..0.75) * side,
            cy: rng.random_range(0.25..0.75) * side,
            half: (aspect.sqrt(), 1.0 / aspect.sqrt()),
            angle: rng.random_range(0.0..PI),
            vertices,
        }
    }

    /// Whether the point lies inside the shape enlarged by `scale`.
    fn contains(&self, x: f64, y: f64, scale: f64) -> bool {
        let (dx, dy) = ((x - self.cx) / scale, (y - self.cy) / scale);
        let (s, c) = self.angle.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self.kind {
            ShapeKind::Ellipse => (u / self.half.0).powi(2) + (v / self.half.1).powi(2) <= 1.0,
            ShapeKind::Rectangle => u.abs() <= self.half.0 && v.abs() <= self.half.1,
            ShapeKind::Polygon => point_in_polygon(&self.vertices, u, v),
            ShapeKind::External => false,
        }
    }

    fn rasterize(&self, side: usize, scale: f64) -> Mask {
        Mask::from_fn(side, side, |x, y| self.contains(x as f64 + 0.5, y as f64 + 0.5, scale))
    }

    /// Scale whose clipped rasterisation covers `ratio` of the image, by bisection.
    fn fit(&self, side: usize, ratio: f64) -> Mask {
        let target = ratio * (side * side) as f64;
        let (mut lo, mut hi) = (0.0, 4.0 * side as f64);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if (self.rasterize(side, mid).area() as f64) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.rasterize(side, hi)
    }
}

fn point_in_polygon(vertices: &[(f64, f64)], x: f64, y: f64) -> bool {
    let mut inside = false;
    let n = vertices.len();
    for i in 0..n {
        let (xi, yi) = vertices[i];
        let (xj, yj) = vertices[(i + n - 1) % n];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
    }
    inside
}

/// Smooth random texture: a base colour modulated by a few random sinusoids.
struct Texture {
    color: [f64; 3],
    waves: Vec<(f64, f64, f64, f64)>,
    noise: f64,
}

impl Texture {
    fn random(rng: &mut impl Rng, color: [f64; 3]) -> Self {
        let waves = (0..rng.random_range(1..4))
            .map(|_| {
                (
                    rng.random_range(-0.4..0.4),
                    rng.random_range(-0.4..0.4),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.02..0.08),
                )
            })
            .collect();
        Self {
            color,
            waves,
            noise: rng.random_range(0.0..0.04),
        }
    }

    fn sample(&self, x: f64, y: f64, rng: &mut impl Rng) -> [f32; 3] {
        let wave: f64 = self
            .waves
            .iter()
            .map(|&(fx, fy, ph, amp)| amp * (fx * x + fy * y + ph).sin())
            .sum();
        let n = if self.noise > 0.0 {
            rng.random_range(-self.noise..self.noise)
        } else {
            0.0
        };
        self.color.map(|c| (c + wave + n).clamp(0.0, 1.0) as f32)
    }
}

fn random_color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn random_kind(rng: &mut impl Rng) -> ShapeKind {
    match rng.random_range(0..3) {
        0 => ShapeKind::Ellipse,
        1 => ShapeKind::Rectangle,
        _ => ShapeKind::Polygon,
    }
}

/// One synthetic sample whose target covers `ratio` of the image (up to rasterisation).
pub fn gen_sample(rng: &mut impl Rng, id: String, side: usize, ratio: f64) -> Result<Sample> {
    if side == 0 || !(0.0..1.0).contains(&ratio) || ratio <= 0.0 {
        return Err(contract(format!("cannot draw a target of ratio {ratio} on a {side} image")));
    }
    let s = side as f64;
    let bg_color = random_color(rng);
    let mut fg_color = random_color(rng);
    while color_distance(fg_color, bg_color) < 0.45 {
        fg_color = random_color(rng);
    }
    let background = Texture::random(rng, bg_color);
    let foreground = Texture::random(rng, fg_color);

    let kind = random_kind(rng);
    let target = Shape::random(rng, kind, s);
    let mut mask = target.fit(side, ratio);
    if mask.is_empty() {
        // degenerate outline (e.g. a sliver polygon): fall back to the pixel nearest the centre
        let (x, y) = ((target.cx as usize).min(side - 1), (target.cy as usize).min(side - 1));
        mask.set(x, y, true);
    }

    // distractors sit behind the target so its mask stays exact
    let mut layers: Vec<(Mask, Texture)> = Vec::new();
    for _ in 0..rng.random_range(1..4) {
        let kind = random_kind(rng);
        let shape = Shape::random(rng, kind, s);
        let m = shape.fit(side, rng.random_range(0.01..0.15));
        let mut c = random_color(rng);
        if rng.random_bool(0.3) {
            // similar colour to the target makes the click informative
            c = fg_color.map(|v| (v + rng.random_range(-0.15..0.15)).clamp(0.0, 1.0));
        }
        layers.push((m, Texture::random(rng, c)));
    }
    let mut image = Image::filled(side, side, [0.0; 3]);
    for y in 0..side {
        for x in 0..side {
            let (fx, fy) = (x as f64, y as f64);
            let rgb = if mask.get(x, y) {
                foreground.sample(fx, fy, rng)
            } else if let Some((_, t)) = layers.iter().rev().find(|(m, _)| m.get(x, y)) {
                t.sample(fx, fy, rng)
            } else {
                background.sample(fx, fy, rng)
            };
            for (c, v) in rgb.into_iter().enumerate() {
                image.set(c, x, y, v);
            }
        }
    }
    Ok(Sample {
        id,
        image,
        mask,
        kind,
    })
}

/// `n` samples with target ratios uniform over [`RATIO_RANGE`]; identical seeds give
/// bit-identical datasets.
pub fn gen_synthetic(seed: u64, n: usize, side: usize) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(contract("dataset size must be at least 1"));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..n).map(|_| master.next_u64()).collect();
    let items: Vec<(usize, u64)> = seeds.into_iter().enumerate().collect();
    crate::parallel::map(crate::parallel::Execution::default(), &items, |&(i, s)| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let ratio = rng.random_range(RATIO_RANGE.0..RATIO_RANGE.1);
        gen_sample(&mut rng, format!("syn{seed}_{i:05}"), side, ratio)
    })
    .into_iter()
    .collect()
}

/// Geometric augmentation: optional horizontal flip, then an isotropic rescale of the
/// canvas by `scale` and a `side × side` window at `offset` in the rescaled canvas
/// (negative offsets pad with the mean colour).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub flip: bool,
    pub scale: f64,
    pub offset: (i64, i64),
}

impl AugmentParams {
    pub const SCALE_RANGE: (f64, f64) = (0.75, 1.4);

    pub fn identity() -> Self {
        Self {
            flip: false,
            scale: 1.0,
            offset: (0, 0),
        }
    }

    pub fn random(rng: &mut impl Rng, side: usize) -> Self {
        let flip = rng.random_bool(0.5);
        let scale = rng.random_range(Self::SCALE_RANGE.0..=Self::SCALE_RANGE.1);
        let scaled = (side as f64 * scale).round() as i64;
        let slack = scaled - side as i64;
        let pick = |rng: &mut dyn RngCore| {
            if slack >= 0 {
                rng.random_range(0..=slack)
            } else {
                rng.random_range(slack..=0)
            }
        };
        let ox = pick(rng);
        let oy = pick(rng);
        Self {
            flip,
            scale,
            offset: (ox, oy),
        }
    }

    /// Source pixel for output pixel `(x, y)`, if it falls on the image.
    fn source(&self, x: usize, y: usize, w: usize, h: usize) -> Option<(usize, usize)> {
        let sx = ((x as i64 + self.offset.0) as f64 + 0.5) / self.scale;
        let sy = ((y as i64 + self.offset.1) as f64 + 0.5) / self.scale;
        if sx < 0.0 || sy < 0.0 || sx >= w as f64 || sy >= h as f64 {
            return None;
        }
        let (mut sx, sy) = (sx as usize, sy as usize);
        if self.flip {
            sx = w - 1 - sx;
        }
        Some((sx, sy))
    }

    /// Applies the transform to image and mask with the same nearest-neighbour mapping.
    pub fn apply(&self, sample: &Sample) -> Sample {
        let (w, h) = (sample.image.width, sample.image.height);
        let fill = sample.image.mean_color();
        let mut image = Image::filled(w, h, fill);
        let mut mask = Mask::empty(w, h);
        for y in 0..h {
            for x in 0..w {
                if let Some((sx, sy)) = self.source(x, y, w, h) {
                    for c in 0..3 {
                        image.set(c, x, y, sample.image.get(c, sx, sy));
                    }
                    mask.set(x, y, sample.mask.get(sx, sy));
                }
            }
        }
        Sample {
            id: sample.id.clone(),
            image,
            mask,
            kind: sample.kind,
        }
    }
}

/// Random flip, scale jitter and crop; retries draws that would crop the target away and
/// falls back to the unchanged sample.
pub fn augment(sample: &Sample, seed: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..8 {
        let params = AugmentParams::random(&mut rng, sample.image.width);
        let out = params.apply(sample);
        if out.mask.area() > 0 && out.mask.ratio() < 1.0 {
            return out;
        }
    }
    sample.clone()
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    kind: ShapeKind,
}

/// Writes `<id>.png`, `<id>_mask.png` and `index.json` into `dir`.
pub fn save_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = Vec::with_capacity(samples.len());
    for s in samples {
        s.image.save(&dir.join(format!("{}.png", s.id)))?;
        s.mask.save(&dir.join(format!("{}_mask.png", s.id)))?;
        index.push(IndexEntry {
            id: s.id.clone(),
            kind: s.kind,
        });
    }
    fs::write(dir.join("index.json"), serde_json::to_vec_pretty(&index)?)?;
    Ok(())
}

/// Reads a directory written by [`save_dataset`], or any directory of `<id>.png` /
/// `<id>_mask.png` pairs, resizing to `side` when given.
pub fn load_dataset(dir: &Path, side: Option<usize>) -> Result<Vec<Sample>> {
    let index_path = dir.join("index.json");
    let entries: Vec<IndexEntry> = if index_path.exists() {
        serde_json::from_slice(&fs::read(index_path)?)?
    } else {
        let mut ids: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter_map(|n| n.strip_suffix("_mask.png").map(str::to_string))
            .collect();
        ids.sort();
        ids.into_iter()
            .map(|id| IndexEntry {
                id,
                kind: ShapeKind::External,
            })
            .collect()
    };
    if entries.is_empty() {
        return Err(Error::Image(format!("no samples found in {}", dir.display())));
    }
    entries
        .into_iter()
        .map(|e| {
            let mut image = Image::load(&dir.join(format!("{}.png", e.id)))?;
            let mut mask = Mask::load(&dir.join(format!("{}_mask.png", e.id)))?;
            if !(image.width == mask.width && image.height == mask.height) {
                return Err(contract(format!("sample {} has mismatched mask size", e.id)));
            }
            if let Some(side) = side {
                image = image.resize(side, side);
                mask = mask.resize_nearest(side, side);
            }
            if mask.is_empty() {
                return Err(contract(format!("sample {} has an empty mask", e.id)));
            }
            Ok(Sample {
                id: e.id,
                image,
                mask,
                kind: e.kind,
            })
        })
        .collect()
}
