//! Automatic click simulation: error components, exact distance transforms and the
//! training-time click sampler.

use rand::Rng;

use crate::clicks::{Click, ClickState};
use crate::error::{contract, Result};
use crate::raster::Mask;

/// Connected set of pixels (4-connectivity), listed in raster order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub pixels: Vec<usize>,
}

impl Component {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// First pixel in raster order (lowest row, then lowest column).
    pub fn top_left(&self) -> usize {
        self.pixels[0]
    }
}

/// 4-connected components of the `true` pixels, ordered by their first raster pixel.
pub fn components(mask: &[bool], width: usize, height: usize) -> Vec<Component> {
    let mut label = vec![usize::MAX; mask.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut pixels = Vec::new();
        label[start] = id;
        stack.push(start);
        while let Some(i) = stack.pop() {
            pixels.push(i);
            let (x, y) = (i % width, i / width);
            let mut visit = |j: usize| {
                if mask[j] && label[j] == usize::MAX {
                    label[j] = id;
                    stack.push(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < width {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - width);
            }
            if y + 1 < height {
                visit(i + width);
            }
        }
        pixels.sort_unstable();
        out.push(Component { pixels });
    }
    out
}

/// One-dimensional squared distance transform of a sampled function (lower envelope of
/// parabolas).
fn dt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let finite: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if finite.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    v[0] = finite[0];
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for &q in &finite[1..] {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so this never pops the first parabola
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `source` pixel.
/// With `border_is_source` the ring of pixels just outside the image counts as a source.
/// Pixels with no reachable source get `f64::INFINITY`.
pub fn squared_distance_to(sources: &[bool], width: usize, height: usize, border_is_source: bool) -> Vec<f64> {
    let pad = usize::from(border_is_source);
    let (w, h) = (width + 2 * pad, height + 2 * pad);
    let mut grid = vec![f64::INFINITY; w * h];
    for y in 0..h {
        for x in 0..w {
            let inside = x >= pad && y >= pad && x < width + pad && y < height + pad;
            let src = if inside {
                sources[(y - pad) * width + (x - pad)]
            } else {
                true
            };
            if src {
                grid[y * w + x] = 0.0;
            }
        }
    }
    let n = w.max(h);
    let (mut f, mut o) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        dt_1d(&f[..h], &mut o[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = o[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        dt_1d(&f[..w], &mut o[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&o[..w]);
    }
    let mut out = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            out.push(grid[(y + pad) * w + x + pad]);
        }
    }
    out
}

/// Squared distance from each pixel of `region` to the nearest pixel outside it, the
/// image border counting as outside; zero outside the region.
pub fn interior_distance(region: &[bool], width: usize, height: usize) -> Vec<f64> {
    let outside: Vec<bool> = region.iter().map(|&b| !b).collect();
    squared_distance_to(&outside, width, height, true)
}

/// The deepest pixel of a component: maximum distance to its boundary, ties resolved
/// by raster order.
pub fn deepest_point(component: &Component, width: usize, height: usize) -> usize {
    let mut region = vec![false; width * height];
    for &i in &component.pixels {
        region[i] = true;
    }
    let dist = interior_distance(&region, width, height);
    let mut best = component.pixels[0];
    for &i in &component.pixels {
        if dist[i] > dist[best] {
            best = i;
        }
    }
    best
}

/// The largest error component across false negatives and false positives, with its
/// polarity (`true` for a false-negative region). Size ties prefer false negatives, then
/// the lowest top-left pixel.
pub fn largest_error(pred: &Mask, gt: &Mask) -> Result<Option<(Component, bool)>> {
    if !pred.same_size(gt) {
        return Err(contract(format!(
            "prediction {}x{} and ground truth {}x{} differ in size",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let (w, h) = (gt.width, gt.height);
    let fn_region: Vec<bool> = gt.data.iter().zip(&pred.data).map(|(&g, &p)| g && !p).collect();
    let fp_region: Vec<bool> = gt.data.iter().zip(&pred.data).map(|(&g, &p)| !g && p).collect();
    let mut best: Option<(Component, bool)> = None;
    for (region, positive) in [(fn_region, true), (fp_region, false)] {
        for c in components(&region, w, h) {
            // false negatives are visited first and each polarity in top-left order, so a
            // strict comparison keeps the preferred component on size ties
            if best.as_ref().is_none_or(|(b, _)| c.len() > b.len()) {
                best = Some((c, positive));
            }
        }
    }
    Ok(best)
}

/// The corrective click for `pred` against `gt`, or `None` when the masks agree.
pub fn next_click(pred: &Mask, gt: &Mask) -> Result<Option<Click>> {
    let Some((component, positive)) = largest_error(pred, gt)? else {
        return Ok(None);
    };
    let i = deepest_point(&component, gt.width, gt.height);
    Ok(Some(Click {
        x: i % gt.width,
        y: i / gt.width,
        positive,
    }))
}

/// Click count for one training step: start at one, continue with probability `decay`,
/// never more than `max_clicks`.
pub fn sample_click_count(decay: f64, max_clicks: usize, rng: &mut impl Rng) -> usize {
    let mut n = 1;
    while n < max_clicks && rng.random_bool(decay) {
        n += 1;
    }
    n
}

/// Pixels at least two pixels deep inside `region`; all region pixels when none are.
fn interior_pixels(region: &[bool], width: usize, height: usize) -> Vec<usize> {
    let dist = interior_distance(region, width, height);
    let deep: Vec<usize> = (0..region.len()).filter(|&i| region[i] && dist[i] >= 4.0).collect();
    if deep.is_empty() {
        (0..region.len()).filter(|&i| region[i]).collect()
    } else {
        deep
    }
}

fn pick(pixels: &[usize], width: usize, positive: bool, rng: &mut impl Rng) -> Option<Click> {
    if pixels.is_empty() {
        return None;
    }
    let i = pixels[rng.random_range(0..pixels.len())];
    Some(Click {
        x: i % width,
        y: i / width,
        positive,
    })
}

/// Training clicks: a geometric number of clicks, the first positive at a random interior
/// ground-truth point; later clicks from the error regions of `prev_pred` when given,
/// otherwise random interior foreground or background points.
pub fn sample_training_clicks(
    gt: &Mask,
    prev_pred: Option<&Mask>,
    decay: f64,
    max_clicks: usize,
    rng: &mut impl Rng,
) -> Result<ClickState> {
    if gt.is_empty() {
        return Err(contract("ground truth mask is empty"));
    }
    if !(0.0..=1.0).contains(&decay) || max_clicks == 0 {
        return Err(contract(format!(
            "invalid click sampler (decay {decay}, max {max_clicks})"
        )));
    }
    let (w, h) = (gt.width, gt.height);
    let n = sample_click_count(decay, max_clicks, rng);
    let background: Vec<bool> = gt.data.iter().map(|&b| !b).collect();
    let fg = interior_pixels(&gt.data, w, h);
    let bg = interior_pixels(&background, w, h);
    let mut state = ClickState::new(w, h);
    state.push(pick(&fg, w, true, rng).expect("nonempty ground truth"))?;
    let errors = match prev_pred {
        Some(p) => {
            if !p.same_size(gt) {
                return Err(contract("previous prediction size differs from the ground truth"));
            }
            let fn_px: Vec<usize> = (0..gt.data.len()).filter(|&i| gt.data[i] && !p.data[i]).collect();
            let fp_px: Vec<usize> = (0..gt.data.len()).filter(|&i| !gt.data[i] && p.data[i]).collect();
            Some((fn_px, fp_px))
        }
        None => None,
    };
    for _ in 1..n {
        let click = match &errors {
            Some((fn_px, fp_px)) if !fn_px.is_empty() || !fp_px.is_empty() => {
                let total = fn_px.len() + fp_px.len();
                let positive = rng.random_range(0..total) < fn_px.len();
                if positive {
                    pick(fn_px, w, true, rng)
                } else {
                    pick(fp_px, w, false, rng)
                }
            }
            _ => {
                let positive = rng.random_bool(0.5);
                if positive || bg.is_empty() {
                    pick(&fg, w, true, rng)
                } else {
                    pick(&bg, w, false, rng)
                }
            }
        };
        if let Some(c) = click {
            state.push(c)?;
        }
    }
    Ok(state)
}
