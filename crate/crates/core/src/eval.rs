//! Click-by-click evaluation: NoC / NoF, NoC-Scale bins and the per-sample CSV report.

use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clicks::ClickState;
use crate::data::Sample;
use crate::error::{contract, Error, Result};
use crate::model::MstModel;
use crate::parallel::{self, Execution};
use crate::raster::{Image, Mask, Plane};
use crate::simulate::{interior_distance, next_click, squared_distance_to};
use crate::tensor::Real;

/// Click budget per sample; a sample that never reaches the target counts as this many.
pub const MAX_CLICKS: usize = 20;
pub const DEFAULT_TARGETS: [f64; 3] = [0.80, 0.85, 0.90];
/// IOU range of the initial mask in the mask-correction protocol.
pub const SP_IOU_RANGE: (f64, f64) = (0.75, 0.85);
pub const BINARIZE_THRESHOLD: f32 = 0.5;

/// Anything that maps an image and its click state to a foreground probability map.
pub trait Predictor: Sync {
    fn predict(&self, image: &Image, state: &ClickState) -> Result<Plane>;
}

impl<T: Real> Predictor for MstModel<T> {
    fn predict(&self, image: &Image, state: &ClickState) -> Result<Plane> {
        MstModel::predict(self, image, state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Start from an empty previous mask.
    Zero,
    /// Mask correction: start from a corrupted mask with IOU in [`SP_IOU_RANGE`].
    Sp,
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Protocol::Zero),
            "sp" => Ok(Protocol::Sp),
            other => Err(Error::Config(format!("unknown protocol {other:?} (zero|sp)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub targets: Vec<f64>,
    pub max_clicks: usize,
    pub protocol: Protocol,
    /// Seeds the corrupted initial masks of the correction protocol.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            targets: DEFAULT_TARGETS.to_vec(),
            max_clicks: MAX_CLICKS,
            protocol: Protocol::Zero,
            seed: 0,
        }
    }
}

impl EvalOptions {
    fn validate(&self) -> Result<()> {
        if self.targets.is_empty() || self.targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config(format!("invalid IOU targets {:?}", self.targets)));
        }
        if self.max_clicks == 0 {
            return Err(Error::Config("max clicks must be at least 1".into()));
        }
        Ok(())
    }

    fn max_target(&self) -> f64 {
        self.targets.iter().copied().fold(f64::MIN, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub scale_ratio: f64,
    /// IOU after each click; one entry per click issued.
    pub ious: Vec<f64>,
    pub max_clicks: usize,
}

impl EvalRecord {
    /// First 1-based click index reaching `target`, or `max_clicks` with the failure flag.
    pub fn noc(&self, target: f64) -> (usize, bool) {
        noc_from_trace(&self.ious, target, self.max_clicks)
    }
}

pub fn noc_from_trace(ious: &[f64], target: f64, max_clicks: usize) -> (usize, bool) {
    match ious.iter().take(max_clicks).position(|&v| v >= target) {
        Some(i) => (i + 1, false),
        None => (max_clicks, true),
    }
}

/// Runs the click loop on one sample: simulate a click from the current error, predict
/// with the accumulated clicks, binarise, record IOU; stop at the highest target or the
/// click budget.
pub fn evaluate_sample(
    predictor: &impl Predictor,
    id: &str,
    image: &Image,
    gt: &Mask,
    options: &EvalOptions,
    init_mask: Option<&Mask>,
) -> Result<EvalRecord> {
    options.validate()?;
    if image.width != gt.width || image.height != gt.height {
        return Err(contract(format!("sample {id}: image and mask sizes differ")));
    }
    let mut state = ClickState::new(gt.width, gt.height);
    let mut pred = match init_mask {
        Some(m) => {
            state.set_mask(m.to_plane())?;
            m.clone()
        }
        None => Mask::empty(gt.width, gt.height),
    };
    let stop = options.max_target();
    let mut ious = Vec::with_capacity(options.max_clicks);
    for _ in 0..options.max_clicks {
        let Some(click) = next_click(&pred, gt)? else {
            break;
        };
        state.push(click)?;
        let probs = predictor.predict(image, &state)?;
        pred = probs.threshold(BINARIZE_THRESHOLD);
        state.set_mask(probs)?;
        let iou = pred.iou(gt)?;
        ious.push(iou);
        if iou >= stop {
            break;
        }
    }
    Ok(EvalRecord {
        id: id.to_string(),
        scale_ratio: gt.ratio(),
        ious,
        max_clicks: options.max_clicks,
    })
}

/// A corrupted version of `gt` with IOU drawn uniformly from [`SP_IOU_RANGE`]: either grown
/// by the background pixels nearest to the target or shrunk by the target pixels nearest
/// to its boundary.
pub fn sp_initial_mask(gt: &Mask, rng: &mut impl Rng) -> Result<Mask> {
    let area = gt.area();
    if area == 0 {
        return Err(contract("cannot corrupt an empty mask"));
    }
    let target = rng.random_range(SP_IOU_RANGE.0..=SP_IOU_RANGE.1);
    let grow_first = rng.random_bool(0.5);
    let (w, h) = (gt.width, gt.height);
    let grown = || {
        let k = (area as f64 / target - area as f64).round() as usize;
        let dist = squared_distance_to(&gt.data, w, h, false);
        let mut outside: Vec<usize> = (0..gt.data.len()).filter(|&i| !gt.data[i]).collect();
        outside.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        (k <= outside.len()).then(|| {
            let mut m = gt.clone();
            for &i in &outside[..k] {
                m.data[i] = true;
            }
            m
        })
    };
    let shrunk = || {
        let k = (area as f64 * (1.0 - target)).round() as usize;
        let dist = interior_distance(&gt.data, w, h);
        let mut inside: Vec<usize> = (0..gt.data.len()).filter(|&i| gt.data[i]).collect();
        inside.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
        (k < inside.len()).then(|| {
            let mut m = gt.clone();
            for &i in &inside[..k] {
                m.data[i] = false;
            }
            m
        })
    };
    let in_range = |m: &Mask| {
        m.iou(gt)
            .map(|v| (SP_IOU_RANGE.0..=SP_IOU_RANGE.1).contains(&v))
            .unwrap_or(false)
    };
    let candidates = if grow_first {
        [grown(), shrunk()]
    } else {
        [shrunk(), grown()]
    };
    candidates
        .into_iter()
        .flatten()
        .find(in_range)
        .ok_or_else(|| contract(format!("no corrupted mask within the IOU range for a {area}-pixel target")))
}

/// Per-sample seed for the correction protocol, independent of scheduling.
fn sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Evaluates every sample; each sample's click loop is sequential, samples are independent.
pub fn evaluate_dataset(
    predictor: &impl Predictor,
    samples: &[Sample],
    options: &EvalOptions,
    exec: Execution,
) -> Result<Vec<EvalRecord>> {
    options.validate()?;
    let indexed: Vec<(usize, &Sample)> = samples.iter().enumerate().collect();
    parallel::map(exec, &indexed, |&(i, s)| {
        let init = match options.protocol {
            Protocol::Zero => None,
            Protocol::Sp => {
                let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(options.seed, i));
                Some(sp_initial_mask(&s.mask, &mut rng)?)
            }
        };
        evaluate_sample(predictor, &s.id, &s.image, &s.mask, options, init.as_ref())
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub target: f64,
    pub mean_noc: f64,
    /// Number of failures: samples that never reached the target.
    pub nof: usize,
    pub count: usize,
}

pub fn aggregate(records: &[EvalRecord], target: f64) -> Result<Summary> {
    if records.is_empty() {
        return Err(contract("cannot aggregate an empty record set"));
    }
    let (mut total, mut nof) = (0usize, 0usize);
    for r in records {
        let (n, failed) = r.noc(target);
        total += n;
        nof += usize::from(failed);
    }
    Ok(Summary {
        target,
        mean_noc: total as f64 / records.len() as f64,
        nof,
        count: records.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_noc: Option<f64>,
}

/// Edges 0, 0.1, …, 1.0.
pub fn default_bin_edges() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Mean NoC per target-scale bin `[lo, hi)`; the last bin also includes its upper edge.
pub fn noc_scale_bins(records: &[EvalRecord], target: f64, edges: &[f64]) -> Result<Vec<ScaleBin>> {
    if records.is_empty() {
        return Err(contract("cannot bin an empty record set"));
    }
    if edges.len() < 2 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("bin edges must increase: {edges:?}")));
    }
    let last = edges.len() - 2;
    let mut sums = vec![(0usize, 0usize); edges.len() - 1];
    for r in records {
        let v = r.scale_ratio;
        let bin = (0..=last).find(|&b| v >= edges[b] && (v < edges[b + 1] || (b == last && v <= edges[b + 1])));
        let Some(b) = bin else {
            return Err(contract(format!(
                "scale ratio {v} of {} lies outside the bin edges",
                r.id
            )));
        };
        sums[b].0 += 1;
        sums[b].1 += r.noc(target).0;
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(b, (count, total))| ScaleBin {
            lo: edges[b],
            hi: edges[b + 1],
            count,
            mean_noc: (count > 0).then(|| total as f64 / count as f64),
        })
        .collect())
}

/// Selected-token precision after one simulated click per sample.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SelectionPrecision {
    pub inside: usize,
    pub selected: usize,
}

impl SelectionPrecision {
    pub fn value(&self) -> f64 {
        if self.selected == 0 {
            0.0
        } else {
            self.inside as f64 / self.selected as f64
        }
    }
}

/// Fraction of the tokens selected by every fusion block, over both auxiliary scales, whose
/// cells are mostly foreground; measured after the first simulated click on each sample.
pub fn selection_precision<T: Real>(
    model: &MstModel<T>,
    samples: &[Sample],
    exec: Execution,
) -> Result<SelectionPrecision> {
    if !model.config().has_mst() {
        return Err(contract("selection precision needs a model with fusion blocks"));
    }
    let per_sample = parallel::map(exec, samples, |s| -> Result<(usize, usize)> {
        let empty = Mask::empty(s.mask.width, s.mask.height);
        let mut state = ClickState::new(s.mask.width, s.mask.height);
        if let Some(c) = next_click(&empty, &s.mask)? {
            state.push(c)?;
        }
        let (_, summaries) = model.predict_with_selection(&s.image, &state)?;
        let mut counts = (0, 0);
        for scale in [crate::mst::Scale::Tiny, crate::mst::Scale::Large] {
            let labels = crate::loss::rasterize_token_gt(&s.mask, scale.patch())?;
            for sum in &summaries {
                for &(i, _) in sum.for_scale(scale) {
                    counts.0 += usize::from(labels[i]);
                    counts.1 += 1;
                }
            }
        }
        Ok(counts)
    });
    let mut out = SelectionPrecision::default();
    for r in per_sample {
        let (inside, selected) = r?;
        out.inside += inside;
        out.selected += selected;
    }
    Ok(out)
}

fn target_column(t: f64) -> String {
    format!("noc{}", (t * 100.0).round() as i64)
}

/// CSV with columns `id, scale_ratio, iou_1..iou_<max>, noc<τ>…, failed` (failure at the
/// highest target); missing IOU cells after an early stop are empty.
pub fn write_report(records: &[EvalRecord], options: &EvalOptions, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["id".to_string(), "scale_ratio".to_string()];
    header.extend((1..=options.max_clicks).map(|i| format!("iou_{i}")));
    header.extend(options.targets.iter().map(|&t| target_column(t)));
    header.push("failed".into());
    w.write_record(&header)?;
    let stop = options.max_target();
    for r in records {
        let mut row = vec![r.id.clone(), r.scale_ratio.to_string()];
        row.extend((0..options.max_clicks).map(|i| r.ious.get(i).map(f64::to_string).unwrap_or_default()));
        row.extend(options.targets.iter().map(|&t| r.noc(t).0.to_string()));
        row.push(u8::from(r.noc(stop).1).to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
