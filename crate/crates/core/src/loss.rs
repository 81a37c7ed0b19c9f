//! Focal segmentation loss, token-level ground truth and the triplet token loss.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{contract, Result};
use crate::mst::Scale;
use crate::raster::Mask;
use crate::tensor::{Real, Tensor};

/// Random `(positive, negative)` pairs kept per scale and step when more are available.
pub const MAX_PAIRS_PER_SCALE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalParams {
    pub gamma: f64,
    pub alpha: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
        }
    }
}

/// Foreground flag per `p×p` cell: more than half of its pixels are foreground.
pub fn rasterize_token_gt(gt: &Mask, p: usize) -> Result<Vec<bool>> {
    Ok(gt.cell_coverage(p)?.into_iter().map(|c| c > 0.5).collect())
}

/// Mean focal loss of `[W/4, H/4, 1]` logits against a full-resolution mask.
pub fn focal_loss<T: Real>(
    g: &mut Graph<T>,
    logits: Var,
    gt: &Mask,
    params: FocalParams,
) -> Result<Var> {
    let side = g.shape(logits)[0];
    if side == 0 || !gt.width.is_multiple_of(side) || gt.height != gt.width {
        return Err(contract(format!(
            "{}x{} mask cannot be reduced to a {side}x{side} map",
            gt.width, gt.height
        )));
    }
    let cell = gt.width / side;
    let targets: Vec<T> = rasterize_token_gt(gt, cell)?
        .into_iter()
        .map(|b| if b { T::one() } else { T::zero() })
        .collect();
    g.focal_loss(logits, &targets, T::lit(params.alpha), T::lit(params.gamma))
}

/// Selected tokens of one scale with their token-level labels.
pub struct TripletInput {
    pub scale: Scale,
    pub selected: Var,
    pub labels: Vec<bool>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PairCounts {
    pub tiny: usize,
    pub large: usize,
}

impl PairCounts {
    pub fn add(&mut self, scale: Scale, n: usize) {
        match scale {
            Scale::Tiny => self.tiny += n,
            Scale::Large => self.large += n,
        }
    }
}

/// `Σ_j (1/N_j) Σ_pairs softplus(‖q − k⁺‖ − ‖q − k⁻‖)` over the selected tokens of each
/// scale. A scale without both a positive and a negative token contributes nothing.
pub fn triplet_token_loss<T: Real>(
    g: &mut Graph<T>,
    query: Var,
    inputs: &[TripletInput],
    rng: &mut impl Rng,
) -> Result<(Var, PairCounts)> {
    let mut counts = PairCounts::default();
    let mut terms = Vec::new();
    for input in inputs {
        let (k, c) = g.value(input.selected).dims2()?;
        if input.labels.len() != k {
            return Err(contract(format!(
                "{} labels for {k} selected tokens",
                input.labels.len()
            )));
        }
        if g.value(query).len() != c {
            return Err(contract("query and tokens differ in width"));
        }
        let pos: Vec<usize> = (0..k).filter(|&i| input.labels[i]).collect();
        let neg: Vec<usize> = (0..k).filter(|&i| !input.labels[i]).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let total = pos.len() * neg.len();
        let pairs: Vec<(usize, usize)> = if total <= MAX_PAIRS_PER_SCALE {
            pos.iter()
                .flat_map(|&p| neg.iter().map(move |&n| (p, n)))
                .collect()
        } else {
            let mut picked = sample(rng, total, MAX_PAIRS_PER_SCALE).into_vec();
            picked.sort_unstable();
            picked
                .into_iter()
                .map(|i| (pos[i / neg.len()], neg[i % neg.len()]))
                .collect()
        };
        let q = g.reshape(query, &[1, c])?;
        let mut dists = Vec::with_capacity(k);
        for t in 0..k {
            let row = g.gather_rows(input.selected, &[t])?;
            dists.push(g.l2_distance(q, row)?);
        }
        let columns = dists_as_columns(g, &dists)?;
        let dist_row = g.concat_cols(&columns)?;
        let dp = g.gather(dist_row, Arc::new(pairs.iter().map(|p| p.0).collect()), &[pairs.len()])?;
        let dn = g.gather(dist_row, Arc::new(pairs.iter().map(|p| p.1).collect()), &[pairs.len()])?;
        let diff = g.sub(dp, dn)?;
        let sp = g.softplus(diff);
        let s = g.sum(sp);
        terms.push(g.scale(s, T::one() / T::lit(pairs.len() as f64)));
        counts.add(input.scale, pairs.len());
    }
    let mut iter = terms.into_iter();
    let loss = match iter.next() {
        None => g.constant(Tensor::scalar(T::zero())),
        Some(first) => iter.try_fold(first, |acc, t| g.add(acc, t))?,
    };
    Ok((loss, counts))
}

fn dists_as_columns<T: Real>(g: &mut Graph<T>, dists: &[Var]) -> Result<Vec<Var>> {
    dists.iter().map(|&d| g.reshape(d, &[1, 1])).collect()
}

/// Per-step loss values.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub seg: f64,
    pub contrastive: f64,
    pub total: f64,
    pub pairs: PairCounts,
}

/// `L = L_seg + L_c`, unweighted.
pub fn total_loss<T: Real>(g: &mut Graph<T>, seg: Var, contrastive: Var) -> Result<Var> {
    g.add(seg, contrastive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn softplus(x: f64) -> f64 {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }

    fn single_pair_loss(dp: f64, dn: f64) -> f64 {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let sel = g.constant(Tensor::new(&[2, 2], vec![dp, 0.0, 0.0, dn]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inputs = [TripletInput {
            scale: Scale::Tiny,
            selected: sel,
            labels: vec![true, false],
        }];
        let (l, counts) = triplet_token_loss(&mut g, q, &inputs, &mut rng).unwrap();
        assert_eq!(counts.tiny, 1);
        g.item(l)
    }

    #[test]
    fn triplet_closed_forms() {
        assert!((single_pair_loss(1.5, 1.5) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(single_pair_loss(0.0, 800.0) < 1e-300);
        let v = single_pair_loss(12.0, 2.0);
        assert!((v - softplus(10.0)).abs() < 1e-12);
        assert!((v - 10.0000454).abs() < 1e-7);
    }

    #[test]
    fn degenerate_scale_contributes_nothing() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        let sel = g.constant(Tensor::new(&[2, 2], vec![1.0, 1.0, 2.0, 0.0]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let inputs = [TripletInput {
            scale: Scale::Large,
            selected: sel,
            labels: vec![true, true],
        }];
        let (l, counts) = triplet_token_loss(&mut g, q, &inputs, &mut rng).unwrap();
        assert_eq!(g.item(l), 0.0);
        assert_eq!(counts, PairCounts::default());
    }

    #[test]
    fn pair_cap_is_honoured() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::zeros(&[3]));
        let k = 40;
        let sel = g.constant(Tensor::from_fn(&[k, 3], |i| (i as f64 * 0.31).sin()));
        let labels = (0..k).map(|i| i % 2 == 0).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = [TripletInput {
            scale: Scale::Tiny,
            selected: sel,
            labels,
        }];
        let (_, counts) = triplet_token_loss(&mut g, q, &inputs, &mut rng).unwrap();
        assert_eq!(counts.tiny, MAX_PAIRS_PER_SCALE);
    }

    fn focal_value(logit: f64, target: bool, p: FocalParams) -> f64 {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::full(&[2, 2, 1], logit));
        let gt = Mask::from_fn(8, 8, |_, _| target);
        let l = focal_loss(&mut g, z, &gt, p).unwrap();
        g.item(l)
    }

    #[test]
    fn focal_closed_forms() {
        let p = FocalParams { gamma: 2.0, alpha: 1.0 };
        assert!((focal_value(0.0, true, p) - 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
        assert!(focal_value(40.0, true, FocalParams::default()) < 1e-30);
        assert!(focal_value(-40.0, false, FocalParams::default()) < 1e-30);
        // gamma 0, alpha 0.5 is half the binary cross entropy
        let ce = |z: f64, y: bool| if y { softplus(-z) } else { softplus(z) };
        let half = FocalParams { gamma: 0.0, alpha: 0.5 };
        for (z, y) in [(0.3, true), (-1.7, false), (2.2, false)] {
            assert!((focal_value(z, y, half) - 0.5 * ce(z, y)).abs() < 1e-14);
        }
    }

    #[test]
    fn token_gt_thresholds_coverage() {
        let full = Mask::from_fn(16, 16, |_, _| true);
        assert!(rasterize_token_gt(&full, 8).unwrap().iter().all(|&b| b));
        let one = Mask::from_fn(16, 16, |x, y| x >= 8 && y < 8);
        assert_eq!(rasterize_token_gt(&one, 8).unwrap(), vec![false, true, false, false]);
        // 60% vs 40% of a 10x10 cell
        let sixty = Mask::from_fn(10, 10, |x, _| x < 6);
        let forty = Mask::from_fn(10, 10, |x, _| x < 4);
        assert_eq!(rasterize_token_gt(&sixty, 10).unwrap(), vec![true]);
        assert_eq!(rasterize_token_gt(&forty, 10).unwrap(), vec![false]);
    }
}
