//! Multi-scale token selection and fusion.
//!
//! The positively clicked base tokens are averaged into a reference kernel. Tiny and large
//! tokens are scored by `sigmoid(cos(kernel, token))`, the top `k_j` of each scale are
//! gathered through a score-valued one-hot selection matrix (so the scores stay on the
//! gradient path), and the scale with the higher mean top-k score is cross-attended into
//! the base tokens. Both auxiliary streams are then refreshed by scaled cross attention
//! over the (pooled) base grid.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::{ModelConfig, BASE_PATCH, LARGE_PATCH, TINY_PATCH};
use crate::error::{contract, Result};
use crate::nn::{CrossAttention, LayerNorm};
use crate::params::{Bound, ParamStore};
use crate::sparse::{avg_pool, SparseMatrix};
use crate::tensor::Real;

/// Auxiliary token scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Tiny,
    Large,
}

impl Scale {
    pub fn patch(self) -> usize {
        match self {
            Scale::Tiny => TINY_PATCH,
            Scale::Large => LARGE_PATCH,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scale::Tiny => "tiny",
            Scale::Large => "large",
        }
    }
}

/// Whether scale choice is the deterministic argmax or the training-time random pick.
pub enum Mode<'a> {
    Inference,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Mean of the distinct positively clicked base tokens.
#[derive(Debug, Clone)]
pub struct ClickKernel {
    pub vector: Var,
    pub positions: Vec<usize>,
}

impl ClickKernel {
    pub fn count(&self) -> usize {
        self.positions.len()
    }
}

/// Base-grid token index under each positive click, deduplicated, in first-click order.
pub fn kernel_positions(clicks: &[(f64, f64)], image_size: usize) -> Vec<usize> {
    let grid = image_size / BASE_PATCH;
    let mut out = Vec::new();
    for &(x, y) in clicks {
        let gx = ((x / BASE_PATCH as f64).floor() as usize).min(grid - 1);
        let gy = ((y / BASE_PATCH as f64).floor() as usize).min(grid - 1);
        let idx = gy * grid + gx;
        if !out.contains(&idx) {
            out.push(idx);
        }
    }
    out
}

/// Reference kernel from `f_b[L_b, C]`. `None` when there are no positive clicks.
pub fn compute_kernel<T: Real>(
    g: &mut Graph<T>,
    f_b: Var,
    positive_clicks: &[(f64, f64)],
    image_size: usize,
) -> Result<Option<ClickKernel>> {
    for &(x, y) in positive_clicks {
        if !(x >= 0.0 && y >= 0.0 && x < image_size as f64 && y < image_size as f64) {
            return Err(contract(format!(
                "click ({x}, {y}) outside a {image_size}px image"
            )));
        }
    }
    let positions = kernel_positions(positive_clicks, image_size);
    if positions.is_empty() {
        return Ok(None);
    }
    let rows = g.gather_rows(f_b, &positions)?;
    let vector = g.mean_axis(rows, 0)?;
    Ok(Some(ClickKernel { vector, positions }))
}

/// `sigmoid(cos(kernel, f_j[i]))` for every row.
pub fn similarity_scores<T: Real>(g: &mut Graph<T>, kernel: &ClickKernel, f_j: Var) -> Result<Var> {
    let cos = g.cosine_rows(kernel.vector, f_j)?;
    Ok(g.sigmoid(cos))
}

/// The `k` largest values in descending order; ties go to the lower index.
pub fn topk<T: Real>(scores: &[T], k: usize) -> Result<(Vec<T>, Vec<usize>)> {
    if k == 0 || k > scores.len() {
        return Err(contract(format!(
            "top-k with k={k} over {} scores",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok((order.iter().map(|&i| scores[i]).collect(), order))
}

/// Selection matrix `S[k, L]` with `S[i, idx_i] = scores[idx_i]`, differentiable in `scores`.
pub fn build_selection<T: Real>(
    g: &mut Graph<T>,
    scores: Var,
    indices: &[usize],
    len: usize,
) -> Result<Var> {
    let mut seen = vec![false; len];
    for &i in indices {
        if i >= len {
            return Err(contract(format!("selection index {i} out of range {len}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(contract(format!("duplicate selection index {i}")));
        }
    }
    let k = indices.len();
    let picked = g.gather(scores, Arc::new(indices.to_vec()), &[k])?;
    g.one_hot_rows(picked, indices, len)
}

/// `S · f_j`
pub fn select<T: Real>(g: &mut Graph<T>, selection: Var, f_j: Var) -> Result<Var> {
    g.matmul(selection, f_j)
}

/// Outcome of scoring and selecting one auxiliary scale.
#[derive(Debug, Clone)]
pub struct SelectionResult<T> {
    pub scale: Scale,
    pub scores: Var,
    pub topk_scores: Vec<T>,
    pub indices: Vec<usize>,
    pub selection: Var,
    pub selected: Var,
    pub mean_score: T,
}

pub fn select_scale<T: Real>(
    g: &mut Graph<T>,
    kernel: &ClickKernel,
    f_j: Var,
    scale: Scale,
    k_divisor: usize,
) -> Result<SelectionResult<T>> {
    let len = g.value(f_j).dims2()?.0;
    let k = (len / k_divisor.max(1)).max(1);
    let scores = similarity_scores(g, kernel, f_j)?;
    let (topk_scores, indices) = topk(g.value(scores).data(), k)?;
    let selection = build_selection(g, scores, &indices, len)?;
    let selected = select(g, selection, f_j)?;
    let mean_score = topk_scores.iter().copied().sum::<T>() / T::lit(k as f64);
    Ok(SelectionResult {
        scale,
        scores,
        topk_scores,
        indices,
        selection,
        selected,
        mean_score,
    })
}

/// Argmax of mean top-k score (ties to tiny) at inference, uniform at training.
pub fn choose_scale<T: Real>(mean_tiny: T, mean_large: T, mode: &mut Mode<'_>) -> Scale {
    match mode {
        Mode::Inference => {
            if mean_large > mean_tiny {
                Scale::Large
            } else {
                Scale::Tiny
            }
        }
        Mode::Train(rng) => {
            if rng.random_bool(0.5) {
                Scale::Tiny
            } else {
                Scale::Large
            }
        }
    }
}

/// One fusion unit with its own parameters.
#[derive(Debug, Clone)]
pub struct MstBlock<T> {
    pub fuse_norm: LayerNorm,
    pub fuse: CrossAttention,
    pub tiny_norm: LayerNorm,
    pub large_norm: LayerNorm,
    pub context_norm: LayerNorm,
    pub tiny_update: CrossAttention,
    pub large_update: CrossAttention,
    pub pool: Arc<SparseMatrix<T>>,
    pub pool_ratio: usize,
    pub k_divisor: usize,
    pub image_size: usize,
}

/// Everything an MST block computed, for losses and diagnostics.
#[derive(Debug, Clone)]
pub struct MstTrace<T> {
    pub kernel: ClickKernel,
    pub tiny: SelectionResult<T>,
    pub large: SelectionResult<T>,
    pub chosen: Scale,
    pub fuse_weights: Vec<Var>,
}

impl<T> MstTrace<T> {
    pub fn result(&self, scale: Scale) -> &SelectionResult<T> {
        match scale {
            Scale::Tiny => &self.tiny,
            Scale::Large => &self.large,
        }
    }
}

pub struct MstOutput<T> {
    pub f_b: Var,
    pub f_t: Var,
    pub f_l: Var,
    pub trace: Option<MstTrace<T>>,
}

impl<T: Real> MstBlock<T> {
    pub fn new(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        config: &ModelConfig,
    ) -> Result<Self> {
        let c = config.embed_dim;
        let h = config.heads;
        let grid = config.grid(BASE_PATCH);
        Ok(Self {
            fuse_norm: LayerNorm::new(store, &format!("{name}.fuse_norm"), c),
            fuse: CrossAttention::new(store, rng, &format!("{name}.fuse"), c, h),
            tiny_norm: LayerNorm::new(store, &format!("{name}.tiny_norm"), c),
            large_norm: LayerNorm::new(store, &format!("{name}.large_norm"), c),
            context_norm: LayerNorm::new(store, &format!("{name}.context_norm"), c),
            tiny_update: CrossAttention::new(store, rng, &format!("{name}.tiny_update"), c, h),
            large_update: CrossAttention::new(store, rng, &format!("{name}.large_update"), c, h),
            pool: Arc::new(avg_pool((grid, grid), config.pool_ratio, false)?),
            pool_ratio: config.pool_ratio,
            k_divisor: config.k_divisor,
            image_size: config.image_size,
        })
    }

    /// `f_b + CrossAttn(LN(f_b), f_sel)`. Selected tokens are not normalised, which keeps
    /// their score scaling (and its gradient) intact.
    pub fn cross_attention_fuse(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        f_b: Var,
        f_sel: Var,
    ) -> Result<(Var, Vec<Var>)> {
        if g.value(f_sel).is_empty() {
            return Ok((f_b, Vec::new()));
        }
        let q = self.fuse_norm.forward(g, p, f_b)?;
        let att = self.fuse.forward(g, p, q, f_sel)?;
        Ok((g.add(f_b, att.out)?, att.weights))
    }

    /// Residual update of an auxiliary stream attending over the pooled base grid.
    pub fn scaled_cross_attention_update(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        scale: Scale,
        f_j: Var,
        f_b: Var,
    ) -> Result<Var> {
        let (norm, attn) = match scale {
            Scale::Tiny => (&self.tiny_norm, &self.tiny_update),
            Scale::Large => (&self.large_norm, &self.large_update),
        };
        let pooled = g.sparse_mm(&self.pool, f_b)?;
        let context = self.context_norm.forward(g, p, pooled)?;
        let q = norm.forward(g, p, f_j)?;
        let att = attn.forward(g, p, q, context)?;
        g.add(f_j, att.out)
    }

    /// kernel → similarity → top-k → select (both scales) → choose scale → fuse into
    /// `f_b` → refresh both auxiliary streams. Without positive clicks all three streams
    /// pass through unchanged.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        f_b: Var,
        f_t: Var,
        f_l: Var,
        positive_clicks: &[(f64, f64)],
        mode: &mut Mode<'_>,
    ) -> Result<MstOutput<T>> {
        let Some(kernel) = compute_kernel(g, f_b, positive_clicks, self.image_size)? else {
            return Ok(MstOutput {
                f_b,
                f_t,
                f_l,
                trace: None,
            });
        };
        let tiny = select_scale(g, &kernel, f_t, Scale::Tiny, self.k_divisor)?;
        let large = select_scale(g, &kernel, f_l, Scale::Large, self.k_divisor)?;
        let chosen = choose_scale(tiny.mean_score, large.mean_score, mode);
        let sel = match chosen {
            Scale::Tiny => tiny.selected,
            Scale::Large => large.selected,
        };
        let (fused, fuse_weights) = self.cross_attention_fuse(g, p, f_b, sel)?;
        let f_t = self.scaled_cross_attention_update(g, p, Scale::Tiny, f_t, fused)?;
        let f_l = self.scaled_cross_attention_update(g, p, Scale::Large, f_l, fused)?;
        Ok(MstOutput {
            f_b: fused,
            f_t,
            f_l,
            trace: Some(MstTrace {
                kernel,
                tiny,
                large,
                chosen,
                fuse_weights,
            }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn kernel_single_and_double_click() {
        let mut g = Graph::<f64>::new();
        let f_b = g.constant(Tensor::from_fn(&[49, 3], |i| i as f64));
        // patch 7 = row 1, col 0 on the 7x7 grid
        let k = compute_kernel(&mut g, f_b, &[(3.0, 20.0)], 112).unwrap().unwrap();
        assert_eq!(k.positions, vec![7]);
        assert_eq!(g.value(k.vector).data(), &[21.0, 22.0, 23.0]);
        let k2 = compute_kernel(&mut g, f_b, &[(50.0, 0.0), (3.0, 20.0)], 112)
            .unwrap()
            .unwrap();
        assert_eq!(k2.positions, vec![3, 7]);
        assert_eq!(g.value(k2.vector).data(), &[15.0, 16.0, 17.0]);
    }

    #[test]
    fn same_patch_clicks_deduplicate() {
        let mut g = Graph::<f64>::new();
        let f_b = g.constant(Tensor::from_fn(&[49, 2], |i| (i as f64).sqrt()));
        let once = compute_kernel(&mut g, f_b, &[(1.0, 1.0), (40.0, 40.0)], 112)
            .unwrap()
            .unwrap();
        let twice = compute_kernel(&mut g, f_b, &[(1.0, 1.0), (14.0, 2.0), (40.0, 40.0)], 112)
            .unwrap()
            .unwrap();
        assert_eq!(g.value(once.vector), g.value(twice.vector));
        // without dedup the weights would be 2/3 and 1/3
        let undeduped: Vec<f64> = (0..2)
            .map(|c| (2.0 * (c as f64).sqrt() + ((2 * 7 + 2) as f64 * 2.0 + c as f64).sqrt()) / 3.0)
            .collect();
        assert_ne!(g.value(twice.vector).data(), undeduped.as_slice());
    }

    #[test]
    fn no_positive_clicks_gives_no_kernel() {
        let mut g = Graph::<f64>::new();
        let f_b = g.constant(Tensor::zeros(&[49, 2]));
        assert!(compute_kernel(&mut g, f_b, &[], 112).unwrap().is_none());
        assert!(compute_kernel(&mut g, f_b, &[(112.0, 3.0)], 112).is_err());
    }

    #[test]
    fn similarity_of_parallel_orthogonal_antiparallel() {
        let mut g = Graph::<f64>::new();
        let f_b = g.constant(Tensor::from_rows(&[&[2.0, 0.0]]).reshape(&[1, 2]).unwrap());
        let k = ClickKernel {
            vector: g.gather_rows(f_b, &[0]).unwrap(),
            positions: vec![0],
        };
        let f_j = g.constant(Tensor::from_rows(&[&[3.0, 0.0], &[0.0, 1.0], &[-1.0, 0.0]]));
        let s = similarity_scores(&mut g, &k, f_j).unwrap();
        let v = g.value(s).data();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        assert!((v[0] - sig(1.0)).abs() < 1e-15 && (v[0] - 0.7311).abs() < 1e-4);
        assert_eq!(v[1], 0.5);
        assert!((v[2] - sig(-1.0)).abs() < 1e-15 && (v[2] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn topk_examples() {
        let (s, i) = topk(&[0.9, 0.1, 0.5, 0.7], 2).unwrap();
        assert_eq!((s, i), (vec![0.9, 0.7], vec![0, 3]));
        let (_, i) = topk(&[0.3; 5], 2).unwrap();
        assert_eq!(i, vec![0, 1]);
        let (s, i) = topk(&[0.2, 0.8, 0.5], 3).unwrap();
        assert_eq!((s, i), (vec![0.8, 0.5, 0.2], vec![1, 2, 0]));
        assert!(topk(&[0.1, 0.2], 0).is_err());
        assert!(topk(&[0.1, 0.2], 3).is_err());
    }

    #[test]
    fn selection_scales_gathered_rows() {
        let mut g = Graph::<f64>::new();
        let f = g.constant(Tensor::from_fn(&[4, 3], |i| i as f64 + 1.0));
        let s = g.constant(Tensor::new(&[4], vec![0.5, 0.2, 1.0, 0.1]).unwrap());
        let sel = build_selection(&mut g, s, &[2], 4).unwrap();
        let out = select(&mut g, sel, f).unwrap();
        assert_eq!(g.value(out).data(), &[7.0, 8.0, 9.0]);
        let sel = build_selection(&mut g, s, &[0], 4).unwrap();
        let out = select(&mut g, sel, f).unwrap();
        assert_eq!(g.value(out).data(), &[0.5, 1.0, 1.5]);
        assert!(build_selection(&mut g, s, &[1, 1], 4).is_err());
    }

    #[test]
    fn scale_choice_rules() {
        let mut inf = Mode::Inference;
        assert_eq!(choose_scale(0.7, 0.5, &mut inf), Scale::Tiny);
        assert_eq!(choose_scale(0.5, 0.7, &mut inf), Scale::Large);
        assert_eq!(choose_scale(0.6, 0.6, &mut inf), Scale::Tiny);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = Mode::Train(&mut rng);
            (0..32).map(|_| choose_scale(0.9, 0.1, &mut m)).collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
        let picks = draw(3);
        assert!(picks.contains(&Scale::Tiny) && picks.contains(&Scale::Large));
    }
}
