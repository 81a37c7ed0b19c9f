//! Simple feature pyramid over the final base tokens and the per-pixel MLP head.

use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{contract, Result};
use crate::nn::{Linear, Mlp};
use crate::params::{Bound, ParamId, ParamStore};
use crate::sparse::{avg_pool, bilinear, SparseMatrix};
use crate::tensor::{Real, Tensor};

/// Prior foreground probability the head starts from.
pub const PRIOR_PROBABILITY: f64 = 0.01;

/// 2×2, stride-2 transposed convolution: a per-token projection to four sub-pixels followed
/// by a depth-to-space shuffle.
#[derive(Debug, Clone)]
pub struct Deconv2x {
    pub proj: Linear,
    pub bias: ParamId,
    pub out_dim: usize,
}

impl Deconv2x {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        Self {
            proj: Linear::new(store, rng, &format!("{name}.proj"), d_in, 4 * d_out, false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d_out])),
            out_dim: d_out,
        }
    }

    /// `[g², d_in]` → `[(2g)², d_out]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var, grid: usize) -> Result<Var> {
        let y = self.proj.forward(g, p, x)?;
        let idx = Arc::new(pixel_shuffle_index(grid, self.out_dim));
        let out = 2 * grid;
        let y = g.gather(y, idx, &[out * out, self.out_dim])?;
        g.add_row(y, p.var(self.bias))
    }
}

fn pixel_shuffle_index(grid: usize, c: usize) -> Vec<usize> {
    let out = 2 * grid;
    let mut idx = Vec::with_capacity(out * out * c);
    for oy in 0..out {
        for ox in 0..out {
            let (y, dy, x, dx) = (oy / 2, oy % 2, ox / 2, ox % 2);
            let base = (y * grid + x) * 4 * c + (dy * 2 + dx) * c;
            idx.extend(base..base + c);
        }
    }
    idx
}

/// Four branches from the 1/16 grid (×4, ×2, ×1, ×½), each projected to `fpn_dim`,
/// resampled to the 1/4 grid and summed.
#[derive(Debug, Clone)]
pub struct SimpleFpn<T> {
    pub up4_a: Deconv2x,
    pub up4_b: Deconv2x,
    pub up4_proj: Linear,
    pub up2: Deconv2x,
    pub up2_proj: Linear,
    pub same_proj: Linear,
    pub down_proj: Linear,
    grid: usize,
    out_side: usize,
    resize_up2: Arc<SparseMatrix<T>>,
    resize_same: Arc<SparseMatrix<T>>,
    resize_down: Arc<SparseMatrix<T>>,
    pool: Arc<SparseMatrix<T>>,
}

impl<T: Real> SimpleFpn<T> {
    pub fn new(store: &mut ParamStore<T>, rng: &mut impl Rng, config: &ModelConfig) -> Result<Self> {
        let c = config.embed_dim;
        let f = config.fpn_dim;
        let grid = config.grid(crate::config::BASE_PATCH);
        let out = config.output_side();
        if out != 4 * grid {
            return Err(contract(format!("base grid {grid} does not map to 1/4 side {out}")));
        }
        let down = grid.div_ceil(2);
        Ok(Self {
            up4_a: Deconv2x::new(store, rng, "fpn.up4_a", c, c / 2),
            up4_b: Deconv2x::new(store, rng, "fpn.up4_b", c / 2, c / 4),
            up4_proj: Linear::new(store, rng, "fpn.up4_proj", c / 4, f, true),
            up2: Deconv2x::new(store, rng, "fpn.up2", c, c / 2),
            up2_proj: Linear::new(store, rng, "fpn.up2_proj", c / 2, f, true),
            same_proj: Linear::new(store, rng, "fpn.same_proj", c, f, true),
            down_proj: Linear::new(store, rng, "fpn.down_proj", c, f, true),
            grid,
            out_side: out,
            resize_up2: Arc::new(bilinear((2 * grid, 2 * grid), (out, out), false)),
            resize_same: Arc::new(bilinear((grid, grid), (out, out), false)),
            resize_down: Arc::new(bilinear((down, down), (out, out), false)),
            pool: Arc::new(avg_pool((grid, grid), 2, true)?),
        })
    }

    /// `[L_b, C]` → `[(W/4)², fpn_dim]`, raster order.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound, tokens: Var) -> Result<Var> {
        let (l, _) = g.value(tokens).dims2()?;
        if l != self.grid * self.grid {
            return Err(contract(format!(
                "{l} tokens do not form the {0}x{0} base grid",
                self.grid
            )));
        }
        let a = self.up4_a.forward(g, p, tokens, self.grid)?;
        let a = g.gelu(a);
        let a = self.up4_b.forward(g, p, a, 2 * self.grid)?;
        let a = self.up4_proj.forward(g, p, a)?;

        let b = self.up2.forward(g, p, tokens, self.grid)?;
        let b = self.up2_proj.forward(g, p, b)?;
        let b = g.sparse_mm(&self.resize_up2, b)?;

        let c = self.same_proj.forward(g, p, tokens)?;
        let c = g.sparse_mm(&self.resize_same, c)?;

        let d = g.sparse_mm(&self.pool, tokens)?;
        let d = self.down_proj.forward(g, p, d)?;
        let d = g.sparse_mm(&self.resize_down, d)?;

        let ab = g.add(a, b)?;
        let cd = g.add(c, d)?;
        g.add(ab, cd)
    }

    pub fn out_side(&self) -> usize {
        self.out_side
    }
}

/// Two-layer per-pixel MLP producing one logit per 1/4-scale pixel.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub mlp: Mlp,
    out_side: usize,
}

impl MlpHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut impl Rng, config: &ModelConfig) -> Self {
        let f = config.fpn_dim;
        let mlp = Mlp::new(store, rng, "head", f, f, config.num_classes);
        let prior = -((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY).ln();
        if let Some(b) = mlp.fc2.bias {
            *store.get_mut(b) = Tensor::full(&[config.num_classes], T::lit(prior));
        }
        Self {
            mlp,
            out_side: config.output_side(),
        }
    }

    /// Logits `x_P` of shape `[W/4, H/4, 1]` (no sigmoid).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Result<Var> {
        let logits = self.mlp.forward(g, p, features)?;
        g.reshape(logits, &[self.out_side, self.out_side, 1])
    }
}
