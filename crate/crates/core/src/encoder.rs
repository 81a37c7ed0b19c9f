//! ViT encoder with a shared, scale-adaptive patch and position embedding.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::{ModelConfig, BASE_PATCH, INPUT_CHANNELS};
use crate::error::{contract, Error, Result};
use crate::mst::{Mode, MstBlock, MstTrace};
use crate::nn::{CrossAttention, LayerNorm, Mlp};
use crate::params::{normal, xavier_uniform, Bound, ParamId, ParamStore};
use crate::sparse::{bilinear, SparseMatrix};
use crate::tensor::{extract_patches, Real, Tensor};

/// Token streams at every scale, with their square grid sides.
#[derive(Debug, Clone, Copy)]
pub struct TokenSet {
    pub base: Var,
    pub tiny: Var,
    pub large: Var,
    pub base_grid: usize,
    pub tiny_grid: usize,
    pub large_grid: usize,
}

/// Interpolation maps that carry the 16×16 kernel and base position grid to another scale.
#[derive(Debug, Clone)]
struct ScaleMaps<T> {
    kernel: Arc<SparseMatrix<T>>,
    pos: Arc<SparseMatrix<T>>,
}

/// One learned 6-channel 16×16 patch kernel and position grid, resampled per patch size.
#[derive(Debug, Clone)]
pub struct PatchEmbedder<T> {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub pos: ParamId,
    embed_dim: usize,
    image_size: usize,
    maps: BTreeMap<usize, ScaleMaps<T>>,
}

impl<T: Real> PatchEmbedder<T> {
    pub fn new(store: &mut ParamStore<T>, rng: &mut impl Rng, config: &ModelConfig) -> Self {
        let c = config.embed_dim;
        let fan_in = INPUT_CHANNELS * BASE_PATCH * BASE_PATCH;
        let kernel = store.add(
            "patch.kernel",
            xavier_uniform(rng, &[c, INPUT_CHANNELS, BASE_PATCH, BASE_PATCH], fan_in, c),
        );
        let bias = store.add("patch.bias", Tensor::zeros(&[c]));
        let base_grid = config.grid(BASE_PATCH);
        let pos = store.add("patch.pos", normal(rng, &[base_grid * base_grid, c], 0.02));
        let maps = config
            .patch_sizes()
            .into_iter()
            .map(|p| {
                let g = config.grid(p);
                let m = ScaleMaps {
                    kernel: Arc::new(bilinear((BASE_PATCH, BASE_PATCH), (p, p), false)),
                    pos: Arc::new(bilinear((base_grid, base_grid), (g, g), true)),
                };
                (p, m)
            })
            .collect();
        Self {
            kernel,
            bias,
            pos,
            embed_dim: c,
            image_size: config.image_size,
            maps,
        }
    }

    fn maps(&self, p: usize) -> Result<&ScaleMaps<T>> {
        self.maps
            .get(&p)
            .ok_or_else(|| Error::Config(format!("patch size {p} is not configured")))
    }

    /// Resampled kernel as a `[C, 6·p·p]` matrix on the tape.
    pub fn resize_kernel(&self, g: &mut Graph<T>, kernel: Var, p: usize) -> Result<Var> {
        let maps = self.maps(p)?;
        resize_kernel_on_tape(g, kernel, self.embed_dim, p, &maps.kernel)
    }

    /// Tokens `[L_p, C]` of a `[6, W, W]` input at patch size `p`.
    pub fn embed(&self, g: &mut Graph<T>, params: &Bound, input: &Tensor<T>, p: usize) -> Result<Var> {
        let shape = input.shape();
        if shape.len() != 3 || shape[0] != INPUT_CHANNELS {
            return Err(contract(format!(
                "embedding expects a [{INPUT_CHANNELS}, H, W] input, got {shape:?}"
            )));
        }
        if shape[1] != self.image_size || shape[2] != self.image_size {
            return Err(contract(format!(
                "input is {}x{}, model expects {}",
                shape[1], shape[2], self.image_size
            )));
        }
        let maps = self.maps(p)?;
        let patches = g.constant(extract_patches(input, p)?);
        let kernel = self.resize_kernel(g, params.var(self.kernel), p)?;
        let proj = g.matmul_nt(patches, kernel)?;
        let proj = g.add_row(proj, params.var(self.bias))?;
        let pos = g.sparse_mm(&maps.pos, params.var(self.pos))?;
        g.add(proj, pos)
    }
}

fn resize_kernel_on_tape<T: Real>(
    g: &mut Graph<T>,
    kernel: Var,
    c: usize,
    p: usize,
    map: &Arc<SparseMatrix<T>>,
) -> Result<Var> {
    let flat = BASE_PATCH * BASE_PATCH;
    if p == BASE_PATCH {
        return g.reshape(kernel, &[c, INPUT_CHANNELS * flat]);
    }
    let slices = g.reshape(kernel, &[c * INPUT_CHANNELS, flat])?;
    let spatial_major = g.transpose(slices)?;
    let resized = g.sparse_mm(map, spatial_major)?;
    let back = g.transpose(resized)?;
    let rows = g.reshape(back, &[c, INPUT_CHANNELS * p * p])?;
    let energy = (BASE_PATCH as f64 / p as f64).powi(2);
    Ok(g.scale(rows, T::lit(energy)))
}

/// Resamples a `[C, 6, 16, 16]` kernel to patch size `p` (bilinear, `(16/p)²` rescale).
pub fn resize_patch_kernel<T: Real>(base: &Tensor<T>, p: usize, config: &ModelConfig) -> Result<Tensor<T>> {
    if !config.patch_sizes().contains(&p) {
        return Err(Error::Config(format!("patch size {p} is not configured")));
    }
    let c = config.embed_dim;
    if base.shape() != [c, INPUT_CHANNELS, BASE_PATCH, BASE_PATCH] {
        return Err(contract(format!("base kernel has shape {:?}", base.shape())));
    }
    let map = Arc::new(bilinear((BASE_PATCH, BASE_PATCH), (p, p), false));
    let mut g = Graph::new();
    let k = g.constant(base.clone());
    let r = resize_kernel_on_tape(&mut g, k, c, p, &map)?;
    g.value(r).clone().reshape(&[c, INPUT_CHANNELS, p, p])
}

/// Pre-norm transformer block: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct VitBlock {
    pub norm1: LayerNorm,
    pub attn: CrossAttention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl VitBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        config: &ModelConfig,
    ) -> Self {
        let c = config.embed_dim;
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c),
            attn: CrossAttention::new(store, rng, &format!("{name}.attn"), c, config.heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c),
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), c, c * config.mlp_ratio, c),
        }
    }

    /// Returns the updated tokens and the per-head attention matrices.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(Var, Vec<Var>)> {
        let h = self.norm1.forward(g, p, x)?;
        let att = self.attn.forward(g, p, h, h)?;
        let x = g.add(x, att.out)?;
        let h = self.norm2.forward(g, p, x)?;
        let m = self.mlp.forward(g, p, h)?;
        Ok((g.add(x, m)?, att.weights))
    }
}

pub struct EncodeOutput<T> {
    pub tokens: TokenSet,
    pub traces: Vec<MstTrace<T>>,
}

#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub embed: PatchEmbedder<T>,
    pub blocks: Vec<VitBlock>,
    /// `(block index, fusion block)` pairs, in depth order.
    pub mst: Vec<(usize, MstBlock<T>)>,
    pub norm: LayerNorm,
    config: ModelConfig,
}

impl<T: Real> Encoder<T> {
    pub fn new(store: &mut ParamStore<T>, rng: &mut impl Rng, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let embed = PatchEmbedder::new(store, rng, config);
        let mut blocks = Vec::with_capacity(config.depth);
        let mut mst = Vec::new();
        for i in 0..config.depth {
            blocks.push(VitBlock::new(store, rng, &format!("block{i}"), config));
            if config.mst_blocks.contains(&i) {
                mst.push((i, MstBlock::new(store, rng, &format!("mst{i}"), config)?));
            }
        }
        let norm = LayerNorm::new(store, "encoder.norm", config.embed_dim);
        Ok(Self {
            embed,
            blocks,
            mst,
            norm,
            config: config.clone(),
        })
    }

    /// Runs all blocks over the base tokens, applying fusion after the configured blocks.
    /// The auxiliary streams are only embedded when fusion is enabled.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        input: &Tensor<T>,
        positive_clicks: &[(f64, f64)],
        mode: &mut Mode<'_>,
    ) -> Result<EncodeOutput<T>> {
        let cfg = &self.config;
        let mut base = self.embed.embed(g, p, input, BASE_PATCH)?;
        let (mut tiny, mut large) = if self.mst.is_empty() {
            (base, base)
        } else {
            (
                self.embed.embed(g, p, input, crate::config::TINY_PATCH)?,
                self.embed.embed(g, p, input, crate::config::LARGE_PATCH)?,
            )
        };
        let mut traces = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            base = block.forward(g, p, base)?.0;
            if let Some((_, mst)) = self.mst.iter().find(|(b, _)| *b == i) {
                let out = mst.forward(g, p, base, tiny, large, positive_clicks, mode)?;
                base = out.f_b;
                tiny = out.f_t;
                large = out.f_l;
                traces.extend(out.trace);
            }
        }
        let base = self.norm.forward(g, p, base)?;
        Ok(EncodeOutput {
            tokens: TokenSet {
                base,
                tiny,
                large,
                base_grid: cfg.grid(BASE_PATCH),
                tiny_grid: cfg.grid(crate::config::TINY_PATCH),
                large_grid: cfg.grid(crate::config::LARGE_PATCH),
            },
            traces,
        })
    }
}
