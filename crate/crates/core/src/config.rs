use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of the base patches; the learned kernel and position grid live at this size.
pub const BASE_PATCH: usize = 16;
/// Tiny-token patch side.
pub const TINY_PATCH: usize = 8;
/// Large-token patch side.
pub const LARGE_PATCH: usize = 28;
/// Image, positive clicks, negative clicks, previous mask.
pub const INPUT_CHANNELS: usize = 6;

/// Architecture hyper-parameters of the segmentation model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Blocks after which an MST fusion block runs. Empty disables fusion entirely.
    pub mst_blocks: Vec<usize>,
    /// `k_j = max(1, floor(L_j / k_divisor))`.
    pub k_divisor: usize,
    /// Average-pool ratio applied to the base grid before scaled cross attention.
    pub pool_ratio: usize,
    pub mlp_ratio: usize,
    /// Output channels of the feature pyramid; `embed_dim / 2` by default.
    pub fpn_dim: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    /// Small CPU-trainable configuration.
    pub fn desk() -> Self {
        Self {
            image_size: 112,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mst_blocks: vec![1, 3],
            k_divisor: 12,
            // the 7x7 base grid admits only ratios 1 and 7
            pool_ratio: 1,
            mlp_ratio: 4,
            fpn_dim: 32,
            num_classes: 1,
        }
    }

    /// ViT-B sized configuration at 448 pixels.
    pub fn full() -> Self {
        Self {
            image_size: 448,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mst_blocks: vec![2, 5, 8, 11],
            k_divisor: 12,
            pool_ratio: 2,
            mlp_ratio: 4,
            fpn_dim: 384,
            num_classes: 1,
        }
    }

    /// Same architecture with fusion disabled (plain ViT encoder).
    pub fn without_mst(mut self) -> Self {
        self.mst_blocks.clear();
        self
    }

    pub fn patch_sizes(&self) -> [usize; 3] {
        [BASE_PATCH, TINY_PATCH, LARGE_PATCH]
    }

    pub fn grid(&self, patch: usize) -> usize {
        self.image_size / patch
    }

    pub fn tokens(&self, patch: usize) -> usize {
        self.grid(patch) * self.grid(patch)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn top_k(&self, len: usize) -> usize {
        (len / self.k_divisor).max(1)
    }

    pub fn output_side(&self) -> usize {
        self.image_size / 4
    }

    pub fn has_mst(&self) -> bool {
        !self.mst_blocks.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for p in self.patch_sizes() {
            if self.image_size == 0 || !self.image_size.is_multiple_of(p) {
                return bad(format!(
                    "image size {} not divisible by patch size {p}",
                    self.image_size
                ));
            }
        }
        if !self.image_size.is_multiple_of(4) {
            return bad("image size must be divisible by 4".into());
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if let Some(&b) = self.mst_blocks.iter().find(|&&b| b >= self.depth) {
            return bad(format!("MST block index {b} outside depth {}", self.depth));
        }
        let mut sorted = self.mst_blocks.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.mst_blocks {
            return bad("MST block indices must be strictly increasing".into());
        }
        if self.k_divisor == 0 {
            return bad("k divisor must be positive".into());
        }
        let g = self.grid(BASE_PATCH);
        if self.pool_ratio == 0 || !g.is_multiple_of(self.pool_ratio) {
            return bad(format!(
                "pool ratio {} does not divide base grid {g}",
                self.pool_ratio
            ));
        }
        if self.num_classes != 1 {
            return bad("only a single output class is supported".into());
        }
        if self.fpn_dim == 0 || !self.embed_dim.is_multiple_of(4) {
            return bad("embed dim must be divisible by 4 and fpn dim positive".into());
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}
