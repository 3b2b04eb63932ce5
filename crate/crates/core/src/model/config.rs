use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Transformer dimensions and patch geometry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub num_classes: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_channels() -> usize {
    3
}

fn default_mlp_ratio() -> usize {
    4
}

impl Default for ModelConfig {
    /// Desk-scale configuration: 6 blocks, 64-dim embeddings, 4 heads,
    /// 32x32 RGB input cut into 4x4 patches (64 tokens), 10 classes.
    fn default() -> Self {
        ModelConfig {
            depth: 6,
            embed_dim: 64,
            heads: 4,
            image_size: 32,
            patch_size: 4,
            channels: 3,
            num_classes: 10,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    /// DeiT-small dimensions at 224x224 with 16x16 patches.
    pub fn deit_small() -> Self {
        ModelConfig {
            depth: 12,
            embed_dim: 384,
            heads: 6,
            image_size: 224,
            patch_size: 16,
            channels: 3,
            num_classes: 1000,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CoreError::Config(m));
        if self.depth == 0 || self.embed_dim == 0 || self.heads == 0 || self.num_classes == 0 {
            return fail(format!("depth, embed_dim, heads and num_classes must be positive: {:?}", self));
        }
        if self.embed_dim % self.heads != 0 {
            return fail(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!("patch_size {} must divide image_size {}", self.patch_size, self.image_size));
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            return fail("channels and mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// N, the number of patch tokens.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// N + 1: patch tokens plus the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Flattened length of one patch, `C * p * p`.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    /// For each entry of the `[N, C*p*p]` patch matrix, the flat index of the
    /// source pixel in a `[C, H, W]` image. Patches are raster ordered and
    /// each patch is flattened as (channel, row, column).
    pub fn patch_gather_index(&self) -> Vec<usize> {
        let (p, s, grid) = (self.patch_size, self.image_size, self.grid());
        let mut idx = Vec::with_capacity(self.num_patches() * self.patch_dim());
        for gy in 0..grid {
            for gx in 0..grid {
                for c in 0..self.channels {
                    for y in 0..p {
                        for x in 0..p {
                            idx.push(c * s * s + (gy * p + y) * s + gx * p + x);
                        }
                    }
                }
            }
        }
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_geometry() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 64);
        assert_eq!(c.seq_len(), 65);
        assert_eq!(c.head_dim(), 16);
    }

    #[test]
    fn rejects_bad_geometry() {
        let c = ModelConfig { heads: 5, ..ModelConfig::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { patch_size: 5, ..ModelConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn gather_index_is_a_permutation() {
        let c = ModelConfig { image_size: 8, patch_size: 2, ..ModelConfig::default() };
        let mut idx = c.patch_gather_index();
        idx.sort_unstable();
        assert_eq!(idx, (0..3 * 64).collect::<Vec<_>>());
    }
}
