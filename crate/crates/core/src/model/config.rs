use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the multimodal windowed-attention classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    /// Channel width of stage 0; stage `s` has `embed_dim · 2^s`.
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    /// Tokens per window side.
    pub window_size: usize,
    /// MLP expansion factor `r` (intermediate width `C = r · stage_dim`).
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub use_shift: bool,
    pub use_rel_pos_bias: bool,
    pub sex_vocab: usize,
    pub age_vocab: usize,
    pub loc_vocab: usize,
    /// Weights of (image, sex, age, localization) in the fused feature.
    pub fusion_weights: [f64; 4],
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    pub seed: u64,
}

fn default_in_channels() -> usize {
    3
}

fn default_eps() -> f64 {
    1e-5
}

impl Default for ModelConfig {
    /// The desk-scale configuration: 32×32 RGB input, patch 4, two stages.
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 32,
            depths: vec![2, 2],
            num_heads: vec![2, 4],
            window_size: 4,
            mlp_ratio: 4,
            num_classes: 7,
            use_shift: true,
            use_rel_pos_bias: true,
            sex_vocab: 3,
            age_vocab: 22,
            loc_vocab: 16,
            fusion_weights: [0.85, 0.05, 0.05, 0.05],
            layer_norm_eps: 1e-5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!(
                "image size {} is not a positive multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.depths.is_empty() || self.depths.len() != self.num_heads.len() {
            return fail(format!(
                "depths {:?} and num_heads {:?} must be non-empty and of equal length",
                self.depths, self.num_heads
            ));
        }
        if self.window_size == 0 || self.embed_dim == 0 || self.mlp_ratio == 0 || self.in_channels == 0 {
            return fail("window size, embed dim, mlp ratio and channels must be positive".into());
        }
        if self.num_classes == 0 || self.sex_vocab == 0 || self.age_vocab == 0 || self.loc_vocab == 0 {
            return fail("class count and vocabularies must be positive".into());
        }
        for s in 0..self.num_stages() {
            let grid = self.grid(s);
            if grid == 0 || grid % self.window_size != 0 {
                return fail(format!(
                    "stage {s} token grid {grid} is not divisible by window size {}",
                    self.window_size
                ));
            }
            if s + 1 < self.num_stages() && grid % 2 != 0 {
                return fail(format!("stage {s} token grid {grid} cannot be merged 2×2"));
            }
            let h = self.num_heads[s];
            if h == 0 || self.stage_dim(s) % h != 0 {
                return fail(format!(
                    "stage {s} width {} is not divisible by {h} heads",
                    self.stage_dim(s)
                ));
            }
        }
        let sum: f64 = self.fusion_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.fusion_weights.iter().any(|w| !w.is_finite()) {
            return fail(format!("fusion weights {:?} must sum to 1", self.fusion_weights));
        }
        if self.layer_norm_eps.is_nan() || self.layer_norm_eps <= 0.0 {
            return fail("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    /// Channel width at stage `s`.
    pub fn stage_dim(&self, s: usize) -> usize {
        self.embed_dim << s
    }

    /// Token grid side at stage `s`.
    pub fn grid(&self, s: usize) -> usize {
        (self.image_size / self.patch_size) >> s
    }

    pub fn head_dim(&self, s: usize) -> usize {
        self.stage_dim(s) / self.num_heads[s]
    }

    /// Width of the pooled image feature.
    pub fn final_dim(&self) -> usize {
        self.stage_dim(self.num_stages() - 1)
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window_size * self.window_size
    }

    pub fn windows_per_image(&self, s: usize) -> usize {
        let per_side = self.grid(s) / self.window_size;
        per_side * per_side
    }

    /// Cyclic shift applied by block `b` of stage `s`. Odd blocks shift by
    /// half a window unless the whole grid fits in one window.
    pub fn shift(&self, s: usize, b: usize) -> usize {
        if self.use_shift && b % 2 == 1 && self.grid(s) > self.window_size {
            self.window_size / 2
        } else {
            0
        }
    }

    pub fn rel_pos_table_len(&self) -> usize {
        let side = 2 * self.window_size - 1;
        side * side
    }

    pub fn block_ids(&self) -> Vec<BlockId> {
        (0..self.num_stages())
            .flat_map(|s| (0..self.depths[s]).map(move |b| BlockId::new(s, b)))
            .collect()
    }
}

/// `(stage, block)` coordinate of an encoder block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BlockId {
    pub stage: usize,
    pub block: usize,
}

impl BlockId {
    pub fn new(stage: usize, block: usize) -> Self {
        BlockId { stage, block }
    }

    pub(crate) fn prefix(&self) -> String {
        format!("stages.{}.blocks.{}", self.stage, self.block)
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {} block {}", self.stage, self.block)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.grid(0), 8);
        assert_eq!(c.grid(1), 4);
        assert_eq!(c.stage_dim(1), 64);
        assert_eq!(c.head_dim(0), 16);
        assert_eq!(c.windows_per_image(0), 4);
        assert_eq!(c.shift(0, 1), 2);
        assert_eq!(c.shift(0, 0), 0);
        // single-window grid never shifts
        assert_eq!(c.shift(1, 1), 0);
    }

    #[test]
    fn rejects_bad_configs() {
        let base = ModelConfig::default();
        let mut c = base.clone();
        c.window_size = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = base.clone();
        c.num_heads = vec![3, 4];
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.fusion_weights = [0.85, 0.05, 0.05, 0.06];
        assert!(c.validate().is_err());
        let mut c = base;
        c.image_size = 30;
        assert!(c.validate().is_err());
    }
}
