//! Architecture hyperparameters.

use crate::geometry::PatchGrid;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Everything the network's shape depends on, plus the loss temperatures
/// and weights. Unknown fields in a config file are rejected; missing ones
/// take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width d.
    pub embed_dim: usize,
    /// Encoder depth D.
    pub depth: usize,
    pub heads: usize,
    /// Maximum text length; the classification head has one slot per
    /// position plus the no-text slot.
    pub max_text_len: usize,
    pub vocab_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    /// Patch side s in pixels.
    pub patch_size: usize,
    /// Number of learnable detection tokens q.
    pub det_tokens: usize,
    pub ffn_mult: usize,
    /// Width of the alignment projection space.
    pub align_dim: usize,
    /// Temperature for the contrastive alignment losses.
    pub tau: f64,
    /// Weight of the L1 term in the box regression loss.
    pub lambda_l1: f64,
    /// Weight of the GIoU term in the box regression loss.
    pub lambda_giou: f64,
    pub dropout: f64,
    /// Disable for the single-query variant that regresses the box from
    /// the text classification feature instead of detection tokens.
    pub use_det_tokens: bool,
    /// Disable to skip adding the text classification feature to the
    /// detection features ahead of the output heads.
    pub use_cls_fusion: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Desk-scale default: 64x64 images, 8x8 patches, a 4-layer encoder.
    pub fn toy() -> Self {
        Self {
            embed_dim: 64,
            depth: 4,
            heads: 4,
            max_text_len: 40,
            vocab_size: 256,
            image_height: 64,
            image_width: 64,
            patch_size: 8,
            det_tokens: 5,
            ffn_mult: 4,
            align_dim: 64,
            tau: 0.07,
            lambda_l1: 2.0,
            lambda_giou: 5.0,
            dropout: 0.0,
            use_det_tokens: true,
            use_cls_fusion: true,
        }
    }

    /// Smallest config that still exercises every code path; used by the
    /// gradient checks.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 16,
            depth: 2,
            heads: 2,
            max_text_len: 8,
            vocab_size: 12,
            image_height: 32,
            image_width: 32,
            patch_size: 8,
            det_tokens: 2,
            ffn_mult: 4,
            align_dim: 16,
            ..Self::toy()
        }
    }

    /// Patch count n.
    pub fn patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    /// Flattened patch length 3 s^2.
    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.image_height, self.image_width, self.patch_size)
    }

    /// Number of box hypotheses produced by the output heads.
    pub fn num_queries(&self) -> usize {
        if self.use_det_tokens {
            self.det_tokens
        } else {
            1
        }
    }

    /// Joint sequence length for a phrase of m tokens: m + n + q + 2.
    pub fn seq_len(&self, m: usize) -> usize {
        m + 1 + self.patches() + 1 + self.det_tokens
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Validation(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        self.grid()?;
        if self.max_text_len == 0 {
            return Err(Error::Validation("max_text_len must be positive".into()));
        }
        if self.vocab_size == 0 {
            return Err(Error::Validation("vocab_size must be positive".into()));
        }
        if self.det_tokens == 0 {
            return Err(Error::Validation("det_tokens must be positive".into()));
        }
        if self.align_dim == 0 || self.ffn_mult == 0 {
            return Err(Error::Validation("align_dim and ffn_mult must be positive".into()));
        }
        if self.tau <= 0.0 {
            return Err(Error::Validation(format!("tau {} must be positive", self.tau)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!("dropout {} outside [0,1)", self.dropout)));
        }
        Ok(())
    }
}
