use crate::error::{Error, Result};

/// Shape hyperparameters of the diffusion transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub frame_h: usize,
    pub frame_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Number of condition ids including the trailing null (unconditional) id.
    pub cond_vocab: usize,
    pub max_t: usize,
}

/// Width multiplier of the feed-forward hidden layer.
pub const MLP_RATIO: usize = 4;

impl Default for ModelConfig {
    fn default() -> Self {
        Self { frame_h: 16, frame_w: 16, channels: 1, patch: 4, dim: 64, depth: 4, heads: 4, cond_vocab: 5, max_t: 1000 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.frame_h % self.patch != 0 || self.frame_w % self.patch != 0 {
            return bad(format!("frame {}x{} not divisible by patch {}", self.frame_h, self.frame_w, self.patch));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.dim % 4 != 0 {
            return bad(format!("dim {} must be a multiple of 4 for 2-D position codes", self.dim));
        }
        if self.channels == 0 || self.depth == 0 {
            return bad("channels and depth must be positive".into());
        }
        if self.cond_vocab < 2 {
            return bad("cond_vocab must hold at least one class plus the null id".into());
        }
        if self.max_t < 2 {
            return bad("max_t must be at least 2".into());
        }
        Ok(())
    }

    /// The reserved unconditional id.
    pub fn null_cond(&self) -> usize {
        self.cond_vocab - 1
    }

    pub fn tokens_per_frame(&self) -> usize {
        (self.frame_h / self.patch) * (self.frame_w / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn frame_len(&self) -> usize {
        self.frame_h * self.frame_w * self.channels
    }
}
