use std::sync::Arc;

use crate::autograd::AttnMask;
use crate::error::{Error, Result};

/// Partition of `frames` frames into chunks of `chunk` frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ChunkLayout {
    frames: usize,
    chunk: usize,
}

impl ChunkLayout {
    pub fn new(frames: usize, chunk: usize) -> Result<Self> {
        if chunk == 0 || frames == 0 {
            return Err(Error::Config(format!("invalid chunk layout: {frames} frames, chunk {chunk}")));
        }
        Ok(Self { frames, chunk })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn chunk(&self) -> usize {
        self.chunk
    }

    /// `ceil(frames / chunk)`.
    pub fn num_chunks(&self) -> usize {
        self.frames.div_ceil(self.chunk)
    }

    pub fn chunk_of(&self, frame: usize) -> usize {
        frame / self.chunk
    }

    /// Frame range of chunk `i`; the last chunk may be short.
    pub fn chunk_frames(&self, i: usize) -> std::ops::Range<usize> {
        let start = i * self.chunk;
        start..(start + self.chunk).min(self.frames)
    }

    /// Expand a per-chunk value to one entry per frame.
    pub fn per_frame<V: Copy>(&self, per_chunk: &[V]) -> Result<Vec<V>> {
        if per_chunk.len() != self.num_chunks() {
            return Err(Error::Shape(format!("expected {} per-chunk values, got {}", self.num_chunks(), per_chunk.len())));
        }
        Ok((0..self.frames).map(|f| per_chunk[self.chunk_of(f)]).collect())
    }
}

/// Frame-level block-causal visibility: query frame `i` may attend to key
/// frame `j` iff `j / k <= i / k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockCausalMask {
    layout: ChunkLayout,
    bits: Vec<u64>,
}

impl BlockCausalMask {
    pub fn build(layout: ChunkLayout) -> Self {
        let n = layout.frames();
        let mut bits = vec![0u64; (n * n).div_ceil(64)];
        for i in 0..n {
            let qc = layout.chunk_of(i);
            for j in 0..n {
                if layout.chunk_of(j) <= qc {
                    let b = i * n + j;
                    bits[b / 64] |= 1 << (b % 64);
                }
            }
        }
        Self { layout, bits }
    }

    pub fn layout(&self) -> ChunkLayout {
        self.layout
    }

    pub fn frames(&self) -> usize {
        self.layout.frames()
    }

    pub fn visible(&self, i: usize, j: usize) -> bool {
        let b = i * self.frames() + j;
        self.bits[b / 64] >> (b % 64) & 1 == 1
    }

    /// Token-level table where every frame contributes `tokens_per_frame` tokens.
    pub fn token_mask(&self, tokens_per_frame: usize) -> Arc<AttnMask> {
        let n = self.frames() * tokens_per_frame;
        let visible = (0..n * n).map(|b| self.visible((b / n) / tokens_per_frame, (b % n) / tokens_per_frame)).collect();
        Arc::new(AttnMask { queries: n, keys: n, visible })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        let m = BlockCausalMask::build(ChunkLayout::new(8, 2).unwrap());
        assert!(m.visible(3, 1));
        assert!(!m.visible(1, 2));
        for i in 0..8 {
            assert!(m.visible(i, i));
        }
    }

    #[test]
    fn layout_arithmetic() {
        let l = ChunkLayout::new(10, 4).unwrap();
        assert_eq!(l.num_chunks(), 3);
        assert_eq!(l.chunk_frames(2), 8..10);
        assert_eq!(l.per_frame(&[7, 8, 9]).unwrap(), vec![7, 7, 7, 7, 8, 8, 8, 8, 9, 9]);
        assert!(l.per_frame(&[1]).is_err());
        assert!(ChunkLayout::new(4, 0).is_err());
    }

    #[test]
    fn single_chunk_is_fully_visible() {
        let m = BlockCausalMask::build(ChunkLayout::new(4, 4).unwrap());
        assert!(m.token_mask(3).visible.iter().all(|&v| v));
    }
}
