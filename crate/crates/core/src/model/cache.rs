//! Append-only key/value store of committed chunks and the incremental
//! forward pass that runs against it.

use super::dit::{predict_at, Attend};
use super::weights::ModelWeights;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-layer keys and values of every committed chunk, in commit order.
#[derive(Clone, Debug, PartialEq)]
pub struct KVCache<T> {
    keys: Vec<Tensor<T>>,
    values: Vec<Tensor<T>>,
    committed_chunks: usize,
    chunk_frames: usize,
    tokens_per_frame: usize,
}

impl<T: Scalar> KVCache<T> {
    pub fn new(weights: &ModelWeights<T>, chunk_frames: usize) -> Result<Self> {
        if chunk_frames == 0 {
            return Err(Error::Cache("chunk size must be positive".into()));
        }
        let cfg = weights.config();
        let empty = Tensor::zeros(&[0, cfg.dim]);
        Ok(Self {
            keys: vec![empty.clone(); cfg.depth],
            values: vec![empty; cfg.depth],
            committed_chunks: 0,
            chunk_frames,
            tokens_per_frame: cfg.tokens_per_frame(),
        })
    }

    pub fn committed_chunks(&self) -> usize {
        self.committed_chunks
    }

    pub fn chunk_frames(&self) -> usize {
        self.chunk_frames
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens_per_frame
    }

    /// Cached token rows (identical across layers).
    pub fn token_count(&self) -> usize {
        self.keys.first().map_or(0, |k| k.rows())
    }

    /// Temporal position of the next chunk's first frame.
    pub fn next_frame(&self) -> usize {
        self.committed_chunks * self.chunk_frames
    }

    pub fn layer(&self, l: usize) -> Result<(&Tensor<T>, &Tensor<T>)> {
        match (self.keys.get(l), self.values.get(l)) {
            (Some(k), Some(v)) => Ok((k, v)),
            _ => Err(Error::Cache(format!("layer {l} not in cache of depth {}", self.keys.len()))),
        }
    }

    pub fn clear(&mut self) {
        for t in self.keys.iter_mut().chain(self.values.iter_mut()) {
            *t = t.slice_rows(0, 0).expect("empty slice");
        }
        self.committed_chunks = 0;
    }

    fn check(&self, weights: &ModelWeights<T>) -> Result<()> {
        let cfg = weights.config();
        if self.keys.len() != cfg.depth || self.tokens_per_frame != cfg.tokens_per_frame() || self.keys[0].row_len() != cfg.dim {
            return Err(Error::Cache("cache does not match model config".into()));
        }
        Ok(())
    }

    /// Append the rows produced for one chunk.
    pub fn append(&mut self, chunk_index: usize, rows: Vec<(Tensor<T>, Tensor<T>)>) -> Result<()> {
        if chunk_index != self.committed_chunks {
            return Err(Error::Cache(format!("commit of chunk {chunk_index} but {} chunks are committed", self.committed_chunks)));
        }
        if rows.len() != self.keys.len() {
            return Err(Error::Cache(format!("{} layers of rows for depth {}", rows.len(), self.keys.len())));
        }
        let want = self.chunk_frames * self.tokens_per_frame;
        for (l, (k, v)) in rows.into_iter().enumerate() {
            if k.rows() != want || v.rows() != want {
                return Err(Error::Cache(format!("chunk rows {} != {want}", k.rows())));
            }
            self.keys[l] = Tensor::concat_rows(&[&self.keys[l], &k])?;
            self.values[l] = Tensor::concat_rows(&[&self.values[l], &v])?;
        }
        self.committed_chunks += 1;
        Ok(())
    }
}

/// Predict one chunk attending to the cache plus itself. Returns the
/// prediction and the chunk's per-layer key/value rows (not yet committed).
pub fn forward_incremental<T: Scalar>(
    weights: &ModelWeights<T>,
    cache: &KVCache<T>,
    chunk_frames: &Tensor<T>,
    t: usize,
    cond: usize,
) -> Result<(Tensor<T>, Vec<(Tensor<T>, Tensor<T>)>)> {
    cache.check(weights)?;
    if chunk_frames.rows() != cache.chunk_frames {
        return Err(Error::Shape(format!("chunk of {} frames, cache chunk size {}", chunk_frames.rows(), cache.chunk_frames)));
    }
    let frame_t = vec![t; cache.chunk_frames];
    predict_at(weights, chunk_frames, &frame_t, cond, cache.next_frame(), &Attend::Cached(cache))
}

/// Run the clean chunk through the network at `t = 0` and append its keys
/// and values. `chunk_index` must be the next uncommitted index.
pub fn commit_chunk<T: Scalar>(cache: &mut KVCache<T>, weights: &ModelWeights<T>, clean_chunk: &Tensor<T>, cond: usize, chunk_index: usize) -> Result<()> {
    if chunk_index != cache.committed_chunks {
        return Err(Error::Cache(format!("chunk {chunk_index} already committed or out of order")));
    }
    let (_, rows) = forward_incremental(weights, cache, clean_chunk, 0, cond)?;
    cache.append(chunk_index, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::dit::predict;
    use crate::model::mask::{BlockCausalMask, ChunkLayout};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ModelWeights<f32>, Tensor<f32>) {
        let cfg = ModelConfig { frame_h: 8, frame_w: 8, patch: 4, dim: 16, depth: 2, heads: 2, ..Default::default() };
        let w = ModelWeights::init_dense(cfg, &mut ChaCha8Rng::seed_from_u64(5), 1.0).unwrap();
        let clip = Tensor::randn(&[6, 8, 8, 1], &mut ChaCha8Rng::seed_from_u64(6));
        (w, clip)
    }

    #[test]
    fn incremental_rows_match_masked_full_pass() {
        let (w, clip) = setup();
        let layout = ChunkLayout::new(6, 2).unwrap();
        let mask = BlockCausalMask::build(layout).token_mask(w.config().tokens_per_frame());
        let mut cache = KVCache::new(&w, 2).unwrap();
        for i in 0..3 {
            // committed chunks are clean (t = 0); the current one is noisy
            let mut frame_t = vec![0; 6];
            for f in layout.chunk_frames(i) {
                frame_t[f] = 640;
            }
            let full = predict(&w, &clip, &frame_t, 2, &Attend::Masked(mask.clone())).unwrap();
            let chunk = clip.slice_rows(2 * i, 2 * i + 2).unwrap();
            let (inc, _) = forward_incremental(&w, &cache, &chunk, 640, 2).unwrap();
            let want = full.slice_rows(2 * i, 2 * i + 2).unwrap();
            assert!(inc.max_abs_diff(&want).unwrap() < 1e-4);
            commit_chunk(&mut cache, &w, &chunk, 2, i).unwrap();
            assert_eq!(cache.committed_chunks(), i + 1);
            assert_eq!(cache.token_count(), (i + 1) * 2 * w.config().tokens_per_frame());
        }
    }

    #[test]
    fn double_commit_is_rejected() {
        let (w, clip) = setup();
        let mut cache = KVCache::new(&w, 2).unwrap();
        let chunk = clip.slice_rows(0, 2).unwrap();
        commit_chunk(&mut cache, &w, &chunk, 0, 0).unwrap();
        assert!(commit_chunk(&mut cache, &w, &chunk, 0, 0).is_err());
        assert!(forward_incremental(&w, &cache, &clip.slice_rows(0, 3).unwrap(), 5, 0).is_err());
    }
}
