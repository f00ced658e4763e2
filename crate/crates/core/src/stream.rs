//! Chunk-by-chunk generation with a KV cache.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{commit_chunk, forward_incremental, KVCache, ModelWeights};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::student::STUDENT_TIMESTEPS;
use crate::tensor::Tensor;

/// Timestep used to translate input chunks in video-to-video mode.
pub const V2V_TIMESTEP: usize = STUDENT_TIMESTEPS[STUDENT_TIMESTEPS.len() - 1];

#[derive(Clone, Debug, PartialEq)]
pub struct SessionConfig {
    pub chunk: usize,
    /// Denoising timesteps, highest first.
    pub timesteps: Vec<usize>,
    pub seed: u64,
    /// Chunks the cache may hold before it is rebased (the training length in chunks).
    pub window_chunks: usize,
    /// Chunks kept as context when rebasing.
    pub context_chunks: usize,
    pub initial_cond: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self { chunk: 4, timesteps: STUDENT_TIMESTEPS.to_vec(), seed: 0, window_chunks: 5, context_chunks: 1, initial_cond: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChunkSource {
    Generated,
    Image,
    Translated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkTiming {
    pub index: usize,
    pub cond: usize,
    pub source: ChunkSource,
    pub wall: Duration,
    /// Network passes spent on the chunk, the commit pass included.
    pub forward_passes: usize,
    /// Cached tokens the chunk attended to.
    pub context_tokens: usize,
}

/// An emitted chunk.
#[derive(Clone, Debug, PartialEq)]
pub struct Chunk<T> {
    pub index: usize,
    pub cond: usize,
    pub frames: Tensor<T>,
}

pub struct GenerationSession<T> {
    weights: Arc<ModelWeights<T>>,
    schedule: NoiseSchedule,
    cfg: SessionConfig,
    cache: KVCache<T>,
    conds: BTreeMap<usize, usize>,
    /// Clean chunks currently represented in the cache, oldest first, with their conditions.
    window: Vec<(Tensor<T>, usize)>,
    next_index: usize,
    timings: Vec<ChunkTiming>,
    forward_passes: usize,
    rebases: usize,
    /// Diagnostic: translate without injected noise.
    pub sigma_zero: bool,
    failed: Option<String>,
}

impl<T: Scalar> GenerationSession<T> {
    pub fn new(weights: Arc<ModelWeights<T>>, schedule: NoiseSchedule, cfg: SessionConfig) -> Result<Self> {
        let model = *weights.config();
        if cfg.timesteps.is_empty() || cfg.timesteps.windows(2).any(|p| p[1] >= p[0]) || cfg.timesteps.iter().any(|&t| t == 0 || t > model.max_t) {
            return Err(Error::Config(format!("denoising timesteps {:?} must strictly descend within [1, {}]", cfg.timesteps, model.max_t)));
        }
        if cfg.window_chunks == 0 || cfg.context_chunks >= cfg.window_chunks {
            return Err(Error::Config("need 0 <= context_chunks < window_chunks".into()));
        }
        if cfg.initial_cond >= model.null_cond() {
            return Err(Error::Condition(cfg.initial_cond));
        }
        let cache = KVCache::new(&weights, cfg.chunk)?;
        let conds = BTreeMap::from([(0, cfg.initial_cond)]);
        Ok(Self {
            weights,
            schedule,
            cfg,
            cache,
            conds,
            window: Vec::new(),
            next_index: 0,
            timings: Vec::new(),
            forward_passes: 0,
            rebases: 0,
            sigma_zero: false,
            failed: None,
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn cache(&self) -> &KVCache<T> {
        &self.cache
    }

    pub fn timings(&self) -> &[ChunkTiming] {
        &self.timings
    }

    /// Total network passes so far.
    pub fn forward_passes(&self) -> usize {
        self.forward_passes
    }

    pub fn rebases(&self) -> usize {
        self.rebases
    }

    /// Index the next emitted chunk will carry.
    pub fn next_chunk_index(&self) -> usize {
        self.next_index
    }

    fn frame_shape(&self) -> [usize; 4] {
        let m = self.weights.config();
        [self.cfg.chunk, m.frame_h, m.frame_w, m.channels]
    }

    /// Condition that chunk `index` will use under the current schedule.
    pub fn condition_for(&self, index: usize) -> usize {
        *self.conds.range(..=index).next_back().map(|(_, c)| c).expect("schedule has an entry at 0")
    }

    /// Switch condition from the next chunk whose denoising has not begun;
    /// returns that chunk index.
    pub fn set_condition(&mut self, cond: usize) -> Result<usize> {
        if cond >= self.weights.config().null_cond() {
            return Err(Error::Condition(cond));
        }
        let at = self.next_index;
        self.conds.insert(at, cond);
        Ok(at)
    }

    fn live(&self) -> Result<()> {
        match &self.failed {
            Some(m) => Err(Error::Stream(format!("session aborted: {m}"))),
            None => Ok(()),
        }
    }

    fn abort(&mut self, msg: String) -> Error {
        self.failed = Some(msg.clone());
        Error::Stream(msg)
    }

    fn rng_for(&self, index: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(index as u64);
        rng
    }

    fn make_room(&mut self) -> Result<()> {
        if self.cache.committed_chunks() >= self.cfg.window_chunks {
            self.extend_sliding_window(self.cfg.context_chunks)?;
        }
        Ok(())
    }

    /// Reset the cache and re-commit the last `context_chunks` clean chunks
    /// with temporal positions starting at 0.
    pub fn extend_sliding_window(&mut self, context_chunks: usize) -> Result<()> {
        self.live()?;
        if context_chunks > self.window.len() {
            return Err(Error::Stream(format!("{context_chunks} context chunks requested, {} committed", self.window.len())));
        }
        let keep = self.window.split_off(self.window.len() - context_chunks);
        self.cache.clear();
        for (i, (frames, cond)) in keep.iter().enumerate() {
            commit_chunk(&mut self.cache, &self.weights, frames, *cond, i)?;
            self.forward_passes += 1;
        }
        self.window = keep;
        self.rebases += 1;
        Ok(())
    }

    fn commit(&mut self, frames: Tensor<T>, cond: usize, source: ChunkSource, start: Instant, passes: usize, context_tokens: usize) -> Result<Chunk<T>> {
        if !frames.is_finite() {
            return Err(self.abort(format!("non-finite output in chunk {}", self.next_index)));
        }
        let slot = self.cache.committed_chunks();
        commit_chunk(&mut self.cache, &self.weights, &frames, cond, slot)?;
        self.forward_passes += 1;
        self.window.push((frames.clone(), cond));
        let index = self.next_index;
        self.timings.push(ChunkTiming { index, cond, source, wall: start.elapsed(), forward_passes: passes + 1, context_tokens });
        self.next_index += 1;
        Ok(Chunk { index, cond, frames })
    }

    /// Denoise a fresh chunk through the timestep list and commit it.
    pub fn generate_chunk(&mut self) -> Result<Chunk<T>> {
        self.live()?;
        let start = Instant::now();
        self.make_room()?;
        let index = self.next_index;
        let cond = self.condition_for(index);
        let mut rng = self.rng_for(index);
        let shape = self.frame_shape();
        let context_tokens = self.cache.token_count();
        let mut x = Tensor::<T>::randn(&shape, &mut rng);
        let steps = self.cfg.timesteps.clone();
        let mut x0 = x.clone();
        for (j, &t) in steps.iter().enumerate() {
            let (pred, _) = forward_incremental(&self.weights, &self.cache, &x, t, cond)?;
            self.forward_passes += 1;
            x0 = pred;
            if let Some(&t_next) = steps.get(j + 1) {
                let eps = Tensor::<T>::randn(&shape, &mut rng);
                x = self.schedule.forward_diffuse(&x0, t_next, &eps)?;
            }
        }
        self.commit(x0, cond, ChunkSource::Generated, start, steps.len(), context_tokens)
    }

    /// Commit `image` repeated over one chunk without denoising.
    pub fn inject_image(&mut self, image: &Tensor<T>) -> Result<Chunk<T>> {
        self.live()?;
        let start = Instant::now();
        let [k, h, w, c] = self.frame_shape();
        if image.numel() != h * w * c {
            return Err(Error::Shape(format!("image of shape {:?} for {h}x{w}x{c} frames", image.shape())));
        }
        self.make_room()?;
        let data: Vec<T> = (0..k).flat_map(|_| image.data().iter().copied()).collect();
        let frames = Tensor::new(vec![k, h, w, c], data)?;
        let cond = self.condition_for(self.next_index);
        let ctx = self.cache.token_count();
        self.commit(frames, cond, ChunkSource::Image, start, 0, ctx)
    }

    /// Image chunk followed by `chunks - 1` generated chunks.
    pub fn image_to_video(&mut self, image: &Tensor<T>, cond: usize, chunks: usize) -> Result<Vec<Chunk<T>>> {
        self.set_condition(cond)?;
        let mut out = vec![self.inject_image(image)?];
        for _ in 1..chunks {
            out.push(self.generate_chunk()?);
        }
        Ok(out)
    }

    /// Noise `input` to the translation timestep, denoise it in one pass
    /// under `cond` and commit the result.
    pub fn video_to_video_chunk(&mut self, input: &Tensor<T>, cond: usize) -> Result<Chunk<T>> {
        self.live()?;
        let start = Instant::now();
        if input.shape() != self.frame_shape() {
            return Err(Error::Shape(format!("input chunk {:?}, expected {:?}", input.shape(), self.frame_shape())));
        }
        if cond >= self.weights.config().null_cond() {
            return Err(Error::Condition(cond));
        }
        self.make_room()?;
        let index = self.next_index;
        self.conds.insert(index, cond);
        let mut rng = self.rng_for(index);
        let eps = Tensor::<T>::randn(input.shape(), &mut rng);
        let t = V2V_TIMESTEP;
        let x = if self.sigma_zero {
            let a = T::from_f64_lossy(self.schedule.alpha(t));
            input.map(|v| a * v)
        } else {
            self.schedule.forward_diffuse(input, t, &eps)?
        };
        let ctx = self.cache.token_count();
        let (pred, _) = forward_incremental(&self.weights, &self.cache, &x, t, cond)?;
        self.forward_passes += 1;
        self.commit(pred, cond, ChunkSource::Translated, start, 1, ctx)
    }

    /// Generate `chunks` chunks and concatenate them into one clip.
    pub fn generate_stream(&mut self, chunks: usize) -> Result<Tensor<T>> {
        let parts: Vec<Tensor<T>> = (0..chunks).map(|_| self.generate_chunk().map(|c| c.frames)).collect::<Result<_>>()?;
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::concat_rows(&refs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn session(seed: u64) -> GenerationSession<f32> {
        let cfg = ModelConfig { frame_h: 8, frame_w: 8, patch: 4, dim: 16, depth: 2, heads: 2, ..Default::default() };
        let w = ModelWeights::init_dense(cfg, &mut ChaCha8Rng::seed_from_u64(5), 0.5).unwrap();
        let sc = SessionConfig { chunk: 2, seed, window_chunks: 3, ..Default::default() };
        GenerationSession::new(Arc::new(w), NoiseSchedule::cosine(1000).unwrap(), sc).unwrap()
    }

    #[test]
    fn pass_counts_per_chunk() {
        let mut s = session(1);
        s.generate_chunk().unwrap();
        assert_eq!(s.forward_passes(), 5);
        let img = Tensor::full(&[8, 8, 1], 0.2);
        s.video_to_video_chunk(&Tensor::full(&[2, 8, 8, 1], 0.1), 1).unwrap();
        assert_eq!(s.forward_passes(), 7);
        assert_eq!(s.timings()[1].forward_passes, 2);
        assert!(s.inject_image(&img).is_ok());
        assert_eq!(s.forward_passes(), 8);
    }

    #[test]
    fn condition_switch_is_effective_next_chunk_and_last_write_wins() {
        let mut s = session(2);
        s.generate_chunk().unwrap();
        assert_eq!(s.set_condition(2).unwrap(), 1);
        assert_eq!(s.set_condition(3).unwrap(), 1);
        assert_eq!(s.generate_chunk().unwrap().cond, 3);
        assert!(s.set_condition(4).is_err());
    }

    #[test]
    fn window_rebases_and_keeps_generating() {
        let mut s = session(3);
        for _ in 0..12 {
            s.generate_chunk().unwrap();
            assert!(s.cache().committed_chunks() <= 3);
        }
        assert!(s.rebases() > 0);
        s.extend_sliding_window(1).unwrap();
        assert_eq!(s.cache().token_count(), 2 * 4);
        assert!(s.extend_sliding_window(3).is_err());
    }

    #[test]
    fn image_frames_are_copied_exactly() {
        let mut s = session(4);
        let img = Tensor::from_fn(&[8, 8, 1], |i| (i as f32 / 64.0) - 0.5);
        let out = s.image_to_video(&img, 1, 2).unwrap();
        for f in 0..2 {
            assert_eq!(&out[0].frames.data()[f * 64..(f + 1) * 64], img.data());
        }
        assert!(s.inject_image(&Tensor::zeros(&[4, 4, 1])).is_err());
    }

    #[test]
    fn streams_are_deterministic() {
        let a = session(7).generate_stream(4).unwrap();
        let b = session(7).generate_stream(4).unwrap();
        let c = session(8).generate_stream(4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
