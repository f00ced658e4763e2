//! Student initialization from deterministic teacher trajectories.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::container::{read_file, Reader, Writer};
use crate::data::PIXEL_BOUND;
use crate::error::{Error, Result};
use crate::model::ModelWeights;
use crate::optim::AdamW;
use crate::scalar::Scalar;
use crate::schedule::{ddim_grid, NoiseSchedule};
use crate::score::{ddim_sample, EpsModel};
use crate::student::{init_objective, per_frame, sample_chunk_timesteps, student_forward, STUDENT_TIMESTEPS};
use crate::tensor::Tensor;
use crate::train::{accumulate_grad, guard, scale_grads, zero_grads, CheckpointFn, LossHistory, TrainConfig, TrainRun};

const MAGIC: &[u8; 4] = b"CVOP";
const VERSION: u32 = 1;
pub const DEFAULT_PAIRS: usize = 1000;
pub const DEFAULT_SOLVER_STEPS: usize = 50;

/// One teacher trajectory: its noisy states at the student timesteps and its endpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct OdePair {
    pub cond: usize,
    /// States in the order of [`OdePairs::timesteps`].
    pub states: Vec<Tensor<f32>>,
    pub endpoint: Tensor<f32>,
}

/// A set of pairs sharing clip dims and recorded timesteps.
#[derive(Clone, Debug, PartialEq)]
pub struct OdePairs {
    pub timesteps: Vec<usize>,
    /// `(frames, H, W, C)`.
    pub dims: [usize; 4],
    pub pairs: Vec<OdePair>,
}

/// Options for [`generate_ode_pairs`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdeConfig {
    pub count: usize,
    pub solver_steps: usize,
    pub guidance: f64,
    /// Number of real classes; pair `i` uses class `i % classes`.
    pub classes: usize,
    /// Clamp bound for clean estimates during integration.
    pub clip: Option<f64>,
    pub seed: u64,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self { count: DEFAULT_PAIRS, solver_steps: DEFAULT_SOLVER_STEPS, guidance: 3.5, classes: 4, clip: Some(PIXEL_BOUND), seed: 0 }
    }
}

/// Pairs produced plus diagnostics of pairs dropped for non-finite states.
pub struct OdeGeneration {
    pub pairs: OdePairs,
    pub skipped: Vec<String>,
}

/// Integrate guided DDIM from pure noise for each pair, recording the states
/// at the student timesteps. Pair `i` draws its noise from stream `i` of the seed.
pub fn generate_ode_pairs<T: Scalar, M: EpsModel<T> + ?Sized>(
    teacher: &M,
    schedule: &NoiseSchedule,
    dims: [usize; 4],
    cfg: &OdeConfig,
) -> Result<OdeGeneration> {
    if cfg.solver_steps < STUDENT_TIMESTEPS.len() || cfg.classes == 0 {
        return Err(Error::Config(format!("solver_steps {} must be >= {}", cfg.solver_steps, STUDENT_TIMESTEPS.len())));
    }
    let grid = ddim_grid(STUDENT_TIMESTEPS[0], cfg.solver_steps, &STUDENT_TIMESTEPS)?;
    let mut pairs = Vec::with_capacity(cfg.count);
    let mut skipped = Vec::new();
    for i in 0..cfg.count {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let cond = i % cfg.classes;
        let x = Tensor::<T>::randn(&dims, &mut rng);
        match ddim_sample(schedule, teacher, x, &grid, cond, cfg.guidance, cfg.clip, &STUDENT_TIMESTEPS) {
            Ok((end, kept)) => {
                debug_assert_eq!(kept.iter().map(|k| k.0).collect::<Vec<_>>(), STUDENT_TIMESTEPS);
                pairs.push(OdePair { cond, states: kept.into_iter().map(|(_, s)| s.cast()).collect(), endpoint: end.cast() });
            }
            Err(Error::NonFinite(m)) => skipped.push(format!("pair {i}: {m}")),
            Err(e) => return Err(e),
        }
    }
    Ok(OdeGeneration { pairs: OdePairs { timesteps: STUDENT_TIMESTEPS.to_vec(), dims, pairs }, skipped })
}

impl OdePairs {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn clip_len(&self) -> usize {
        self.dims.iter().product()
    }

    /// State of pair `p` at timestep `t`; `t = 0` is the endpoint.
    pub fn state(&self, p: usize, t: usize) -> Result<&Tensor<f32>> {
        let pair = &self.pairs[p];
        if t == 0 {
            return Ok(&pair.endpoint);
        }
        let i = self.timesteps.iter().position(|&s| s == t).ok_or(Error::Timestep { t, min: 0, max: self.timesteps[0] })?;
        Ok(&pair.states[i])
    }

    /// Student input for pair `p` with per-chunk timesteps: each chunk's frames
    /// are taken from the state at that chunk's timestep.
    pub fn assemble(&self, p: usize, chunk_t: &[usize], chunk: usize) -> Result<Tensor<f32>> {
        let frames = self.dims[0];
        let frame_t = per_frame(chunk_t, frames, chunk)?;
        let row = self.clip_len() / frames;
        let mut out = Vec::with_capacity(self.clip_len());
        for (f, &t) in frame_t.iter().enumerate() {
            out.extend_from_slice(&self.state(p, t)?.data()[f * row..(f + 1) * row]);
        }
        Tensor::new(self.dims.to_vec(), out)
    }

    /// Split off the last `held` pairs.
    pub fn split_tail(mut self, held: usize) -> (Self, Self) {
        let at = self.pairs.len().saturating_sub(held);
        let tail = self.pairs.split_off(at);
        let other = Self { timesteps: self.timesteps.clone(), dims: self.dims, pairs: tail };
        (self, other)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.usize(self.pairs.len());
        for &d in &self.dims {
            w.usize(d);
        }
        w.usize(self.timesteps.len());
        for &t in &self.timesteps {
            w.usize(t);
        }
        for p in &self.pairs {
            w.usize(p.cond);
            for s in &p.states {
                w.f32s(s.data().iter().copied());
            }
            w.f32s(p.endpoint.data().iter().copied());
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::open(buf, path, MAGIC, VERSION)?;
        let count = r.usize()?;
        let dims = [r.usize()?, r.usize()?, r.usize()?, r.usize()?];
        let nt = r.usize()?;
        let timesteps: Vec<usize> = (0..nt).map(|_| r.usize()).collect::<Result<_>>()?;
        if timesteps != STUDENT_TIMESTEPS {
            return Err(r.bad(format!("timesteps {timesteps:?} differ from the student set {STUDENT_TIMESTEPS:?}")));
        }
        let n: usize = dims.iter().product();
        let per_pair = n.checked_mul(4 * (nt + 1)).and_then(|v| v.checked_add(4)).ok_or_else(|| r.bad("sizes overflow"))?;
        let header = 4 + 4 + 4 + 16 + 4 + 4 * nt;
        if count.checked_mul(per_pair).and_then(|v| v.checked_add(header)) != Some(buf.len()) {
            return Err(r.bad(format!("container of {} bytes does not match {count} pairs", buf.len())));
        }
        let mut pairs = Vec::with_capacity(count);
        for _ in 0..count {
            let cond = r.usize()?;
            let mut read = || -> Result<Tensor<f32>> {
                let v = r.f32s(n)?;
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::bad_container(path, "non-finite state"));
                }
                Tensor::new(dims.to_vec(), v)
            };
            let states = (0..nt).map(|_| read()).collect::<Result<Vec<_>>>()?;
            let endpoint = read()?;
            pairs.push(OdePair { cond, states, endpoint });
        }
        r.finish()?;
        Ok(Self { timesteps, dims, pairs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::default();
        w.bytes(&self.to_bytes());
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

/// Mean regression loss over all pairs with seeded per-chunk timesteps.
pub fn pair_loss<T: Scalar>(student: &ModelWeights<T>, pairs: &OdePairs, chunk: usize, seed: u64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Config("no pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = pairs.dims[0];
    let mut total = 0.0;
    for p in 0..pairs.len() {
        let chunk_t = sample_chunk_timesteps(&mut rng, frames.div_ceil(chunk));
        let x = pairs.assemble(p, &chunk_t, chunk)?.cast::<T>();
        let pred = student_forward(student, &x, &per_frame(&chunk_t, frames, chunk)?, pairs.pairs[p].cond, chunk)?;
        total += crate::schedule::denoising_loss(&pred, &pairs.pairs[p].endpoint.cast::<T>())?.as_f64();
    }
    Ok(total / pairs.len() as f64)
}

/// Regress the block-causal student onto trajectory endpoints.
pub fn regress_student<T: Scalar>(
    mut student: ModelWeights<T>,
    pairs: &OdePairs,
    chunk: usize,
    cfg: &TrainConfig,
    mut checkpoint: Option<CheckpointFn<'_, T>>,
) -> Result<TrainRun<T>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Config("no pairs".into()));
    }
    let frames = pairs.dims[0];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer, student.tensors());
    let mut grads = student.zeros_like();
    let mut history = LossHistory::default();
    for it in 0..cfg.iterations {
        zero_grads(&mut grads);
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let p = rng.gen_range(0..pairs.len());
            let chunk_t = sample_chunk_timesteps(&mut rng, frames.div_ceil(chunk));
            let frame_t = per_frame(&chunk_t, frames, chunk)?;
            let x = pairs.assemble(p, &chunk_t, chunk)?.cast::<T>();
            let target = pairs.pairs[p].endpoint.cast::<T>();
            let cond = pairs.pairs[p].cond;
            total += accumulate_grad(&student, &mut grads, |g, vars| init_objective(g, vars, &student, &x, &frame_t, cond, chunk, &target))?;
        }
        let loss = total / cfg.batch_size as f64;
        guard(it, "student regression", loss)?;
        history.push(it, loss);
        scale_grads(&mut grads, 1.0 / cfg.batch_size as f64);
        opt.step(student.tensors_mut(), &grads);
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            if let Some(cb) = checkpoint.as_mut() {
                cb(it + 1, &student)?;
            }
        }
    }
    Ok(TrainRun { weights: student, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::GaussianEps;

    fn gaussian_pairs(count: usize) -> OdePairs {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let m = GaussianEps { schedule: &s, mean: 0.25, std: 0.5 };
        let cfg = OdeConfig { count, guidance: 1.0, ..Default::default() };
        generate_ode_pairs::<f64, _>(&m, &s, [4, 2, 2, 1], &cfg).unwrap().pairs
    }

    #[test]
    fn first_state_is_the_initial_draw_and_pairs_are_reproducible() {
        let pairs = gaussian_pairs(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        rng.set_stream(1);
        let x = Tensor::<f64>::randn(&[4, 2, 2, 1], &mut rng).cast::<f32>();
        assert_eq!(pairs.pairs[1].states[0], x);
        assert_eq!(pairs, gaussian_pairs(3));
        assert_eq!(pairs.pairs.iter().map(|p| p.cond).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn container_roundtrip_and_rejection() {
        let pairs = gaussian_pairs(2);
        let path = Path::new("pairs.cvop");
        let bytes = pairs.to_bytes();
        assert_eq!(OdePairs::from_bytes(&bytes, path).unwrap(), pairs);
        assert!(OdePairs::from_bytes(&bytes[..bytes.len() - 1], path).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(OdePairs::from_bytes(&wrong, path).is_err());
    }

    #[test]
    fn assemble_takes_each_chunk_from_its_state() {
        let pairs = gaussian_pairs(1);
        let x = pairs.assemble(0, &[999, 0], 2).unwrap();
        let row = 4;
        assert_eq!(&x.data()[..2 * row], &pairs.pairs[0].states[0].data()[..2 * row]);
        assert_eq!(&x.data()[2 * row..], &pairs.pairs[0].endpoint.data()[2 * row..]);
        assert!(pairs.assemble(0, &[999, 5], 2).is_err());
    }
}
