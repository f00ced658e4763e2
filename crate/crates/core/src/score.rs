//! Noise predictors seen as score models, and the deterministic sampler.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{predict, Attend, BlockCausalMask, ChunkLayout, ModelWeights};
use crate::scalar::Scalar;
use crate::schedule::{cfg_combine, NoiseSchedule};
use crate::tensor::Tensor;

/// Anything that predicts the noise in a whole clip at one timestep.
pub trait EpsModel<T: Scalar> {
    fn eps(&self, x_t: &Tensor<T>, t: usize, cond: usize) -> Result<Tensor<T>>;
    /// Condition id used for the unconditional branch of guidance.
    fn null_cond(&self) -> usize;
    /// Whether the model attends across all frames; asserted by distillation.
    fn is_bidirectional(&self) -> bool;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Attention {
    Bidirectional,
    BlockCausal { chunk: usize },
}

/// A network applied with a fixed attention pattern.
#[derive(Clone, Copy)]
pub struct ScoreNet<'a, T> {
    pub weights: &'a ModelWeights<T>,
    pub attention: Attention,
}

impl<'a, T: Scalar> ScoreNet<'a, T> {
    pub fn bidirectional(weights: &'a ModelWeights<T>) -> Self {
        Self { weights, attention: Attention::Bidirectional }
    }

    pub fn causal(weights: &'a ModelWeights<T>, chunk: usize) -> Self {
        Self { weights, attention: Attention::BlockCausal { chunk } }
    }
}

pub(crate) fn attend_for<T: Scalar>(attention: Attention, frames: usize, tokens_per_frame: usize) -> Result<Attend<'static, T>> {
    Ok(match attention {
        Attention::Bidirectional => Attend::Full,
        Attention::BlockCausal { chunk } => Attend::Masked(BlockCausalMask::build(ChunkLayout::new(frames, chunk)?).token_mask(tokens_per_frame)),
    })
}

impl<T: Scalar> EpsModel<T> for ScoreNet<'_, T> {
    fn eps(&self, x_t: &Tensor<T>, t: usize, cond: usize) -> Result<Tensor<T>> {
        let frames = x_t.rows();
        let attend = attend_for(self.attention, frames, self.weights.config().tokens_per_frame())?;
        predict(self.weights, x_t, &vec![t; frames], cond, &attend)
    }

    fn null_cond(&self) -> usize {
        self.weights.config().null_cond()
    }

    fn is_bidirectional(&self) -> bool {
        self.attention == Attention::Bidirectional
    }
}

/// Exact noise prediction for elementwise data `N(mean, std²)`.
///
/// With `x_t ~ N(alpha mean, alpha² std² + sigma²)` the noise estimate is
/// `sigma (x_t - alpha mean) / (alpha² std² + sigma²)`.
#[derive(Clone, Debug)]
pub struct GaussianEps<'s> {
    pub schedule: &'s NoiseSchedule,
    pub mean: f64,
    pub std: f64,
}

impl<T: Scalar> EpsModel<T> for GaussianEps<'_> {
    fn eps(&self, x_t: &Tensor<T>, t: usize, _cond: usize) -> Result<Tensor<T>> {
        self.schedule.check(t)?;
        let (a, s) = (self.schedule.alpha(t), self.schedule.sigma(t));
        let var = a * a * self.std * self.std + s * s;
        let (am, k) = (T::from_f64_lossy(a * self.mean), T::from_f64_lossy(s / var));
        Ok(x_t.map(|x| (x - am) * k))
    }

    fn null_cond(&self) -> usize {
        0
    }

    fn is_bidirectional(&self) -> bool {
        true
    }
}

/// Guided noise estimate; `w == 1` skips the unconditional pass and returns
/// the conditional prediction unchanged.
pub fn guided_eps<T: Scalar, M: EpsModel<T> + ?Sized>(model: &M, x_t: &Tensor<T>, t: usize, cond: usize, w: f64) -> Result<Tensor<T>> {
    let c = model.eps(x_t, t, cond)?;
    if w == 1.0 || cond == model.null_cond() {
        return Ok(c);
    }
    let u = model.eps(x_t, t, model.null_cond())?;
    cfg_combine(&c, &u, w)
}

/// Deterministic DDIM along `grid` (descending, ending at 0).
///
/// Returns the endpoint and the states at the grid points listed in `keep`,
/// each recorded before the step leaving it. With `clip`, every clean
/// estimate is clamped to `[-clip, clip]`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_sample<T: Scalar, M: EpsModel<T> + ?Sized>(
    schedule: &NoiseSchedule,
    model: &M,
    x_start: Tensor<T>,
    grid: &[usize],
    cond: usize,
    w: f64,
    clip: Option<f64>,
    keep: &[usize],
) -> Result<(Tensor<T>, Vec<(usize, Tensor<T>)>)> {
    if grid.len() < 2 || grid.last() != Some(&0) || grid.windows(2).any(|p| p[1] >= p[0]) {
        return Err(Error::Config(format!("ddim grid must strictly descend to 0, got {grid:?}")));
    }
    let mut x = x_start;
    let mut kept = Vec::with_capacity(keep.len());
    for pair in grid.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        if keep.contains(&t) {
            kept.push((t, x.clone()));
        }
        let eps = guided_eps(model, &x, t, cond, w)?;
        x = match clip {
            Some(bound) => schedule.ddim_step_clipped(&x, &eps, t, t_prev, bound)?,
            None => schedule.ddim_step(&x, &eps, t, t_prev)?,
        };
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("ddim state at t={t_prev}")));
        }
    }
    Ok((x, kept))
}

/// One clip sampled from pure noise with `steps` DDIM intervals starting at
/// `schedule.max_t() - 1`.
#[allow(clippy::too_many_arguments)]
pub fn sample_clip<T: Scalar, M: EpsModel<T> + ?Sized, R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    model: &M,
    shape: &[usize],
    cond: usize,
    steps: usize,
    w: f64,
    clip: Option<f64>,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let grid = crate::schedule::ddim_grid(schedule.max_t() - 1, steps, &[])?;
    let x = Tensor::randn(shape, rng);
    ddim_sample(schedule, model, x, &grid, cond, w, clip, &[]).map(|(x, _)| x)
}
