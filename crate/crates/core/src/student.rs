//! The few-step block-causal generator. Its network output is read directly
//! as the clean-frame estimate.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{dit_forward, patchify, predict, unpatchify, DitVars, FrameConditioning, ModelWeights, ParamLayout};
use crate::scalar::Scalar;
use crate::score::{attend_for, Attention};
use crate::tensor::Tensor;

/// Denoising timesteps used at inference, highest first.
pub const STUDENT_TIMESTEPS: [usize; 4] = [999, 748, 502, 247];
/// Timesteps a chunk can carry during training: the inference set plus 0.
pub const STUDENT_TRAIN_SET: [usize; 5] = [0, 247, 502, 748, 999];

/// One uniform draw from [`STUDENT_TRAIN_SET`] per chunk.
pub fn sample_chunk_timesteps<R: Rng + ?Sized>(rng: &mut R, chunks: usize) -> Vec<usize> {
    (0..chunks).map(|_| STUDENT_TRAIN_SET[rng.gen_range(0..STUDENT_TRAIN_SET.len())]).collect()
}

/// Expand per-chunk values to per-frame values.
pub fn per_frame(per_chunk: &[usize], frames: usize, chunk: usize) -> Result<Vec<usize>> {
    if chunk == 0 || per_chunk.len() != frames.div_ceil(chunk) {
        return Err(Error::Shape(format!("{} chunk timesteps for {frames} frames in chunks of {chunk}", per_chunk.len())));
    }
    Ok((0..frames).map(|f| per_chunk[f / chunk]).collect())
}

/// Records the student's block-causal forward on `g`; returns the clean-frame
/// estimate in token layout.
pub fn student_graph<T: Scalar>(
    g: &mut Graph<T>,
    vars: &DitVars,
    weights: &ModelWeights<T>,
    x: &Tensor<T>,
    frame_t: &[usize],
    cond: usize,
    chunk: usize,
) -> Result<Var> {
    let cfg = weights.config();
    let attend = attend_for::<T>(Attention::BlockCausal { chunk }, x.rows(), cfg.tokens_per_frame())?;
    let tokens = g.constant(patchify(cfg, x)?);
    let out = dit_forward(g, cfg, &ParamLayout::new(cfg), vars, tokens, FrameConditioning { frame_t, cond, first_frame: 0 }, &attend)?;
    Ok(out.out)
}

/// Gradient-free block-causal prediction of the clean clip.
pub fn student_forward<T: Scalar>(weights: &ModelWeights<T>, x: &Tensor<T>, frame_t: &[usize], cond: usize, chunk: usize) -> Result<Tensor<T>> {
    let attend = attend_for::<T>(Attention::BlockCausal { chunk }, x.rows(), weights.config().tokens_per_frame())?;
    predict(weights, x, frame_t, cond, &attend)
}

/// Regression objective: squared error between the student's prediction and
/// the clean target.
pub fn init_objective<T: Scalar>(
    g: &mut Graph<T>,
    vars: &DitVars,
    weights: &ModelWeights<T>,
    x: &Tensor<T>,
    frame_t: &[usize],
    cond: usize,
    chunk: usize,
    target: &Tensor<T>,
) -> Result<Var> {
    let out = student_graph(g, vars, weights, x, frame_t, cond, chunk)?;
    Ok(g.mse(out, patchify(weights.config(), target)?))
}

/// Convert a token-layout graph value back to frames.
pub fn frames_of<T: Scalar>(g: &Graph<T>, weights: &ModelWeights<T>, v: Var) -> Result<Tensor<T>> {
    unpatchify(weights.config(), g.value(v))
}
