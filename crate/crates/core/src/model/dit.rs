//! Forward pass of the video diffusion transformer.
//!
//! Frames are cut into non-overlapping patches, embedded linearly and summed
//! with factored spatial/temporal sinusoidal codes. Each frame carries its own
//! timestep; the timestep embedding plus the condition embedding drive
//! shift/scale/gate modulation in every block. Attention is either full,
//! masked by a token-level table, or run against a KV cache.

use std::sync::Arc;

use super::cache::KVCache;
use super::config::ModelConfig;
use super::weights::{ModelWeights, ParamLayout};
use crate::autograd::{AttnMask, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Attention pattern for one forward pass.
#[derive(Clone)]
pub enum Attend<'a, T> {
    /// Every token sees every token.
    Full,
    /// Token-level visibility table, usually from a block-causal mask.
    Masked(Arc<AttnMask>),
    /// Current tokens see the cached tokens and each other, unmasked.
    Cached(&'a KVCache<T>),
}

/// Graph handles of one network's parameters.
pub struct DitVars {
    vars: Vec<Var>,
}

impl DitVars {
    /// Parameters as trainable graph leaves.
    pub fn trainable<T: Scalar>(g: &mut Graph<T>, w: &ModelWeights<T>) -> Self {
        Self { vars: w.tensors().iter().enumerate().map(|(i, t)| g.param(i, t.clone())).collect() }
    }

    /// Parameters as constants (no gradient).
    pub fn frozen<T: Scalar>(g: &mut Graph<T>, w: &ModelWeights<T>) -> Self {
        Self { vars: w.tensors().iter().map(|t| g.constant(t.clone())).collect() }
    }

    fn get(&self, id: usize) -> Var {
        self.vars[id]
    }
}

/// Outputs of [`dit_forward`]: the prediction in token layout plus each layer's
/// keys and values for the current tokens.
pub struct DitOutput {
    pub out: Var,
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

/// `(frames, H, W, C)` → `[frames * tokens_per_frame, patch * patch * C]`.
pub fn patchify<T: Scalar>(cfg: &ModelConfig, frames: &Tensor<T>) -> Result<Tensor<T>> {
    let n = check_frames(cfg, frames)?;
    let (p, c, w) = (cfg.patch, cfg.channels, cfg.frame_w);
    let (gh, gw) = (cfg.frame_h / p, cfg.frame_w / p);
    let src = frames.data();
    let mut out = Vec::with_capacity(src.len());
    for f in 0..n {
        let base = f * cfg.frame_len();
        for py in 0..gh {
            for px in 0..gw {
                for dy in 0..p {
                    let row = base + ((py * p + dy) * w + px * p) * c;
                    out.extend_from_slice(&src[row..row + p * c]);
                }
            }
        }
    }
    Tensor::new(vec![n * cfg.tokens_per_frame(), cfg.patch_dim()], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(cfg: &ModelConfig, tokens: &Tensor<T>) -> Result<Tensor<T>> {
    let tpf = cfg.tokens_per_frame();
    if tokens.shape().len() != 2 || tokens.shape()[1] != cfg.patch_dim() || tokens.rows() % tpf != 0 {
        return Err(Error::Shape(format!("token tensor {:?} does not match config", tokens.shape())));
    }
    let n = tokens.rows() / tpf;
    let (p, c, w) = (cfg.patch, cfg.channels, cfg.frame_w);
    let gw = cfg.frame_w / p;
    let mut out = vec![T::zero(); tokens.numel()];
    let src = tokens.data();
    for (ti, tok) in src.chunks(cfg.patch_dim()).enumerate() {
        let (f, pi) = (ti / tpf, ti % tpf);
        let (py, px) = (pi / gw, pi % gw);
        let base = f * cfg.frame_len();
        for dy in 0..p {
            let row = base + ((py * p + dy) * w + px * p) * c;
            out[row..row + p * c].copy_from_slice(&tok[dy * p * c..(dy + 1) * p * c]);
        }
    }
    Tensor::new(vec![n, cfg.frame_h, cfg.frame_w, cfg.channels], out)
}

fn check_frames<T: Scalar>(cfg: &ModelConfig, frames: &Tensor<T>) -> Result<usize> {
    match frames.shape() {
        [n, h, w, c] if *h == cfg.frame_h && *w == cfg.frame_w && *c == cfg.channels => Ok(*n),
        other => Err(Error::Shape(format!("frames {other:?} do not match ({}, {}, {})", cfg.frame_h, cfg.frame_w, cfg.channels))),
    }
}

/// Half-sine/half-cosine code of `pos` over `width` channels.
fn sincos<T: Scalar>(pos: f64, width: usize, out: &mut [T]) {
    let half = width / 2;
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = T::from_f64_lossy((pos * freq).sin());
        out[half + i] = T::from_f64_lossy((pos * freq).cos());
    }
}

/// Spatial (row, column) plus temporal position codes, `[frames * tpf, dim]`.
pub fn position_codes<T: Scalar>(cfg: &ModelConfig, frames: usize, first_frame: usize) -> Tensor<T> {
    let d = cfg.dim;
    let gw = cfg.frame_w / cfg.patch;
    let tpf = cfg.tokens_per_frame();
    let mut out = vec![T::zero(); frames * tpf * d];
    let mut spatial = vec![T::zero(); d];
    let mut temporal = vec![T::zero(); d];
    for f in 0..frames {
        sincos((first_frame + f) as f64, d, &mut temporal);
        for pi in 0..tpf {
            sincos((pi / gw) as f64, d / 2, &mut spatial[..d / 2]);
            sincos((pi % gw) as f64, d / 2, &mut spatial[d / 2..]);
            let row = &mut out[(f * tpf + pi) * d..(f * tpf + pi + 1) * d];
            for j in 0..d {
                row[j] = spatial[j] + temporal[j];
            }
        }
    }
    Tensor::new(vec![frames * tpf, d], out).expect("position code shape")
}

/// Sinusoidal timestep features, one row per frame.
fn timestep_features<T: Scalar>(dim: usize, frame_t: &[usize]) -> Tensor<T> {
    let mut out = vec![T::zero(); frame_t.len() * dim];
    for (row, &t) in out.chunks_mut(dim).zip(frame_t) {
        sincos(t as f64, dim, row);
    }
    Tensor::new(vec![frame_t.len(), dim], out).expect("timestep feature shape")
}

/// Per-call inputs of [`dit_forward`] besides the tokens.
#[derive(Clone, Copy, Debug)]
pub struct FrameConditioning<'a> {
    /// Timestep of every frame.
    pub frame_t: &'a [usize],
    pub cond: usize,
    /// Temporal position of the first frame.
    pub first_frame: usize,
}

/// Records a forward pass on `g`. `tokens` is `[frames * tpf, patch_dim]`.
pub fn dit_forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    layout: &ParamLayout,
    vars: &DitVars,
    tokens: Var,
    cond: FrameConditioning<'_>,
    attend: &Attend<'_, T>,
) -> Result<DitOutput> {
    let tpf = cfg.tokens_per_frame();
    let frames = cond.frame_t.len();
    let (n_tok, pd) = g.shape(tokens);
    if n_tok != frames * tpf || pd != cfg.patch_dim() {
        return Err(Error::Shape(format!("tokens [{n_tok}, {pd}] for {frames} frames")));
    }
    if cond.cond >= cfg.cond_vocab {
        return Err(Error::Condition(cond.cond));
    }
    if let Some(&t) = cond.frame_t.iter().find(|&&t| t > cfg.max_t) {
        return Err(Error::Timestep { t, min: 0, max: cfg.max_t });
    }
    let d = cfg.dim;

    let emb = g.matmul(tokens, vars.get(layout.patch_w));
    let emb = g.add_row(emb, vars.get(layout.patch_b));
    let pos = g.constant(position_codes(cfg, frames, cond.first_frame));
    let mut h = g.add(emb, pos);

    let tf = g.constant(timestep_features(d, cond.frame_t));
    let te = g.matmul(tf, vars.get(layout.temb_w1));
    let te = g.add_row(te, vars.get(layout.temb_b1));
    let te = g.silu(te);
    let te = g.matmul(te, vars.get(layout.temb_w2));
    let te = g.add_row(te, vars.get(layout.temb_b2));
    let ce = g.gather_rows(vars.get(layout.cond_table), vec![cond.cond; frames]);
    let c = g.add(te, ce);
    let c = g.silu(c);

    let token_frame: Vec<usize> = (0..n_tok).map(|i| i / tpf).collect();
    let mut keys = Vec::with_capacity(cfg.depth);
    let mut values = Vec::with_capacity(cfg.depth);
    for (l, b) in layout.blocks.iter().enumerate() {
        let m = g.matmul(c, vars.get(b.ada_w));
        let m = g.add_row(m, vars.get(b.ada_b));
        let m = g.gather_rows(m, token_frame.clone());
        let shift1 = g.slice_cols(m, 0, d);
        let scale1 = g.slice_cols(m, d, d);
        let gate1 = g.slice_cols(m, 2 * d, d);
        let shift2 = g.slice_cols(m, 3 * d, d);
        let scale2 = g.slice_cols(m, 4 * d, d);
        let gate2 = g.slice_cols(m, 5 * d, d);

        let x = modulate(g, h, shift1, scale1);
        let q = g.matmul(x, vars.get(b.wq));
        let k = g.matmul(x, vars.get(b.wk));
        let v = g.matmul(x, vars.get(b.wv));
        keys.push(k);
        values.push(v);
        let a = match attend {
            Attend::Full => g.attention(q, k, v, cfg.heads, None),
            Attend::Masked(mask) => g.attention(q, k, v, cfg.heads, Some(mask)),
            Attend::Cached(cache) => {
                let (ck, cv) = cache.layer(l)?;
                if ck.rows() == 0 {
                    g.attention(q, k, v, cfg.heads, None)
                } else {
                    let ck = g.constant(ck.clone());
                    let cv = g.constant(cv.clone());
                    let kk = g.concat_rows(ck, k);
                    let vv = g.concat_rows(cv, v);
                    g.attention(q, kk, vv, cfg.heads, None)
                }
            }
        };
        let a = g.matmul(a, vars.get(b.wo));
        let a = g.add_row(a, vars.get(b.bo));
        let a = g.mul(gate1, a);
        h = g.add(h, a);

        let x = modulate(g, h, shift2, scale2);
        let f = g.matmul(x, vars.get(b.w1));
        let f = g.add_row(f, vars.get(b.b1));
        let f = g.gelu(f);
        let f = g.matmul(f, vars.get(b.w2));
        let f = g.add_row(f, vars.get(b.b2));
        let f = g.mul(gate2, f);
        h = g.add(h, f);
    }

    let m = g.matmul(c, vars.get(layout.final_ada_w));
    let m = g.add_row(m, vars.get(layout.final_ada_b));
    let m = g.gather_rows(m, token_frame.clone());
    let shift = g.slice_cols(m, 0, d);
    let scale = g.slice_cols(m, d, d);
    let x = modulate(g, h, shift, scale);
    let out = g.matmul(x, vars.get(layout.out_w));
    let out = g.add_row(out, vars.get(layout.out_b));

    // conditioning-dependent elementwise gain on the input patch
    let s = g.matmul(c, vars.get(layout.skip_w));
    let s = g.add_row(s, vars.get(layout.skip_b));
    let s = g.gather_rows(s, token_frame);
    let skip = g.mul(s, tokens);
    let out = g.add(out, skip);
    Ok(DitOutput { out, keys, values })
}

fn modulate<T: Scalar>(g: &mut Graph<T>, h: Var, shift: Var, scale: Var) -> Var {
    let n = g.layer_norm(h);
    let s = g.add_scalar(scale, T::one());
    let x = g.mul(n, s);
    g.add(x, shift)
}

/// Gradient-free prediction for a whole clip. `frame_t` has one entry per frame.
pub fn predict<T: Scalar>(weights: &ModelWeights<T>, frames: &Tensor<T>, frame_t: &[usize], cond: usize, attend: &Attend<'_, T>) -> Result<Tensor<T>> {
    predict_at(weights, frames, frame_t, cond, 0, attend).map(|(out, _)| out)
}

/// Like [`predict`] with an explicit temporal offset; also returns per-layer
/// keys and values of the input tokens.
pub fn predict_at<T: Scalar>(
    weights: &ModelWeights<T>,
    frames: &Tensor<T>,
    frame_t: &[usize],
    cond: usize,
    first_frame: usize,
    attend: &Attend<'_, T>,
) -> Result<(Tensor<T>, Vec<(Tensor<T>, Tensor<T>)>)> {
    let cfg = weights.config();
    let n = check_frames(cfg, frames)?;
    if frame_t.len() != n {
        return Err(Error::Shape(format!("{} timesteps for {n} frames", frame_t.len())));
    }
    let layout = weights.layout();
    let mut g = Graph::new();
    let vars = DitVars::frozen(&mut g, weights);
    let tokens = g.constant(patchify(cfg, frames)?);
    let out = dit_forward(&mut g, cfg, &layout, &vars, tokens, FrameConditioning { frame_t, cond, first_frame }, attend)?;
    let kv = out.keys.iter().zip(&out.values).map(|(&k, &v)| (g.value(k).clone(), g.value(v).clone())).collect();
    Ok((unpatchify(cfg, g.value(out.out))?, kv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::mask::{BlockCausalMask, ChunkLayout};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { frame_h: 8, frame_w: 8, patch: 4, dim: 16, depth: 2, heads: 2, ..Default::default() }
    }

    #[test]
    fn patchify_roundtrip() {
        let cfg = ModelConfig { channels: 2, ..tiny() };
        let frames = Tensor::<f32>::from_fn(&[3, 8, 8, 2], |i| i as f32);
        let tokens = patchify(&cfg, &frames).unwrap();
        assert_eq!(tokens.shape(), &[12, 32]);
        // first token starts with the top-left pixel's channels
        assert_eq!(&tokens.data()[..2], &[0.0, 1.0]);
        assert_eq!(unpatchify(&cfg, &tokens).unwrap(), frames);
    }

    #[test]
    fn single_chunk_masked_equals_full() {
        let cfg = tiny();
        let w = ModelWeights::<f32>::init_dense(cfg, &mut ChaCha8Rng::seed_from_u64(0), 1.0).unwrap();
        let frames = Tensor::randn(&[4, 8, 8, 1], &mut ChaCha8Rng::seed_from_u64(1));
        let mask = BlockCausalMask::build(ChunkLayout::new(4, 4).unwrap()).token_mask(cfg.tokens_per_frame());
        let t = [300; 4];
        let a = predict(&w, &frames, &t, 1, &Attend::Full).unwrap();
        let b = predict(&w, &frames, &t, 1, &Attend::Masked(mask)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = tiny();
        let w = ModelWeights::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let frames = Tensor::<f32>::zeros(&[2, 8, 8, 1]);
        assert!(predict(&w, &frames, &[1], 0, &Attend::Full).is_err());
        assert!(predict(&w, &frames, &[1, 1], 9, &Attend::Full).is_err());
        assert!(predict(&w, &frames, &[1, 1001], 0, &Attend::Full).is_err());
        assert!(predict(&w, &Tensor::zeros(&[2, 4, 4, 1]), &[1, 1], 0, &Attend::Full).is_err());
    }
}
