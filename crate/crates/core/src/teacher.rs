//! Teacher training: the bidirectional noise predictor and its block-causal
//! fine-tune used as the many-step causal baseline.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::data::{Dataset, PIXEL_BOUND};
use crate::error::{Error, Result};
use crate::eval::frame_marginal_mmd;
use crate::model::{dit_forward, patchify, Attend, DitVars, FrameConditioning, ModelConfig, ModelWeights};
use crate::optim::AdamW;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::score::{attend_for, sample_clip, Attention, ScoreNet};
use crate::tensor::Tensor;
use crate::train::{accumulate_grad, guard, scale_grads, zero_grads, CheckpointFn, LossHistory, TrainConfig, TrainRun};

/// Noise-prediction MSE of one clip recorded on `g`.
#[allow(clippy::too_many_arguments)]
pub fn denoising_objective<T: Scalar>(
    g: &mut Graph<T>,
    vars: &DitVars,
    cfg: &ModelConfig,
    x_t: &Tensor<T>,
    eps: &Tensor<T>,
    frame_t: &[usize],
    cond: usize,
    attend: &Attend<'_, T>,
) -> Result<Var> {
    let layout = crate::model::ParamLayout::new(cfg);
    let tokens = g.constant(patchify(cfg, x_t)?);
    let out = dit_forward(g, cfg, &layout, vars, tokens, FrameConditioning { frame_t, cond, first_frame: 0 }, attend)?;
    Ok(g.mse(out.out, patchify(cfg, eps)?))
}

/// The condition, or the null id with probability `p`.
pub fn drop_condition<R: Rng + ?Sized>(rng: &mut R, cond: usize, p: f64, null: usize) -> usize {
    if rng.gen::<f64>() < p {
        null
    } else {
        cond
    }
}

/// Independent uniform timesteps in `[0, max_t]`, one per chunk.
pub fn chunk_timesteps<R: Rng + ?Sized>(rng: &mut R, chunks: usize, max_t: usize) -> Vec<usize> {
    (0..chunks).map(|_| rng.gen_range(0..=max_t)).collect()
}

enum Regime {
    /// One timestep in `[1, T]` shared by the clip, full attention.
    Shared,
    /// Independent timesteps per chunk in `[0, T]`, block-causal attention.
    PerChunk { chunk: usize },
}

fn fit<T: Scalar>(
    mut weights: ModelWeights<T>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    regime: Regime,
    what: &str,
    mut checkpoint: Option<CheckpointFn<'_, T>>,
) -> Result<TrainRun<T>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty dataset".into()));
    }
    let model = *weights.config();
    let (frames, h, w, c) = dataset.dims();
    if (h, w, c) != (model.frame_h, model.frame_w, model.channels) {
        return Err(Error::Shape(format!("dataset frames {h}x{w}x{c} do not fit the model")));
    }
    let max_t = schedule.max_t().min(model.max_t);
    let attention = match regime {
        Regime::Shared => Attention::Bidirectional,
        Regime::PerChunk { chunk } => Attention::BlockCausal { chunk },
    };
    let attend = attend_for::<T>(attention, frames, model.tokens_per_frame())?;
    let mut sampler = dataset.sampler(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7465_6163_6865_72);
    let mut opt = AdamW::new(cfg.optimizer, weights.tensors());
    let mut grads = weights.zeros_like();
    let mut history = LossHistory::default();

    for it in 0..cfg.iterations {
        zero_grads(&mut grads);
        let mut total = 0.0;
        for idx in sampler.batch(cfg.batch_size) {
            let x0 = dataset.video::<T>(idx);
            let frame_t = match regime {
                Regime::Shared => vec![rng.gen_range(1..=max_t); frames],
                Regime::PerChunk { chunk } => {
                    let per_chunk = chunk_timesteps(&mut rng, frames.div_ceil(chunk), max_t);
                    (0..frames).map(|f| per_chunk[f / chunk]).collect()
                }
            };
            let eps = Tensor::<T>::randn(x0.shape(), &mut rng);
            let x_t = noisy(schedule, &x0, &eps, &frame_t)?;
            let cond = drop_condition(&mut rng, dataset.cond(idx), cfg.cond_dropout, model.null_cond());
            total += accumulate_grad(&weights, &mut grads, |g, vars| denoising_objective(g, vars, &model, &x_t, &eps, &frame_t, cond, &attend)).map_err(
                |e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("{what} diverged at iteration {it}: {m}")),
                    e => e,
                },
            )?;
        }
        let loss = total / cfg.batch_size as f64;
        guard(it, what, loss)?;
        history.push(it, loss);
        scale_grads(&mut grads, 1.0 / cfg.batch_size as f64);
        opt.step(weights.tensors_mut(), &grads);
        if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
            if let Some(cb) = checkpoint.as_mut() {
                cb(it + 1, &weights)?;
            }
        }
    }
    Ok(TrainRun { weights, history })
}

/// `alpha_t x0 + sigma_t eps` with a per-frame timestep.
pub fn noisy<T: Scalar>(schedule: &NoiseSchedule, x0: &Tensor<T>, eps: &Tensor<T>, frame_t: &[usize]) -> Result<Tensor<T>> {
    x0.ensure_same_shape(eps)?;
    if frame_t.len() != x0.rows() {
        return Err(Error::Shape(format!("{} timesteps for {} frames", frame_t.len(), x0.rows())));
    }
    let row = x0.row_len();
    let mut out = x0.clone();
    for (f, &t) in frame_t.iter().enumerate() {
        schedule.check(t)?;
        let (a, s) = (T::from_f64_lossy(schedule.alpha(t)), T::from_f64_lossy(schedule.sigma(t)));
        let range = f * row..(f + 1) * row;
        for (o, &e) in out.data_mut()[range.clone()].iter_mut().zip(&eps.data()[range]) {
            *o = a * *o + s * e;
        }
    }
    Ok(out)
}

/// Train a bidirectional noise predictor from scratch (weights seeded by `cfg.seed`).
pub fn train_bidirectional<T: Scalar>(
    model: ModelConfig,
    dataset: &Dataset,
    cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    checkpoint: Option<CheckpointFn<'_, T>>,
) -> Result<TrainRun<T>> {
    let weights = ModelWeights::init(model, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    fit(weights, dataset, cfg, schedule, Regime::Shared, "teacher training", checkpoint)
}

/// Continue training under the block-causal mask with per-chunk timesteps.
pub fn finetune_causal_teacher<T: Scalar>(
    weights: ModelWeights<T>,
    dataset: &Dataset,
    cfg: &TrainConfig,
    chunk: usize,
    schedule: &NoiseSchedule,
    checkpoint: Option<CheckpointFn<'_, T>>,
) -> Result<TrainRun<T>> {
    fit(weights, dataset, cfg, schedule, Regime::PerChunk { chunk }, "causal fine-tuning", checkpoint)
}

/// Mean noise-prediction loss over `dataset` with one seeded shared timestep
/// per clip and the given attention pattern. Equal seeds give equal noise.
pub fn validation_loss<T: Scalar>(weights: &ModelWeights<T>, dataset: &Dataset, attention: Attention, schedule: &NoiseSchedule, seed: u64) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("empty validation set".into()));
    }
    let net = ScoreNet { weights, attention };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_t = schedule.max_t().min(weights.config().max_t);
    let mut total = 0.0;
    for i in 0..dataset.len() {
        let x0 = dataset.video::<T>(i);
        let t = rng.gen_range(1..=max_t);
        let eps = Tensor::<T>::randn(x0.shape(), &mut rng);
        let x_t = schedule.forward_diffuse(&x0, t, &eps)?;
        let pred = crate::score::EpsModel::eps(&net, &x_t, t, dataset.cond(i))?;
        total += crate::schedule::denoising_loss(&pred, &eps)?.as_f64();
    }
    Ok(total / dataset.len() as f64)
}

/// Sample quality of a teacher at a given DDIM step count.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherMetrics {
    pub steps: usize,
    pub samples_per_cond: usize,
    pub guidance: f64,
    pub mmd_per_cond: Vec<f64>,
    pub mmd_mean: f64,
    pub loss: f64,
}

impl TeacherMetrics {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "samples_per_cond = {}", self.samples_per_cond);
        let _ = writeln!(s, "guidance = {:?}", self.guidance);
        let per: Vec<String> = self.mmd_per_cond.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "mmd_per_cond = {}", per.join(","));
        let _ = writeln!(s, "mmd_mean = {:?}", self.mmd_mean);
        let _ = writeln!(s, "loss = {:?}", self.loss);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Metric(format!("malformed line {line:?}")))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Metric(format!("missing field {k}")));
        fn parse<V: std::str::FromStr>(k: &str, v: &str) -> Result<V> {
            v.parse().map_err(|_| Error::Metric(format!("bad value for {k}: {v:?}")))
        }
        let per = get("mmd_per_cond")?;
        Ok(Self {
            steps: parse("steps", get("steps")?)?,
            samples_per_cond: parse("samples_per_cond", get("samples_per_cond")?)?,
            guidance: parse("guidance", get("guidance")?)?,
            mmd_per_cond: if per.is_empty() { Vec::new() } else { per.split(',').map(|v| parse("mmd_per_cond", v)).collect::<Result<_>>()? },
            mmd_mean: parse("mmd_mean", get("mmd_mean")?)?,
            loss: parse("loss", get("loss")?)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Frame-marginal MMD of guided DDIM samples against each class's data, and
/// the validation loss on `dataset`.
pub fn evaluate_teacher<T: Scalar>(
    weights: &ModelWeights<T>,
    dataset: &Dataset,
    samples_per_cond: usize,
    steps: usize,
    guidance: f64,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<TeacherMetrics> {
    let net = ScoreNet::bidirectional(weights);
    let (frames, h, w, c) = dataset.dims();
    let classes = weights.config().null_cond();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mmd_per_cond = Vec::with_capacity(classes);
    for cond in 0..classes {
        let clips: Vec<Tensor<T>> = (0..samples_per_cond)
            .map(|_| sample_clip(schedule, &net, &[frames, h, w, c], cond, steps, guidance, Some(PIXEL_BOUND), &mut rng))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor<T>> = clips.iter().collect();
        let reference = dataset.frames_of::<T>(&dataset.indices_of(cond));
        mmd_per_cond.push(frame_marginal_mmd(&Tensor::concat_rows(&refs)?, &reference, seed)?);
    }
    let mmd_mean = mmd_per_cond.iter().sum::<f64>() / classes as f64;
    let loss = validation_loss(weights, dataset, Attention::Bidirectional, schedule, seed)?;
    Ok(TeacherMetrics { steps, samples_per_cond, guidance, mmd_per_cond, mmd_mean, loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetConfig;

    #[test]
    fn dropout_rate_passes_binomial_test() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let dropped = (0..n).filter(|_| drop_condition(&mut rng, 1, 0.1, 4) == 4).count() as f64;
        let sd = (n as f64 * 0.1 * 0.9).sqrt();
        assert!((dropped - 1000.0).abs() < 4.0 * sd, "dropped {dropped}");
    }

    #[test]
    fn chunk_timesteps_are_uncorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let draws: Vec<Vec<usize>> = (0..10_000).map(|_| chunk_timesteps(&mut rng, 5, 1000)).collect();
        for a in 0..5 {
            for b in a + 1..5 {
                let xs: Vec<f64> = draws.iter().map(|d| d[a] as f64).collect();
                let ys: Vec<f64> = draws.iter().map(|d| d[b] as f64).collect();
                let (mx, my) = (xs.iter().sum::<f64>() / 1e4, ys.iter().sum::<f64>() / 1e4);
                let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
                let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
                let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
                assert!((cov / (vx * vy).sqrt()).abs() < 0.05);
            }
        }
    }

    fn tiny() -> (ModelConfig, Dataset) {
        let model = ModelConfig { frame_h: 8, frame_w: 8, patch: 4, dim: 16, depth: 1, heads: 2, ..Default::default() };
        let data = Dataset::generate(&DatasetConfig { videos: 8, frames: 4, height: 8, width: 8, ..Default::default() }, 3).unwrap();
        (model, data)
    }

    #[test]
    fn first_loss_is_near_one_and_training_is_deterministic() {
        let (model, data) = tiny();
        let schedule = NoiseSchedule::cosine(1000).unwrap();
        let cfg = TrainConfig { iterations: 3, batch_size: 4, ..Default::default() };
        let a = train_bidirectional::<f32>(model, &data, &cfg, &schedule, None).unwrap();
        let b = train_bidirectional::<f32>(model, &data, &cfg, &schedule, None).unwrap();
        assert!((a.history.first().unwrap() - 1.0).abs() < 0.3);
        assert_eq!(a.weights.checksum(), b.weights.checksum());
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn checkpoints_follow_cadence() {
        let (model, data) = tiny();
        let schedule = NoiseSchedule::cosine(1000).unwrap();
        let cfg = TrainConfig { iterations: 4, batch_size: 1, checkpoint_every: 2, ..Default::default() };
        let mut seen = Vec::new();
        let mut cb = |i: usize, _: &ModelWeights<f32>| {
            seen.push(i);
            Ok(())
        };
        train_bidirectional::<f32>(model, &data, &cfg, &schedule, Some(&mut cb)).unwrap();
        assert_eq!(seen, vec![2, 4]);
    }

    #[test]
    fn noisy_uses_each_frames_timestep() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x0 = Tensor::<f64>::full(&[2, 1, 1, 1], 1.0);
        let eps = Tensor::<f64>::full(&[2, 1, 1, 1], 2.0);
        let x = noisy(&s, &x0, &eps, &[0, 500]).unwrap();
        assert_eq!(x.data()[0], 1.0);
        assert!((x.data()[1] - (s.alpha(500) + 2.0 * s.sigma(500))).abs() < 1e-12);
    }

    #[test]
    fn metrics_text_roundtrip() {
        let m = TeacherMetrics { steps: 32, samples_per_cond: 8, guidance: 3.5, mmd_per_cond: vec![0.1, 0.25], mmd_mean: 0.175, loss: 0.33 };
        assert_eq!(TeacherMetrics::from_text(&m.to_text()).unwrap(), m);
    }
}
