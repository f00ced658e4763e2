//! End-to-end orchestration: data, teachers, student initialization,
//! distillation and evaluation, plus the few-step ablation grid.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, DatasetConfig};
use crate::dmd::{distill_loop, DistillState, DmdConfig, DmdLossReport, TeacherKind};
use crate::error::{Error, Result};
use crate::eval::{boundary_discontinuity, degradation_curve, frame_marginal_mmd, ls_slope, MetricReport};
use crate::model::{ModelConfig, ModelWeights};
use crate::ode::{generate_ode_pairs, regress_student, OdeConfig, OdePairs};
use crate::optim::AdamWConfig;
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::score::ScoreNet;
use crate::stream::{GenerationSession, SessionConfig};
use crate::tensor::Tensor;
use crate::train::{LossHistory, TrainConfig};

/// Evaluation sizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    /// Clips sampled per condition for frame-marginal MMD.
    pub samples_per_cond: usize,
    pub teacher_steps: usize,
    pub guidance: f64,
    /// Long-stream length in multiples of the training clip length.
    pub long_multiple: usize,
    /// Streams pooled per chunk index of the degradation curve.
    pub degradation_streams: usize,
    pub mmd_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples_per_cond: 8, teacher_steps: 32, guidance: 3.5, long_multiple: 4, degradation_streams: 28, mmd_seed: 17 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub data: DatasetConfig,
    pub data_seed: u64,
    pub model: ModelConfig,
    pub chunk: usize,
    pub teacher: TrainConfig,
    pub causal: TrainConfig,
    pub ode: OdeConfig,
    pub regression: TrainConfig,
    pub dmd: DmdConfig,
    pub dmd_iterations: usize,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let model = ModelConfig { patch: 8, dim: 32, depth: 2, heads: 2, ..Default::default() };
        let chunk = 4;
        Self {
            data: DatasetConfig::default(),
            data_seed: 0,
            model,
            chunk,
            teacher: TrainConfig { iterations: 3000, batch_size: 16, ..Default::default() },
            causal: TrainConfig { iterations: 1500, batch_size: 16, optimizer: AdamWConfig { lr: 5e-4, ..Default::default() }, ..Default::default() },
            ode: OdeConfig::default(),
            regression: TrainConfig {
                iterations: 3000,
                batch_size: 8,
                optimizer: AdamWConfig { lr: 5e-4, ..Default::default() },
                cond_dropout: 0.0,
                ..Default::default()
            },
            dmd: DmdConfig { chunk, ..Default::default() },
            dmd_iterations: 6000,
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.teacher.validate()?;
        self.causal.validate()?;
        self.regression.validate()?;
        self.dmd.validate()?;
        if self.chunk == 0 || self.data.frames % self.chunk != 0 {
            return Err(Error::Config(format!("clip length {} is not a multiple of chunk {}", self.data.frames, self.chunk)));
        }
        if (self.data.height, self.data.width) != (self.model.frame_h, self.model.frame_w) {
            return Err(Error::Config("data and model frame sizes differ".into()));
        }
        if self.dmd.chunk != self.chunk {
            return Err(Error::Config("distillation chunk differs from pipeline chunk".into()));
        }
        Ok(())
    }

    pub fn window_chunks(&self) -> usize {
        self.data.frames / self.chunk
    }

    pub fn session(&self, seed: u64, cond: usize) -> SessionConfig {
        SessionConfig { chunk: self.chunk, seed, window_chunks: self.window_chunks(), initial_cond: cond, ..Default::default() }
    }

    /// Stable hash of the debug rendering, used to tag reports.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(&Sha256::digest(format!("{self:?}").as_bytes())[..8])
    }
}

/// Sample `samples_per_cond` streams of one training length per condition and
/// compare their frames with that condition's data frames.
pub fn student_mmd<T: Scalar>(weights: &Arc<ModelWeights<T>>, dataset: &Dataset, cfg: &PipelineConfig, seed: u64) -> Result<Vec<f64>> {
    let classes = weights.config().null_cond();
    let schedule = NoiseSchedule::cosine(weights.config().max_t)?;
    (0..classes)
        .map(|cond| {
            let clips: Vec<Tensor<T>> = (0..cfg.eval.samples_per_cond)
                .map(|i| {
                    let mut s = GenerationSession::new(weights.clone(), schedule.clone(), cfg.session(stream_seed(seed, cond, i), cond))?;
                    s.generate_stream(cfg.window_chunks())
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor<T>> = clips.iter().collect();
            frame_marginal_mmd(&Tensor::concat_rows(&refs)?, &dataset.frames_of::<T>(&dataset.indices_of(cond)), cfg.eval.mmd_seed)
        })
        .collect()
}

fn stream_seed(seed: u64, cond: usize, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add((cond * 10_007 + i) as u64)
}

/// Long streams (`long_multiple` training lengths through the sliding window),
/// conditions cycling over streams.
pub fn long_streams<T: Scalar>(weights: &Arc<ModelWeights<T>>, cfg: &PipelineConfig, seed: u64) -> Result<Vec<(Tensor<T>, usize)>> {
    let classes = weights.config().null_cond();
    let schedule = NoiseSchedule::cosine(weights.config().max_t)?;
    let chunks = cfg.window_chunks() * cfg.eval.long_multiple;
    (0..cfg.eval.degradation_streams)
        .map(|i| {
            let cond = i % classes;
            let mut s = GenerationSession::new(weights.clone(), schedule.clone(), cfg.session(stream_seed(seed ^ 0x6c6f_6e67, cond, i), cond))?;
            Ok((s.generate_stream(chunks)?, cond))
        })
        .collect()
}

/// Degradation curve of long streams against the data frames at the same
/// position within a training clip, matched by condition.
pub fn stream_degradation<T: Scalar>(streams: &[(Tensor<T>, usize)], dataset: &Dataset, cfg: &PipelineConfig) -> Result<Vec<f64>> {
    let k = cfg.chunk;
    let window = cfg.window_chunks();
    let conds: Vec<usize> = streams.iter().map(|s| s.1).collect();
    let clips: Vec<Tensor<T>> = streams.iter().map(|s| s.0.clone()).collect();
    degradation_curve(
        &clips,
        k,
        |c| {
            let pos = (c % window) * k;
            let mut parts = Vec::new();
            for (j, &cond) in conds.iter().enumerate() {
                let idx = dataset.indices_of(cond);
                // several data clips per stream so the reference side stays large
                for r in 0..4 {
                    let v = dataset.video::<T>(idx[(j * 4 + r) % idx.len()]);
                    parts.push(v.slice_rows(pos, pos + k).expect("chunk inside clip"));
                }
            }
            let refs: Vec<&Tensor<T>> = parts.iter().collect();
            Tensor::concat_rows(&refs).expect("same dims")
        },
        cfg.eval.mmd_seed,
    )
}

/// Quality report of a few-step student.
pub fn evaluate_student<T: Scalar>(weights: ModelWeights<T>, dataset: &Dataset, cfg: &PipelineConfig, label: &str, seed: u64) -> Result<MetricReport> {
    let weights = Arc::new(weights);
    let mmd_per_cond = student_mmd(&weights, dataset, cfg, seed)?;
    let streams = long_streams(&weights, cfg, seed)?;
    let degradation = stream_degradation(&streams, dataset, cfg)?;
    let bd: Vec<f64> = streams.iter().map(|(s, _)| boundary_discontinuity(s, cfg.chunk)).collect::<Result<_>>()?;
    let report = MetricReport {
        label: label.to_string(),
        mmd_mean: mmd_per_cond.iter().sum::<f64>() / mmd_per_cond.len() as f64,
        mmd_per_cond,
        degradation_slope: ls_slope(&degradation),
        degradation,
        boundary_discontinuity: bd.iter().sum::<f64>() / bd.len() as f64,
        latency_to_first_chunk_s: 0.0,
        throughput_fps: 0.0,
        timing_measured: false,
        seed,
        config_hash: cfg.hash(),
    };
    report.validate()?;
    Ok(report)
}

/// Guided DDIM samples of a bidirectional teacher, scored like a student.
pub fn teacher_mmd<T: Scalar>(teacher: &ModelWeights<T>, dataset: &Dataset, cfg: &PipelineConfig, steps: usize, seed: u64) -> Result<Vec<f64>> {
    let m = crate::teacher::evaluate_teacher(
        teacher,
        dataset,
        cfg.eval.samples_per_cond,
        steps,
        cfg.eval.guidance,
        &NoiseSchedule::cosine(teacher.config().max_t)?,
        seed,
    )?;
    Ok(m.mmd_per_cond)
}

/// Rows of the few-step ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationCell {
    pub ode_init: bool,
    /// Distillation teacher; `None` keeps the regression-only student.
    pub teacher: Option<TeacherKind>,
}

impl AblationCell {
    pub const GRID: [AblationCell; 4] = [
        AblationCell { ode_init: false, teacher: Some(TeacherKind::Bidirectional) },
        AblationCell { ode_init: true, teacher: None },
        AblationCell { ode_init: true, teacher: Some(TeacherKind::Causal) },
        AblationCell { ode_init: true, teacher: Some(TeacherKind::Bidirectional) },
    ];

    pub fn name(&self) -> String {
        let t = match self.teacher {
            None => "none",
            Some(TeacherKind::Bidirectional) => "bidirectional",
            Some(TeacherKind::Causal) => "causal",
        };
        format!("teacher={t},ode-init={}", if self.ode_init { "on" } else { "off" })
    }
}

/// Outputs of one distillation run.
pub struct Distilled<T> {
    pub student: ModelWeights<T>,
    pub history: Vec<DmdLossReport>,
}

/// Distill `student` against `teacher`.
pub fn distill<T: Scalar>(
    student: ModelWeights<T>,
    teacher: &ModelWeights<T>,
    kind: TeacherKind,
    dataset: &Dataset,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<Distilled<T>> {
    let dmd = DmdConfig { seed, ..cfg.dmd };
    let mut state = DistillState::new(student, teacher.clone(), kind, NoiseSchedule::cosine(teacher.config().max_t)?, dmd)?;
    let history = distill_loop(&mut state, dataset, cfg.dmd_iterations, None)?;
    Ok(Distilled { student: state.student, history })
}

/// Regression-initialized student for one seed.
pub fn init_student<T: Scalar>(teacher: &ModelWeights<T>, pairs: &OdePairs, cfg: &PipelineConfig, seed: u64) -> Result<(ModelWeights<T>, LossHistory)> {
    let run = regress_student(teacher.clone(), pairs, cfg.chunk, &TrainConfig { seed, ..cfg.regression }, None)?;
    Ok((run.weights, run.history))
}

/// Generate the teacher's ODE pairs with the pipeline's solver settings.
pub fn ode_pairs<T: Scalar>(teacher: &ModelWeights<T>, cfg: &PipelineConfig, seed: u64) -> Result<crate::ode::OdeGeneration> {
    let dims = [cfg.data.frames, cfg.data.height, cfg.data.width, 1];
    let ode = OdeConfig { seed, classes: teacher.config().null_cond(), guidance: cfg.eval.guidance, ..cfg.ode };
    generate_ode_pairs(&ScoreNet::bidirectional(teacher), &NoiseSchedule::cosine(teacher.config().max_t)?, dims, &ode)
}

/// One seed of the ablation grid. Returns `(cell, student, report)` per cell.
pub fn run_ablation<T: Scalar>(
    bidirectional: &ModelWeights<T>,
    causal: &ModelWeights<T>,
    pairs: &OdePairs,
    dataset: &Dataset,
    cfg: &PipelineConfig,
    seed: u64,
    mut progress: impl FnMut(&str),
) -> Result<Vec<(AblationCell, ModelWeights<T>, MetricReport)>> {
    progress("regression");
    let (regressed, _) = init_student(bidirectional, pairs, cfg, seed)?;
    let mut out = Vec::with_capacity(AblationCell::GRID.len());
    for cell in AblationCell::GRID {
        progress(&cell.name());
        let start = if cell.ode_init { regressed.clone() } else { bidirectional.clone() };
        let student = match cell.teacher {
            None => start,
            Some(kind) => {
                let teacher = if kind == TeacherKind::Causal { causal } else { bidirectional };
                distill(start, teacher, kind, dataset, cfg, seed)?.student
            }
        };
        let report = evaluate_student(student.clone(), dataset, cfg, &cell.name(), seed)?;
        out.push((cell, student, report));
    }
    Ok(out)
}

/// Deterministic rng for a named stage.
pub fn stage_rng(seed: u64, stage: &str) -> ChaCha8Rng {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
