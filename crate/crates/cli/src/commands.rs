//! Command-line pipeline stages. Every stage records a manifest of its
//! inputs, outputs and effective settings next to its primary output.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cvd_core::data::Dataset;
use cvd_core::dmd::{save_history, TeacherKind};
use cvd_core::eval::bench_latency_throughput;
use cvd_core::model::ModelWeights;
use cvd_core::ode::OdePairs;
use cvd_core::pipeline::{distill, evaluate_student, init_student, ode_pairs, run_ablation, AblationCell};
use cvd_core::schedule::NoiseSchedule;
use cvd_core::score::{sample_clip, ScoreNet};
use cvd_core::stream::GenerationSession;
use cvd_core::teacher::{evaluate_teacher, finetune_causal_teacher, train_bidirectional};
use rand::SeedableRng;

use crate::config::Settings;
use crate::error::{Result, ServiceError};
use crate::manifest::Manifest;
use crate::server::{serve, Shared};

/// Default artifact directory when `CAUSVID_HOME` is unset.
pub const DEFAULT_HOME: &str = "causvid-artifacts";

pub fn home() -> PathBuf {
    std::env::var_os("CAUSVID_HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_HOME))
}

#[derive(Parser, Debug)]
#[command(name = "causvid", version, about = "Toy-scale causal video diffusion: training, distillation, streaming")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every random draw of the stage.
    #[arg(long)]
    pub seed: Option<u64>,
    /// INI settings file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Bidirectional,
    Causal,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic video dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        videos: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        static_fraction: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the bidirectional teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Also write sample-quality metrics.
        #[arg(long)]
        eval: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune a teacher with the block-causal mask and per-chunk noise.
    FinetuneCausal {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrate the teacher's deterministic sampler into regression pairs.
    GenOdePairs {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        solver_steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regress a causal student onto the ODE pairs.
    InitStudent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Distribution-matching distillation of a student.
    Distill {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, value_enum, default_value = "bidirectional")]
        teacher_kind: Kind,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stream chunks from a student into a dataset container.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, default_value_t = 5)]
        chunks: usize,
        #[arg(long, default_value_t = 0)]
        cond: usize,
        /// Condition switches as `chunk:cond`, applied before that chunk.
        #[arg(long = "switch", value_parser = parse_switch)]
        switches: Vec<(usize, usize)>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the websocket streaming server.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        max_sessions: Option<usize>,
        #[arg(long)]
        frame_budget: Option<u64>,
        #[arg(long)]
        heartbeat_ms: Option<u64>,
    },
    /// Quality metrics of a student (or, with --teacher-mode, a teacher).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "student")]
        label: String,
        #[arg(long)]
        teacher_mode: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time to first chunk and throughput versus full-clip teacher sampling.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long, default_value_t = 10)]
        chunks: usize,
        #[arg(long, default_value_t = 3)]
        runs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// The few-step ablation grid: ODE init on/off by teacher kind.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        causal: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "default")]
        grid: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_switch(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected chunk:cond, got {s:?}"))?;
    Ok((a.parse().map_err(|_| format!("bad chunk {a:?}"))?, b.parse().map_err(|_| format!("bad condition {b:?}"))?))
}

fn opt<V: ToString>(v: &Option<V>) -> Option<String> {
    v.as_ref().map(|x| x.to_string())
}

fn settings(common: &Common, flags: &[(&str, Option<String>)]) -> Result<(Settings, u64)> {
    let mut s = Settings::from_file(common.config.as_deref())?;
    let mut all = vec![("seed", opt(&common.seed))];
    all.extend(flags.iter().cloned());
    s.override_with(&all)?;
    let seed = s.pipeline.data_seed;
    Ok((s, seed))
}

fn output(out: &Option<PathBuf>, default: &str) -> Result<PathBuf> {
    let path = out.clone().unwrap_or_else(|| home().join(default));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| ServiceError::io(dir, e))?;
    }
    Ok(path)
}

fn load_weights(path: &Path) -> Result<ModelWeights<f32>> {
    Ok(ModelWeights::load(path)?)
}

fn load_data(path: &Path) -> Result<Dataset> {
    Ok(Dataset::load(path)?)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| ServiceError::io(path, e))
}

fn finish(m: &Manifest, primary: &Path) -> Result<()> {
    let p = m.write(primary)?;
    tracing::info!("wrote {} and {}", primary.display(), p.display());
    Ok(())
}

/// Run one command to completion.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, videos, frames, static_fraction, out } => {
            let (s, seed) =
                settings(&common, &[("data.videos", opt(&videos)), ("data.frames", opt(&frames)), ("data.static_fraction", opt(&static_fraction))])?;
            let out = output(&out, "data.cvds")?;
            let data = Dataset::generate(&s.pipeline.data, seed)?;
            data.save(&out)?;
            let mut m = Manifest::new("gen-data", seed, s.pipeline.hash(), s.applied.clone());
            m.output(&out)?;
            finish(&m, &out)
        }
        Command::TrainTeacher { common, data, iterations, batch_size, lr, eval, out } => {
            let (s, seed) = settings(&common, &[("teacher.iterations", opt(&iterations)), ("teacher.batch_size", opt(&batch_size)), ("teacher.lr", opt(&lr))])?;
            let out = output(&out, "teacher.cvwt")?;
            let dataset = load_data(&data)?;
            let cfg = &s.pipeline;
            let schedule = NoiseSchedule::cosine(cfg.model.max_t)?;
            let run = train_bidirectional::<f32>(cfg.model, &dataset, &cfg.teacher, &schedule, None)?;
            run.weights.save(&out)?;
            let loss = out.with_extension("loss.csv");
            run.history.save(&loss)?;
            let mut m = Manifest::new("train-teacher", seed, cfg.hash(), s.applied.clone());
            m.input(&data)?;
            m.output(&out)?;
            m.output(&loss)?;
            if eval {
                let metrics = evaluate_teacher(&run.weights, &dataset, cfg.eval.samples_per_cond, cfg.eval.teacher_steps, cfg.eval.guidance, &schedule, seed)?;
                let mp = out.with_extension("metrics.txt");
                metrics.save(&mp)?;
                m.output(&mp)?;
            }
            finish(&m, &out)
        }
        Command::FinetuneCausal { common, teacher, data, iterations, out } => {
            let (s, seed) = settings(&common, &[("causal.iterations", opt(&iterations))])?;
            let out = output(&out, "causal.cvwt")?;
            let w = load_weights(&teacher)?;
            let dataset = load_data(&data)?;
            let schedule = NoiseSchedule::cosine(w.config().max_t)?;
            let run = finetune_causal_teacher(w, &dataset, &s.pipeline.causal, s.pipeline.chunk, &schedule, None)?;
            run.weights.save(&out)?;
            let loss = out.with_extension("loss.csv");
            run.history.save(&loss)?;
            let mut m = Manifest::new("finetune-causal", seed, s.pipeline.hash(), s.applied.clone());
            m.input(&teacher)?;
            m.input(&data)?;
            m.output(&out)?;
            m.output(&loss)?;
            finish(&m, &out)
        }
        Command::GenOdePairs { common, teacher, count, solver_steps, out } => {
            let (s, seed) = settings(&common, &[("ode.pairs", opt(&count)), ("ode.solver_steps", opt(&solver_steps))])?;
            let out = output(&out, "pairs.cvop")?;
            let w = load_weights(&teacher)?;
            let mut cfg = s.pipeline.clone();
            cfg.model = *w.config();
            let gen = ode_pairs(&w, &cfg, seed)?;
            for skipped in &gen.skipped {
                tracing::warn!("skipped {skipped}");
            }
            gen.pairs.save(&out)?;
            let mut m = Manifest::new("gen-ode-pairs", seed, cfg.hash(), s.applied.clone());
            m.input(&teacher)?;
            m.output(&out)?;
            finish(&m, &out)
        }
        Command::InitStudent { common, teacher, pairs, iterations, out } => {
            let (s, seed) = settings(&common, &[("regression.iterations", opt(&iterations))])?;
            let out = output(&out, "student_init.cvwt")?;
            let w = load_weights(&teacher)?;
            let p = OdePairs::load(&pairs)?;
            let (student, history) = init_student(&w, &p, &s.pipeline, seed)?;
            student.save(&out)?;
            let loss = out.with_extension("loss.csv");
            history.save(&loss)?;
            let mut m = Manifest::new("init-student", seed, s.pipeline.hash(), s.applied.clone());
            m.input(&teacher)?;
            m.input(&pairs)?;
            m.output(&out)?;
            m.output(&loss)?;
            finish(&m, &out)
        }
        Command::Distill { common, student, teacher, teacher_kind, data, iterations, out } => {
            let (s, seed) = settings(&common, &[("dmd.iterations", opt(&iterations))])?;
            let out = output(&out, "student.cvwt")?;
            let kind = match teacher_kind {
                Kind::Bidirectional => TeacherKind::Bidirectional,
                Kind::Causal => TeacherKind::Causal,
            };
            let d = distill(load_weights(&student)?, &load_weights(&teacher)?, kind, &load_data(&data)?, &s.pipeline, seed)?;
            d.student.save(&out)?;
            let hist = out.with_extension("history.csv");
            save_history(&d.history, &hist)?;
            let mut m = Manifest::new("distill", seed, s.pipeline.hash(), s.applied.clone());
            m.input(&student)?;
            m.input(&teacher)?;
            m.input(&data)?;
            m.output(&out)?;
            m.output(&hist)?;
            finish(&m, &out)
        }
        Command::Generate { common, weights, chunks, cond, switches, out } => {
            let (s, seed) = settings(&common, &[])?;
            let out = output(&out, "stream.cvds")?;
            let w = Arc::new(load_weights(&weights)?);
            let mc = *w.config();
            let mut session = GenerationSession::new(w.clone(), NoiseSchedule::cosine(mc.max_t)?, s.pipeline.session(seed, cond))?;
            session.set_condition(cond)?;
            let mut parts = Vec::with_capacity(chunks);
            for i in 0..chunks {
                for &(_, c) in switches.iter().filter(|(at, _)| *at == i) {
                    session.set_condition(c)?;
                }
                parts.push(session.generate_chunk()?.frames);
            }
            let refs: Vec<_> = parts.iter().collect();
            let clip = cvd_core::Tensor::concat_rows(&refs)?;
            let mut ds = Dataset::empty(clip.rows(), mc.frame_h, mc.frame_w, mc.channels);
            ds.push(cond, &clip)?;
            ds.save(&out)?;
            let mut m = Manifest::new("generate", seed, s.pipeline.hash(), s.applied.clone());
            m.input(&weights)?;
            m.output(&out)?;
            finish(&m, &out)
        }
        Command::Serve { common, weights, bind, max_sessions, frame_budget, heartbeat_ms } => {
            let (mut s, _) = settings(
                &common,
                &[
                    ("server.bind", bind),
                    ("server.max_sessions", opt(&max_sessions)),
                    ("server.frame_budget", opt(&frame_budget)),
                    ("server.heartbeat_ms", opt(&heartbeat_ms)),
                ],
            )?;
            s.server.weights = weights.clone();
            let shared = Shared::new(load_weights(&weights)?, &s.server)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| ServiceError::io("tokio runtime", e))?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(s.server.bind).await.map_err(|e| ServiceError::io(s.server.bind.to_string(), e))?;
                tracing::info!("listening on ws://{}/ws", listener.local_addr().map_err(|e| ServiceError::io("listener", e))?);
                serve(listener, shared).await.map_err(|e| ServiceError::io("server", e))
            })
        }
        Command::Eval { common, weights, data, label, teacher_mode, out } => {
            let (s, seed) = settings(&common, &[])?;
            let out = output(&out, "report.txt")?;
            let w = load_weights(&weights)?;
            let dataset = load_data(&data)?;
            let mut cfg = s.pipeline.clone();
            cfg.model = *w.config();
            let mut m = Manifest::new("eval", seed, cfg.hash(), s.applied.clone());
            m.input(&weights)?;
            m.input(&data)?;
            if teacher_mode {
                let schedule = NoiseSchedule::cosine(w.config().max_t)?;
                evaluate_teacher(&w, &dataset, cfg.eval.samples_per_cond, cfg.eval.teacher_steps, cfg.eval.guidance, &schedule, seed)?.save(&out)?;
                m.output(&out)?;
            } else {
                let report = evaluate_student(w, &dataset, &cfg, &label, seed)?;
                report.save(&out)?;
                let curve = out.with_extension("curve.csv");
                write(&curve, &report.curve_csv())?;
                m.output(&out)?;
                m.output(&curve)?;
            }
            finish(&m, &out)
        }
        Command::Bench { common, weights, teacher, chunks, runs, out } => {
            let (s, seed) = settings(&common, &[])?;
            let out = output(&out, "bench.txt")?;
            let text = bench(&s, seed, &load_weights(&weights)?, &load_weights(&teacher)?, chunks, runs)?;
            write(&out, &text)?;
            let mut m = Manifest::new("bench", seed, s.pipeline.hash(), s.applied.clone());
            m.input(&weights)?;
            m.input(&teacher)?;
            m.timing_output(&out)?;
            finish(&m, &out)
        }
        Command::Ablate { common, teacher, causal, pairs, data, grid, out } => {
            if grid != "default" {
                return Err(ServiceError::Config(format!("unknown grid {grid:?}; only \"default\" is defined")));
            }
            let (s, seed) = settings(&common, &[])?;
            let dir = out.unwrap_or_else(|| home().join("ablation"));
            std::fs::create_dir_all(&dir).map_err(|e| ServiceError::io(&dir, e))?;
            let bi = load_weights(&teacher)?;
            let mut cfg = s.pipeline.clone();
            cfg.model = *bi.config();
            let results = run_ablation(&bi, &load_weights(&causal)?, &OdePairs::load(&pairs)?, &load_data(&data)?, &cfg, seed, |stage| {
                tracing::info!("ablation: {stage}")
            })?;
            let mut m = Manifest::new("ablate", seed, cfg.hash(), s.applied.clone());
            for p in [&teacher, &causal, &pairs, &data] {
                m.input(p)?;
            }
            let mut summary = String::from("cell,mmd_mean,degradation_slope,boundary_discontinuity\n");
            for (cell, _, report) in &results {
                let path = dir.join(format!("{}.txt", cell_file_stem(cell)));
                report.save(&path)?;
                m.output(&path)?;
                summary.push_str(&format!("\"{}\",{:?},{:?},{:?}\n", cell.name(), report.mmd_mean, report.degradation_slope, report.boundary_discontinuity));
            }
            let primary = dir.join("ablation.csv");
            write(&primary, &summary)?;
            m.output(&primary)?;
            finish(&m, &primary)
        }
    }
}

/// `teacher-bidirectional_ode-init-on` style file stem of a grid cell.
pub fn cell_file_stem(cell: &AblationCell) -> String {
    cell.name().replace('=', "-").replace(',', "_")
}

fn bench(s: &Settings, seed: u64, student: &ModelWeights<f32>, teacher: &ModelWeights<f32>, chunks: usize, runs: usize) -> Result<String> {
    let student = Arc::new(student.clone());
    let schedule = NoiseSchedule::cosine(student.config().max_t)?;
    let cfg = &s.pipeline;
    let r = bench_latency_throughput(|i| GenerationSession::new(student.clone(), schedule.clone(), cfg.session(seed + i as u64, 0)), chunks, runs)?;
    let net = ScoreNet::bidirectional(teacher);
    let m = teacher.config();
    let shape = [cfg.data.frames, m.frame_h, m.frame_w, m.channels];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        sample_clip::<f32, _, _>(&schedule, &net, &shape, 0, cfg.eval.teacher_steps, cfg.eval.guidance, Some(cvd_core::data::PIXEL_BOUND), &mut rng)?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let teacher_s = times[times.len() / 2];
    Ok(format!(
        "student_latency_to_first_chunk_s = {:?}\nstudent_throughput_fps = {:?}\nteacher_full_clip_s = {teacher_s:?}\nteacher_steps = {}\nclip_frames = {}\nfirst_chunk_faster = {}\n",
        r.latency_to_first_chunk_s,
        r.throughput_fps,
        cfg.eval.teacher_steps,
        cfg.data.frames,
        r.latency_to_first_chunk_s < teacher_s
    ))
}
