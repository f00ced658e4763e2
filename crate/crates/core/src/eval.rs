//! Desk-scale quality and efficiency measurements.
//!
//! Frame quality is a kernel two-sample statistic: frames are projected onto
//! 64 fixed random directions and compared with an unbiased RBF-kernel MMD²
//! estimate whose bandwidth is the median pooled squared distance.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PROJECTION_DIMS: usize = 64;
/// Minimum frames per side accepted by [`frame_marginal_mmd`].
pub const MIN_FRAMES: usize = 100;
/// Frames per side beyond which inputs are thinned by even striding.
const MAX_FRAMES: usize = 600;

fn project<T: Scalar>(frames: &Tensor<T>, proj: &[f64], dims: usize) -> Vec<[f64; PROJECTION_DIMS]> {
    let row = frames.row_len();
    let n = frames.rows();
    let keep: Vec<usize> = if n > MAX_FRAMES { (0..MAX_FRAMES).map(|i| i * n / MAX_FRAMES).collect() } else { (0..n).collect() };
    let data = frames.data();
    keep.into_iter()
        .map(|i| {
            let f = &data[i * row..(i + 1) * row];
            let mut out = [0.0; PROJECTION_DIMS];
            for (p, &v) in f.iter().enumerate() {
                let v = v.as_f64();
                let r = &proj[p * dims..(p + 1) * dims];
                for (o, &w) in out.iter_mut().zip(r) {
                    *o += v * w;
                }
            }
            out
        })
        .collect()
}

fn sq_dist(a: &[f64; PROJECTION_DIMS], b: &[f64; PROJECTION_DIMS]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Order-independent sum: sorting fixes the accumulation order.
fn canonical_sum(mut v: Vec<f64>) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    v.into_iter().sum()
}

/// Unbiased MMD² between the frame marginals of two frame sets, clamped at 0.
///
/// Inputs are `(frames, ...)` tensors with equal per-frame size.
pub fn frame_marginal_mmd<T: Scalar>(samples: &Tensor<T>, reference: &Tensor<T>, seed: u64) -> Result<f64> {
    if samples.rows() < MIN_FRAMES || reference.rows() < MIN_FRAMES {
        return Err(Error::Metric(format!("mmd needs >= {MIN_FRAMES} frames per side, got {} and {}", samples.rows(), reference.rows())));
    }
    if samples.row_len() != reference.row_len() {
        return Err(Error::Shape(format!("frame sizes differ: {:?} vs {:?}", samples.shape(), reference.shape())));
    }
    let row = samples.row_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (row as f64).sqrt();
    let proj: Vec<f64> = (0..row * PROJECTION_DIMS)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect();
    let xs = project(samples, &proj, PROJECTION_DIMS);
    let ys = project(reference, &proj, PROJECTION_DIMS);

    let pooled: Vec<&[f64; PROJECTION_DIMS]> = xs.iter().chain(&ys).collect();
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]));
        }
    }
    dists.sort_unstable_by(f64::total_cmp);
    let median = dists[dists.len() / 2];
    let bw = if median > 0.0 { median } else { 1.0 };
    let k = |a: &[f64; PROJECTION_DIMS], b: &[f64; PROJECTION_DIMS]| (-sq_dist(a, b) / bw).exp();

    let within = |s: &[[f64; PROJECTION_DIMS]]| {
        let mut v = Vec::with_capacity(s.len() * s.len());
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    v.push(k(&s[i], &s[j]));
                }
            }
        }
        canonical_sum(v) / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = Vec::with_capacity(xs.len() * ys.len());
    for x in &xs {
        for y in &ys {
            cross.push(k(x, y));
        }
    }
    let cross = canonical_sum(cross) / (xs.len() * ys.len()) as f64;
    Ok((within(&xs) + within(&ys) - 2.0 * cross).max(0.0))
}

/// Per-chunk MMD of a set of streams against a per-chunk reference.
///
/// `streams` are `(frames, ...)` tensors with a whole number of chunks; the
/// sample set for chunk `c` pools chunk `c` of every stream.
pub fn degradation_curve<T: Scalar>(streams: &[Tensor<T>], chunk: usize, reference_per_index: impl Fn(usize) -> Tensor<T>, seed: u64) -> Result<Vec<f64>> {
    let first = streams.first().ok_or_else(|| Error::Metric("no streams".into()))?;
    let chunks = first.rows() / chunk;
    if chunks == 0 || streams.iter().any(|s| s.rows() != first.rows()) {
        return Err(Error::Metric("streams must share a positive whole number of chunks".into()));
    }
    (0..chunks)
        .map(|c| {
            let parts: Vec<Tensor<T>> = streams.iter().map(|s| s.slice_rows(c * chunk, (c + 1) * chunk)).collect::<Result<_>>()?;
            let refs: Vec<&Tensor<T>> = parts.iter().collect();
            frame_marginal_mmd(&Tensor::concat_rows(&refs)?, &reference_per_index(c), seed)
        })
        .collect()
}

/// Ordinary least-squares slope of `values` against their index.
pub fn ls_slope(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = values.iter().sum::<f64>() / n;
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &v) in values.iter().enumerate() {
        let dx = i as f64 - mx;
        num += dx * (v - my);
        den += dx * dx;
    }
    num / den
}

/// Mean absolute frame difference across chunk boundaries divided by the
/// same quantity within chunks. A constant stream yields 1.0.
pub fn boundary_discontinuity<T: Scalar>(stream: &Tensor<T>, chunk: usize) -> Result<f64> {
    let n = stream.rows();
    if chunk == 0 || n < 2 * chunk {
        return Err(Error::Metric(format!("boundary discontinuity needs >= 2 chunks of {chunk} frames, got {n} frames")));
    }
    let row = stream.row_len();
    let d = stream.data();
    let diff =
        |f: usize| d[f * row..(f + 1) * row].iter().zip(&d[(f - 1) * row..f * row]).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum::<f64>() / row as f64;
    let (mut across, mut na, mut within, mut nw) = (0.0, 0usize, 0.0, 0usize);
    for f in 1..n {
        if f % chunk == 0 {
            across += diff(f);
            na += 1;
        } else {
            within += diff(f);
            nw += 1;
        }
    }
    let across = across / na as f64;
    let within = if nw == 0 { 0.0 } else { within / nw as f64 };
    const TINY: f64 = 1e-12;
    match (across < TINY, within < TINY) {
        (true, true) => Ok(1.0),
        (false, true) => Err(Error::Metric("no within-chunk motion to normalize by".into())),
        _ => Ok(across / within),
    }
}

/// Quality and efficiency record of one model or ablation cell.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub label: String,
    pub mmd_per_cond: Vec<f64>,
    pub mmd_mean: f64,
    pub degradation: Vec<f64>,
    pub degradation_slope: f64,
    pub boundary_discontinuity: f64,
    pub latency_to_first_chunk_s: f64,
    pub throughput_fps: f64,
    /// Whether the two timing fields were measured (they are zero otherwise).
    pub timing_measured: bool,
    pub seed: u64,
    pub config_hash: String,
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn split(s: &str) -> Result<Vec<f64>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| x.trim().parse::<f64>().map_err(|e| Error::Metric(format!("bad number {x:?}: {e}")))).collect()
}

impl MetricReport {
    pub fn validate(&self) -> Result<()> {
        let scalars = [self.mmd_mean, self.degradation_slope, self.boundary_discontinuity, self.latency_to_first_chunk_s, self.throughput_fps];
        if scalars.iter().chain(&self.mmd_per_cond).chain(&self.degradation).any(|v| !v.is_finite()) {
            return Err(Error::Metric(format!("report {} has non-finite fields", self.label)));
        }
        Ok(())
    }

    /// `key = value` lines with fixed field names; floats use round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "label = {}", self.label);
        let _ = writeln!(s, "mmd_per_cond = {}", join(&self.mmd_per_cond));
        let _ = writeln!(s, "mmd_mean = {:?}", self.mmd_mean);
        let _ = writeln!(s, "degradation = {}", join(&self.degradation));
        let _ = writeln!(s, "degradation_slope = {:?}", self.degradation_slope);
        let _ = writeln!(s, "boundary_discontinuity = {:?}", self.boundary_discontinuity);
        let _ = writeln!(s, "latency_to_first_chunk_s = {:?}", self.latency_to_first_chunk_s);
        let _ = writeln!(s, "throughput_fps = {:?}", self.throughput_fps);
        let _ = writeln!(s, "timing_measured = {}", self.timing_measured);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Metric(format!("malformed line {line:?}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).cloned().ok_or_else(|| Error::Metric(format!("missing field {k}")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|e| Error::Metric(format!("{k}: {e}"))) };
        Ok(Self {
            label: get("label")?,
            mmd_per_cond: split(&get("mmd_per_cond")?)?,
            mmd_mean: num("mmd_mean")?,
            degradation: split(&get("degradation")?)?,
            degradation_slope: num("degradation_slope")?,
            boundary_discontinuity: num("boundary_discontinuity")?,
            latency_to_first_chunk_s: num("latency_to_first_chunk_s")?,
            throughput_fps: num("throughput_fps")?,
            timing_measured: get("timing_measured")?.parse().map_err(|e| Error::Metric(format!("timing_measured: {e}")))?,
            seed: get("seed")?.parse().map_err(|e| Error::Metric(format!("seed: {e}")))?,
            config_hash: get("config_hash")?,
        })
    }

    /// Degradation curve as `chunk,value` rows.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("chunk,value\n");
        for (i, v) in self.degradation.iter().enumerate() {
            let _ = writeln!(s, "{i},{v:?}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

const FEATURES: usize = 5;

/// Per-frame centroids with `x` taken as a circular mean, so a blob wrapping
/// across the vertical edges keeps a continuous position.
fn circular_centroids<T: Scalar>(video: &Tensor<T>) -> Vec<(f64, f64)> {
    let s = video.shape();
    let (h, w, c) = (s[1], s[2], s[3]);
    let lin = crate::data::centroids(video);
    video
        .data()
        .chunks(h * w * c)
        .zip(lin)
        .map(|(frame, (_, y))| {
            let (mut sn, mut cs) = (0.0, 0.0);
            for (i, px) in frame.chunks(c).enumerate() {
                let v = ((px[0].as_f64() + 1.0) / 2.0).clamp(0.0, 1.0);
                let a = 2.0 * std::f64::consts::PI * (i % w) as f64 / w as f64;
                sn += v * a.sin();
                cs += v * a.cos();
            }
            let a = sn.atan2(cs).rem_euclid(2.0 * std::f64::consts::PI);
            (a * w as f64 / (2.0 * std::f64::consts::PI), y)
        })
        .collect()
}

/// Summary motion statistics of a clip computed from blob centroids and mass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionStats {
    /// Mean horizontal centroid step, wrap-aware.
    pub vx: f64,
    /// Mean absolute horizontal centroid step, wrap-aware.
    pub abs_vx: f64,
    /// Mean absolute vertical centroid step.
    pub abs_vy: f64,
    /// Mean distance of the centroid from the frame center.
    pub radius: f64,
    /// Mean absolute change in total brightness between frames.
    pub mass_change: f64,
}

impl MotionStats {
    pub fn of<T: Scalar>(video: &Tensor<T>) -> Self {
        let s = video.shape();
        let (h, w) = (s[1] as f64, s[2] as f64);
        let c = circular_centroids(video);
        let mass: Vec<f64> = video.data().chunks(video.row_len().max(1)).map(|f| f.iter().map(|v| (v.as_f64() + 1.0) / 2.0).sum()).collect();
        let steps = c.len().saturating_sub(1).max(1) as f64;
        let (mut vx, mut ax, mut vy) = (0.0, 0.0, 0.0);
        for p in c.windows(2) {
            let mut dx = p[1].0 - p[0].0;
            if dx > w / 2.0 {
                dx -= w;
            } else if dx < -w / 2.0 {
                dx += w;
            }
            vx += dx;
            ax += dx.abs();
            vy += (p[1].1 - p[0].1).abs();
        }
        let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
        let radius = c.iter().map(|(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt()).sum::<f64>() / c.len().max(1) as f64;
        let mass_change = mass.windows(2).map(|m| (m[1] - m[0]).abs()).sum::<f64>() / steps;
        Self { vx: vx / steps, abs_vx: ax / steps, abs_vy: vy / steps, radius, mass_change }
    }

    fn features(&self) -> [f64; FEATURES] {
        [self.vx, self.abs_vx, self.abs_vy, self.radius, self.mass_change]
    }
}

/// Nearest-class-mean classifier over standardized [`MotionStats`].
#[derive(Clone, Debug, PartialEq)]
pub struct MotionClassifier {
    means: Vec<[f64; FEATURES]>,
    scale: [f64; FEATURES],
}

impl MotionClassifier {
    /// Fit on labeled clips; every class in `0..classes` needs one clip.
    pub fn fit<T: Scalar>(clips: &[(Tensor<T>, usize)], classes: usize) -> Result<Self> {
        let feats: Vec<([f64; FEATURES], usize)> = clips.iter().map(|(v, c)| (MotionStats::of(v).features(), *c)).collect();
        let mut scale = [0.0; FEATURES];
        let n = feats.len() as f64;
        for d in 0..FEATURES {
            let m = feats.iter().map(|f| f.0[d]).sum::<f64>() / n;
            scale[d] = (feats.iter().map(|f| (f.0[d] - m).powi(2)).sum::<f64>() / n).sqrt().max(1e-9);
        }
        let mut means = Vec::with_capacity(classes);
        for c in 0..classes {
            let of: Vec<&[f64; FEATURES]> = feats.iter().filter(|f| f.1 == c).map(|f| &f.0).collect();
            if of.is_empty() {
                return Err(Error::Metric(format!("no clips of class {c}")));
            }
            let mut m = [0.0; FEATURES];
            for f in &of {
                for d in 0..FEATURES {
                    m[d] += f[d] / of.len() as f64;
                }
            }
            means.push(m);
        }
        Ok(Self { means, scale })
    }

    /// Standardized distance of a clip to each class mean.
    pub fn distances<T: Scalar>(&self, video: &Tensor<T>) -> Vec<f64> {
        let f = MotionStats::of(video).features();
        self.means.iter().map(|m| (0..FEATURES).map(|d| ((f[d] - m[d]) / self.scale[d]).powi(2)).sum::<f64>().sqrt()).collect()
    }

    pub fn classify<T: Scalar>(&self, video: &Tensor<T>) -> usize {
        let d = self.distances(video);
        (0..d.len()).min_by(|&a, &b| d[a].total_cmp(&d[b])).expect("at least one class")
    }
}

/// Timing summary over repeated streaming runs.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchResult {
    /// Median seconds from starting a session to its first emitted chunk.
    pub latency_to_first_chunk_s: f64,
    /// Median steady-state frames per second after the first chunk.
    pub throughput_fps: f64,
    /// Per-run `(latency_s, frames_after_first, seconds_after_first)`.
    pub runs: Vec<(f64, usize, f64)>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Stream `chunks` chunks from `runs` fresh sessions (`factory(run)`).
pub fn bench_latency_throughput<T: Scalar>(
    mut factory: impl FnMut(usize) -> Result<crate::stream::GenerationSession<T>>,
    chunks: usize,
    runs: usize,
) -> Result<BenchResult> {
    if chunks < 2 || runs == 0 {
        return Err(Error::Metric("bench needs >= 2 chunks and >= 1 run".into()));
    }
    let mut out = Vec::with_capacity(runs);
    for r in 0..runs {
        let mut session = factory(r)?;
        let start = std::time::Instant::now();
        session.generate_chunk()?;
        let latency = start.elapsed().as_secs_f64();
        let rest = std::time::Instant::now();
        let mut frames = 0;
        for _ in 1..chunks {
            frames += session.generate_chunk()?.frames.rows();
        }
        out.push((latency, frames, rest.elapsed().as_secs_f64()));
    }
    Ok(BenchResult {
        latency_to_first_chunk_s: median(out.iter().map(|r| r.0).collect()),
        throughput_fps: median(out.iter().map(|r| r.1 as f64 / r.2).collect()),
        runs: out,
    })
}
