//! Procedurally rendered labeled videos and the `CVDS` dataset container.
//!
//! Each condition id is a motion class of a single soft blob on a dark
//! background. Dynamics depend only on position and velocity, so a model that
//! sees the previous two frames can in principle continue them.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::container::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CVDS";
const VERSION: u32 = 1;

/// Pixel values lie in `[-PIXEL_BOUND, PIXEL_BOUND]`.
pub const PIXEL_BOUND: f64 = 1.0;

/// Number of motion classes the renderer knows.
pub const NUM_CLASSES: usize = 4;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["bounce", "drift-right", "orbit", "grow"];

/// Width of the moving blobs, in pixels.
const BLOB_SIGMA: f64 = 1.3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Motion {
    /// Vertical bounce between the top and bottom margins.
    Bounce { x: f64, y: f64, vy: f64 },
    /// Constant rightward drift, wrapping horizontally.
    DriftRight { x: f64, y: f64, vx: f64 },
    /// Circular orbit around the frame center.
    Orbit { radius: f64, angle: f64, omega: f64 },
    /// Centered blob whose width ping-pongs between two bounds.
    Grow { cx: f64, cy: f64, size: f64, rate: f64 },
    /// Motionless blob (image-as-video augmentation).
    Static { x: f64, y: f64 },
}

/// Everything needed to render one video.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSpec {
    pub condition_id: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Motion parameters; drawn from the render seed when absent.
    pub motion: Option<Motion>,
}

impl SceneSpec {
    pub fn new(condition_id: usize, frames: usize, height: usize, width: usize) -> Self {
        Self { condition_id, frames, height, width, channels: 1, motion: None }
    }

    pub fn validate(&self) -> Result<()> {
        if self.condition_id >= NUM_CLASSES {
            return Err(Error::Condition(self.condition_id));
        }
        if self.frames == 0 || self.height < 8 || self.width < 8 || self.channels == 0 {
            return Err(Error::Config(format!("scene dims {}x{}x{}x{} too small", self.frames, self.height, self.width, self.channels)));
        }
        Ok(())
    }

    /// Draw class-appropriate motion parameters.
    pub fn sample_motion<R: Rng + ?Sized>(&self, rng: &mut R) -> Motion {
        let (h, w) = (self.height as f64, self.width as f64);
        let sign = |rng: &mut R| if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        match self.condition_id {
            0 => Motion::Bounce { x: w / 2.0 + rng.gen_range(-1.5..1.5), y: rng.gen_range(3.0..h - 3.0), vy: sign(rng) * rng.gen_range(0.7..1.1) },
            1 => Motion::DriftRight { x: rng.gen_range(0.0..w), y: h / 2.0 + rng.gen_range(-1.5..1.5), vx: rng.gen_range(0.5..0.9) },
            2 => {
                Motion::Orbit { radius: rng.gen_range(0.28..0.34) * h.min(w), angle: rng.gen_range(0.0..2.0 * PI), omega: sign(rng) * rng.gen_range(0.25..0.4) }
            }
            _ => Motion::Grow {
                cx: (w - 1.0) / 2.0 + rng.gen_range(-0.5..0.5),
                cy: (h - 1.0) / 2.0 + rng.gen_range(-0.5..0.5),
                size: rng.gen_range(0.9..2.6),
                rate: sign(rng) * rng.gen_range(0.12..0.2),
            },
        }
    }
}

/// Blob center and width in frame `f`.
fn blob_at(m: &Motion, f: usize, h: f64, w: f64) -> (f64, f64, f64) {
    let f = f as f64;
    match *m {
        Motion::Bounce { x, y, vy } => {
            // reflect inside [lo, hi]
            let (lo, hi) = (2.0, h - 3.0);
            let span = hi - lo;
            let p = (y - lo + vy * f).rem_euclid(2.0 * span);
            let y = if p <= span { lo + p } else { lo + 2.0 * span - p };
            (x, y, BLOB_SIGMA)
        }
        Motion::DriftRight { x, y, vx } => ((x + vx * f).rem_euclid(w), y, BLOB_SIGMA),
        Motion::Orbit { radius, angle, omega } => {
            let a = angle + omega * f;
            ((w - 1.0) / 2.0 + radius * a.cos(), (h - 1.0) / 2.0 + radius * a.sin(), BLOB_SIGMA)
        }
        Motion::Grow { cx, cy, size, rate } => {
            let (lo, hi) = (0.8, 2.8);
            let span = hi - lo;
            let p = (size - lo + rate * f).rem_euclid(2.0 * span);
            let s = if p <= span { lo + p } else { lo + 2.0 * span - p };
            (cx, cy, s)
        }
        Motion::Static { x, y } => (x, y, BLOB_SIGMA),
    }
}

/// Render a video of shape `(frames, height, width, channels)` with values in `[-1, 1]`.
pub fn render_video(spec: &SceneSpec, seed: u64) -> Result<Tensor<f32>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motion = spec.motion.unwrap_or_else(|| spec.sample_motion(&mut rng));
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let wrap = matches!(motion, Motion::DriftRight { .. });
    let mut data = Vec::with_capacity(spec.frames * h * w * c);
    for f in 0..spec.frames {
        let (bx, by, s) = blob_at(&motion, f, h as f64, w as f64);
        for y in 0..h {
            for x in 0..w {
                let mut dx = (x as f64 - bx).abs();
                if wrap {
                    dx = dx.min(w as f64 - dx);
                }
                let dy = y as f64 - by;
                let v = -1.0 + 2.0 * (-(dx * dx + dy * dy) / (2.0 * s * s)).exp();
                let v = v.clamp(-1.0, 1.0) as f32;
                data.extend(std::iter::repeat(v).take(c));
            }
        }
    }
    Tensor::new(vec![spec.frames, h, w, c], data)
}

/// Intensity-weighted `(x, y)` centroid of each frame in pixel coordinates.
pub fn centroids<T: Scalar>(video: &Tensor<T>) -> Vec<(f64, f64)> {
    let s = video.shape();
    let (h, w, c) = (s[1], s[2], s[3]);
    video
        .data()
        .chunks(h * w * c)
        .map(|frame| {
            let (mut sx, mut sy, mut tot) = (0.0, 0.0, 0.0);
            for (i, px) in frame.chunks(c).enumerate() {
                let v = ((px[0].as_f64() + 1.0) / 2.0).clamp(0.0, 1.0);
                sx += v * (i % w) as f64;
                sy += v * (i / w) as f64;
                tot += v;
            }
            if tot <= 0.0 {
                ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0)
            } else {
                (sx / tot, sy / tot)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetConfig {
    pub videos: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Fraction of videos replaced by static scenes (same condition id).
    pub static_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { videos: 400, frames: 20, height: 16, width: 16, classes: NUM_CLASSES, static_fraction: 0.0 }
    }
}

/// In-memory dataset of equally shaped single-channel videos.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    conds: Vec<u32>,
    payload: Vec<f32>,
}

fn video_seed(seed: u64, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

impl Dataset {
    /// Render a class-balanced dataset: video `i` has condition `i % classes`.
    pub fn generate(cfg: &DatasetConfig, seed: u64) -> Result<Self> {
        if cfg.classes == 0 || cfg.classes > NUM_CLASSES || cfg.videos == 0 {
            return Err(Error::Config(format!("dataset needs 1..={NUM_CLASSES} classes and at least one video")));
        }
        if !(0.0..=1.0).contains(&cfg.static_fraction) {
            return Err(Error::Config("static fraction outside [0, 1]".into()));
        }
        let mut ds = Self::empty(cfg.frames, cfg.height, cfg.width, 1);
        let mut aug = ChaCha8Rng::seed_from_u64(seed ^ 0x5747_4943);
        for i in 0..cfg.videos {
            let class = i % cfg.classes;
            let mut spec = SceneSpec::new(class, cfg.frames, cfg.height, cfg.width);
            if cfg.static_fraction > 0.0 && aug.gen_bool(cfg.static_fraction) {
                spec.motion = Some(Motion::Static { x: aug.gen_range(3.0..cfg.width as f64 - 3.0), y: aug.gen_range(3.0..cfg.height as f64 - 3.0) });
            }
            ds.push(class, &render_video(&spec, video_seed(seed, i))?)?;
        }
        Ok(ds)
    }

    pub fn empty(frames: usize, height: usize, width: usize, channels: usize) -> Self {
        Self { frames, height, width, channels, conds: Vec::new(), payload: Vec::new() }
    }

    pub fn push(&mut self, cond: usize, video: &Tensor<f32>) -> Result<()> {
        if video.shape() != [self.frames, self.height, self.width, self.channels] {
            return Err(Error::Shape(format!("video {:?} does not fit dataset", video.shape())));
        }
        self.conds.push(cond as u32);
        self.payload.extend_from_slice(video.data());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.conds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conds.is_empty()
    }

    /// `(frames, height, width, channels)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.frames, self.height, self.width, self.channels)
    }

    fn video_len(&self) -> usize {
        self.frames * self.height * self.width * self.channels
    }

    pub fn cond(&self, i: usize) -> usize {
        self.conds[i] as usize
    }

    pub fn conds(&self) -> impl Iterator<Item = usize> + '_ {
        self.conds.iter().map(|&c| c as usize)
    }

    pub fn video<T: Scalar>(&self, i: usize) -> Tensor<T> {
        let n = self.video_len();
        let data = self.payload[i * n..(i + 1) * n].iter().map(|&v| T::from_f64_lossy(v as f64)).collect();
        Tensor::new(vec![self.frames, self.height, self.width, self.channels], data).expect("dataset video shape")
    }

    /// Indices of videos with condition `cond`.
    pub fn indices_of(&self, cond: usize) -> Vec<usize> {
        self.conds().enumerate().filter(|&(_, c)| c == cond).map(|(i, _)| i).collect()
    }

    /// Split off the last `fraction` of each class as a held-out set.
    pub fn split(&self, fraction: f64) -> (Self, Self) {
        let mut train = Self::empty(self.frames, self.height, self.width, self.channels);
        let mut held = train.clone();
        let classes: std::collections::BTreeSet<usize> = self.conds().collect();
        for c in classes {
            let idx = self.indices_of(c);
            let cut = idx.len() - ((idx.len() as f64 * fraction).round() as usize).min(idx.len());
            for (j, &i) in idx.iter().enumerate() {
                let dst = if j < cut { &mut train } else { &mut held };
                dst.push(c, &self.video(i)).expect("same dims");
            }
        }
        (train, held)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        for v in [self.len(), self.frames, self.height, self.width, self.channels] {
            w.usize(v);
        }
        let n = self.video_len();
        for (i, &c) in self.conds.iter().enumerate() {
            w.u32(c);
            w.f32s(self.payload[i * n..(i + 1) * n].iter().copied());
        }
        w.finish()
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::open(buf, path, MAGIC, VERSION)?;
        let count = r.usize()?;
        let (frames, height, width, channels) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
        let n = frames * height * width * channels;
        let expected = count.checked_mul(4 + 4 * n).and_then(|p| p.checked_add(28)).ok_or_else(|| r.bad("header sizes overflow"))?;
        if buf.len() != expected {
            return Err(r.bad(format!("container of {} bytes, header implies {expected}", buf.len())));
        }
        let mut ds = Self::empty(frames, height, width, channels);
        for _ in 0..count {
            let cond = r.u32()?;
            let values = r.f32s(n)?;
            if let Some(bad) = values.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
                return Err(r.bad(format!("pixel value {bad} outside [-1, 1]")));
            }
            ds.conds.push(cond);
            ds.payload.extend_from_slice(&values);
        }
        r.finish()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::default();
        w.bytes(&self.to_bytes());
        w.write_to(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }

    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Seeded uniform sampler over video indices.
    pub fn sampler(&self, seed: u64) -> BatchSampler {
        BatchSampler { rng: ChaCha8Rng::seed_from_u64(seed), len: self.len() }
    }

    /// All frames of the given videos as one `(frames, H, W, C)` tensor.
    pub fn frames_of<T: Scalar>(&self, videos: &[usize]) -> Tensor<T> {
        let parts: Vec<Tensor<T>> = videos.iter().map(|&i| self.video(i)).collect();
        let refs: Vec<&Tensor<T>> = parts.iter().collect();
        Tensor::concat_rows(&refs).expect("same dims")
    }
}

/// Reproducible uniform sampling of video indices.
pub struct BatchSampler {
    rng: ChaCha8Rng,
    len: usize,
}

impl BatchSampler {
    pub fn next_index(&mut self) -> usize {
        self.rng.gen_range(0..self.len)
    }

    pub fn batch(&mut self, size: usize) -> Vec<usize> {
        (0..size).map(|_| self.next_index()).collect()
    }
}
