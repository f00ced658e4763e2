use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, MLP_RATIO};
use crate::container::{read_file, Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CVWT";
const VERSION: u32 = 1;

/// Parameter indices of one transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockIndex {
    pub ada_w: usize,
    pub ada_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub bo: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Stable name order and shapes of every parameter for a config.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub patch_w: usize,
    pub patch_b: usize,
    pub temb_w1: usize,
    pub temb_b1: usize,
    pub temb_w2: usize,
    pub temb_b2: usize,
    pub cond_table: usize,
    pub blocks: Vec<BlockIndex>,
    pub final_ada_w: usize,
    pub final_ada_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub skip_w: usize,
    pub skip_b: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Init {
    Xavier,
    Zero,
    Embedding,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        let mut add = |name: String, shape: Vec<usize>| {
            names.push(name);
            shapes.push(shape);
            names.len() - 1
        };
        let (d, pd) = (cfg.dim, cfg.patch_dim());
        let patch_w = add("patch_embed.weight".into(), vec![pd, d]);
        let patch_b = add("patch_embed.bias".into(), vec![1, d]);
        let temb_w1 = add("t_embed.fc1.weight".into(), vec![d, d]);
        let temb_b1 = add("t_embed.fc1.bias".into(), vec![1, d]);
        let temb_w2 = add("t_embed.fc2.weight".into(), vec![d, d]);
        let temb_b2 = add("t_embed.fc2.bias".into(), vec![1, d]);
        let cond_table = add("cond_embed.table".into(), vec![cfg.cond_vocab, d]);
        let blocks = (0..cfg.depth)
            .map(|l| {
                let p = |s: &str| format!("blocks.{l}.{s}");
                BlockIndex {
                    ada_w: add(p("ada.weight"), vec![d, 6 * d]),
                    ada_b: add(p("ada.bias"), vec![1, 6 * d]),
                    wq: add(p("attn.q.weight"), vec![d, d]),
                    wk: add(p("attn.k.weight"), vec![d, d]),
                    wv: add(p("attn.v.weight"), vec![d, d]),
                    wo: add(p("attn.out.weight"), vec![d, d]),
                    bo: add(p("attn.out.bias"), vec![1, d]),
                    w1: add(p("mlp.fc1.weight"), vec![d, MLP_RATIO * d]),
                    b1: add(p("mlp.fc1.bias"), vec![1, MLP_RATIO * d]),
                    w2: add(p("mlp.fc2.weight"), vec![MLP_RATIO * d, d]),
                    b2: add(p("mlp.fc2.bias"), vec![1, d]),
                }
            })
            .collect();
        let final_ada_w = add("final.ada.weight".into(), vec![d, 2 * d]);
        let final_ada_b = add("final.ada.bias".into(), vec![1, 2 * d]);
        let out_w = add("final.out.weight".into(), vec![d, pd]);
        let out_b = add("final.out.bias".into(), vec![1, pd]);
        let skip_w = add("final.skip.weight".into(), vec![d, pd]);
        let skip_b = add("final.skip.bias".into(), vec![1, pd]);
        Self { names, shapes, patch_w, patch_b, temb_w1, temb_b1, temb_w2, temb_b2, cond_table, blocks, final_ada_w, final_ada_b, out_w, out_b, skip_w, skip_b }
    }

    fn init_kind(&self, id: usize) -> Init {
        let name = &self.names[id];
        if id == self.cond_table {
            Init::Embedding
        } else if name.ends_with("bias") || name.contains(".ada.") || id == self.out_w || id == self.skip_w {
            Init::Zero
        } else {
            Init::Xavier
        }
    }
}

/// All learnable tensors of one transformer, addressable by stable names.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T> {
    config: ModelConfig,
    layout_names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

fn xavier<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
}

impl<T: Scalar> ModelWeights<T> {
    /// Standard initialization: Xavier projections, zeroed modulation and output head,
    /// so an untrained network predicts zeros.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let tensors = (0..layout.names.len())
            .map(|id| {
                let shape = &layout.shapes[id];
                match layout.init_kind(id) {
                    Init::Xavier => xavier(shape, rng),
                    Init::Zero => Tensor::zeros(shape),
                    Init::Embedding => Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-0.5..0.5))),
                }
            })
            .collect();
        Ok(Self { config, layout_names: layout.names, tensors })
    }

    /// Every tensor random with magnitude `scale`; used where zero-initialized
    /// heads would hide gradient paths.
    pub fn init_dense<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R, scale: f64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let tensors = layout
            .shapes
            .iter()
            .map(|shape| {
                let fan = shape[0].max(1) as f64;
                Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-1.0..1.0) * scale / fan.sqrt()))
            })
            .collect();
        Ok(Self { config, layout_names: layout.names, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.config)
    }

    pub fn names(&self) -> &[String] {
        &self.layout_names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.layout_names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Zero tensors with the shapes of every parameter.
    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights { config: self.config, layout_names: self.layout_names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }

    /// SHA-256 of the serialized container.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        let c = &self.config;
        for v in [c.frame_h, c.frame_w, c.channels, c.patch, c.dim, c.depth, c.heads, c.cond_vocab, c.max_t] {
            w.usize(v);
        }
        w.usize(self.tensors.len());
        for (name, t) in self.layout_names.iter().zip(&self.tensors) {
            w.usize(name.len());
            w.bytes(name.as_bytes());
            w.usize(t.shape().len());
            for &d in t.shape() {
                w.usize(d);
            }
            w.f32s(t.data().iter().map(|v| v.as_f64() as f32));
        }
        w.finish()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::default();
        w.bytes(&self.to_bytes());
        w.write_to(path)
    }

    pub fn from_bytes(buf: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::open(buf, path, MAGIC, VERSION)?;
        let mut f = [0usize; 9];
        for v in f.iter_mut() {
            *v = r.usize()?;
        }
        let config =
            ModelConfig { frame_h: f[0], frame_w: f[1], channels: f[2], patch: f[3], dim: f[4], depth: f[5], heads: f[6], cond_vocab: f[7], max_t: f[8] };
        config.validate().map_err(|e| r.bad(e.to_string()))?;
        let layout = ParamLayout::new(&config);
        let count = r.usize()?;
        if count != layout.names.len() {
            return Err(r.bad(format!("{count} tensors, config implies {}", layout.names.len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for (want_name, want_shape) in layout.names.iter().zip(&layout.shapes) {
            let len = r.usize()?;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.bad("tensor name is not utf-8"))?;
            if &name != want_name {
                return Err(r.bad(format!("tensor {name:?} where {want_name:?} expected")));
            }
            let rank = r.usize()?;
            let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            if &shape != want_shape {
                return Err(r.bad(format!("tensor {name} has shape {shape:?}, expected {want_shape:?}")));
            }
            let numel = shape.iter().product();
            let data = r.f32s(numel)?.into_iter().map(|v| T::from_f64_lossy(v as f64)).collect();
            tensors.push(Tensor::new(shape, data)?);
        }
        r.finish()?;
        Ok(Self { config, layout_names: layout.names, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }

    /// Overwrite every tensor with `other`'s values; configs must match.
    pub fn copy_from(&mut self, other: &Self) -> Result<()> {
        if self.config != other.config {
            return Err(Error::Config("weight copy between different configs".into()));
        }
        self.tensors.clone_from(&other.tensors);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { frame_h: 8, frame_w: 8, patch: 4, dim: 8, depth: 2, heads: 2, ..Default::default() }
    }

    #[test]
    fn serialization_roundtrip_is_bit_exact() {
        let w = ModelWeights::<f32>::init_dense(tiny(), &mut ChaCha8Rng::seed_from_u64(1), 1.0).unwrap();
        let bytes = w.to_bytes();
        let back = ModelWeights::<f32>::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, w);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_containers_are_rejected() {
        let w = ModelWeights::<f32>::init(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut bytes = w.to_bytes();
        assert!(ModelWeights::<f32>::from_bytes(&bytes[..bytes.len() - 1], Path::new("m")).is_err());
        bytes[0] = b'X';
        let err = ModelWeights::<f32>::from_bytes(&bytes, Path::new("m")).unwrap_err();
        assert!(matches!(err, Error::BadContainer { .. }));
    }

    #[test]
    fn untrained_head_is_zero() {
        let w = ModelWeights::<f32>::init(tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(w.get("final.out.weight").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(w.get("blocks.1.attn.q.weight").unwrap().data().iter().any(|&v| v != 0.0));
    }
}
