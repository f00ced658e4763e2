//! INI settings. Keys are `section.key` (or bare keys in the general
//! section); command-line flags are applied after the file.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use cvd_core::pipeline::PipelineConfig;

use crate::error::{Result, ServiceError};
use crate::server::ServerConfig;

/// Effective settings after file and flag overrides.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub pipeline: PipelineConfig,
    pub server: ServerConfig,
    /// Every override applied, by key, for the manifest.
    pub applied: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self { pipeline: PipelineConfig::default(), server: ServerConfig::default(), applied: BTreeMap::new() }
    }
}

/// `section.key = value` pairs in file order.
pub fn read_ini(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| ServiceError::io(path, e))?;
    parse_ini(&text)
}

pub fn parse_ini(text: &str) -> Result<Vec<(String, String)>> {
    let ini = ini::Ini::load_from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
    let mut out = Vec::new();
    for (section, props) in ini.iter() {
        for (k, v) in props.iter() {
            let key = match section {
                Some(s) => format!("{s}.{k}"),
                None => k.to_string(),
            };
            out.push((key, v.to_string()));
        }
    }
    Ok(out)
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| ServiceError::Config(format!("{key}: cannot parse {value:?}")))
}

impl Settings {
    pub fn from_file(path: Option<&Path>) -> Result<Self> {
        let mut s = Self::default();
        if let Some(p) = path {
            for (k, v) in read_ini(p)? {
                s.set(&k, &v)?;
            }
        }
        Ok(s)
    }

    /// Apply one override; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.pipeline;
        match key {
            "seed" => {
                let seed: u64 = parse(key, value)?;
                p.teacher.seed = seed;
                p.causal.seed = seed;
                p.regression.seed = seed;
                p.dmd.seed = seed;
                p.ode.seed = seed;
                p.data_seed = seed;
            }
            "chunk" => {
                p.chunk = parse(key, value)?;
                p.dmd.chunk = p.chunk;
                self.server.chunk = p.chunk;
            }
            "data.videos" => p.data.videos = parse(key, value)?,
            "data.frames" => p.data.frames = parse(key, value)?,
            "data.height" => {
                p.data.height = parse(key, value)?;
                p.model.frame_h = p.data.height;
            }
            "data.width" => {
                p.data.width = parse(key, value)?;
                p.model.frame_w = p.data.width;
            }
            "data.static_fraction" => p.data.static_fraction = parse(key, value)?,
            "model.patch" => p.model.patch = parse(key, value)?,
            "model.dim" => p.model.dim = parse(key, value)?,
            "model.depth" => p.model.depth = parse(key, value)?,
            "model.heads" => p.model.heads = parse(key, value)?,
            "teacher.iterations" => p.teacher.iterations = parse(key, value)?,
            "teacher.batch_size" => p.teacher.batch_size = parse(key, value)?,
            "teacher.lr" => p.teacher.optimizer.lr = parse(key, value)?,
            "teacher.cond_dropout" => p.teacher.cond_dropout = parse(key, value)?,
            "causal.iterations" => p.causal.iterations = parse(key, value)?,
            "causal.batch_size" => p.causal.batch_size = parse(key, value)?,
            "causal.lr" => p.causal.optimizer.lr = parse(key, value)?,
            "ode.pairs" => p.ode.count = parse(key, value)?,
            "ode.solver_steps" => p.ode.solver_steps = parse(key, value)?,
            "regression.iterations" => p.regression.iterations = parse(key, value)?,
            "regression.batch_size" => p.regression.batch_size = parse(key, value)?,
            "regression.lr" => p.regression.optimizer.lr = parse(key, value)?,
            "dmd.iterations" => p.dmd_iterations = parse(key, value)?,
            "dmd.batch_size" => p.dmd.batch_size = parse(key, value)?,
            "dmd.ttur_ratio" => p.dmd.ttur_ratio = parse(key, value)?,
            "dmd.generator_lr" => p.dmd.generator_optimizer.lr = parse(key, value)?,
            "dmd.fake_lr" => p.dmd.fake_optimizer.lr = parse(key, value)?,
            "guidance" => {
                let w: f64 = parse(key, value)?;
                p.dmd.guidance = w;
                p.eval.guidance = w;
            }
            "eval.samples_per_cond" => p.eval.samples_per_cond = parse(key, value)?,
            "eval.teacher_steps" => p.eval.teacher_steps = parse(key, value)?,
            "eval.long_multiple" => p.eval.long_multiple = parse(key, value)?,
            "eval.degradation_streams" => p.eval.degradation_streams = parse(key, value)?,
            "server.bind" => self.server.bind = parse(key, value)?,
            "server.max_sessions" => self.server.max_sessions = parse(key, value)?,
            "server.frame_budget" => self.server.frame_budget = parse(key, value)?,
            "server.heartbeat_ms" => self.server.heartbeat = Duration::from_millis(parse(key, value)?),
            _ => return Err(ServiceError::Config(format!("unknown setting {key:?}"))),
        }
        self.applied.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Apply flag values that were given.
    pub fn override_with(&mut self, flags: &[(&str, Option<String>)]) -> Result<()> {
        for (k, v) in flags {
            if let Some(v) = v {
                self.set(k, v)?;
            }
        }
        self.pipeline.validate()?;
        self.server.window_chunks = self.pipeline.window_chunks();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_become_prefixes_and_flags_win() {
        let kv = parse_ini("seed = 4\n[teacher]\niterations = 12\nlr = 0.01\n[data]\nvideos=8\n").unwrap();
        let mut s = Settings::default();
        for (k, v) in &kv {
            s.set(k, v).unwrap();
        }
        assert_eq!(s.pipeline.teacher.iterations, 12);
        assert_eq!(s.pipeline.teacher.optimizer.lr, 0.01);
        assert_eq!(s.pipeline.dmd.seed, 4);
        s.override_with(&[("teacher.iterations", Some("30".into())), ("data.videos", None)]).unwrap();
        assert_eq!(s.pipeline.teacher.iterations, 30);
        assert_eq!(s.pipeline.data.videos, 8);
        assert_eq!(s.applied["teacher.iterations"], "30");
    }

    #[test]
    fn bad_keys_and_values_are_rejected() {
        let mut s = Settings::default();
        assert!(s.set("teacher.iterationz", "3").is_err());
        assert!(s.set("teacher.iterations", "three").is_err());
        assert!(s.override_with(&[("chunk", Some("3".into()))]).is_err());
    }
}
