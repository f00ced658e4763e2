//! Training plumbing shared by the teacher, student-initialization and
//! distillation loops.

use std::fmt::Write as _;
use std::path::Path;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::{DitVars, ModelWeights};
use crate::optim::AdamWConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Probability of replacing the condition with the null id.
    pub cond_dropout: f64,
    pub seed: u64,
    /// Iterations between checkpoints; 0 disables them.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 8,
            optimizer: AdamWConfig { lr: 1e-3, weight_decay: 0.0, ..Default::default() },
            cond_dropout: 0.1,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch size must be positive".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!("condition dropout {} outside [0, 1)", self.cond_dropout)));
        }
        Ok(())
    }
}

/// `(iteration, loss)` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossHistory {
    pub points: Vec<(usize, f64)>,
}

impl LossHistory {
    pub fn push(&mut self, iteration: usize, loss: f64) {
        self.points.push((iteration, loss));
    }

    pub fn first(&self) -> Option<f64> {
        self.points.first().map(|p| p.1)
    }

    pub fn last(&self) -> Option<f64> {
        self.points.last().map(|p| p.1)
    }

    /// Mean loss over iterations in `range`.
    pub fn window_mean(&self, range: std::ops::Range<usize>) -> Option<f64> {
        let v: Vec<f64> = self.points.iter().filter(|p| range.contains(&p.0)).map(|p| p.1).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,loss\n");
        for (i, l) in &self.points {
            let _ = writeln!(s, "{i},{l}");
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Trained weights with their loss history.
pub struct TrainRun<T> {
    pub weights: ModelWeights<T>,
    pub history: LossHistory,
}

/// Called with `(completed_iterations, weights)` at the checkpoint cadence.
pub type CheckpointFn<'a, T> = &'a mut dyn FnMut(usize, &ModelWeights<T>) -> Result<()>;

/// Records a loss with `build` on a fresh graph and adds its parameter
/// gradients into `grads`. Returns the loss value.
pub fn accumulate_grad<T: Scalar>(
    weights: &ModelWeights<T>,
    grads: &mut [Tensor<T>],
    build: impl FnOnce(&mut Graph<T>, &DitVars) -> Result<Var>,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = DitVars::trainable(&mut g, weights);
    let loss = build(&mut g, &vars)?;
    let value = g.scalar(loss).as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss is {value}")));
    }
    g.backward(loss).accumulate_params(grads);
    Ok(value)
}

/// Divide accumulated gradients by the batch size.
pub fn scale_grads<T: Scalar>(grads: &mut [Tensor<T>], factor: f64) {
    let f = T::from_f64_lossy(factor);
    for g in grads {
        for v in g.data_mut() {
            *v *= f;
        }
    }
}

pub fn zero_grads<T: Scalar>(grads: &mut [Tensor<T>]) {
    for g in grads {
        g.data_mut().fill(T::zero());
    }
}

pub(crate) fn guard(iteration: usize, what: &str, loss: f64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("{what} diverged at iteration {iteration}: loss {loss}")));
    }
    Ok(())
}
