//! Discrete variance-preserving noise schedules and the pointwise diffusion
//! algebra built on them: forward noising, score reparameterization, the
//! denoising loss, guidance and the deterministic DDIM step.

use std::f64::consts::FRAC_PI_2;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Offset of the cosine schedule.
const COSINE_OFFSET: f64 = 0.008;
/// Per-step noise rate ceiling; also keeps `sigma[T] >= 0.999`.
const MAX_BETA: f64 = 0.999;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Cosine,
    Linear,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!("unknown schedule kind {other:?}"))),
        }
    }
}

/// Signal (`alpha`) and noise (`sigma`) coefficient tables for `t in 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    max_t: usize,
    alpha: Vec<f64>,
    sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(max_t: usize, kind: ScheduleKind) -> Result<Self> {
        if max_t < 2 {
            return Err(Error::Config(format!("schedule needs T >= 2, got {max_t}")));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let f = |t: usize| {
                    let x = (t as f64 / max_t as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2;
                    x.cos().powi(2)
                };
                (1..=max_t).map(|t| (1.0 - f(t) / f(t - 1)).min(MAX_BETA)).collect()
            }
            ScheduleKind::Linear => {
                let (lo, hi) = (1e-4 * 1000.0 / max_t as f64, 0.02 * 1000.0 / max_t as f64);
                (0..max_t).map(|i| (lo + (hi - lo) * i as f64 / (max_t - 1) as f64).min(MAX_BETA)).collect()
            }
        };
        let mut alpha = Vec::with_capacity(max_t + 1);
        let mut sigma = Vec::with_capacity(max_t + 1);
        let mut alpha_bar = 1.0f64;
        alpha.push(1.0);
        sigma.push(0.0);
        for b in betas {
            alpha_bar *= 1.0 - b;
            alpha.push(alpha_bar.sqrt());
            sigma.push((1.0 - alpha_bar).sqrt());
        }
        Ok(Self { max_t, alpha, sigma })
    }

    pub fn cosine(max_t: usize) -> Result<Self> {
        Self::build(max_t, ScheduleKind::Cosine)
    }

    pub fn max_t(&self) -> usize {
        self.max_t
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t > self.max_t {
            return Err(Error::Timestep { t, min: 0, max: self.max_t });
        }
        Ok(())
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// `alpha_t * x0 + sigma_t * eps`.
    pub fn forward_diffuse<T: Scalar>(&self, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(t)?;
        let a = T::from_f64_lossy(self.alpha[t]);
        let s = T::from_f64_lossy(self.sigma[t]);
        x0.zip_map(eps, |x, e| a * x + s * e)
    }

    /// Score `-eps_hat / sigma_t`; undefined at `t = 0`.
    pub fn score_from_eps<T: Scalar>(&self, eps_hat: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.check(t)?;
        if t == 0 || self.sigma[t] == 0.0 {
            return Err(Error::Timestep { t, min: 1, max: self.max_t });
        }
        let inv = T::from_f64_lossy(-1.0 / self.sigma[t]);
        Ok(eps_hat.map(|e| e * inv))
    }

    /// Clean-sample estimate implied by a noise prediction.
    pub fn x0_from_eps<T: Scalar>(&self, x_t: &Tensor<T>, eps_hat: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.check(t)?;
        if self.alpha[t] == 0.0 {
            return Err(Error::Timestep { t, min: 0, max: self.max_t });
        }
        let a = T::from_f64_lossy(self.alpha[t]);
        let s = T::from_f64_lossy(self.sigma[t]);
        x_t.zip_map(eps_hat, |x, e| (x - s * e) / a)
    }

    /// Noise implied by a clean-sample prediction; undefined at `t = 0`.
    pub fn eps_from_x0<T: Scalar>(&self, x_t: &Tensor<T>, x0_hat: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self.check(t)?;
        if t == 0 || self.sigma[t] == 0.0 {
            return Err(Error::Timestep { t, min: 1, max: self.max_t });
        }
        let a = T::from_f64_lossy(self.alpha[t]);
        let s = T::from_f64_lossy(self.sigma[t]);
        x_t.zip_map(x0_hat, |x, x0| (x - a * x0) / s)
    }

    /// One deterministic DDIM step from `t` to `t_prev`.
    pub fn ddim_step<T: Scalar>(&self, x_t: &Tensor<T>, eps_hat: &Tensor<T>, t: usize, t_prev: usize) -> Result<Tensor<T>> {
        self.check(t)?;
        if t_prev >= t {
            return Err(Error::Config(format!("ddim step needs t_prev < t, got {t_prev} >= {t}")));
        }
        let x0 = self.x0_from_eps(x_t, eps_hat, t)?;
        let a = T::from_f64_lossy(self.alpha[t_prev]);
        let s = T::from_f64_lossy(self.sigma[t_prev]);
        x0.zip_map(eps_hat, |x, e| a * x + s * e)
    }

    /// DDIM step with the clean estimate clamped to `[-bound, bound]` and the
    /// noise estimate re-derived from the clamped value.
    pub fn ddim_step_clipped<T: Scalar>(&self, x_t: &Tensor<T>, eps_hat: &Tensor<T>, t: usize, t_prev: usize, bound: f64) -> Result<Tensor<T>> {
        self.check(t)?;
        if t_prev >= t {
            return Err(Error::Config(format!("ddim step needs t_prev < t, got {t_prev} >= {t}")));
        }
        let b = T::from_f64_lossy(bound);
        let x0 = self.x0_from_eps(x_t, eps_hat, t)?.map(|v| v.max(-b).min(b));
        let eps = self.eps_from_x0(x_t, &x0, t)?;
        let a = T::from_f64_lossy(self.alpha[t_prev]);
        let s = T::from_f64_lossy(self.sigma[t_prev]);
        x0.zip_map(&eps, |x, e| a * x + s * e)
    }
}

/// Mean squared error over all elements.
pub fn denoising_loss<T: Scalar>(eps_hat: &Tensor<T>, eps: &Tensor<T>) -> Result<T> {
    eps_hat.ensure_same_shape(eps)?;
    let n = T::from_usize_lossy(eps.numel().max(1));
    Ok(eps_hat.data().iter().zip(eps.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n)
}

/// Classifier-free guidance: `uncond + w * (cond - uncond)`.
pub fn cfg_combine<T: Scalar>(eps_cond: &Tensor<T>, eps_uncond: &Tensor<T>, w: f64) -> Result<Tensor<T>> {
    let w = T::from_f64_lossy(w);
    eps_cond.zip_map(eps_uncond, |c, u| u + w * (c - u))
}

/// Descending DDIM grid of `steps` intervals from `start` to 0.
///
/// Every timestep in `required` replaces the nearest interior grid point so
/// that the returned grid visits them exactly.
pub fn ddim_grid(start: usize, steps: usize, required: &[usize]) -> Result<Vec<usize>> {
    if steps == 0 || start == 0 {
        return Err(Error::Config("ddim grid needs steps >= 1 and start >= 1".into()));
    }
    let mut grid: Vec<usize> = (0..=steps).map(|i| ((start as f64) * (1.0 - i as f64 / steps as f64)).round() as usize).collect();
    grid.dedup();
    for &r in required {
        if r > start {
            return Err(Error::Config(format!("required timestep {r} above grid start {start}")));
        }
        if grid.contains(&r) {
            continue;
        }
        let (pos, _) = grid
            .iter()
            .enumerate()
            .filter(|(_, &g)| g != start && g != 0 && !required.contains(&g))
            .min_by_key(|(_, &g)| g.abs_diff(r))
            .ok_or_else(|| Error::Config(format!("grid too coarse to include {r}")))?;
        grid[pos] = r;
    }
    grid.sort_unstable_by(|a, b| b.cmp(a));
    grid.dedup();
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_rejects_short_schedules() {
        assert!(NoiseSchedule::build(1, ScheduleKind::Cosine).is_err());
        assert!("sigmoid".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn invariants_hold_for_both_kinds() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            let s = NoiseSchedule::build(1000, kind).unwrap();
            assert_eq!(s.alpha(0), 1.0);
            assert_eq!(s.sigma(0), 0.0);
            for t in 0..=1000 {
                assert!((s.alpha(t).powi(2) + s.sigma(t).powi(2) - 1.0).abs() < 1e-9);
                if t > 0 {
                    assert!(s.alpha(t) <= s.alpha(t - 1));
                    assert!(s.sigma(t) >= s.sigma(t - 1));
                }
            }
        }
        assert!(NoiseSchedule::cosine(1000).unwrap().sigma(1000) >= 0.999);
    }

    #[test]
    fn cosine_alpha_500_matches_closed_form() {
        // No beta is clipped before t = 500, so the cumulative product equals
        // the closed-form ratio f(t)/f(0).
        let f = |t: f64| (((t / 1000.0) + 0.008) / 1.008 * FRAC_PI_2).cos().powi(2);
        let want = (f(500.0) / f(0.0)).sqrt();
        let s = NoiseSchedule::cosine(1000).unwrap();
        assert!((s.alpha(500) - want).abs() < 1e-9, "{} vs {want}", s.alpha(500));
    }

    #[test]
    fn forward_diffuse_examples() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x0 = Tensor::new(vec![2], vec![1.0f64, 1.0]).unwrap();
        let eps = Tensor::new(vec![2], vec![0.5f64, -0.5]).unwrap();
        assert_eq!(s.forward_diffuse(&x0, 0, &eps).unwrap(), x0);
        let zeros = Tensor::zeros(&[2]);
        let out = s.forward_diffuse(&zeros, 400, &eps).unwrap();
        assert_eq!(out.data(), &[0.5 * s.sigma(400), -0.5 * s.sigma(400)]);
        let f = |t: f64| (((t / 1000.0) + 0.008) / 1.008 * FRAC_PI_2).cos().powi(2);
        // At T=1000 the last beta hits the 0.999 ceiling.
        let abar = f(999.0) / f(0.0) * (1.0 - 0.999);
        let (a, sg) = (abar.sqrt(), (1.0 - abar).sqrt());
        let got = s.forward_diffuse(&x0, 1000, &eps).unwrap();
        assert!((got.data()[0] - (a + 0.5 * sg)).abs() < 1e-9);
        assert!((got.data()[1] - (a - 0.5 * sg)).abs() < 1e-9);
        assert!(s.forward_diffuse(&x0, 1001, &eps).is_err());
        assert!(s.forward_diffuse(&x0, 1, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn score_examples() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let t = (1..=1000).min_by(|&a, &b| (s.sigma(a) - 0.2).abs().total_cmp(&(s.sigma(b) - 0.2).abs())).unwrap();
        let e = Tensor::new(vec![1], vec![0.4f64]).unwrap();
        let score = s.score_from_eps(&e, t).unwrap();
        assert!((score.data()[0] + 0.4 / s.sigma(t)).abs() < 1e-12);
        assert_eq!(s.score_from_eps(&Tensor::<f64>::zeros(&[3]), 5).unwrap().data(), &[0.0; 3]);
        assert!(s.score_from_eps(&e, 0).is_err());
    }

    #[test]
    fn loss_and_guidance_examples() {
        let a = Tensor::new(vec![2], vec![1.0f64, 0.0]).unwrap();
        let z = Tensor::zeros(&[2]);
        assert_eq!(denoising_loss(&a, &z).unwrap(), 0.5);
        assert_eq!(denoising_loss(&a, &a).unwrap(), 0.0);
        assert!(denoising_loss(&a, &Tensor::zeros(&[3])).is_err());
        let c = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let u = Tensor::new(vec![1], vec![0.0f64]).unwrap();
        assert_eq!(cfg_combine(&c, &u, 3.5).unwrap().data(), &[3.5]);
        assert_eq!(cfg_combine(&c, &u, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&c, &u, 0.0).unwrap(), u);
    }

    #[test]
    fn ddim_step_examples() {
        let s = NoiseSchedule::cosine(1000).unwrap();
        let x0 = Tensor::new(vec![3], vec![0.3f64, -0.7, 0.9]).unwrap();
        let eps = Tensor::new(vec![3], vec![1.1f64, 0.2, -0.4]).unwrap();
        let xt = s.forward_diffuse(&x0, 600, &eps).unwrap();
        let back = s.ddim_step(&xt, &eps, 600, 0).unwrap();
        assert!(back.max_abs_diff(&x0).unwrap() < 1e-12);
        let scaled = s.ddim_step(&xt, &Tensor::zeros(&[3]), 600, 200).unwrap();
        let r = s.alpha(200) / s.alpha(600);
        for (a, b) in scaled.data().iter().zip(xt.data()) {
            assert!((a - r * b).abs() < 1e-12);
        }
        assert!(s.ddim_step(&xt, &eps, 200, 600).is_err());
        assert_eq!(s.ddim_step(&xt, &eps, 600, 100).unwrap(), s.ddim_step(&xt, &eps, 600, 100).unwrap());
    }

    #[test]
    fn ddim_grid_contains_student_timesteps() {
        let g = ddim_grid(999, 50, &[999, 748, 502, 247]).unwrap();
        for t in [999, 748, 502, 247, 0] {
            assert!(g.contains(&t), "{t} missing from {g:?}");
        }
        assert_eq!(g[0], 999);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(g.len(), 51);
    }
}
