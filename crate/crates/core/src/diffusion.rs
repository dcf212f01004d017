//! Noise schedules, forward corruption, the DDPM reverse step, the
//! deterministic DDIM sampler and the noise-prediction loss.
//!
//! Every function here is pure and works in `f64`; networks only appear
//! behind the predictor closure handed to [`ddim_sample`].

use alloc::vec::Vec;

use crate::error::{check_shape, invalid, Error, Result};
use crate::tensor::Tensor;

/// Rank-3 latent grid `c × h × w`.
pub type LatentTensor = Tensor<f64>;
/// Rank-3 noise (true or predicted) with the shape of the latent it belongs to.
pub type NoisePrediction = Tensor<f64>;

/// Variance schedule and the constants derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(invalid!("schedule needs at least one step"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(invalid!(
                "beta bounds must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
            ));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(invalid!("every beta must lie in (0, 1)"));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = betas.iter().map(|b| libm::sqrt(*b)).collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            sigmas,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Reverse-step noise scales, `σ_t = √β_t`.
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < self.steps() {
            Ok(())
        } else {
            Err(Error::StepOutOfRange {
                step: t,
                total: self.steps(),
            })
        }
    }
}

/// `√ᾱ_t · z0 + √(1−ᾱ_t) · ε`.
pub fn forward_diffuse(
    z0: &LatentTensor,
    t: usize,
    eps: &NoisePrediction,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bars[t];
    let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    z0.zip_with(eps, |z, e| a * z + b * e)
}

/// One ancestral step `z_t → z_{t−1}`:
/// `(z_t − (1−α_t)/√(1−ᾱ_t) · ε̂) / √α_t + σ_t · noise`.
pub fn ddpm_reverse_step(
    z_t: &LatentTensor,
    t: usize,
    eps_pred: &NoisePrediction,
    schedule: &NoiseSchedule,
    noise: &NoisePrediction,
) -> Result<LatentTensor> {
    schedule.check_step(t)?;
    check_shape(z_t.shape(), eps_pred.shape())?;
    check_shape(z_t.shape(), noise.shape())?;
    if t == 0 && noise.data().iter().any(|&v| v != 0.0) {
        return Err(invalid!(
            "the final reverse step (t = 0) takes no injected noise"
        ));
    }
    let alpha = schedule.alphas[t];
    let coef = (1.0 - alpha) / libm::sqrt(1.0 - schedule.alpha_bars[t]);
    let inv = 1.0 / libm::sqrt(alpha);
    let sigma = schedule.sigmas[t];
    let data = z_t
        .data()
        .iter()
        .zip(eps_pred.data())
        .zip(noise.data())
        .map(|((&z, &e), &n)| inv * (z - coef * e) + sigma * n)
        .collect();
    Tensor::from_vec(z_t.shape(), data)
}

/// One-shot clean-latent estimate `(z_t − √(1−ᾱ_t) ε) / √ᾱ_t`.
pub fn predict_x0(
    z_t: &LatentTensor,
    t: usize,
    eps: &NoisePrediction,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    schedule.check_step(t)?;
    let ab = schedule.alpha_bars[t];
    let (a, b) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    z_t.zip_with(eps, |z, e| (z - b * e) / a)
}

/// Evenly spaced DDIM timesteps from `start` down to 0, both endpoints
/// included.
pub fn ddim_timesteps(start: usize, num_steps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 {
        return Err(invalid!("DDIM needs at least one step"));
    }
    if num_steps > start + 1 {
        return Err(invalid!(
            "{num_steps} DDIM steps requested but only {} timesteps are available",
            start + 1
        ));
    }
    if num_steps == 1 {
        return Ok(alloc::vec![start]);
    }
    let span = start as f64;
    let last = (num_steps - 1) as f64;
    Ok((0..num_steps)
        .map(|i| libm::round(span * (last - i as f64) / last) as usize)
        .collect())
}

/// Deterministic (η = 0) DDIM from `T−1` down to 0.
pub fn ddim_sample<P>(
    z_start: &LatentTensor,
    predictor: P,
    schedule: &NoiseSchedule,
    num_steps: usize,
) -> Result<LatentTensor>
where
    P: FnMut(&LatentTensor, usize) -> Result<NoisePrediction>,
{
    if num_steps > schedule.steps() {
        return Err(invalid!(
            "{num_steps} DDIM steps exceed the {} schedule steps",
            schedule.steps()
        ));
    }
    ddim_sample_from(
        z_start,
        predictor,
        schedule,
        schedule.steps() - 1,
        num_steps,
    )
}

/// Deterministic DDIM starting at timestep `start`. The last update maps to
/// the clean latent (`ᾱ = 1`).
pub fn ddim_sample_from<P>(
    z_start: &LatentTensor,
    mut predictor: P,
    schedule: &NoiseSchedule,
    start: usize,
    num_steps: usize,
) -> Result<LatentTensor>
where
    P: FnMut(&LatentTensor, usize) -> Result<NoisePrediction>,
{
    schedule.check_step(start)?;
    let steps = ddim_timesteps(start, num_steps)?;
    let mut z = z_start.clone();
    for (i, &t) in steps.iter().enumerate() {
        let eps = predictor(&z, t)?;
        check_shape(z.shape(), eps.shape())?;
        let x0 = predict_x0(&z, t, &eps, schedule)?;
        let ab_next = match steps.get(i + 1) {
            Some(&tn) => schedule.alpha_bars[tn],
            None => 1.0,
        };
        let (a, b) = (libm::sqrt(ab_next), libm::sqrt(1.0 - ab_next));
        z = x0.zip_with(&eps, |x, e| a * x + b * e)?;
    }
    Ok(z)
}

/// Mean squared error between true and predicted noise.
pub fn training_loss(eps: &NoisePrediction, eps_pred: &NoisePrediction) -> Result<f64> {
    check_shape(eps.shape(), eps_pred.shape())?;
    let n = eps.numel().max(1) as f64;
    Ok(eps
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.02, 1e-4).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn timesteps_cover_both_ends() {
        assert_eq!(ddim_timesteps(999, 10).unwrap()[0], 999);
        assert_eq!(*ddim_timesteps(999, 10).unwrap().last().unwrap(), 0);
        assert_eq!(
            ddim_timesteps(9, 10).unwrap(),
            (0..10).rev().collect::<Vec<_>>()
        );
        assert_eq!(ddim_timesteps(5, 1).unwrap(), alloc::vec![5]);
        assert!(ddim_timesteps(3, 5).is_err());
    }

    #[test]
    fn out_of_range_step() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let z = Tensor::zeros(&[1, 2, 2]);
        assert!(matches!(
            forward_diffuse(&z, 10, &z, &s),
            Err(Error::StepOutOfRange {
                step: 10,
                total: 10
            })
        ));
    }

    #[test]
    fn loss_edge_cases() {
        let ones = Tensor::full(&[2, 2, 2], 1.0);
        let zeros = Tensor::zeros(&[2, 2, 2]);
        assert_eq!(training_loss(&ones, &ones).unwrap(), 0.0);
        assert_eq!(training_loss(&ones, &zeros).unwrap(), 1.0);
        assert!(training_loss(&ones, &Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn final_step_rejects_noise() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let z = Tensor::full(&[1, 1, 1], 1.0);
        assert!(ddpm_reverse_step(&z, 0, &z, &s, &z).is_err());
        assert!(ddpm_reverse_step(&z, 1, &z, &s, &z).is_ok());
    }
}
