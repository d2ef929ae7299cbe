//! DDPM substrate: linear noise schedule, forward corruption, clean-sample
//! estimation, the reverse posterior step, and pose normalization.
//!
//! Steps are 1-based throughout (`1 ..= T`), matching the usual notation.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        // beta_end is raised from the common 0.02 so that a 100-step chain
        // still ends close to the unit Gaussian prior (alpha_bar_T ~ 3e-5).
        ScheduleConfig {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.2,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty()
            || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0))
            || beta.windows(2).any(|w| w[1] < w[0])
        {
            return Err(Error::InvalidConfig(
                "betas must be non-decreasing and inside (0, 1)".into(),
            ));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let posterior_var = (0..beta.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])
            })
            .collect();
        Ok(NoiseSchedule {
            beta,
            alpha,
            alpha_bar,
            posterior_var,
        })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, t: usize) -> usize {
        assert!(
            (1..=self.steps()).contains(&t),
            "diffusion step {t} outside 1..={}",
            self.steps()
        );
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[self.idx(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[self.idx(t)]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[self.idx(t)]
    }

    /// Fixed reverse variance `β̃_t = β_t (1 − ᾱ_{t−1}) / (1 − ᾱ_t)` with `ᾱ_0 = 1`.
    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[self.idx(t)]
    }

    /// `∂ĥ₀/∂ε̂ = −√(1−ᾱ_t)/√ᾱ_t`.
    pub fn h0_eps_factor(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        -(1.0 - ab).sqrt() / ab.sqrt()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if (1..=self.steps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "diffusion step {t} outside 1..={}",
                self.steps()
            )))
        }
    }
}

/// A point on the forward chain, keeping the noise that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub h_t: Vec<f64>,
    pub t: usize,
    pub eps_used: Option<Vec<f64>>,
}

fn same_len(what: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            what,
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `h_t = √ᾱ_t h_0 + √(1−ᾱ_t) ε`.
pub fn forward_corrupt(h0: &[f64], t: usize, schedule: &NoiseSchedule, noise: &[f64]) -> Result<Vec<f64>> {
    same_len("noise", h0, noise)?;
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(h0.iter().zip(noise).map(|(h, e)| a * h + b * e).collect())
}

/// Forward corruption with internally drawn noise.
pub fn forward_corrupt_sampled(
    h0: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<DiffusionState> {
    let eps = standard_normal(rng, h0.len());
    let h_t = forward_corrupt(h0, t, schedule, &eps)?;
    Ok(DiffusionState {
        h_t,
        t,
        eps_used: Some(eps),
    })
}

/// `ĥ₀ = (h_t − √(1−ᾱ_t) ε̂) / √ᾱ_t`.
pub fn estimate_h0(h_t: &[f64], eps_pred: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    same_len("predicted noise", h_t, eps_pred)?;
    schedule.check_step(t)?;
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(h_t.iter().zip(eps_pred).map(|(h, e)| (h - b * e) / a).collect())
}

/// Posterior mean `μ = (h_t − β_t/√(1−ᾱ_t) ε̂)/√α_t`.
pub fn posterior_mean(h_t: &[f64], eps_pred: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    same_len("predicted noise", h_t, eps_pred)?;
    schedule.check_step(t)?;
    let c = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let s = 1.0 / schedule.alpha(t).sqrt();
    Ok(h_t.iter().zip(eps_pred).map(|(h, e)| s * (h - c * e)).collect())
}

/// One reverse step. Returns `(μ, h_{t−1})`; the noise is ignored at `t = 1`.
pub fn posterior_step(
    h_t: &[f64],
    eps_pred: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    noise: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    same_len("step noise", h_t, noise)?;
    let mu = posterior_mean(h_t, eps_pred, t, schedule)?;
    if t == 1 {
        let prev = mu.clone();
        return Ok((mu, prev));
    }
    let sd = schedule.posterior_var(t).sqrt();
    let prev = mu.iter().zip(noise).map(|(m, z)| m + sd * z).collect();
    Ok((mu, prev))
}

/// Per-dimension z-scoring of pose vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Dimensions whose spread falls below this are left unscaled.
const MIN_STD: f64 = 1e-6;

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Normalizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::InvalidConfig("cannot normalize an empty dataset".into()))?;
        let dim = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            same_len("pose", first, r)?;
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd < MIN_STD {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        let out = Normalizer { mean, std };
        out.validate()?;
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() {
            return Err(Error::DimensionMismatch {
                what: "normalizer std",
                expected: self.mean.len(),
                got: self.std.len(),
            });
        }
        if self.mean.iter().any(|m| !m.is_finite()) || self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::NonFinite("normalization statistics".into()));
        }
        Ok(())
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}
