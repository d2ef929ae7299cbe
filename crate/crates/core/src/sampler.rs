//! Reverse-process sampling with optional physics guidance: a posterior-mean
//! offset, or the spherical-Gaussian constrained step that keeps every
//! guided sample on the sphere of radius `√n·σ_t` around the posterior mean.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{estimate_h0, posterior_mean, standard_normal, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, SpatialIndex};
use crate::kinematics::{forward_kinematics, HandPose, KinematicHandModel};
use crate::model::GraspModel;
use crate::objectives::{evaluate_constraints, evaluate_on_fk, ConstraintConfig, ConstraintWeights};
use crate::parallel::{try_map_indexed, Exec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    #[default]
    None,
    Offset,
    Dsg,
}

impl GuidanceMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GuidanceMode::None => "none",
            GuidanceMode::Offset => "offset",
            GuidanceMode::Dsg => "dsg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    /// Offset-mode strength `s`.
    pub strength: f64,
    /// DSG guidance rate `g_r` in `[0, 1]`.
    pub rate: f64,
    /// Guidance weights; `None` uses the global constraint weights.
    pub weights: Option<ConstraintWeights>,
    /// Clamp joint angles of the final pose into their limits.
    pub clamp_final: bool,
    /// Treat the predicted noise as constant when differentiating the clean
    /// estimate with respect to the noisy pose.
    pub freeze_eps_jacobian: bool,
    /// Only guide steps `t <= max_t` (all steps when unset).
    pub max_t: Option<usize>,
    /// Guide with the penetration energy clamped at zero.
    pub erf_hinge: bool,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            mode: GuidanceMode::None,
            strength: 1.0,
            rate: 0.1,
            weights: None,
            clamp_final: true,
            freeze_eps_jacobian: true,
            max_t: None,
            erf_hinge: false,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::InvalidConfig(format!("guidance rate {} outside [0, 1]", self.rate)));
        }
        if !(self.strength >= 0.0 && self.strength.is_finite()) {
            return Err(Error::InvalidConfig("guidance strength must be finite and >= 0".into()));
        }
        if let Some(w) = &self.weights {
            w.validate()?;
        }
        Ok(())
    }

    pub fn constraints(&self, global: &ConstraintConfig) -> ConstraintConfig {
        let mut c = match self.weights {
            Some(w) => global.with_weights(w),
            None => *global,
        };
        c.erf_hinge |= self.erf_hinge;
        c
    }
}

/// Offset-mode update: `μ̃ = μ − s·σ²·g`, then `μ̃ + σ·noise` (noise unused at `t = 1`).
pub fn offset_step(mu: &[f64], var: f64, grad: &[f64], strength: f64, noise: &[f64], t: usize) -> Vec<f64> {
    let sd = var.sqrt();
    mu.iter()
        .zip(grad)
        .zip(noise)
        .map(|((m, g), z)| {
            let shifted = m - strength * var * g;
            if t == 1 {
                shifted
            } else {
                shifted + sd * z
            }
        })
        .collect()
}

/// Result of one spherical-constrained step.
#[derive(Debug, Clone, PartialEq)]
pub struct DsgStep {
    pub h_prev: Vec<f64>,
    /// The blended direction vanished and the plain posterior step was used.
    pub fallback: bool,
}

/// `d_m = d_sample + g_r (d* − d_sample)` with `d_sample = σ·noise` and
/// `d* = −√n·σ·ĝ`; the step lands at `μ + r·d_m/‖d_m‖`, `r = √n·σ`.
pub fn dsg_step(mu: &[f64], sigma: f64, grad: &[f64], rate: f64, noise: &[f64]) -> DsgStep {
    let n = mu.len() as f64;
    let r = n.sqrt() * sigma;
    let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let d_star: Vec<f64> = if gnorm > 0.0 {
        grad.iter().map(|g| -r * g / gnorm).collect()
    } else {
        vec![0.0; grad.len()]
    };
    let d_m: Vec<f64> = noise
        .iter()
        .zip(&d_star)
        .map(|(z, d)| {
            let ds = sigma * z;
            ds + rate * (d - ds)
        })
        .collect();
    let norm = d_m.iter().map(|d| d * d).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return DsgStep {
            h_prev: mu.iter().zip(noise).map(|(m, z)| m + sigma * z).collect(),
            fallback: true,
        };
    }
    DsgStep {
        h_prev: mu.iter().zip(&d_m).map(|(m, d)| m + r * d / norm).collect(),
        fallback: false,
    }
}

/// Guidance gradient with respect to the noisy (normalized) pose, along with
/// the energy value at the clean estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceGrad {
    pub grad: Vec<f64>,
    pub value: f64,
    pub eps: Vec<f64>,
}

/// Everything a chain needs that is shared across chains of one object.
pub struct SamplerContext<'a> {
    pub model: &'a GraspModel,
    pub hand: &'a KinematicHandModel,
    pub schedule: &'a NoiseSchedule,
    pub index: &'a SpatialIndex,
    pub feature: Vec<f64>,
    pub constraints: ConstraintConfig,
}

impl<'a> SamplerContext<'a> {
    pub fn new(
        model: &'a GraspModel,
        hand: &'a KinematicHandModel,
        schedule: &'a NoiseSchedule,
        index: &'a SpatialIndex,
        constraints: ConstraintConfig,
        encoder_seed: u64,
    ) -> Result<Self> {
        if hand.pose_dim() != model.pose_dim() {
            return Err(Error::DimensionMismatch {
                what: "hand pose",
                expected: model.pose_dim(),
                got: hand.pose_dim(),
            });
        }
        let feature = model.encoder.forward(&model.encoder_input(index.cloud(), encoder_seed))?;
        Ok(SamplerContext {
            model,
            hand,
            schedule,
            index,
            feature,
            constraints,
        })
    }

    pub fn predict_eps(&self, h_t: &[f64], t: usize) -> Result<Vec<f64>> {
        self.model.denoiser.forward(h_t, t, &self.feature, None)
    }

    /// Weighted energy of a normalized clean pose and its gradient there.
    pub fn energy_at(&self, h0: &[f64]) -> Result<(f64, Vec<f64>)> {
        let x = self.model.normalizer.denormalize(h0);
        let pose = HandPose::from_slice(&x, self.hand.num_joints())?;
        let fk = forward_kinematics(self.hand, &pose, false)?;
        let br = evaluate_on_fk(&fk, self.hand, self.index, &self.constraints, false)?;
        let g = br
            .combined
            .grad_pose
            .iter()
            .zip(&self.model.normalizer.std)
            .map(|(g, s)| g * s)
            .collect();
        Ok((br.combined.value, g))
    }

    /// `∇_{h_t} Σ α_i L_i(ĥ₀(h_t))`.
    pub fn guidance_gradient(&self, h_t: &[f64], t: usize, freeze_eps_jacobian: bool) -> Result<GuidanceGrad> {
        let n = h_t.len();
        if self.constraints.weights.is_zero() {
            let eps = self.predict_eps(h_t, t)?;
            return Ok(GuidanceGrad {
                grad: vec![0.0; n],
                value: 0.0,
                eps,
            });
        }
        let (eps, trace) = self.model.denoiser.forward_traced(h_t, t, &self.feature, None)?;
        let h0 = estimate_h0(h_t, &eps, t, self.schedule)?;
        let (value, g0) = self.energy_at(&h0)?;
        let inv = 1.0 / self.schedule.alpha_bar(t).sqrt();
        let mut grad: Vec<f64> = g0.iter().map(|g| g * inv).collect();
        if !freeze_eps_jacobian {
            let jt = self.model.denoiser.backward(&trace, &g0, None).h_t;
            let c = (1.0 - self.schedule.alpha_bar(t)).sqrt() * inv;
            for (g, j) in grad.iter_mut().zip(&jt) {
                *g -= c * j;
            }
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("guidance gradient".into()));
        }
        Ok(GuidanceGrad { grad, value, eps })
    }

    /// One reverse step from `h_t`. Returns `(μ, h_{t−1})`.
    pub fn step(&self, h_t: &[f64], t: usize, cfg: &GuidanceConfig, noise: &[f64]) -> Result<StepOutput> {
        let guided = cfg.mode != GuidanceMode::None
            && !self.constraints.weights.is_zero()
            && cfg.max_t.is_none_or(|m| t <= m);
        let (eps, grad) = if guided {
            match self.guidance_gradient(h_t, t, cfg.freeze_eps_jacobian) {
                Ok(g) => (g.eps, Some(g.grad)),
                // a degenerate clean-estimate rotation carries no usable direction
                Err(Error::DegenerateRotation(_)) => (self.predict_eps(h_t, t)?, None),
                Err(e) => return Err(e),
            }
        } else {
            (self.predict_eps(h_t, t)?, None)
        };
        let mu = posterior_mean(h_t, &eps, t, self.schedule)?;
        let var = self.schedule.posterior_var(t);
        let zero = vec![0.0; h_t.len()];
        let grad_ref = grad.as_deref().unwrap_or(&zero);
        let (h_prev, fallback) = match (cfg.mode, &grad) {
            (GuidanceMode::Offset, Some(_)) => (offset_step(&mu, var, grad_ref, cfg.strength, noise, t), false),
            (GuidanceMode::Dsg, Some(_)) => {
                let s = dsg_step(&mu, var.sqrt(), grad_ref, cfg.rate, noise);
                (s.h_prev, s.fallback)
            }
            _ => (offset_step(&mu, var, &zero, 0.0, noise, t), false),
        };
        Ok(StepOutput {
            mu,
            h_prev,
            guided: grad.is_some() && !fallback,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub mu: Vec<f64>,
    pub h_prev: Vec<f64>,
    /// A guidance direction shaped this step.
    pub guided: bool,
}

/// Per-step record for inspecting a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    pub guided: bool,
    /// `‖h_{t−1} − μ‖`.
    pub step_norm: f64,
    pub sigma: f64,
    /// `‖μ‖`, which bounds the rounding error of `step_norm`.
    pub mu_norm: f64,
}

/// Energies of a final pose. `None` when the pose has no valid rotation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseDiagnostics {
    pub spf: f64,
    pub erf: f64,
    pub srf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Physical-unit pose vector.
    pub pose: Vec<f64>,
    pub diagnostics: Option<PoseDiagnostics>,
}

/// Runs one chain from `T` down to 1 using the given noise stream.
pub fn run_chain(
    ctx: &SamplerContext,
    cfg: &GuidanceConfig,
    rng: &mut ChaCha8Rng,
    mut record: Option<&mut Vec<StepRecord>>,
) -> Result<Vec<f64>> {
    let n = ctx.model.pose_dim();
    let mut h = standard_normal(rng, n);
    for t in (1..=ctx.schedule.steps()).rev() {
        let noise = standard_normal(rng, n);
        let out = ctx.step(&h, t, cfg, &noise)?;
        if let Some(rec) = record.as_deref_mut() {
            let step_norm = out.h_prev.iter().zip(&out.mu).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            rec.push(StepRecord {
                t,
                guided: out.guided,
                step_norm,
                sigma: ctx.schedule.posterior_var(t).sqrt(),
                mu_norm: out.mu.iter().map(|m| m * m).sum::<f64>().sqrt(),
            });
        }
        h = out.h_prev;
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sample at step {t}")));
        }
    }
    Ok(h)
}

/// Noise stream of chain `chain` under `seed`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Draws `n` poses for one object. Chains are independent and their
/// results do not depend on the worker count.
#[allow(clippy::too_many_arguments)]
pub fn sample(
    model: &GraspModel,
    hand: &KinematicHandModel,
    object: &PointCloud,
    n: usize,
    cfg: &GuidanceConfig,
    constraints: &ConstraintConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Sample>> {
    cfg.validate()?;
    if n == 0 {
        return Ok(Vec::new());
    }
    let schedule = model.noise_schedule()?;
    let index = SpatialIndex::build(object.clone())?;
    let ctx = SamplerContext::new(model, hand, &schedule, &index, cfg.constraints(constraints), seed)?;
    try_map_indexed(exec, n, |i| {
        let mut rng = chain_rng(seed, i);
        let z = run_chain(&ctx, cfg, &mut rng, None)?;
        Ok(finish_sample(&ctx, z, cfg.clamp_final, constraints))
    })
}

fn finish_sample(ctx: &SamplerContext, z: Vec<f64>, clamp: bool, constraints: &ConstraintConfig) -> Sample {
    let x = ctx.model.normalizer.denormalize(&z);
    let k = ctx.hand.num_joints();
    let mut pose = HandPose::from_slice(&x, k).expect("sample has the model dimension");
    if clamp {
        ctx.hand.clamp_pose(&mut pose);
    }
    let diagnostics = match pose.canonicalize() {
        Ok(()) => evaluate_constraints(&pose, ctx.hand, ctx.index, constraints)
            .ok()
            .map(|b| PoseDiagnostics {
                spf: b.spf,
                erf: b.erf,
                srf: b.srf,
            }),
        Err(_) => None,
    };
    Sample {
        pose: pose.to_vec(),
        diagnostics,
    }
}

#[cfg(test)]
mod tests;
