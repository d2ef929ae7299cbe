//! Contact and penetration energies over a posed hand, with analytic pose
//! gradients composed through the forward-kinematics pullback.
//!
//! All three energies are piecewise smooth. Gradients freeze the discrete
//! structure of each evaluation (nearest-neighbour assignments, the
//! thresholded set, the arg-max point, active hinge pairs).

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{segment_distance, surface_sign, SpatialIndex, Vec3};
use crate::kinematics::{forward_kinematics, FkResult, HandPose, KinematicHandModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintWeights {
    pub spf: f64,
    pub erf: f64,
    pub srf: f64,
}

impl Default for ConstraintWeights {
    fn default() -> Self {
        ConstraintWeights {
            spf: 1.0,
            erf: 1.0,
            srf: 0.5,
        }
    }
}

impl ConstraintWeights {
    pub const ZERO: ConstraintWeights = ConstraintWeights {
        spf: 0.0,
        erf: 0.0,
        srf: 0.0,
    };

    pub fn new(spf: f64, erf: f64, srf: f64) -> Self {
        ConstraintWeights { spf, erf, srf }
    }

    pub fn is_zero(&self) -> bool {
        self.spf == 0.0 && self.erf == 0.0 && self.srf == 0.0
    }

    pub fn scaled(&self, c: f64) -> Self {
        ConstraintWeights::new(self.spf * c, self.erf * c, self.srf * c)
    }

    pub fn validate(&self) -> Result<()> {
        if [self.spf, self.erf, self.srf].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "constraint weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstraintConfig {
    /// Pulling radius for the surface-pulling energy (m).
    pub spf_threshold: f64,
    /// Minimum separation between points of different links (m).
    pub srf_threshold: f64,
    /// Stabilizer in the surface-pulling denominator.
    pub eta: f64,
    pub weights: ConstraintWeights,
    /// Clamp the penetration energy at zero so a clear hand is not pushed away.
    pub erf_hinge: bool,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        ConstraintConfig {
            spf_threshold: 0.02,
            srf_threshold: 0.01,
            eta: 1e-8,
            weights: ConstraintWeights::default(),
            erf_hinge: false,
        }
    }
}

impl ConstraintConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.spf_threshold > 0.0 && self.srf_threshold > 0.0 && self.eta > 0.0) {
            return Err(Error::InvalidConfig(
                "constraint thresholds and eta must be positive".into(),
            ));
        }
        self.weights.validate()
    }

    pub fn with_weights(&self, weights: ConstraintWeights) -> Self {
        ConstraintConfig { weights, ..*self }
    }
}

/// Energy value (m) and its gradient with respect to the pose vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintEval {
    pub value: f64,
    pub grad_pose: Vec<f64>,
}

impl ConstraintEval {
    fn zero(dim: usize) -> Self {
        ConstraintEval {
            value: 0.0,
            grad_pose: vec![0.0; dim],
        }
    }

    fn check(self, what: &str) -> Result<Self> {
        if !self.value.is_finite() || !self.grad_pose.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite(format!("{what} gradient")));
        }
        Ok(self)
    }
}

/// Sparse world-space point gradients for one energy.
#[derive(Debug, Clone, Default)]
pub(crate) struct PointTerms {
    pub value: f64,
    pub grads: Vec<(usize, Vec3)>,
}

/// Nearest object point for a subset of hand points.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Correspondence {
    pub obj: usize,
    pub dist_sq: f64,
}

pub(crate) fn correspond(fk: &FkResult, index: &SpatialIndex, which: impl Iterator<Item = usize>) -> Vec<(usize, Correspondence)> {
    which
        .map(|i| {
            let (obj, dist_sq) = index.nearest_sq(&fk.world_points[i]);
            (i, Correspondence { obj, dist_sq })
        })
        .collect()
}

pub(crate) fn spf_terms(
    fk: &FkResult,
    index: &SpatialIndex,
    inner: &[(usize, Correspondence)],
    cfg: &ConstraintConfig,
) -> PointTerms {
    let thr_sq = cfg.spf_threshold * cfg.spf_threshold;
    let active: Vec<&(usize, Correspondence)> =
        inner.iter().filter(|(_, c)| c.dist_sq < thr_sq).collect();
    if active.is_empty() {
        return PointTerms::default();
    }
    let denom = active.len() as f64 + cfg.eta;
    let pts = index.cloud().points();
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(active.len());
    for (i, c) in active {
        let d = c.dist_sq.sqrt();
        value += d;
        if d > 0.0 {
            grads.push((*i, (fk.world_points[*i] - pts[c.obj]) / (d * denom)));
        }
    }
    PointTerms {
        value: value / denom,
        grads,
    }
}

pub(crate) fn erf_terms(
    fk: &FkResult,
    index: &SpatialIndex,
    all: &[(usize, Correspondence)],
    hinge: bool,
) -> PointTerms {
    let cloud = index.cloud();
    let mut best: Option<(usize, f64, f64, usize)> = None;
    for (i, c) in all {
        let p = &fk.world_points[*i];
        let s = surface_sign(p, &cloud.points()[c.obj], &cloud.normals()[c.obj]);
        let d = c.dist_sq.sqrt();
        let v = s * d;
        if best.is_none_or(|b| v > b.1) {
            best = Some((*i, v, s, c.obj));
        }
    }
    let Some((i, v, s, j)) = best else {
        return PointTerms::default();
    };
    if hinge && v <= 0.0 {
        return PointTerms::default();
    }
    let d = v.abs();
    let grads = if d > 0.0 {
        vec![(i, (fk.world_points[i] - cloud.points()[j]) * (s / d))]
    } else {
        Vec::new()
    };
    PointTerms { value: v, grads }
}

pub(crate) fn srf_terms(
    fk: &FkResult,
    model: &KinematicHandModel,
    cfg: &ConstraintConfig,
) -> PointTerms {
    let thr = cfg.srf_threshold;
    let n_links = model.links().len();
    let world_bound = |l: usize| {
        model.link_bound(l).map(|b| {
            let f = &fk.link_frames[l];
            let w = |p: &Vec3| fk.rotation() * f.transform_point(&Point3::from(*p)).coords + fk.translation();
            (w(&b.a), w(&b.b), b.reach)
        })
    };
    let bounds: Vec<_> = (0..n_links).map(world_bound).collect();
    let pts = &fk.world_points;
    let mut value = 0.0;
    let mut grads = Vec::new();
    for la in 0..n_links {
        let Some((a0, a1, ra)) = bounds[la] else { continue };
        for lb in la + 1..n_links {
            let Some((b0, b1, rb)) = bounds[lb] else { continue };
            if segment_distance(&a0, &a1, &b0, &b1) - ra - rb >= thr + 1e-12 {
                continue;
            }
            for i in model.link_points(la) {
                for j in model.link_points(lb) {
                    let diff = pts[i] - pts[j];
                    let d = diff.norm();
                    if d < thr {
                        value += thr - d;
                        if d > 0.0 {
                            let g = diff / d;
                            grads.push((i, -g));
                            grads.push((j, g));
                        }
                    }
                }
            }
        }
    }
    PointTerms { value, grads }
}

fn finish(fk: &FkResult, model: &KinematicHandModel, terms: PointTerms, what: &str) -> Result<ConstraintEval> {
    ConstraintEval {
        value: terms.value,
        grad_pose: fk.pullback(model, &terms.grads),
    }
    .check(what)
}

fn require_points(model: &KinematicHandModel, inner: bool) -> Result<()> {
    let n = if inner { model.inner_indices().len() } else { model.num_points() };
    if n == 0 {
        return Err(Error::InvalidHand(format!(
            "hand model has no {} surface points",
            if inner { "inner" } else { "" }
        )));
    }
    Ok(())
}

/// Mean distance of the palmar samples that lie within the pulling radius
/// to their nearest object point.
pub fn surface_pulling_force(
    pose: &HandPose,
    model: &KinematicHandModel,
    obj_index: &SpatialIndex,
    cfg: &ConstraintConfig,
) -> Result<ConstraintEval> {
    require_points(model, true)?;
    let fk = forward_kinematics(model, pose, false)?;
    let inner = correspond(&fk, obj_index, model.inner_indices().iter().copied());
    finish(&fk, model, spf_terms(&fk, obj_index, &inner, cfg), "SPF")
}

/// Deepest signed penetration `max_i s_i d_i`; negative when the hand is clear.
pub fn external_penetration_force(
    pose: &HandPose,
    model: &KinematicHandModel,
    obj_index: &SpatialIndex,
) -> Result<ConstraintEval> {
    require_points(model, false)?;
    let fk = forward_kinematics(model, pose, false)?;
    let all = correspond(&fk, obj_index, 0..model.num_points());
    finish(&fk, model, erf_terms(&fk, obj_index, &all, false), "ERF")
}

/// Hinge penalty on cross-link point pairs closer than the separation threshold.
pub fn self_penetration_force(
    pose: &HandPose,
    model: &KinematicHandModel,
    cfg: &ConstraintConfig,
) -> Result<ConstraintEval> {
    if model.num_points() < 2 {
        return Err(Error::InvalidHand("need at least two surface points".into()));
    }
    let fk = forward_kinematics(model, pose, false)?;
    finish(&fk, model, srf_terms(&fk, model, cfg), "SRF")
}

/// Per-term values and the weighted combination for one pose.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintBreakdown {
    pub spf: f64,
    pub erf: f64,
    pub srf: f64,
    pub combined: ConstraintEval,
}

/// Evaluates all three energies from a single FK pass. Terms with zero
/// weight are still reported but contribute nothing to the gradient.
pub fn evaluate_constraints(
    pose: &HandPose,
    model: &KinematicHandModel,
    obj_index: &SpatialIndex,
    cfg: &ConstraintConfig,
) -> Result<ConstraintBreakdown> {
    let fk = forward_kinematics(model, pose, false)?;
    evaluate_on_fk(&fk, model, obj_index, cfg, true)
}

pub(crate) fn evaluate_on_fk(
    fk: &FkResult,
    model: &KinematicHandModel,
    obj_index: &SpatialIndex,
    cfg: &ConstraintConfig,
    report_all: bool,
) -> Result<ConstraintBreakdown> {
    let w = cfg.weights;
    let need_erf = report_all || w.erf != 0.0;
    let need_spf = report_all || w.spf != 0.0;
    let all = if need_erf {
        correspond(fk, obj_index, 0..model.num_points())
    } else {
        Vec::new()
    };
    let inner = if need_erf {
        model.inner_indices().iter().map(|&i| all[i]).collect()
    } else if need_spf {
        correspond(fk, obj_index, model.inner_indices().iter().copied())
    } else {
        Vec::new()
    };
    let spf = if need_spf { spf_terms(fk, obj_index, &inner, cfg) } else { PointTerms::default() };
    let erf = if need_erf { erf_terms(fk, obj_index, &all, cfg.erf_hinge) } else { PointTerms::default() };
    let srf = if report_all || w.srf != 0.0 { srf_terms(fk, model, cfg) } else { PointTerms::default() };
    let dim = model.pose_dim();
    let mut combined = ConstraintEval::zero(dim);
    for (terms, weight, name) in [(&spf, w.spf, "SPF"), (&erf, w.erf, "ERF"), (&srf, w.srf, "SRF")] {
        if weight == 0.0 {
            continue;
        }
        let grad = fk.pullback(model, &terms.grads);
        if !grad.iter().all(|g| g.is_finite()) || !terms.value.is_finite() {
            return Err(Error::NonFinite(format!("{name} gradient")));
        }
        combined.value += weight * terms.value;
        for (c, g) in combined.grad_pose.iter_mut().zip(grad) {
            *c += weight * g;
        }
    }
    Ok(ConstraintBreakdown {
        spf: spf.value,
        erf: erf.value,
        srf: srf.value,
        combined,
    })
}

/// `α_SPF·SPF + α_ERF·ERF + α_SRF·SRF` with the matching weighted gradient.
pub fn combined_constraint(
    pose: &HandPose,
    model: &KinematicHandModel,
    obj_index: &SpatialIndex,
    cfg: &ConstraintConfig,
) -> Result<ConstraintEval> {
    if cfg.weights.is_zero() {
        return Ok(ConstraintEval::zero(model.pose_dim()));
    }
    let fk = forward_kinematics(model, pose, false)?;
    Ok(evaluate_on_fk(&fk, model, obj_index, cfg, false)?.combined)
}
