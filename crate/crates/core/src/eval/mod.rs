//! Grasp quality: penetration depths, contact extraction, a quasi-static
//! force-resistance success proxy, diversity, and the dataset filter.

pub mod lp;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{signed_distance_to_cylinder, surface_sign, PointCloud, SpatialIndex, Vec3};
use crate::kinematics::{forward_kinematics, FkResult, HandPose, KinematicHandModel};

/// Edges used to linearize each friction cone.
pub const CONE_EDGES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub friction_mu: f64,
    /// A hand point counts as touching when it is at most this far outside the object (m).
    pub contact_epsilon: f64,
    pub max_contacts_per_link: usize,
    /// Also require torque balance about the object centroid.
    pub wrench: bool,
    /// Rejection threshold for hand-into-object depth (mm, strict).
    pub max_pen_nn_mm: f64,
    /// Rejection threshold for object-into-hand depth (mm, strict).
    pub max_pen_cyl_mm: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            friction_mu: 0.5,
            contact_epsilon: 0.005,
            max_contacts_per_link: 8,
            wrench: false,
            max_pen_nn_mm: 10.0,
            max_pen_cyl_mm: 1.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.friction_mu >= 0.0 && self.contact_epsilon >= 0.0 && self.max_contacts_per_link > 0) {
            return Err(Error::InvalidConfig(
                "friction_mu and contact_epsilon must be >= 0, max_contacts_per_link > 0".into(),
            ));
        }
        if !(self.max_pen_nn_mm > 0.0 && self.max_pen_cyl_mm > 0.0) {
            return Err(Error::InvalidConfig("penetration thresholds must be positive".into()));
        }
        Ok(())
    }
}

/// A point where the hand can push on the object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    /// Object surface point (m).
    pub point: Vec3,
    /// Unit push direction into the object (the negated outward surface normal).
    pub normal: Vec3,
    pub link: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactSet {
    pub contacts: Vec<Contact>,
    pub friction_mu: f64,
    pub contact_epsilon: f64,
}

/// Deepest hand point inside the object, in millimetres (0 when clear).
pub fn penetration_nn(pose: &HandPose, model: &KinematicHandModel, obj_index: &SpatialIndex) -> Result<f64> {
    let fk = forward_kinematics(model, pose, false)?;
    Ok(penetration_nn_fk(&fk, obj_index))
}

fn signed_depths<'a>(fk: &'a FkResult, obj_index: &'a SpatialIndex) -> impl Iterator<Item = (usize, f64, usize)> + 'a {
    let cloud = obj_index.cloud();
    fk.world_points.iter().enumerate().map(move |(i, p)| {
        let (j, d) = obj_index.nearest(p);
        let s = surface_sign(p, &cloud.points()[j], &cloud.normals()[j]);
        (i, s * d, j)
    })
}

pub(crate) fn penetration_nn_fk(fk: &FkResult, obj_index: &SpatialIndex) -> f64 {
    signed_depths(fk, obj_index).fold(0.0f64, |m, (_, v, _)| m.max(v)) * 1000.0
}

/// Deepest object point inside any link cylinder, in millimetres.
pub fn penetration_cylinder(pose: &HandPose, model: &KinematicHandModel, obj_cloud: &PointCloud) -> Result<f64> {
    let fk = forward_kinematics(model, pose, false)?;
    Ok(penetration_cylinder_fk(&fk, obj_cloud))
}

pub(crate) fn penetration_cylinder_fk(fk: &FkResult, obj_cloud: &PointCloud) -> f64 {
    let mut depth = 0.0f64;
    for cyl in &fk.world_cylinders {
        // cheap reject: points farther from the axis segment than the radius
        let (a, b) = (cyl.axis_start, cyl.axis_end);
        for p in obj_cloud.points() {
            if crate::geometry::segment_distance(p, p, &a, &b) >= cyl.radius {
                continue;
            }
            depth = depth.max(-signed_distance_to_cylinder(p, cyl));
        }
    }
    depth * 1000.0
}

/// Hand points within `contact_epsilon` outside the surface (or inside it),
/// thinned per link by farthest-point selection.
pub fn extract_contacts(
    pose: &HandPose,
    model: &KinematicHandModel,
    obj_index: &SpatialIndex,
    cfg: &EvalConfig,
) -> Result<ContactSet> {
    let fk = forward_kinematics(model, pose, false)?;
    Ok(extract_contacts_fk(&fk, model, obj_index, cfg))
}

pub(crate) fn extract_contacts_fk(
    fk: &FkResult,
    model: &KinematicHandModel,
    obj_index: &SpatialIndex,
    cfg: &EvalConfig,
) -> ContactSet {
    let cloud = obj_index.cloud();
    let links = model.point_links();
    let mut per_link: Vec<Vec<Contact>> = vec![Vec::new(); model.links().len()];
    for (i, signed, j) in signed_depths(fk, obj_index) {
        // signed > 0 is inside; outside distance is -signed
        if -signed <= cfg.contact_epsilon {
            per_link[links[i]].push(Contact {
                point: cloud.points()[j],
                normal: -cloud.normals()[j],
                link: links[i],
            });
        }
    }
    let mut contacts = Vec::new();
    for cands in per_link {
        contacts.extend(farthest_point_subset(cands, cfg.max_contacts_per_link));
    }
    ContactSet {
        contacts,
        friction_mu: cfg.friction_mu,
        contact_epsilon: cfg.contact_epsilon,
    }
}

/// Greedy farthest-point thinning starting from the first candidate; ties
/// keep the earliest candidate.
fn farthest_point_subset(cands: Vec<Contact>, k: usize) -> Vec<Contact> {
    if cands.len() <= k {
        return cands;
    }
    let mut chosen = vec![0usize];
    let mut dist: Vec<f64> = cands.iter().map(|c| (c.point - cands[0].point).norm_squared()).collect();
    while chosen.len() < k {
        let mut best = 0;
        for i in 1..cands.len() {
            if dist[i] > dist[best] {
                best = i;
            }
        }
        if dist[best] == 0.0 {
            break;
        }
        chosen.push(best);
        for i in 0..cands.len() {
            dist[i] = dist[i].min((cands[i].point - cands[best].point).norm_squared());
        }
    }
    chosen.sort_unstable();
    chosen.into_iter().map(|i| cands[i]).collect()
}

/// Orthonormal tangents of a unit normal.
fn tangents(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let t1 = n.cross(&helper).normalize();
    let t2 = n.cross(&t1);
    (t1, t2)
}

/// The linearized cone generators `n + μ(cos θ_k t1 + sin θ_k t2)`.
pub fn cone_edges(normal: &Vec3, mu: f64) -> [Vec3; CONE_EDGES] {
    let (t1, t2) = tangents(normal);
    std::array::from_fn(|k| {
        let th = 2.0 * std::f64::consts::PI * k as f64 / CONE_EDGES as f64;
        normal + (t1 * th.cos() + t2 * th.sin()) * mu
    })
}

/// Whether contact forces inside the friction cones can cancel a unit
/// external force `direction` acting on the object. With `wrench`, torques
/// about `center` must cancel too (the external force acts at `center`).
pub fn resists_force(contacts: &ContactSet, direction: &Vec3, wrench: Option<&Vec3>) -> Result<bool> {
    if contacts.contacts.is_empty() {
        return Ok(false);
    }
    let dir = direction
        .try_normalize(1e-12)
        .ok_or_else(|| Error::InvalidConfig("external force direction must be non-zero".into()))?;
    let rows = if wrench.is_some() { 6 } else { 3 };
    let cols = contacts.contacts.len() * CONE_EDGES;
    let mut a = vec![0.0; rows * cols];
    for (ci, c) in contacts.contacts.iter().enumerate() {
        for (k, e) in cone_edges(&c.normal, contacts.friction_mu).iter().enumerate() {
            let col = ci * CONE_EDGES + k;
            for r in 0..3 {
                a[r * cols + col] = e[r];
            }
            if let Some(center) = wrench {
                let tau = (c.point - center).cross(e);
                for r in 0..3 {
                    a[(3 + r) * cols + col] = tau[r];
                }
            }
        }
    }
    let mut b = vec![0.0; rows];
    for r in 0..3 {
        b[r] = -dir[r];
    }
    lp::feasible(&a, &b, rows, cols)
}

/// The six axis-aligned external force directions: +x, -x, +y, -y, +z, -z.
pub fn axis_directions() -> [Vec3; 6] {
    [Vec3::x(), -Vec3::x(), Vec3::y(), -Vec3::y(), Vec3::z(), -Vec3::z()]
}

/// Per-direction resistance in the order of [`axis_directions`].
pub fn resisted_directions(contacts: &ContactSet, wrench_center: Option<&Vec3>) -> Result<[bool; 6]> {
    let dirs = axis_directions();
    let mut out = [false; 6];
    for (o, d) in out.iter_mut().zip(&dirs) {
        *o = resists_force(contacts, d, wrench_center)?;
    }
    Ok(out)
}

/// `(suc6, suc1)`: all six, or at least one, axis-aligned forces resisted.
pub fn success_labels(
    pose: &HandPose,
    model: &KinematicHandModel,
    obj_index: &SpatialIndex,
    cfg: &EvalConfig,
) -> Result<(bool, bool)> {
    let fk = forward_kinematics(model, pose, false)?;
    success_labels_fk(&fk, model, obj_index, cfg)
}

fn success_labels_fk(fk: &FkResult, model: &KinematicHandModel, obj_index: &SpatialIndex, cfg: &EvalConfig) -> Result<(bool, bool)> {
    let contacts = extract_contacts_fk(fk, model, obj_index, cfg);
    let center = cfg.wrench.then(|| obj_index.cloud().centroid());
    let r = resisted_directions(&contacts, center.as_ref())?;
    Ok((r.iter().all(|v| *v), r.iter().any(|v| *v)))
}

/// Mean over dimensions of the population standard deviation of the
/// successful poses. Returns 0 (with a warning) for fewer than two.
pub fn diversity(poses: &[Vec<f64>], successes: &[bool]) -> f64 {
    let ok: Vec<&Vec<f64>> = poses.iter().zip(successes).filter(|(_, s)| **s).map(|(p, _)| p).collect();
    if ok.len() < 2 {
        log::warn!("diversity needs at least two successful poses, got {}", ok.len());
        return 0.0;
    }
    let dim = ok[0].len();
    let n = ok.len() as f64;
    let mut total = 0.0;
    for d in 0..dim {
        // shift by the first pose so identical poses give exactly zero
        let x0 = ok[0][d];
        let mean = ok.iter().map(|p| p[d] - x0).sum::<f64>() / n;
        let var = ok.iter().map(|p| (p[d] - x0 - mean).powi(2)).sum::<f64>() / n;
        total += var.sqrt();
    }
    total / dim as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RejectReason {
    #[serde(rename = "PEN_NN")]
    PenNn,
    #[serde(rename = "PEN_CYL")]
    PenCyl,
    #[serde(rename = "NOT_STABLE")]
    NotStable,
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::PenNn => "PEN_NN",
            RejectReason::PenCyl => "PEN_CYL",
            RejectReason::NotStable => "NOT_STABLE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pen_mm: f64,
    pub pen_cyl_mm: f64,
    pub suc6: bool,
    pub suc1: bool,
    pub accepted: bool,
    pub reasons: Vec<RejectReason>,
}

impl EvalReport {
    /// Applies the acceptance rule to measured values.
    pub fn from_measurements(pen_mm: f64, pen_cyl_mm: f64, suc6: bool, suc1: bool, cfg: &EvalConfig) -> Self {
        let mut reasons = Vec::new();
        if !(pen_mm < cfg.max_pen_nn_mm) {
            reasons.push(RejectReason::PenNn);
        }
        if !(pen_cyl_mm < cfg.max_pen_cyl_mm) {
            reasons.push(RejectReason::PenCyl);
        }
        if !suc6 {
            reasons.push(RejectReason::NotStable);
        }
        EvalReport {
            pen_mm,
            pen_cyl_mm,
            suc6,
            suc1,
            accepted: reasons.is_empty(),
            reasons,
        }
    }
}

/// Full evaluation and the accept/reject verdict for one pose.
pub fn filter_grasp(
    pose: &HandPose,
    model: &KinematicHandModel,
    obj_index: &SpatialIndex,
    cfg: &EvalConfig,
) -> Result<(bool, EvalReport)> {
    let fk = forward_kinematics(model, pose, false)?;
    let pen_mm = penetration_nn_fk(&fk, obj_index);
    let pen_cyl_mm = penetration_cylinder_fk(&fk, obj_index.cloud());
    let (suc6, suc1) = success_labels_fk(&fk, model, obj_index, cfg)?;
    let report = EvalReport::from_measurements(pen_mm, pen_cyl_mm, suc6, suc1, cfg);
    Ok((report.accepted, report))
}
