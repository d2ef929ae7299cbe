//! Articulated hand model and differentiable forward kinematics.
//!
//! A pose vector is laid out as `[theta (K joints), rot6d (6), trans (3)]`.

pub mod hand;
pub mod rotation;

use nalgebra::{Isometry3, Matrix3, Matrix3x6, Matrix3xX, Point3, Unit, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CylinderGeom, Vec3};

pub use hand::{HandDescription, HandSpec};
pub use rotation::{orthonormalize_rot6d, rot6d_from_matrix};

use hand::SampleDesc;
use rotation::rot6d_with_jacobian;

/// Grasp parameters: joint angles, 6D global rotation and translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandPose {
    pub theta: Vec<f64>,
    pub rot6d: [f64; 6],
    pub trans: Vec3,
}

impl HandPose {
    pub fn rest(num_joints: usize) -> Self {
        HandPose {
            theta: vec![0.0; num_joints],
            rot6d: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            trans: Vec3::zeros(),
        }
    }

    pub fn from_parts(theta: Vec<f64>, rotation: &Matrix3<f64>, trans: Vec3) -> Self {
        HandPose {
            theta,
            rot6d: rot6d_from_matrix(rotation),
            trans,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len() + 9
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.theta);
        v.extend_from_slice(&self.rot6d);
        v.extend(self.trans.iter());
        v
    }

    pub fn from_slice(v: &[f64], num_joints: usize) -> Result<Self> {
        if v.len() != num_joints + 9 {
            return Err(Error::DimensionMismatch {
                what: "pose vector",
                expected: num_joints + 9,
                got: v.len(),
            });
        }
        let k = num_joints;
        let mut rot6d = [0.0; 6];
        rot6d.copy_from_slice(&v[k..k + 6]);
        Ok(HandPose {
            theta: v[..k].to_vec(),
            rot6d,
            trans: Vec3::new(v[k + 6], v[k + 7], v[k + 8]),
        })
    }

    pub fn rotation(&self) -> Result<Matrix3<f64>> {
        orthonormalize_rot6d(&self.rot6d)
    }

    /// Replaces the 6D block by the first two columns of its orthonormalized matrix.
    pub fn canonicalize(&mut self) -> Result<()> {
        self.rot6d = rot6d_from_matrix(&self.rotation()?);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Joint {
    pub axis: Unit<Vec3>,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone)]
pub struct Link {
    pub name: String,
    pub parent: Option<usize>,
    pub origin: Isometry3<f64>,
    pub joint: Option<Joint>,
    pub cylinder: Option<CylinderGeom>,
    /// All surface samples (link frame).
    pub surface_points: Vec<Vec3>,
    /// Palmar subset of `surface_points` (link frame).
    pub inner_points: Vec<Vec3>,
}

#[derive(Debug, Clone)]
pub struct KinematicHandModel {
    links: Vec<Link>,
    description: HandDescription,
    joint_link: Vec<usize>,
    link_joint: Vec<Option<usize>>,
    chain_joints: Vec<Vec<usize>>,
    point_link: Vec<usize>,
    point_local: Vec<Vec3>,
    inner_indices: Vec<usize>,
    link_ranges: Vec<std::ops::Range<usize>>,
    link_bounds: Vec<Option<LinkBound>>,
}

/// Link-frame capsule `(segment, reach)` containing every surface sample of a link.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LinkBound {
    pub a: Vec3,
    pub b: Vec3,
    pub reach: f64,
}

fn sample_bound(cyl: Option<&CylinderGeom>, points: &[Vec3]) -> Option<LinkBound> {
    if points.is_empty() {
        return None;
    }
    let (a, b) = match cyl {
        Some(c) => (c.axis_start, c.axis_end),
        None => {
            let c = points.iter().sum::<Vec3>() / points.len() as f64;
            (c, c)
        }
    };
    let reach = points
        .iter()
        .map(|p| crate::geometry::segment_distance(p, p, &a, &b))
        .fold(0.0, f64::max);
    // widen slightly so rounding never culls a pair that is actually in range
    Some(LinkBound {
        a,
        b,
        reach: reach * (1.0 + 1e-9) + 1e-12,
    })
}

impl KinematicHandModel {
    pub fn from_description(desc: &HandDescription) -> Result<Self> {
        if desc.links.is_empty() {
            return Err(Error::InvalidHand("no links".into()));
        }
        let mut links = Vec::with_capacity(desc.links.len());
        let mut joint_link = Vec::new();
        let mut link_joint = Vec::new();
        let mut chain_joints: Vec<Vec<usize>> = Vec::new();
        let mut point_link = Vec::new();
        let mut point_local = Vec::new();
        let mut inner_indices = Vec::new();
        let mut link_ranges = Vec::new();
        let mut link_bounds = Vec::new();
        for (k, ld) in desc.links.iter().enumerate() {
            if let Some(p) = ld.parent {
                if p >= k {
                    return Err(Error::InvalidHand(format!(
                        "link {k} ({}) has parent {p}; parents must precede children",
                        ld.name
                    )));
                }
            }
            let joint = match &ld.joint {
                Some(j) => {
                    let axis = Vec3::from(j.axis);
                    if axis.norm() < 1e-9 {
                        return Err(Error::InvalidHand(format!("link {} has a zero axis", ld.name)));
                    }
                    if !(j.lower < j.upper) {
                        return Err(Error::InvalidHand(format!(
                            "link {} joint limits {} >= {}",
                            ld.name, j.lower, j.upper
                        )));
                    }
                    Some(Joint {
                        axis: Unit::new_normalize(axis),
                        lower: j.lower,
                        upper: j.upper,
                    })
                }
                None => None,
            };
            let cylinder = match &ld.cylinder {
                Some(c) => Some(CylinderGeom::new(c.start.into(), c.end.into(), c.radius)?),
                None => None,
            };
            let (surface_points, inner_idx) = match (&ld.samples, &cylinder) {
                (None, _) => (Vec::new(), Vec::new()),
                (Some(SampleDesc::Grid { inner, total }), Some(cyl)) => {
                    if inner > total {
                        return Err(Error::InvalidHand(format!(
                            "link {}: inner samples exceed total",
                            ld.name
                        )));
                    }
                    hand::grid_samples(cyl, *inner, *total)?
                }
                (Some(SampleDesc::Grid { .. }), None) => {
                    return Err(Error::InvalidHand(format!(
                        "link {} requests grid samples without a cylinder",
                        ld.name
                    )))
                }
                (Some(SampleDesc::Explicit { points, inner }), _) => {
                    if let Some(&bad) = inner.iter().find(|&&i| i >= points.len()) {
                        return Err(Error::InvalidHand(format!(
                            "link {}: inner index {bad} out of range",
                            ld.name
                        )));
                    }
                    (points.iter().map(|p| Vec3::from(*p)).collect(), inner.clone())
                }
            };
            let inner_points = inner_idx.iter().map(|&i| surface_points[i]).collect();
            let base = point_local.len();
            for p in &surface_points {
                point_link.push(k);
                point_local.push(*p);
            }
            inner_indices.extend(inner_idx.iter().map(|i| base + i));
            link_ranges.push(base..point_local.len());
            link_bounds.push(sample_bound(cylinder.as_ref(), &surface_points));

            let mut chain = ld.parent.map(|p| chain_joints[p].clone()).unwrap_or_default();
            if joint.is_some() {
                chain.push(joint_link.len());
                link_joint.push(Some(joint_link.len()));
                joint_link.push(k);
            } else {
                link_joint.push(None);
            }
            chain_joints.push(chain);
            links.push(Link {
                name: ld.name.clone(),
                parent: ld.parent,
                origin: ld.origin.isometry(),
                joint,
                cylinder,
                surface_points,
                inner_points,
            });
        }
        Ok(KinematicHandModel {
            links,
            description: desc.clone(),
            joint_link,
            link_joint,
            chain_joints,
            point_link,
            point_local,
            inner_indices,
            link_ranges,
            link_bounds,
        })
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    pub fn description(&self) -> &HandDescription {
        &self.description
    }

    pub fn num_joints(&self) -> usize {
        self.joint_link.len()
    }

    pub fn pose_dim(&self) -> usize {
        self.num_joints() + 9
    }

    /// Links that carry cylinder geometry (phalanges and palm).
    pub fn num_phalanges(&self) -> usize {
        self.links.iter().filter(|l| l.cylinder.is_some()).count()
    }

    pub fn num_points(&self) -> usize {
        self.point_local.len()
    }

    /// Link id of every flattened surface point.
    pub fn point_links(&self) -> &[usize] {
        &self.point_link
    }

    /// Flattened indices of the palmar samples.
    pub fn inner_indices(&self) -> &[usize] {
        &self.inner_indices
    }

    /// Range of flattened point indices owned by `link`.
    pub fn link_points(&self, link: usize) -> std::ops::Range<usize> {
        self.link_ranges[link].clone()
    }

    pub(crate) fn link_bound(&self, link: usize) -> Option<LinkBound> {
        self.link_bounds[link]
    }

    pub fn joint_limits(&self) -> Vec<(f64, f64)> {
        self.joint_link
            .iter()
            .map(|&l| {
                let j = self.links[l].joint.as_ref().unwrap();
                (j.lower, j.upper)
            })
            .collect()
    }

    pub fn joint_link(&self, joint: usize) -> usize {
        self.joint_link[joint]
    }

    pub fn clamp_pose(&self, pose: &mut HandPose) {
        for (t, (lo, hi)) in pose.theta.iter_mut().zip(self.joint_limits()) {
            *t = t.clamp(lo, hi);
        }
    }

    /// Whether link `link` lies in the subtree driven by joint `joint`.
    pub fn joint_moves_link(&self, joint: usize, link: usize) -> bool {
        self.chain_joints[link].contains(&joint)
    }

    pub fn rest_pose(&self) -> HandPose {
        HandPose::rest(self.num_joints())
    }
}

/// The built-in simplified hand.
pub fn default_hand(spec: &HandSpec) -> Result<KinematicHandModel> {
    KinematicHandModel::from_description(&spec.describe()?)
}

/// Forward-kinematics output. Keeps the intermediate frames needed to pull
/// point gradients back onto the pose vector.
#[derive(Debug, Clone)]
pub struct FkResult {
    pub world_points: Vec<Vec3>,
    pub world_cylinders: Vec<CylinderGeom>,
    /// Link id of each entry in `world_cylinders`.
    pub cylinder_links: Vec<usize>,
    /// `3 × pose_dim` partials for each world point, when requested.
    pub point_jacobian: Option<Vec<Matrix3xX<f64>>>,
    /// Hand-frame link poses (before the global rotation and translation).
    pub link_frames: Vec<Isometry3<f64>>,
    hand_points: Vec<Vec3>,
    joint_origins: Vec<Vec3>,
    joint_axes: Vec<Vec3>,
    rotation: Matrix3<f64>,
    translation: Vec3,
    drot: [Matrix3x6<f64>; 3],
}

pub fn forward_kinematics(
    model: &KinematicHandModel,
    pose: &HandPose,
    with_jacobian: bool,
) -> Result<FkResult> {
    let k = model.num_joints();
    if pose.theta.len() != k {
        return Err(Error::DimensionMismatch {
            what: "joint angles",
            expected: k,
            got: pose.theta.len(),
        });
    }
    if !pose.theta.iter().chain(pose.trans.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("pose".into()));
    }
    let (rotation, drot) = rot6d_with_jacobian(&pose.rot6d)?;
    let translation = pose.trans;
    let mut frames: Vec<Isometry3<f64>> = Vec::with_capacity(model.links.len());
    let mut joint_origins = vec![Vec3::zeros(); k];
    let mut joint_axes = vec![Vec3::zeros(); k];
    for (li, link) in model.links.iter().enumerate() {
        let parent = link.parent.map(|p| frames[p]).unwrap_or_else(Isometry3::identity);
        let base = parent * link.origin;
        let frame = match (&link.joint, model.link_joint[li]) {
            (Some(j), Some(ji)) => {
                joint_origins[ji] = base.translation.vector;
                joint_axes[ji] = base.rotation * j.axis.into_inner();
                base * UnitQuaternion::from_axis_angle(&j.axis, pose.theta[ji])
            }
            _ => base,
        };
        frames.push(frame);
    }
    let hand_points: Vec<Vec3> = model
        .point_local
        .iter()
        .zip(&model.point_link)
        .map(|(p, &l)| (frames[l] * Point3::from(*p)).coords)
        .collect();
    let world_points = hand_points
        .iter()
        .map(|q| rotation * q + translation)
        .collect();
    let global = |v: Vec3| rotation * v + translation;
    let mut world_cylinders = Vec::new();
    let mut cylinder_links = Vec::new();
    for (li, link) in model.links.iter().enumerate() {
        if let Some(c) = &link.cylinder {
            let hc = c.transformed(&frames[li]);
            world_cylinders.push(CylinderGeom {
                axis_start: global(hc.axis_start),
                axis_end: global(hc.axis_end),
                radius: c.radius,
            });
            cylinder_links.push(li);
        }
    }
    let mut fk = FkResult {
        world_points,
        world_cylinders,
        cylinder_links,
        point_jacobian: None,
        link_frames: frames,
        hand_points,
        joint_origins,
        joint_axes,
        rotation,
        translation,
        drot,
    };
    if with_jacobian {
        fk.point_jacobian = Some(point_jacobians(model, &fk));
    }
    Ok(fk)
}

fn point_jacobians(model: &KinematicHandModel, fk: &FkResult) -> Vec<Matrix3xX<f64>> {
    let k = model.num_joints();
    fk.hand_points
        .iter()
        .zip(&model.point_link)
        .map(|(q, &l)| {
            let mut jac = Matrix3xX::zeros(k + 9);
            for &j in &model.chain_joints[l] {
                let col = fk.rotation * fk.joint_axes[j].cross(&(q - fk.joint_origins[j]));
                jac.set_column(j, &col);
            }
            let drot = fk.drot[0] * q.x + fk.drot[1] * q.y + fk.drot[2] * q.z;
            jac.columns_mut(k, 6).copy_from(&drot);
            jac.columns_mut(k + 6, 3).copy_from(&Matrix3::identity());
            jac
        })
        .collect()
}

impl FkResult {
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Pose gradient `Σ_i J_iᵀ g_i` for sparse world-space point gradients,
    /// without materialising the per-point Jacobians.
    pub fn pullback(&self, model: &KinematicHandModel, grads: &[(usize, Vec3)]) -> Vec<f64> {
        let k = model.num_joints();
        let n_links = model.links.len();
        let mut out = vec![0.0; k + 9];
        let mut moment = vec![Vec3::zeros(); n_links];
        let mut force = vec![Vec3::zeros(); n_links];
        let mut outer = Matrix3::zeros();
        let mut total = Vec3::zeros();
        for &(i, g) in grads {
            let q = self.hand_points[i];
            total += g;
            outer += g * q.transpose();
            let gl = self.rotation.transpose() * g;
            let l = model.point_link[i];
            moment[l] += q.cross(&gl);
            force[l] += gl;
        }
        for l in (0..n_links).rev() {
            if let Some(p) = model.links[l].parent {
                let (m, f) = (moment[l], force[l]);
                moment[p] += m;
                force[p] += f;
            }
        }
        for (j, &l) in model.joint_link.iter().enumerate() {
            let o = self.joint_origins[j];
            out[j] = self.joint_axes[j].dot(&(moment[l] - o.cross(&force[l])));
        }
        let mut g6 = nalgebra::Vector6::zeros();
        for c in 0..3 {
            g6 += self.drot[c].transpose() * outer.column(c);
        }
        out[k..k + 6].copy_from_slice(g6.as_slice());
        out[k + 6..].copy_from_slice(total.as_slice());
        out
    }
}

#[cfg(test)]
mod tests;
