//! Point clouds, nearest-neighbour indexing and the distance primitives the
//! constraint energies are built on.

mod kdtree;
pub mod mesh;
pub mod ply;

use nalgebra::{Isometry3, Vector3};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use kdtree::SpatialIndex;
pub use mesh::{sample_surface, TriMesh};

pub type Vec3 = Vector3<f64>;

const NORMAL_TOLERANCE: f64 = 1e-6;

/// Object surface samples with outward unit normals.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    normals: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, normals: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if points.len() != normals.len() {
            return Err(Error::InvalidCloud(format!(
                "{} points but {} normals",
                points.len(),
                normals.len()
            )));
        }
        for (i, (p, n)) in points.iter().zip(&normals).enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidCloud(format!("point {i} is not finite")));
            }
            if (n.norm() - 1.0).abs() > NORMAL_TOLERANCE {
                return Err(Error::InvalidCloud(format!(
                    "normal {i} has norm {}",
                    n.norm()
                )));
            }
        }
        Ok(PointCloud { points, normals })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }

    pub fn centroid(&self) -> Vec3 {
        self.points.iter().sum::<Vec3>() / self.points.len() as f64
    }

    /// Uniform subsample without replacement; the whole cloud (in order) when
    /// `n >= len`. Selected points keep their original relative order.
    pub fn subsample(&self, n: usize, seed: u64) -> PointCloud {
        if n >= self.len() {
            return self.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample_indices(&mut rng, self.len(), n.max(1)).into_vec();
        idx.sort_unstable();
        self.select(&idx)
    }

    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            normals: idx.iter().map(|&i| self.normals[i]).collect(),
        }
    }

    pub fn transformed(&self, iso: &Isometry3<f64>) -> PointCloud {
        PointCloud {
            points: self.points.iter().map(|p| iso * nalgebra::Point3::from(*p)).map(|p| p.coords).collect(),
            normals: self.normals.iter().map(|n| iso.rotation * n).collect(),
        }
    }
}

/// A capped cylinder around the segment `axis_start → axis_end`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CylinderGeom {
    pub axis_start: Vec3,
    pub axis_end: Vec3,
    pub radius: f64,
}

impl CylinderGeom {
    pub fn new(axis_start: Vec3, axis_end: Vec3, radius: f64) -> Result<Self> {
        let cyl = CylinderGeom {
            axis_start,
            axis_end,
            radius,
        };
        cyl.validate()?;
        Ok(cyl)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::InvalidGeometry(format!(
                "cylinder radius {} must be positive",
                self.radius
            )));
        }
        if (self.axis_end - self.axis_start).norm() <= 0.0 {
            return Err(Error::InvalidGeometry(
                "cylinder axis endpoints coincide".into(),
            ));
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        (self.axis_end - self.axis_start).norm()
    }

    pub fn transformed(&self, iso: &Isometry3<f64>) -> CylinderGeom {
        CylinderGeom {
            axis_start: iso.transform_point(&self.axis_start.into()).coords,
            axis_end: iso.transform_point(&self.axis_end.into()).coords,
            radius: self.radius,
        }
    }
}

/// Sign of `(nearest − hand_point) · normal` with `sign(0) = +1`, and the
/// distance to the nearest object point. `+1` means the hand point is behind
/// the surface, i.e. inside the object.
pub fn signed_distance_to_cloud(hand_point: &Vec3, index: &SpatialIndex) -> (f64, f64) {
    let (j, d) = index.nearest(hand_point);
    let cloud = index.cloud();
    (surface_sign(hand_point, &cloud.points()[j], &cloud.normals()[j]), d)
}

#[inline]
pub(crate) fn surface_sign(hand_point: &Vec3, obj_point: &Vec3, obj_normal: &Vec3) -> f64 {
    if (obj_point - hand_point).dot(obj_normal) >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Exact signed distance to a capped cylinder; negative inside.
pub fn signed_distance_to_cylinder(point: &Vec3, cyl: &CylinderGeom) -> f64 {
    let axis = cyl.axis_end - cyl.axis_start;
    let len = axis.norm();
    let u = axis / len;
    let rel = point - cyl.axis_start;
    let h = rel.dot(&u);
    let radial = (rel - u * h).norm();
    let dx = radial - cyl.radius;
    let dy = (h - 0.5 * len).abs() - 0.5 * len;
    let inside = dx.max(dy).min(0.0);
    let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
    inside + outside
}

/// Smallest distance between two segments `[p0,p1]` and `[q0,q1]`.
pub fn segment_distance(p0: &Vec3, p1: &Vec3, q0: &Vec3, q1: &Vec3) -> f64 {
    let d1 = p1 - p0;
    let d2 = q1 - q0;
    let r = p0 - q0;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let (s, t);
    if a <= f64::EPSILON && e <= f64::EPSILON {
        return r.norm();
    }
    if a <= f64::EPSILON {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= f64::EPSILON {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > 0.0 {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    ((p0 + d1 * s) - (q0 + d2 * t)).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_z_cylinder() -> CylinderGeom {
        CylinderGeom::new(Vec3::zeros(), Vec3::new(0.0, 0.0, 1.0), 0.1).unwrap()
    }

    #[test]
    fn cloud_rejects_bad_input() {
        assert!(matches!(
            PointCloud::new(vec![], vec![]),
            Err(Error::EmptyCloud)
        ));
        assert!(PointCloud::new(vec![Vec3::zeros()], vec![Vec3::new(0.0, 0.0, 2.0)]).is_err());
        assert!(PointCloud::new(vec![Vec3::zeros()], vec![]).is_err());
    }

    #[test]
    fn cylinder_sdf_examples() {
        let c = unit_z_cylinder();
        assert!(signed_distance_to_cylinder(&Vec3::new(0.1, 0.0, 0.5), &c).abs() < 1e-15);
        assert!((signed_distance_to_cylinder(&Vec3::new(0.0, 0.0, 0.5), &c) + 0.1).abs() < 1e-15);
        assert!((signed_distance_to_cylinder(&Vec3::new(0.3, 0.0, 0.5), &c) - 0.2).abs() < 1e-15);
        // beyond the cap, diagonal corner region
        let d = signed_distance_to_cylinder(&Vec3::new(0.4, 0.0, 1.4), &c);
        assert!((d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cylinder_rejected() {
        assert!(CylinderGeom::new(Vec3::zeros(), Vec3::zeros(), 0.1).is_err());
        assert!(CylinderGeom::new(Vec3::zeros(), Vec3::x(), 0.0).is_err());
    }

    #[test]
    fn sign_convention_examples() {
        let cloud = PointCloud::new(vec![Vec3::zeros()], vec![Vec3::z()]).unwrap();
        let index = SpatialIndex::build(cloud).unwrap();
        assert_eq!(signed_distance_to_cloud(&Vec3::zeros(), &index), (1.0, 0.0));
        let (s, d) = signed_distance_to_cloud(&Vec3::new(0.0, 0.0, -0.01), &index);
        assert_eq!(s, 1.0);
        assert!((d - 0.01).abs() < 1e-15);
        let (s, d) = signed_distance_to_cloud(&Vec3::new(0.0, 0.0, 0.01), &index);
        assert_eq!(s, -1.0);
        assert!((d - 0.01).abs() < 1e-15);
    }

    #[test]
    fn segment_distance_cases() {
        let d = segment_distance(
            &Vec3::zeros(),
            &Vec3::x(),
            &Vec3::new(0.5, 1.0, 0.0),
            &Vec3::new(0.5, 1.0, 1.0),
        );
        assert!((d - 1.0).abs() < 1e-15);
        let d = segment_distance(
            &Vec3::zeros(),
            &Vec3::x(),
            &Vec3::new(2.0, 0.0, 0.0),
            &Vec3::new(3.0, 0.0, 0.0),
        );
        assert!((d - 1.0).abs() < 1e-15);
    }

    fn vec3_strategy() -> impl Strategy<Value = Vec3> {
        (-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn cylinder_sdf_is_one_lipschitz(p in vec3_strategy(), q in vec3_strategy(),
                                         a in vec3_strategy(), b in vec3_strategy(),
                                         r in 0.01f64..0.5) {
            prop_assume!((b - a).norm() > 1e-3);
            let c = CylinderGeom::new(a, b, r).unwrap();
            let lhs = (signed_distance_to_cylinder(&p, &c) - signed_distance_to_cylinder(&q, &c)).abs();
            prop_assert!(lhs <= (p - q).norm() + 1e-12);
        }

        #[test]
        fn sign_flips_under_tangent_plane_reflection(px in -1.0f64..1.0, py in -1.0f64..1.0,
                                                     off in 1e-4f64..0.05) {
            // A single object point makes the nearest neighbour invariant under reflection.
            let obj = Vec3::new(px, py, 0.0);
            let n = Vec3::new(0.3, -0.2, 1.0).normalize();
            let index = SpatialIndex::build(PointCloud::new(vec![obj], vec![n]).unwrap()).unwrap();
            let tangent = Vec3::new(1.0, 0.0, -0.3).normalize();
            let h = obj + n * off + tangent * 0.01;
            let reflected = h - n * (2.0 * (h - obj).dot(&n));
            let (s1, d1) = signed_distance_to_cloud(&h, &index);
            let (s2, d2) = signed_distance_to_cloud(&reflected, &index);
            prop_assert_eq!(s1, -s2);
            prop_assert!((d1 - d2).abs() < 1e-12);
        }
    }
}
