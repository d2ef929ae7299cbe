//! Triangle meshes, primitive generators and area-weighted surface sampling.

use std::f64::consts::PI;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CylinderGeom, PointCloud, Vec3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub faces: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let n = vertices.len() as u32;
        if let Some(f) = faces.iter().find(|f| f.iter().any(|&v| v >= n)) {
            return Err(Error::InvalidGeometry(format!(
                "face {f:?} references a vertex beyond {n}"
            )));
        }
        Ok(TriMesh { vertices, faces })
    }

    pub fn triangle(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    /// Unnormalized face normal; its norm is twice the triangle area.
    pub fn face_cross(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.triangle(f);
        (b - a).cross(&(c - a))
    }

    pub fn area(&self) -> f64 {
        (0..self.faces.len())
            .map(|f| 0.5 * self.face_cross(f).norm())
            .sum()
    }

    /// Appends `other`, re-indexing its faces.
    pub fn append(&mut self, other: &TriMesh) {
        let base = self.vertices.len() as u32;
        self.vertices.extend_from_slice(&other.vertices);
        self.faces
            .extend(other.faces.iter().map(|f| [f[0] + base, f[1] + base, f[2] + base]));
    }

    /// Axis-aligned box centred at the origin, outward winding.
    pub fn cuboid(half: Vec3) -> TriMesh {
        let mut vertices = Vec::with_capacity(8);
        for i in 0..8 {
            vertices.push(Vec3::new(
                if i & 1 == 0 { -half.x } else { half.x },
                if i & 2 == 0 { -half.y } else { half.y },
                if i & 4 == 0 { -half.z } else { half.z },
            ));
        }
        let faces = vec![
            [0, 2, 1], [1, 2, 3], // -z
            [4, 5, 6], [5, 7, 6], // +z
            [0, 1, 4], [1, 5, 4], // -y
            [2, 6, 3], [3, 6, 7], // +y
            [0, 4, 2], [2, 4, 6], // -x
            [1, 3, 5], [3, 7, 5], // +x
        ];
        TriMesh { vertices, faces }
    }

    /// Latitude/longitude sphere centred at the origin.
    pub fn uv_sphere(radius: f64, segments: u32, rings: u32) -> TriMesh {
        let segments = segments.max(3);
        let rings = rings.max(2);
        let mut vertices = vec![Vec3::new(0.0, 0.0, radius)];
        for r in 1..rings {
            let theta = PI * r as f64 / rings as f64;
            for s in 0..segments {
                let phi = 2.0 * PI * s as f64 / segments as f64;
                vertices.push(
                    Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
                        * radius,
                );
            }
        }
        vertices.push(Vec3::new(0.0, 0.0, -radius));
        let south = vertices.len() as u32 - 1;
        let ring = |r: u32, s: u32| 1 + r * segments + (s % segments);
        let mut faces = Vec::new();
        for s in 0..segments {
            faces.push([0, ring(0, s), ring(0, s + 1)]);
        }
        for r in 0..rings - 2 {
            for s in 0..segments {
                let (a, b) = (ring(r, s), ring(r, s + 1));
                let (c, d) = (ring(r + 1, s), ring(r + 1, s + 1));
                faces.push([a, c, d]);
                faces.push([a, d, b]);
            }
        }
        for s in 0..segments {
            faces.push([south, ring(rings - 2, s + 1), ring(rings - 2, s)]);
        }
        TriMesh { vertices, faces }
    }

    /// Closed cylinder with caps around an arbitrary axis segment.
    pub fn cylinder(cyl: &CylinderGeom, segments: u32) -> TriMesh {
        let segments = segments.max(3);
        let axis = cyl.axis_end - cyl.axis_start;
        let u = axis.normalize();
        let seed = if u.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let e1 = (seed - u * seed.dot(&u)).normalize();
        let e2 = u.cross(&e1);
        let mut vertices = vec![cyl.axis_start, cyl.axis_end];
        for s in 0..segments {
            let phi = 2.0 * PI * s as f64 / segments as f64;
            let off = (e1 * phi.cos() + e2 * phi.sin()) * cyl.radius;
            vertices.push(cyl.axis_start + off);
            vertices.push(cyl.axis_end + off);
        }
        let bottom = |s: u32| 2 + 2 * (s % segments);
        let top = |s: u32| 3 + 2 * (s % segments);
        let mut faces = Vec::new();
        for s in 0..segments {
            faces.push([0, bottom(s + 1), bottom(s)]);
            faces.push([1, top(s), top(s + 1)]);
            faces.push([bottom(s), bottom(s + 1), top(s + 1)]);
            faces.push([bottom(s), top(s + 1), top(s)]);
        }
        TriMesh { vertices, faces }
    }
}

/// Writes named bodies as one Wavefront OBJ file, one `o` group per body.
pub fn write_obj<W: std::io::Write>(w: &mut W, bodies: &[(&str, &TriMesh)]) -> std::io::Result<()> {
    let mut base = 1usize;
    for (name, mesh) in bodies {
        writeln!(w, "o {name}")?;
        for v in &mesh.vertices {
            writeln!(w, "v {} {} {}", v.x, v.y, v.z)?;
        }
        for f in &mesh.faces {
            writeln!(w, "f {} {} {}", f[0] as usize + base, f[1] as usize + base, f[2] as usize + base)?;
        }
        base += mesh.vertices.len();
    }
    Ok(())
}

/// Draws `n` points uniformly by area, each tagged with its face normal.
/// The RNG is a ChaCha stream keyed by `seed`, so output is reproducible.
pub fn sample_surface(mesh: &TriMesh, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidGeometry("sample count must be at least 1".into()));
    }
    let crosses: Vec<Vec3> = (0..mesh.faces.len()).map(|f| mesh.face_cross(f)).collect();
    let areas: Vec<f64> = crosses.iter().map(|c| 0.5 * c.norm()).collect();
    let total: f64 = areas.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateMesh);
    }
    let pick = WeightedIndex::new(&areas).map_err(|_| Error::DegenerateMesh)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    let mut normals = Vec::with_capacity(n);
    for _ in 0..n {
        let f = pick.sample(&mut rng);
        let [a, b, c] = mesh.triangle(f);
        let r1: f64 = rng.random();
        let r2: f64 = rng.random();
        let s = r1.sqrt();
        points.push(a * (1.0 - s) + b * (s * (1.0 - r2)) + c * (s * r2));
        normals.push(crosses[f].normalize());
    }
    PointCloud::new(points, normals)
}
