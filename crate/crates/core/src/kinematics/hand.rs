//! Hand descriptions: a JSON-serializable kinematic tree and the parametric
//! built-in hand.
//!
//! Frame conventions for every link: the phalange extends along local `+z`,
//! flexion joints rotate about local `+x` so positive angles curl toward
//! local `-y`, and the "inner" (palmar) samples are the half of the cylinder
//! surface facing local `-y`.

use std::f64::consts::PI;

use nalgebra::{Isometry3, Translation3, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CylinderGeom, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginDesc {
    #[serde(default)]
    pub xyz: [f64; 3],
    /// Roll, pitch, yaw (radians), composed as `Rz(yaw) Ry(pitch) Rx(roll)`.
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl OriginDesc {
    pub fn at(xyz: [f64; 3]) -> Self {
        OriginDesc { xyz, rpy: [0.0; 3] }
    }

    pub fn isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::new(self.xyz[0], self.xyz[1], self.xyz[2]),
            UnitQuaternion::from_euler_angles(self.rpy[0], self.rpy[1], self.rpy[2]),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointDesc {
    pub axis: [f64; 3],
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CylinderDesc {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
}

/// How a link's surface samples are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SampleDesc {
    /// Regular grid on the cylinder: `inner` palmar samples plus
    /// `total - inner` dorsal samples.
    Grid { inner: usize, total: usize },
    /// Explicit link-frame points; `inner` lists indices into `points`.
    Explicit {
        points: Vec<[f64; 3]>,
        inner: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkDesc {
    pub name: String,
    pub parent: Option<usize>,
    #[serde(default = "identity_origin")]
    pub origin: OriginDesc,
    #[serde(default)]
    pub joint: Option<JointDesc>,
    #[serde(default)]
    pub cylinder: Option<CylinderDesc>,
    #[serde(default)]
    pub samples: Option<SampleDesc>,
}

fn identity_origin() -> OriginDesc {
    OriginDesc::at([0.0; 3])
}

/// Full kinematic description. Links must be listed parents-first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandDescription {
    pub name: String,
    pub links: Vec<LinkDesc>,
}

impl HandDescription {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidHand(e.to_string()))
    }
}

/// Parameters of the built-in hand. Every field has a default, so a JSON
/// override only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HandSpec {
    /// Finger count; finger 0 is an opposed thumb whenever there are two or more.
    pub fingers: usize,
    /// Joints per finger. With three or more, the first is an abduction joint
    /// and the rest flex; with fewer, every joint flexes (planar fingers).
    pub joints_per_finger: usize,
    /// Serial wrist joints between the hand base and the palm.
    pub wrist: usize,
    /// Phalange lengths, proximal to distal (m); the last entry repeats.
    pub phalanx_lengths: Vec<f64>,
    pub phalanx_radius: f64,
    pub finger_spacing: f64,
    /// Palm is a cylinder lying across the knuckle line.
    pub palm_half_width: f64,
    pub palm_radius: f64,
    pub palm_height: f64,
    /// Height of the knuckle line above the palm frame origin.
    pub knuckle_height: f64,
    pub wrist_spacing: f64,
    pub inner_samples: usize,
    pub total_samples: usize,
    pub abduction_limit: f64,
    pub flexion_limits: [f64; 2],
    pub wrist_limit: f64,
}

impl Default for HandSpec {
    fn default() -> Self {
        HandSpec {
            fingers: 5,
            joints_per_finger: 4,
            wrist: 4,
            phalanx_lengths: vec![0.04, 0.025, 0.022],
            phalanx_radius: 0.0075,
            finger_spacing: 0.025,
            palm_half_width: 0.04,
            palm_radius: 0.02,
            palm_height: 0.04,
            knuckle_height: 0.075,
            wrist_spacing: 0.01,
            inner_samples: 16,
            total_samples: 32,
            abduction_limit: 0.35,
            flexion_limits: [0.0, 1.6],
            wrist_limit: 0.5,
        }
    }
}

impl HandSpec {
    pub fn num_joints(&self) -> usize {
        self.fingers * self.joints_per_finger + self.wrist
    }

    pub fn pose_dim(&self) -> usize {
        self.num_joints() + 9
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidHand(m.to_string()));
        if self.fingers == 0 {
            return bad("at least one finger is required");
        }
        if self.joints_per_finger == 0 {
            return bad("joints_per_finger must be at least 1");
        }
        if self.phalanx_lengths.is_empty() || self.phalanx_lengths.iter().any(|&l| !(l > 0.0)) {
            return bad("phalanx_lengths must be non-empty and positive");
        }
        for (name, v) in [
            ("phalanx_radius", self.phalanx_radius),
            ("palm_half_width", self.palm_half_width),
            ("palm_radius", self.palm_radius),
            ("finger_spacing", self.finger_spacing),
        ] {
            if !(v > 0.0) {
                return Err(Error::InvalidHand(format!("{name} must be positive")));
            }
        }
        if self.inner_samples == 0 || self.total_samples < self.inner_samples {
            return bad("need 1 <= inner_samples <= total_samples");
        }
        if !(self.flexion_limits[0] < self.flexion_limits[1])
            || !(self.abduction_limit > 0.0)
            || !(self.wrist_limit > 0.0)
        {
            return bad("joint limits must satisfy lower < upper");
        }
        Ok(())
    }

    /// Expands the parameters into an explicit link tree.
    pub fn describe(&self) -> Result<HandDescription> {
        self.validate()?;
        let samples = Some(SampleDesc::Grid {
            inner: self.inner_samples,
            total: self.total_samples,
        });
        let mut links = Vec::new();
        let mut parent = None;
        if self.wrist > 0 {
            links.push(LinkDesc {
                name: "base".into(),
                parent: None,
                origin: identity_origin(),
                joint: None,
                cylinder: None,
                samples: None,
            });
            parent = Some(0);
        }
        let wrist_axes = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for k in 0..self.wrist {
            let is_palm = k + 1 == self.wrist;
            links.push(LinkDesc {
                name: if is_palm { "palm".into() } else { format!("wrist{k}") },
                parent,
                origin: OriginDesc::at([0.0, 0.0, if k == 0 { 0.0 } else { self.wrist_spacing }]),
                joint: Some(JointDesc {
                    axis: wrist_axes[k % 3],
                    lower: -self.wrist_limit,
                    upper: self.wrist_limit,
                }),
                cylinder: None,
                samples: None,
            });
            parent = Some(links.len() - 1);
        }
        if self.wrist == 0 {
            links.push(LinkDesc {
                name: "palm".into(),
                parent: None,
                origin: identity_origin(),
                joint: None,
                cylinder: None,
                samples: None,
            });
        }
        let palm = links.len() - 1;
        links[palm].cylinder = Some(CylinderDesc {
            start: [-self.palm_half_width, 0.0, self.palm_height],
            end: [self.palm_half_width, 0.0, self.palm_height],
            radius: self.palm_radius,
        });
        links[palm].samples = samples.clone();

        let others = self.fingers.saturating_sub(1).max(1);
        for f in 0..self.fingers {
            let thumb = self.fingers >= 2 && f == 0;
            let base = if thumb {
                OriginDesc {
                    xyz: [
                        -self.palm_half_width - 0.01,
                        -0.5 * self.palm_radius,
                        self.palm_height - 0.01,
                    ],
                    rpy: [0.0, -0.5, 0.5],
                }
            } else {
                let slot = if self.fingers >= 2 { f - 1 } else { 0 };
                let x = (slot as f64 - (others as f64 - 1.0) / 2.0) * self.finger_spacing;
                OriginDesc::at([x, 0.0, self.knuckle_height])
            };
            let name = if thumb { "thumb".to_string() } else { format!("finger{f}") };
            let mut chain_parent = palm;
            let mut origin = base;
            let flexions = if self.joints_per_finger >= 3 {
                links.push(LinkDesc {
                    name: format!("{name}_abd"),
                    parent: Some(chain_parent),
                    origin,
                    joint: Some(JointDesc {
                        axis: [0.0, 1.0, 0.0],
                        lower: -self.abduction_limit,
                        upper: self.abduction_limit,
                    }),
                    cylinder: None,
                    samples: None,
                });
                chain_parent = links.len() - 1;
                origin = identity_origin();
                self.joints_per_finger - 1
            } else {
                self.joints_per_finger
            };
            for k in 0..flexions {
                let len = self.phalanx_lengths[k.min(self.phalanx_lengths.len() - 1)];
                links.push(LinkDesc {
                    name: format!("{name}_p{k}"),
                    parent: Some(chain_parent),
                    origin: origin.clone(),
                    joint: Some(JointDesc {
                        axis: [1.0, 0.0, 0.0],
                        lower: self.flexion_limits[0],
                        upper: self.flexion_limits[1],
                    }),
                    cylinder: Some(CylinderDesc {
                        start: [0.0; 3],
                        end: [0.0, 0.0, len],
                        radius: self.phalanx_radius,
                    }),
                    samples: samples.clone(),
                });
                chain_parent = links.len() - 1;
                origin = OriginDesc::at([0.0, 0.0, len]);
            }
        }
        Ok(HandDescription {
            name: "dgforge-default".into(),
            links,
        })
    }
}

/// Grid samples on a cylinder's lateral surface, palmar half first.
/// Returns `(points, inner indices)` in the link frame.
pub(crate) fn grid_samples(
    cyl: &CylinderGeom,
    inner: usize,
    total: usize,
) -> Result<(Vec<Vec3>, Vec<usize>)> {
    let axis = cyl.axis_end - cyl.axis_start;
    let u = axis.normalize();
    let palmar = -Vec3::y() + u * u.y;
    if palmar.norm() < 1e-6 {
        return Err(Error::InvalidHand(
            "cylinder axis parallel to y has no palmar side".into(),
        ));
    }
    let p = palmar.normalize();
    let e = u.cross(&p);
    let ring = |n: usize, phase: f64, out: &mut Vec<Vec3>| {
        if n == 0 {
            return;
        }
        let rows = ((n as f64).sqrt().round() as usize).max(1);
        let cols = n.div_ceil(rows);
        'fill: for r in 0..rows {
            let frac = 0.2 + 0.6 * (r as f64 + 0.5) / rows as f64;
            for c in 0..cols {
                if out.len() >= n {
                    break 'fill;
                }
                let psi = phase - PI / 2.0 + (c as f64 + 0.5) * PI / cols as f64;
                let dir = p * psi.cos() + e * psi.sin();
                out.push(cyl.axis_start + axis * frac + dir * cyl.radius);
            }
        }
    };
    let mut inner_pts = Vec::with_capacity(inner);
    ring(inner, 0.0, &mut inner_pts);
    let mut outer_pts = Vec::with_capacity(total - inner);
    ring(total - inner, PI, &mut outer_pts);
    let idx = (0..inner_pts.len()).collect();
    inner_pts.extend(outer_pts);
    Ok((inner_pts, idx))
}
