//! Toy objects, grasp records and their on-disk layout, plus reference-grasp
//! synthesis by direct energy minimization.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{filter_grasp, EvalConfig, EvalReport};
use crate::geometry::ply::{read_ply_file, write_mesh, PlyFormat};
use crate::geometry::{sample_surface, signed_distance_to_cloud, signed_distance_to_cylinder, CylinderGeom, PointCloud, SpatialIndex, TriMesh, Vec3};
use crate::kinematics::{forward_kinematics, FkResult, HandPose, KinematicHandModel};
use crate::objectives::{evaluate_on_fk, ConstraintConfig, ConstraintWeights};
use crate::parallel::{try_map_indexed, Exec};
use crate::train::{TrainObject, TrainSample, TrainSet};

pub const MANIFEST_FORMAT: &str = "dgforge-dataset";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RECORDS_FILE: &str = "grasps.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Deterministic 80/20 split keyed on a hash of the object id.
pub fn split_for(object_id: &str) -> Split {
    let digest = Sha256::digest(object_id.as_bytes());
    let v = u64::from_le_bytes(digest[..8].try_into().unwrap());
    if v % 5 == 0 {
        Split::Test
    } else {
        Split::Train
    }
}

/// Stable seed derived from a string (for per-object clouds).
pub fn seed_for(key: &str) -> u64 {
    let digest = Sha256::digest(key.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// One grasp: object id, pose in physical units, split and origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraspRecord {
    pub object_id: String,
    pub pose: Vec<f64>,
    pub split: Split,
    pub provenance: String,
}

impl GraspRecord {
    pub fn validate(&self, pose_dim: usize) -> Result<()> {
        if self.pose.len() != pose_dim {
            return Err(Error::DimensionMismatch {
                what: "grasp record pose",
                expected: pose_dim,
                got: self.pose.len(),
            });
        }
        if self.pose.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("pose of object {}", self.object_id)));
        }
        Ok(())
    }
}

/// Reads line-delimited JSON values, naming the offending line on failure.
/// Blank lines are skipped.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    Ok(s)
}

/// Writes a file in one go, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half: [f64; 3] },
    Cylinder { radius: f64, half_height: f64 },
}

impl Shape {
    pub fn mesh(&self) -> TriMesh {
        match *self {
            Shape::Sphere { radius } => TriMesh::uv_sphere(radius, 32, 16),
            Shape::Box { half } => TriMesh::cuboid(Vec3::from(half)),
            Shape::Cylinder { radius, half_height } => {
                let cyl = CylinderGeom {
                    axis_start: Vec3::new(0.0, 0.0, -half_height),
                    axis_end: Vec3::new(0.0, 0.0, half_height),
                    radius,
                };
                TriMesh::cylinder(&cyl, 32)
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Sphere { .. } => "sphere",
            Shape::Box { .. } => "box",
            Shape::Cylinder { .. } => "cylinder",
        }
    }
}

/// Size ranges and counts for the toy object set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub objects: usize,
    pub grasps_per_object: usize,
    /// Surface samples per object cloud.
    pub cloud_points: usize,
    pub sphere_radius: [f64; 2],
    pub box_half: [f64; 2],
    pub cylinder_radius: [f64; 2],
    pub cylinder_half_height: [f64; 2],
    pub synth: SynthConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            objects: 50,
            grasps_per_object: 10,
            cloud_points: 2048,
            sphere_radius: [0.025, 0.04],
            box_half: [0.02, 0.035],
            cylinder_radius: [0.02, 0.035],
            cylinder_half_height: [0.04, 0.06],
            synth: SynthConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("sphere_radius", self.sphere_radius),
            ("box_half", self.box_half),
            ("cylinder_radius", self.cylinder_radius),
            ("cylinder_half_height", self.cylinder_half_height),
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return Err(Error::InvalidConfig(format!("{name} must satisfy 0 < lo <= hi")));
            }
        }
        if self.cloud_points == 0 {
            return Err(Error::InvalidConfig("cloud_points must be positive".into()));
        }
        self.synth.validate()
    }
}

/// Reference-grasp synthesis: heuristic placement, finger closing, then
/// gradient descent on the weighted constraint energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub attempts_per_grasp: usize,
    pub weights: ConstraintWeights,
    pub steps: usize,
    /// Step sizes for translation (m) and for angles and rotation entries.
    pub lr_trans: f64,
    pub lr_angle: f64,
    /// Flexion increment while closing (rad).
    pub close_step: f64,
    /// Outside distance at which a closing finger stops (m).
    pub close_gap: f64,
    /// Clearance between the object and the open hand at placement (m).
    pub standoff: f64,
    /// Upper bound of the random initial flexion (rad).
    pub preflex: f64,
    /// Object-into-link depth that triggers a back-off step (m).
    pub backoff_depth: f64,
    pub backoff_iterations: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            attempts_per_grasp: 4,
            weights: ConstraintWeights::new(1.0, 0.5, 0.5),
            steps: 60,
            lr_trans: 5e-4,
            lr_angle: 0.01,
            close_step: 0.02,
            close_gap: 0.001,
            standoff: 0.002,
            preflex: 0.3,
            backoff_depth: 0.0005,
            backoff_iterations: 80,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.attempts_per_grasp == 0 || !(self.lr_trans >= 0.0 && self.lr_angle >= 0.0 && self.close_step > 0.0) {
            return Err(Error::InvalidConfig("synthesis needs attempts > 0, non-negative step sizes".into()));
        }
        Ok(())
    }
}

/// A toy object with its sampled surface cloud.
#[derive(Debug, Clone)]
pub struct ToyObject {
    pub id: String,
    pub shape: Shape,
    pub mesh: TriMesh,
    pub cloud: PointCloud,
    pub split: Split,
}

impl ToyObject {
    pub fn new(id: String, shape: Shape, cloud_points: usize) -> Result<Self> {
        let mesh = shape.mesh();
        let cloud = object_cloud(&id, &mesh, cloud_points)?;
        let split = split_for(&id);
        Ok(ToyObject {
            id,
            shape,
            mesh,
            cloud,
            split,
        })
    }
}

/// The surface cloud of an object mesh, seeded by the object id.
pub fn object_cloud(id: &str, mesh: &TriMesh, n: usize) -> Result<PointCloud> {
    sample_surface(mesh, n, seed_for(id))
}

/// Draws `n` objects cycling sphere, box, cylinder with random sizes.
pub fn toy_shapes(cfg: &DatasetConfig, seed: u64) -> Vec<(String, Shape)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.objects)
        .map(|i| {
            let mut u = |r: [f64; 2]| if r[1] > r[0] { rng.random_range(r[0]..=r[1]) } else { r[0] };
            let shape = match i % 3 {
                0 => Shape::Sphere {
                    radius: u(cfg.sphere_radius),
                },
                1 => Shape::Box {
                    half: [u(cfg.box_half), u(cfg.box_half), u(cfg.box_half)],
                },
                _ => Shape::Cylinder {
                    radius: u(cfg.cylinder_radius),
                    half_height: u(cfg.cylinder_half_height),
                },
            };
            (format!("{}_{:04}", shape.name(), i), shape)
        })
        .collect()
}

fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
    let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    *uq.to_rotation_matrix().matrix()
}

/// Roles of the hand joints used by the closing heuristic.
struct JointRoles {
    /// Flexion joints, each with the links it moves.
    flexion: Vec<usize>,
    abduction: Vec<usize>,
}

fn joint_roles(model: &KinematicHandModel) -> JointRoles {
    let mut flexion = Vec::new();
    let mut abduction = Vec::new();
    for j in 0..model.num_joints() {
        let name = &model.links()[model.joint_link(j)].name;
        if name.ends_with("_abd") {
            abduction.push(j);
        } else if name.contains("_p") {
            flexion.push(j);
        }
    }
    JointRoles { flexion, abduction }
}

/// Adam on a small vector with per-coordinate step sizes.
struct PoseAdam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl PoseAdam {
    fn new(n: usize) -> Self {
        PoseAdam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    fn apply(&mut self, x: &mut [f64], g: &[f64], lr: &[f64]) {
        self.step += 1;
        let (b1, b2) = (0.9f64, 0.999f64);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for i in 0..x.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            x[i] -= lr[i] * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-12);
        }
    }
}

/// Per-cylinder clearance: the smallest signed distance from any object
/// point to each world cylinder (negative when the object pokes inside).
fn cylinder_clearances(fk: &FkResult, cloud: &PointCloud) -> Vec<f64> {
    fk.world_cylinders
        .iter()
        .map(|c| {
            cloud
                .points()
                .iter()
                .map(|q| signed_distance_to_cylinder(q, c))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Pose that puts the object centre at `center_hand` in the hand frame.
fn place(theta: &[f64], rot: &Matrix3<f64>, center_hand: &Vec3) -> HandPose {
    HandPose::from_parts(theta.to_vec(), rot, -(rot * center_hand))
}

/// One synthesis attempt. Returns the optimized pose and its evaluation.
pub fn synthesize_grasp(
    model: &KinematicHandModel,
    index: &SpatialIndex,
    constraints: &ConstraintConfig,
    synth: &SynthConfig,
    eval: &EvalConfig,
    rng: &mut impl Rng,
) -> Result<(HandPose, EvalReport)> {
    let k = model.num_joints();
    let cloud = index.cloud();
    let roles = joint_roles(model);
    let mut theta = vec![0.0; k];
    for &j in &roles.abduction {
        let (lo, hi) = model.joint_limits()[j];
        theta[j] = rng.random_range(lo * 0.5..hi * 0.5);
    }
    for &j in &roles.flexion {
        theta[j] = rng.random_range(0.0..synth.preflex);
    }

    // Object in front of the fingers: slide it along the palm normal until
    // its surface sits `standoff` away from the open hand.
    let rest = forward_kinematics(model, &HandPose { theta: theta.clone(), ..model.rest_pose() }, false)?;
    let knuckle_z = model
        .links()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.name.ends_with("_p0") && !l.name.starts_with("thumb"))
        .map(|(i, _)| rest.link_frames[i].translation.vector.z)
        .fold(f64::NEG_INFINITY, f64::max);
    if !knuckle_z.is_finite() {
        return Err(Error::InvalidHand("synthesis needs finger links named *_p0".into()));
    }
    let rot = random_rotation(rng);
    let (x_off, z_off) = (rng.random_range(-0.01..0.01), rng.random_range(0.0..0.03));
    let center_at = |depth: f64| Vec3::new(x_off, -depth, knuckle_z + z_off);
    let min_clear = |depth: f64| -> Result<f64> {
        let fk = forward_kinematics(model, &place(&theta, &rot, &center_at(depth)), false)?;
        Ok(cylinder_clearances(&fk, cloud).into_iter().fold(f64::INFINITY, f64::min))
    };
    let (mut lo, mut hi) = (0.0, 0.3);
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        if min_clear(mid)? < synth.standoff {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut pose = place(&theta, &rot, &center_at(hi));

    // Close each flexion joint until a link it moves comes within the gap.
    let mut active: Vec<usize> = roles.flexion.clone();
    while !active.is_empty() {
        let fk = forward_kinematics(model, &pose, false)?;
        let clear = cylinder_clearances(&fk, cloud);
        let touching: Vec<usize> = fk
            .cylinder_links
            .iter()
            .zip(&clear)
            .filter(|(_, c)| **c <= synth.close_gap)
            .map(|(l, _)| *l)
            .collect();
        active.retain(|&j| {
            let stop = touching.iter().any(|&l| model.joint_moves_link(j, l));
            !stop && pose.theta[j] + synth.close_step <= model.joint_limits()[j].1
        });
        for &j in &active {
            pose.theta[j] += synth.close_step;
        }
    }

    // Refine on the constraint energy.
    let cfg = constraints.with_weights(synth.weights);
    let mut x = pose.to_vec();
    let mut lr = vec![synth.lr_angle; x.len()];
    for v in lr[k + 6..].iter_mut() {
        *v = synth.lr_trans;
    }
    let mut opt = PoseAdam::new(x.len());
    for _ in 0..synth.steps {
        let p = HandPose::from_slice(&x, k)?;
        let fk = forward_kinematics(model, &p, true)?;
        let e = evaluate_on_fk(&fk, model, index, &cfg, false)?;
        opt.apply(&mut x, &e.combined.grad_pose, &lr);
        let mut p = HandPose::from_slice(&x, k)?;
        model.clamp_pose(&mut p);
        x = p.to_vec();
    }
    let mut pose = HandPose::from_slice(&x, k)?;
    pose.canonicalize()?;

    // Back off links the object still pokes into: open the joint driving
    // the link, or pull the whole hand back for links without a joint path.
    for _ in 0..synth.backoff_iterations {
        let fk = forward_kinematics(model, &pose, false)?;
        let clear = cylinder_clearances(&fk, cloud);
        let mut depth = vec![f64::NEG_INFINITY; model.links().len()];
        for (l, c) in fk.cylinder_links.iter().zip(&clear) {
            depth[*l] = depth[*l].max(-c);
        }
        for (p, &l) in fk.world_points.iter().zip(model.point_links()) {
            let (s, d) = signed_distance_to_cloud(p, index);
            depth[l] = depth[l].max(s * d);
        }
        let inside: Vec<usize> = (0..depth.len()).filter(|&l| depth[l] >= synth.backoff_depth).collect();
        if inside.is_empty() {
            break;
        }
        let mut pulled = false;
        for &l in &inside {
            // the most distal joint on the link's chain that can still open
            let limits = model.joint_limits();
            let driver = roles
                .flexion
                .iter()
                .copied()
                .filter(|&j| model.joint_moves_link(j, l) && pose.theta[j] > limits[j].0)
                .max();
            match driver {
                Some(j) => pose.theta[j] = (pose.theta[j] - synth.close_step).max(limits[j].0),
                None => pulled = true,
            }
        }
        if pulled {
            let back = fk.rotation() * Vec3::y();
            pose.trans += back * synth.close_gap;
        }
    }
    let (_, report) = filter_grasp(&pose, model, index, eval)?;
    Ok((pose, report))
}

/// Up to `count` accepted grasps for one object; each grasp gets a fixed
/// number of attempts.
pub fn synthesize_object_grasps(
    model: &KinematicHandModel,
    object: &ToyObject,
    count: usize,
    constraints: &ConstraintConfig,
    synth: &SynthConfig,
    eval: &EvalConfig,
    seed: u64,
) -> Result<Vec<HandPose>> {
    let index = SpatialIndex::build(object.cloud.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..count {
        for _ in 0..synth.attempts_per_grasp {
            let (pose, report) = synthesize_grasp(model, &index, constraints, synth, eval, &mut rng)?;
            if report.accepted {
                out.push(pose);
                break;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: String,
    pub shape: Shape,
    pub split: Split,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub pose_dim: usize,
    pub cloud_points: usize,
    pub objects: Vec<ObjectEntry>,
    pub records_file: String,
    pub records_sha256: String,
    pub record_count: usize,
}

/// A dataset in memory: objects keyed by id, plus grasp records.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub objects: BTreeMap<String, ToyObject>,
    pub records: Vec<GraspRecord>,
    pub manifest: Manifest,
}

/// Generates objects and reference grasps. Each object draws from its own
/// RNG stream, so the result does not depend on the worker count.
pub fn generate(
    model: &KinematicHandModel,
    cfg: &DatasetConfig,
    constraints: &ConstraintConfig,
    eval: &EvalConfig,
    seed: u64,
    exec: Exec,
) -> Result<(Vec<ToyObject>, Vec<GraspRecord>)> {
    cfg.validate()?;
    let shapes = toy_shapes(cfg, seed);
    let objects: Vec<ToyObject> = shapes
        .into_iter()
        .map(|(id, shape)| ToyObject::new(id, shape, cfg.cloud_points))
        .collect::<Result<_>>()?;
    let per_object = try_map_indexed(exec, objects.len(), |i| {
        let obj_seed = seed_for(&format!("{seed}/{}", objects[i].id));
        synthesize_object_grasps(model, &objects[i], cfg.grasps_per_object, constraints, &cfg.synth, eval, obj_seed)
    })?;
    let mut records = Vec::new();
    for (obj, poses) in objects.iter().zip(per_object) {
        for p in poses {
            records.push(GraspRecord {
                object_id: obj.id.clone(),
                pose: p.to_vec(),
                split: obj.split,
                provenance: "energy-minimization".into(),
            });
        }
    }
    Ok((objects, records))
}

/// Training set over `objects`: every record of those objects becomes a sample.
pub fn train_set<'a>(objects: impl IntoIterator<Item = &'a ToyObject>, records: &[GraspRecord], loss_points: usize) -> Result<TrainSet> {
    let mut set = TrainSet::default();
    let mut slot = BTreeMap::new();
    for obj in objects {
        slot.insert(obj.id.clone(), set.objects.len());
        set.objects.push(TrainObject::new(obj.id.clone(), obj.cloud.clone(), loss_points, seed_for(&obj.id))?);
    }
    for r in records {
        if let Some(&object) = slot.get(&r.object_id) {
            set.samples.push(TrainSample {
                object,
                pose: r.pose.clone(),
            });
        }
    }
    if set.samples.is_empty() {
        return Err(Error::InvalidConfig("no training grasps for the selected objects".into()));
    }
    Ok(set)
}

fn object_file(id: &str) -> String {
    format!("objects/{id}.ply")
}

/// Writes objects, records and the manifest under `dir`.
pub fn write_dataset(dir: &Path, objects: &[ToyObject], records: &[GraspRecord], pose_dim: usize, cloud_points: usize) -> Result<Manifest> {
    let mut entries = Vec::new();
    for obj in objects {
        let mut bytes = Vec::new();
        write_mesh(&mut bytes, &obj.mesh, PlyFormat::Ascii, Some(obj.shape.name())).map_err(|e| Error::io(dir, e))?;
        let file = object_file(&obj.id);
        write_file(&dir.join(&file), &bytes)?;
        entries.push(ObjectEntry {
            id: obj.id.clone(),
            shape: obj.shape,
            split: obj.split,
            file,
            sha256: sha256_hex(&bytes),
        });
    }
    let text = to_jsonl(records)?;
    write_file(&dir.join(RECORDS_FILE), text.as_bytes())?;
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: 1,
        pose_dim,
        cloud_points,
        objects: entries,
        records_file: RECORDS_FILE.into(),
        records_sha256: sha256_hex(text.as_bytes()),
        record_count: records.len(),
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_file(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

fn read_verified(dir: &Path, file: &str, sha: &str) -> Result<(PathBuf, Vec<u8>)> {
    let path = dir.join(file);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if sha256_hex(&bytes) != sha {
        return Err(Error::InvalidConfig(format!("{} does not match its manifest hash", path.display())));
    }
    Ok((path, bytes))
}

impl Dataset {
    /// Loads and verifies a dataset directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Record {
            path: mpath.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::InvalidConfig(format!("{} is not a dataset manifest", mpath.display())));
        }
        let mut objects = BTreeMap::new();
        for e in &manifest.objects {
            let (path, _) = read_verified(dir, &e.file, &e.sha256)?;
            let mesh = read_ply_file(&path)?.into_mesh()?;
            let cloud = object_cloud(&e.id, &mesh, manifest.cloud_points)?;
            objects.insert(
                e.id.clone(),
                ToyObject {
                    id: e.id.clone(),
                    shape: e.shape,
                    mesh,
                    cloud,
                    split: e.split,
                },
            );
        }
        let (rpath, _) = read_verified(dir, &manifest.records_file, &manifest.records_sha256)?;
        let records: Vec<GraspRecord> = read_jsonl(&rpath)?;
        for (i, r) in records.iter().enumerate() {
            r.validate(manifest.pose_dim).map_err(|e| Error::Record {
                path: rpath.clone(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(Dataset {
            objects,
            records,
            manifest,
        })
    }

    pub fn objects_in(&self, split: Split) -> Vec<&ToyObject> {
        self.objects.values().filter(|o| o.split == split).collect()
    }
}
