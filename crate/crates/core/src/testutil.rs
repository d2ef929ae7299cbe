//! Shared fixtures for unit tests.

use rand::Rng;

use crate::geometry::{sample_surface, PointCloud, SpatialIndex, TriMesh, Vec3};
use crate::kinematics::{HandDescription, HandPose, KinematicHandModel};

pub fn random_pose(model: &KinematicHandModel, rng: &mut impl Rng, trans_range: f64) -> HandPose {
    let theta = model
        .joint_limits()
        .iter()
        .map(|(lo, hi)| rng.random_range(*lo..*hi))
        .collect();
    let mut rot6d = [0.0; 6];
    for v in rot6d.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    rot6d[0] += 1.5;
    rot6d[4] += 1.5;
    let mut t = || if trans_range > 0.0 { rng.random_range(-trans_range..trans_range) } else { 0.0 };
    HandPose {
        theta,
        rot6d,
        trans: Vec3::new(t(), t(), t()),
    }
}

/// Single-link or multi-link hand built from explicit sample lists.
/// Each entry is `(points, inner indices)`; every link is a fixed child of link 0.
pub fn probe_hand(links: &[(Vec<[f64; 3]>, Vec<usize>)]) -> KinematicHandModel {
    let entries: Vec<String> = links
        .iter()
        .enumerate()
        .map(|(i, (pts, inner))| {
            let parent = if i == 0 { "null".to_string() } else { "0".to_string() };
            format!(
                r#"{{"name":"l{i}","parent":{parent},"samples":{{"points":{},"inner":{}}}}}"#,
                serde_json::to_string(pts).unwrap(),
                serde_json::to_string(inner).unwrap()
            )
        })
        .collect();
    let json = format!(r#"{{"name":"probe","links":[{}]}}"#, entries.join(","));
    KinematicHandModel::from_description(&HandDescription::from_json(&json).unwrap()).unwrap()
}

pub fn cloud_index(points: &[[f64; 3]], normals: &[[f64; 3]]) -> SpatialIndex {
    let p = points.iter().map(|v| Vec3::from(*v)).collect();
    let n = normals.iter().map(|v| Vec3::from(*v).normalize()).collect();
    SpatialIndex::build(PointCloud::new(p, n).unwrap()).unwrap()
}

pub fn sphere_index(radius: f64, n: usize, seed: u64) -> SpatialIndex {
    let mesh = TriMesh::uv_sphere(radius, 48, 24);
    SpatialIndex::build(sample_surface(&mesh, n, seed).unwrap()).unwrap()
}

/// Max-norm relative error between an analytic vector and a reference.
pub fn rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    let scale = reference
        .iter()
        .chain(analytic)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

/// Central differences of `f` over every coordinate of `x`.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            xp[i] = x[i] + h;
            let fp = f(&xp);
            xp[i] = x[i] - h;
            let fm = f(&xp);
            xp[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// One-joint hand next to a small sphere; the data varies only in the joint
/// angle (two equally likely narrow modes) and the palm sits partly inside
/// the sphere.
pub fn two_mode_toy(n: usize) -> (crate::model::GraspModel, crate::train::TrainSet) {
    use crate::diffusion::{Normalizer, ScheduleConfig};
    use crate::kinematics::{default_hand, HandSpec};
    use crate::net::NetConfig;
    use crate::train::{TrainObject, TrainSample, TrainSet};

    let hand = HandSpec {
        fingers: 1,
        joints_per_finger: 1,
        wrist: 0,
        ..HandSpec::default()
    };
    let cloud = sample_surface(&TriMesh::uv_sphere(0.03, 16, 8), 300, 1).unwrap();
    let objects = vec![TrainObject::new("ball", cloud, 300, 1).unwrap()];
    let mut rest = default_hand(&hand).unwrap().rest_pose().to_vec();
    let k = hand.num_joints();
    rest[k + 8] = 0.05;
    let mut rng = rand::SeedableRng::seed_from_u64(5);
    let spread = rand_distr::Normal::new(0.0, 0.05).unwrap();
    let samples: Vec<TrainSample> = (0..n)
        .map(|i| {
            let mut p = rest.clone();
            let jitter: f64 = rand_distr::Distribution::sample(&spread, &mut rng as &mut rand_chacha::ChaCha8Rng);
            p[0] = if i % 2 == 0 { 0.3 } else { 1.2 } + jitter;
            TrainSample { object: 0, pose: p }
        })
        .collect();
    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.pose.clone()).collect();
    let net = NetConfig {
        encoder_widths: vec![8, 8],
        hidden: vec![64, 64],
        time_dim: 16,
        semantic_dim: 0,
    };
    let sched = ScheduleConfig::default();
    let model = crate::model::GraspModel::new(hand, sched, net, 16, Normalizer::fit(&rows).unwrap(), 0).unwrap();
    (model, TrainSet { objects, samples })
}
