use super::*;
use nalgebra::Rotation3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pose(model: &KinematicHandModel, rng: &mut impl Rng) -> HandPose {
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
    HandPose {
        theta,
        rot6d,
        trans: Vec3::new(
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
        ),
    }
}

#[test]
fn default_hand_has_24_joints_and_33_dims() {
    let model = default_hand(&HandSpec::default()).unwrap();
    assert_eq!(model.num_joints(), 24);
    assert_eq!(model.pose_dim(), 33);
    assert_eq!(model.num_phalanges(), 16);
    assert_eq!(model.inner_indices().len(), 16 * model.num_phalanges());
    assert_eq!(model.num_points(), 32 * model.num_phalanges());
}

#[test]
fn planar_gripper_override() {
    let spec: HandSpec =
        serde_json::from_str(r#"{"fingers": 2, "joints_per_finger": 2, "wrist": 0}"#).unwrap();
    let model = default_hand(&spec).unwrap();
    assert_eq!(model.num_joints(), 4);
    assert_eq!(model.pose_dim(), 13);
}

#[test]
fn malformed_override_is_rejected() {
    assert!(serde_json::from_str::<HandSpec>(r#"{"fingerz": 2}"#).is_err());
    let spec = HandSpec {
        fingers: 0,
        ..HandSpec::default()
    };
    assert!(default_hand(&spec).is_err());
    let spec = HandSpec {
        flexion_limits: [1.0, 0.5],
        ..HandSpec::default()
    };
    assert!(default_hand(&spec).is_err());
}

#[test]
fn description_round_trips_through_json() {
    let desc = HandSpec::default().describe().unwrap();
    let text = serde_json::to_string_pretty(&desc).unwrap();
    let back = HandDescription::from_json(&text).unwrap();
    assert_eq!(back, desc);
    let a = KinematicHandModel::from_description(&back).unwrap();
    assert_eq!(a.num_points(), 512);
}

#[test]
fn invalid_descriptions_fail() {
    let mut desc = HandSpec::default().describe().unwrap();
    desc.links[1].parent = Some(5);
    assert!(KinematicHandModel::from_description(&desc).is_err());
    let mut desc = HandSpec::default().describe().unwrap();
    desc.links[1].joint.as_mut().unwrap().lower = 1.0;
    desc.links[1].joint.as_mut().unwrap().upper = 1.0;
    assert!(KinematicHandModel::from_description(&desc).is_err());
}

#[test]
fn inner_points_are_a_palmar_subset() {
    let model = default_hand(&HandSpec::default()).unwrap();
    for link in model.links() {
        for p in &link.inner_points {
            assert!(link.surface_points.contains(p));
            assert!(p.y < 0.0, "{} inner point {p:?} not palmar", link.name);
        }
    }
}

#[test]
fn rest_pose_composes_fixed_transforms() {
    let model = default_hand(&HandSpec::default()).unwrap();
    let fk = forward_kinematics(&model, &model.rest_pose(), false).unwrap();
    // Compose origins by hand along each chain.
    let mut frames: Vec<Isometry3<f64>> = Vec::new();
    for link in model.links() {
        let parent = link.parent.map(|p| frames[p]).unwrap_or_else(Isometry3::identity);
        frames.push(parent * link.origin);
    }
    let mut i = 0;
    for (l, link) in model.links().iter().enumerate() {
        for p in &link.surface_points {
            let expect = frames[l].transform_point(&Point3::from(*p)).coords;
            assert!((fk.world_points[i] - expect).norm() < 1e-15);
            i += 1;
        }
    }
}

#[test]
fn translation_shifts_every_point() {
    let model = default_hand(&HandSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pose = random_pose(&model, &mut rng);
    let mut moved = pose.clone();
    moved.trans += Vec3::new(0.1, 0.0, 0.0);
    let a = forward_kinematics(&model, &pose, true).unwrap();
    let b = forward_kinematics(&model, &moved, false).unwrap();
    for (p, q) in a.world_points.iter().zip(&b.world_points) {
        assert!((q - p - Vec3::new(0.1, 0.0, 0.0)).norm() < 1e-15);
    }
    let k = model.num_joints();
    for jac in a.point_jacobian.unwrap() {
        assert_eq!(jac.columns(k + 6, 3).clone_owned(), Matrix3::identity());
    }
}

#[test]
fn dimension_mismatch_is_an_error() {
    let model = default_hand(&HandSpec::default()).unwrap();
    assert!(matches!(
        forward_kinematics(&model, &HandPose::rest(3), false),
        Err(Error::DimensionMismatch { .. })
    ));
}

#[test]
fn jacobian_matches_central_differences() {
    let model = default_hand(&HandSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-6;
    for _ in 0..50 {
        let pose = random_pose(&model, &mut rng);
        let fk = forward_kinematics(&model, &pose, true).unwrap();
        let jac = fk.point_jacobian.as_ref().unwrap();
        let base = pose.to_vec();
        let mut max_err: f64 = 0.0;
        for d in 0..base.len() {
            let mut vp = base.clone();
            let mut vm = base.clone();
            vp[d] += h;
            vm[d] -= h;
            let pp = forward_kinematics(&model, &HandPose::from_slice(&vp, 24).unwrap(), false).unwrap();
            let pm = forward_kinematics(&model, &HandPose::from_slice(&vm, 24).unwrap(), false).unwrap();
            for i in 0..model.num_points() {
                let fd = (pp.world_points[i] - pm.world_points[i]) / (2.0 * h);
                let an = jac[i].column(d);
                let err = (fd - an).norm() / an.norm().max(fd.norm()).max(1e-3);
                max_err = max_err.max(err);
            }
        }
        assert!(max_err < 1e-4, "max relative error {max_err}");
    }
}

#[test]
fn pullback_equals_transposed_jacobian_product() {
    let model = default_hand(&HandSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pose = random_pose(&model, &mut rng);
    let fk = forward_kinematics(&model, &pose, true).unwrap();
    let grads: Vec<(usize, Vec3)> = (0..model.num_points())
        .step_by(3)
        .map(|i| (i, Vec3::new(rng.random(), rng.random(), rng.random())))
        .collect();
    let fast = fk.pullback(&model, &grads);
    let mut slow = vec![0.0; model.pose_dim()];
    for (i, g) in &grads {
        let jt = fk.point_jacobian.as_ref().unwrap()[*i].transpose() * g;
        for (s, v) in slow.iter_mut().zip(jt.iter()) {
            *s += v;
        }
    }
    for (a, b) in fast.iter().zip(&slow) {
        assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn rigid_transform_equivariance() {
    let model = default_hand(&HandSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pose = random_pose(&model, &mut rng);
    let r0 = Rotation3::from_euler_angles(0.3, -1.1, 2.0).into_inner();
    let t0 = Vec3::new(0.2, -0.1, 0.05);
    let r = pose.rotation().unwrap();
    let composed = HandPose::from_parts(pose.theta.clone(), &(r0 * r), r0 * pose.trans + t0);
    let a = forward_kinematics(&model, &pose, false).unwrap();
    let b = forward_kinematics(&model, &composed, false).unwrap();
    for (p, q) in a.world_points.iter().zip(&b.world_points) {
        assert!((r0 * p + t0 - q).norm() < 1e-12);
    }
}

#[test]
fn joint_perturbation_only_moves_its_subtree() {
    let model = default_hand(&HandSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pose = random_pose(&model, &mut rng);
    let base = forward_kinematics(&model, &pose, false).unwrap();
    for j in 0..model.num_joints() {
        let mut p = pose.clone();
        p.theta[j] += 0.05;
        let moved = forward_kinematics(&model, &p, false).unwrap();
        for (i, &l) in model.point_links().iter().enumerate() {
            let changed = (moved.world_points[i] - base.world_points[i]).norm() > 0.0;
            assert_eq!(changed, model.joint_moves_link(j, l), "joint {j} point {i}");
        }
        let fk = forward_kinematics(&model, &pose, true).unwrap();
        for (i, &l) in model.point_links().iter().enumerate() {
            if !model.joint_moves_link(j, l) {
                assert!(fk.point_jacobian.as_ref().unwrap()[i].column(j).iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn explicit_samples_and_clamping() {
    let desc = HandDescription::from_json(
        r#"{"name":"probe","links":[{"name":"palm","parent":null,
            "joint":{"axis":[1,0,0],"lower":-0.5,"upper":0.5},
            "samples":{"points":[[0,0,0],[0.01,0,0]],"inner":[1]}}]}"#,
    )
    .unwrap();
    let model = KinematicHandModel::from_description(&desc).unwrap();
    assert_eq!(model.inner_indices(), &[1]);
    let mut pose = model.rest_pose();
    pose.theta[0] = 2.0;
    model.clamp_pose(&mut pose);
    assert_eq!(pose.theta[0], 0.5);
}
