use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dgforge::diffusion::{Normalizer, ScheduleConfig};
use dgforge::eval::{filter_grasp, EvalConfig};
use dgforge::geometry::{sample_surface, SpatialIndex, TriMesh, Vec3};
use dgforge::kinematics::{default_hand, HandPose, HandSpec, KinematicHandModel};
use dgforge::model::GraspModel;
use dgforge::net::NetConfig;
use dgforge::objectives::{combined_constraint, ConstraintConfig};
use dgforge::parallel::{map_indexed, Exec};
use dgforge::sampler::{sample, GuidanceConfig, GuidanceMode};

fn poses(hand: &KinematicHandModel, n: usize) -> Vec<HandPose> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|_| {
            let mut p = hand.rest_pose();
            for (t, (lo, hi)) in p.theta.iter_mut().zip(hand.joint_limits()) {
                *t = rng.random_range(lo..hi);
            }
            p.trans = Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.15..-0.05), rng.random_range(-0.1..0.0));
            p
        })
        .collect()
}

fn modes() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn bench(c: &mut Criterion) {
    let spec = HandSpec::default();
    let hand = default_hand(&spec).unwrap();
    let cloud = sample_surface(&TriMesh::uv_sphere(0.04, 32, 16), 2048, 3).unwrap();
    let index = SpatialIndex::build(cloud.clone()).unwrap();
    let batch = poses(&hand, 64);
    let cons = ConstraintConfig::default();
    let eval = EvalConfig::default();

    let mut g = c.benchmark_group("energy_batch_64");
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| map_indexed(exec, batch.len(), |i| combined_constraint(&batch[i], &hand, &index, &cons).unwrap().value))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("filter_batch_64");
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| map_indexed(exec, batch.len(), |i| filter_grasp(&batch[i], &hand, &index, &eval).unwrap().0))
        });
    }
    g.finish();

    let rows: Vec<Vec<f64>> = batch.iter().map(|p| p.to_vec()).collect();
    let net = NetConfig {
        encoder_widths: vec![32, 64],
        hidden: vec![128, 128],
        time_dim: 16,
        semantic_dim: 0,
    };
    let schedule = ScheduleConfig {
        steps: 20,
        ..Default::default()
    };
    let model = GraspModel::new(spec, schedule, net, 128, Normalizer::fit(&rows).unwrap(), 0).unwrap();
    let dsg = GuidanceConfig {
        mode: GuidanceMode::Dsg,
        rate: 0.3,
        ..Default::default()
    };
    let mut g = c.benchmark_group("dsg_sample_16");
    g.sample_size(10);
    for (name, exec) in modes() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sample(&model, &hand, &cloud, 16, &dsg, &cons, 5, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
