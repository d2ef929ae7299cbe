use std::sync::OnceLock;

use super::*;
use crate::dataset::{read_jsonl, Shape};
use crate::diffusion::ScheduleConfig;
use crate::geometry::ply::read_ply_file;
use crate::geometry::Vec3;
use crate::net::NetConfig;
use crate::objectives::ConstraintWeights;
use crate::train::OptimizerKind;

fn tiny_cfg() -> RunConfig {
    let mut cfg = RunConfig {
        seed: 3,
        encoder_points: 64,
        diffusion: ScheduleConfig {
            steps: 20,
            ..Default::default()
        },
        net: NetConfig {
            encoder_widths: vec![8, 16],
            hidden: vec![32],
            time_dim: 8,
            semantic_dim: 0,
        },
        ..Default::default()
    };
    // 13 objects put sphere_0012 in the held-out split
    cfg.dataset.objects = 13;
    cfg.dataset.grasps_per_object = 2;
    cfg.dataset.cloud_points = 512;
    cfg.dataset.synth.steps = 20;
    cfg.train.iterations = 30;
    cfg.train.batch_size = 8;
    cfg.train.loss_points = 128;
    cfg.train.optimizer = OptimizerKind::Adam;
    cfg.train.weights = Some(ConstraintWeights::ZERO);
    cfg.guidance.rate = 0.3;
    cfg.sample.count = 4;
    cfg
}

struct Fixture {
    _root: tempfile::TempDir,
    dataset: PathBuf,
    checkpoint: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let root = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let dataset = root.path().join("data");
        gen_toy(&cfg, &dataset, Exec::Parallel).unwrap();
        let run = root.path().join("run");
        train_cmd(&cfg, &dataset, None, &run, Exec::Parallel).unwrap();
        Fixture {
            dataset,
            checkpoint: run.join(CHECKPOINT_FILE),
            _root: root,
        }
    })
}

fn files_under(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn write_poses(dir: &Path, lines: &[(String, Vec<f64>)]) -> PathBuf {
    let path = dir.join("in.jsonl");
    let text: String = lines
        .iter()
        .map(|(id, p)| serde_json::json!({"object_id": id, "pose": p}).to_string() + "\n")
        .collect();
    std::fs::write(&path, text).unwrap();
    path
}

fn dataset_records(ds: &Path) -> Vec<(String, Vec<f64>)> {
    Dataset::load(ds).unwrap().records.into_iter().map(|r| (r.object_id, r.pose)).collect()
}

#[test]
fn lock_is_exclusive_and_released_on_drop() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let lock = OutputLock::acquire(&out).unwrap();
    assert!(matches!(OutputLock::acquire(&out), Err(Error::Locked(_))));
    drop(lock);
    assert!(!out.join(LOCK_FILE).exists());
    let _again = OutputLock::acquire(&out).unwrap();
}

#[test]
fn gen_toy_is_byte_deterministic_and_keeps_only_accepted_grasps() {
    let f = fixture();
    let cfg = tiny_cfg();
    let dir = tempfile::tempdir().unwrap();
    let m = gen_toy(&cfg, dir.path(), Exec::Sequential).unwrap();
    assert_eq!(files_under(dir.path()), files_under(&f.dataset));
    assert!(m.record_count <= 26);
    assert!(m.record_count > 0);
    let out = tempfile::tempdir().unwrap();
    let poses = dir.path().join(crate::dataset::RECORDS_FILE);
    let s = filter_cmd(&cfg, &poses, dir.path(), out.path(), Exec::Parallel).unwrap();
    assert_eq!(s.accepted, m.record_count);
    // all-accepted input passes through byte for byte
    assert_eq!(std::fs::read(out.path().join(ACCEPTED_FILE)).unwrap(), std::fs::read(&poses).unwrap());
}

#[test]
fn gen_toy_with_zero_objects() {
    let mut cfg = tiny_cfg();
    cfg.dataset.objects = 0;
    let dir = tempfile::tempdir().unwrap();
    let m = gen_toy(&cfg, dir.path(), Exec::Parallel).unwrap();
    assert_eq!(m.record_count, 0);
    assert!(m.objects.is_empty());
}

#[test]
fn train_is_deterministic_and_physics_weights_change_the_result() {
    let f = fixture();
    let cfg = tiny_cfg();
    let a = tempfile::tempdir().unwrap();
    let s = train_cmd(&cfg, &f.dataset, None, a.path(), Exec::Sequential).unwrap();
    assert_eq!(s.iterations, 30);
    let fixture_run = f.checkpoint.parent().unwrap();
    assert_eq!(files_under(a.path()), files_under(fixture_run));
    let mut physics = cfg.clone();
    physics.train.weights = Some(ConstraintWeights::new(10.0, 10.0, 5.0));
    let b = tempfile::tempdir().unwrap();
    let s2 = train_cmd(&physics, &f.dataset, None, b.path(), Exec::Parallel).unwrap();
    assert_ne!(s.checkpoint_sha256, s2.checkpoint_sha256);
    let csv = std::fs::read_to_string(b.path().join(LOSS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 31);
    assert!(csv.lines().nth(1).unwrap().split(',').nth(2).unwrap() != "");
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let f = fixture();
    let mut cfg = tiny_cfg();
    cfg.train.iterations = 12;
    let first = tempfile::tempdir().unwrap();
    train_cmd(&cfg, &f.dataset, None, first.path(), Exec::Parallel).unwrap();
    cfg.train.iterations = 30;
    let resumed = tempfile::tempdir().unwrap();
    let ck = first.path().join(CHECKPOINT_FILE);
    train_cmd(&cfg, &f.dataset, Some(&ck), resumed.path(), Exec::Parallel).unwrap();
    let fixture_run = f.checkpoint.parent().unwrap();
    let whole = |name: &str| std::fs::read(fixture_run.join(name)).unwrap();
    let part = |name: &str| std::fs::read(resumed.path().join(name)).unwrap();
    assert_eq!(part(CHECKPOINT_FILE), whole(CHECKPOINT_FILE));
    assert_eq!(part(LOSS_FILE), whole(LOSS_FILE));
}

#[test]
fn train_without_a_dataset_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let err = train_cmd(&tiny_cfg(), &dir.path().join("missing"), None, &out, Exec::Parallel).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(!out.join(CHECKPOINT_FILE).exists());
}

#[test]
fn sample_modes_share_noise_but_differ_in_output() {
    let f = fixture();
    let mut cfg = tiny_cfg();
    let id = Dataset::load(&f.dataset).unwrap().objects.keys().next().unwrap().clone();
    cfg.sample.objects = vec![id.clone()];
    cfg.sample.count = 16;
    let a = tempfile::tempdir().unwrap();
    let plain = sample_cmd(&cfg, &f.checkpoint, &f.dataset, a.path(), Exec::Parallel).unwrap();
    cfg.guidance.mode = GuidanceMode::Dsg;
    let b = tempfile::tempdir().unwrap();
    let guided = sample_cmd(&cfg, &f.checkpoint, &f.dataset, b.path(), Exec::Parallel).unwrap();
    assert_eq!(plain.len(), 16);
    for (p, g) in plain.iter().zip(&guided) {
        assert_eq!((p.seed, p.chain), (g.seed, g.chain));
        assert_eq!(p.object_id, id);
        assert_eq!(g.guidance, GuidanceMode::Dsg);
    }
    assert!(plain.iter().zip(&guided).any(|(p, g)| p.pose != g.pose));
    let c = tempfile::tempdir().unwrap();
    sample_cmd(&cfg, &f.checkpoint, &f.dataset, c.path(), Exec::Sequential).unwrap();
    assert_eq!(files_under(b.path()), files_under(c.path()));
}

#[test]
fn sample_records_round_trip_to_identical_bytes() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    sample_cmd(&tiny_cfg(), &f.checkpoint, &f.dataset, dir.path(), Exec::Parallel).unwrap();
    let path = dir.path().join(POSES_FILE);
    let records: Vec<SampleRecord> = read_jsonl(&path).unwrap();
    assert!(!records.is_empty());
    assert_eq!(to_jsonl(&records).unwrap().into_bytes(), std::fs::read(&path).unwrap());
}

#[test]
fn sampling_a_held_out_sphere_gives_finite_energies() {
    let f = fixture();
    let ds = Dataset::load(&f.dataset).unwrap();
    let sphere = ds
        .objects_in(Split::Test)
        .into_iter()
        .find(|o| matches!(o.shape, Shape::Sphere { .. }))
        .map(|o| o.id.clone())
        .expect("a held-out sphere");
    let mut cfg = tiny_cfg();
    cfg.sample.objects = vec![sphere];
    cfg.sample.count = 64;
    let dir = tempfile::tempdir().unwrap();
    let records = sample_cmd(&cfg, &f.checkpoint, &f.dataset, dir.path(), Exec::Parallel).unwrap();
    let finite = records
        .iter()
        .filter(|r| r.pose.iter().all(|v| v.is_finite()) && r.diagnostics.is_some_and(|d| d.spf.is_finite() && d.erf.is_finite() && d.srf.is_finite()))
        .count();
    assert!(finite * 10 >= 64 * 9, "{finite}/64 finite");
}

#[test]
fn sample_rejects_a_checkpoint_for_another_hand() {
    let f = fixture();
    let mut cfg = tiny_cfg();
    cfg.hand.fingers = 4;
    let dir = tempfile::tempdir().unwrap();
    let err = sample_cmd(&cfg, &f.checkpoint, &f.dataset, dir.path(), Exec::Parallel).unwrap_err();
    assert!(matches!(err, Error::DimensionMismatch { .. }), "{err}");
    let mut cfg = tiny_cfg();
    cfg.sample.objects = vec!["nope".into()];
    assert!(sample_cmd(&cfg, &f.checkpoint, &f.dataset, dir.path(), Exec::Parallel).is_err());
}

#[test]
fn eval_of_an_empty_file_reports_zeros() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let poses = write_poses(dir.path(), &[]);
    let s = eval_cmd(&tiny_cfg(), &poses, &f.dataset, dir.path(), Exec::Parallel).unwrap();
    assert_eq!(s.evaluated, 0);
    assert_eq!(s.skipped, 0);
    assert_eq!(s.suc6_rate, 0.0);
    assert_eq!(s.mean_pen_mm, 0.0);
}

/// A hand whose lowest point along `-z` sits `depth` inside a ball centred at the origin.
fn sunk_pose(hand: &KinematicHandModel, radius: f64, depth: f64) -> HandPose {
    let mut pose = hand.rest_pose();
    let fk = forward_kinematics(hand, &pose, false).unwrap();
    let low = fk.world_points.iter().min_by(|a, b| a.z.total_cmp(&b.z)).unwrap();
    pose.trans = Vec3::new(-low.x, -low.y, radius - depth - low.z);
    pose
}

fn ball_dataset(dir: &Path, radius: f64) -> PathBuf {
    let hand = default_hand(&tiny_cfg().hand).unwrap();
    let obj = ToyObject::new("ball".into(), Shape::Sphere { radius }, 4096).unwrap();
    let ds = dir.join("ball");
    write_dataset(&ds, &[obj], &[], hand.pose_dim(), 4096).unwrap();
    ds
}

#[test]
fn eval_flags_a_penetrating_pose_and_skips_unknown_objects() {
    let f = fixture();
    let cfg = tiny_cfg();
    let hand = default_hand(&cfg.hand).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let ds = ball_dataset(dir.path(), 0.05);
    let deep = sunk_pose(&hand, 0.05, 0.02).to_vec();
    let mut lines = vec![("ball".to_string(), deep), ("ghost".to_string(), hand.rest_pose().to_vec())];
    lines.extend(dataset_records(&f.dataset).into_iter().take(2).map(|(_, p)| ("ball".to_string(), p)));
    let poses = write_poses(dir.path(), &lines);
    let out = dir.path().join("eval");
    let s = eval_cmd(&cfg, &poses, &ds, &out, Exec::Parallel).unwrap();
    assert_eq!(s.evaluated, 3);
    assert_eq!(s.skipped, 1);
    let csv = std::fs::read_to_string(out.join(EVAL_CSV)).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][0], "1");
    let pen: f64 = rows[0][2].parse().unwrap();
    assert!(pen > 15.0, "{pen}");
    assert_eq!(rows[0][6], "0");
    assert!(rows[0][7].contains("PEN_NN"));
    let col_mean = |c: usize| rows.iter().map(|r| r[c].parse::<f64>().unwrap()).sum::<f64>() / rows.len() as f64;
    assert_eq!(s.suc6_rate, col_mean(4));
    assert_eq!(s.suc1_rate, col_mean(5));
    assert!(s.max_pen_mm >= pen - 1e-6);
}

#[test]
fn filter_partitions_input_and_logs_reasons() {
    let cfg = tiny_cfg();
    let hand = default_hand(&cfg.hand).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let radius = 0.05;
    let ds = ball_dataset(dir.path(), radius);
    let mut far = hand.rest_pose();
    far.trans = Vec3::new(1.0, 1.0, 1.0);
    let lines = vec![
        ("ball".to_string(), sunk_pose(&hand, radius, 0.0101).to_vec()),
        ("ball".to_string(), far.to_vec()),
        ("ball".to_string(), sunk_pose(&hand, radius, 0.003).to_vec()),
    ];
    let poses = write_poses(dir.path(), &lines);
    let out = dir.path().join("filter");
    let s = filter_cmd(&cfg, &poses, &ds, &out, Exec::Parallel).unwrap();
    assert_eq!(s.input, 3);
    let accepted = std::fs::read_to_string(out.join(ACCEPTED_FILE)).unwrap();
    let rejected: Vec<Rejection> = read_jsonl(&out.join(REJECTED_FILE)).unwrap();
    assert_eq!(accepted.lines().count() + rejected.len(), 3);
    assert_eq!(s.accepted + s.rejected, 3);
    let first = rejected.iter().find(|r| r.line == 1).expect("the deep pose is rejected");
    assert!(first.reasons.contains(&RejectReason::PenNn), "{first:?}");
    assert!(first.pen_mm > 10.0);
    assert!(s.reasons["PEN_NN"] >= 1);
    let second = rejected.iter().find(|r| r.line == 2).expect("a floating hand is rejected");
    assert_eq!(second.reasons, vec![RejectReason::NotStable]);
}

#[test]
fn filter_refuses_unknown_objects() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    let hand = default_hand(&cfg.hand).unwrap();
    let ds = ball_dataset(dir.path(), 0.05);
    let poses = write_poses(dir.path(), &[("ball".into(), hand.rest_pose().to_vec()), ("ghost".into(), hand.rest_pose().to_vec())]);
    match filter_cmd(&cfg, &poses, &ds, &dir.path().join("f"), Exec::Parallel) {
        Err(Error::Record { line, .. }) => assert_eq!(line, 2),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn malformed_pose_lines_are_named() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("p.jsonl");
    std::fs::write(&path, "{\"object_id\":\"x\",\"pose\":[1,2]}\n").unwrap();
    match eval_cmd(&tiny_cfg(), &path, &f.dataset, dir.path(), Exec::Parallel) {
        Err(Error::Record { line, .. }) => assert_eq!(line, 1),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn export_writes_one_parseable_file_per_pose() {
    let f = fixture();
    let cfg = tiny_cfg();
    let hand = default_hand(&cfg.hand).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let rec = dataset_records(&f.dataset).into_iter().next().unwrap();
    let poses = write_poses(dir.path(), std::slice::from_ref(&rec));
    let cylinders = hand.links().iter().filter(|l| l.cylinder.is_some()).count();
    for format in [ExportFormat::Ply, ExportFormat::Obj] {
        let out = dir.path().join(format.extension());
        let files = export_cmd(&cfg, &poses, &f.dataset, format, &out, Exec::Parallel).unwrap();
        assert_eq!(files.len(), 1);
        let text = std::fs::read_to_string(&files[0]).unwrap();
        let bodies = match format {
            ExportFormat::Ply => {
                let mesh = read_ply_file(&files[0]).unwrap().into_mesh().unwrap();
                assert!(mesh.faces.len() > cylinders * 4 * 16);
                text.lines().filter(|l| l.starts_with("comment body ")).count()
            }
            ExportFormat::Obj => {
                let verts = text.lines().filter(|l| l.starts_with("v ")).count();
                for l in text.lines().filter(|l| l.starts_with("f ")) {
                    assert!(l.split_whitespace().skip(1).all(|i| (1..=verts).contains(&i.parse::<usize>().unwrap())));
                }
                text.lines().filter(|l| l.starts_with("o ")).count()
            }
        };
        assert_eq!(bodies, cylinders + 1);
        let again = dir.path().join(format!("{}-again", format.extension()));
        export_cmd(&cfg, &poses, &f.dataset, format, &again, Exec::Sequential).unwrap();
        assert_eq!(files_under(&out), files_under(&again));
    }
    assert!("stl".parse::<ExportFormat>().is_err());
    assert_eq!("OBJ".parse::<ExportFormat>().unwrap(), ExportFormat::Obj);
}
