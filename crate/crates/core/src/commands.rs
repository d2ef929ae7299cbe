//! The pipeline stages behind the `dgforge` binary. Each command reads its
//! inputs, writes its outputs under one directory and returns a summary.
//! Outputs carry no timestamps, so identical inputs give identical bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{generate, seed_for, sha256_hex, to_jsonl, train_set, write_dataset, write_file, Dataset, Manifest, Split, ToyObject};
use crate::diffusion::Normalizer;
use crate::error::{Error, Result};
use crate::eval::{diversity, filter_grasp, EvalReport, RejectReason};
use crate::geometry::mesh::write_obj;
use crate::geometry::ply::{write_mesh, PlyFormat};
use crate::geometry::{SpatialIndex, TriMesh};
use crate::kinematics::{default_hand, forward_kinematics, HandPose, KinematicHandModel};
use crate::model::{Checkpoint, GraspModel};
use crate::parallel::{map_indexed, try_map_indexed, Exec};
use crate::sampler::{sample, GuidanceMode, PoseDiagnostics};
use crate::train::{curve_csv, train, TrainState};

pub const LOCK_FILE: &str = ".dgforge.lock";
pub const CONFIG_ECHO: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const POSES_FILE: &str = "poses.jsonl";
pub const EVAL_CSV: &str = "eval.csv";
pub const EVAL_SUMMARY: &str = "summary.json";
pub const ACCEPTED_FILE: &str = "accepted.jsonl";
pub const REJECTED_FILE: &str = "rejected.jsonl";
pub const FILTER_SUMMARY: &str = "filter.json";

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutputLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.save(&out.join(CONFIG_ECHO))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

/// Writes through a temporary sibling so readers never see a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    write_file(&tmp, bytes)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Generates the toy object set with reference grasps into `out`.
pub fn gen_toy(cfg: &RunConfig, out: &Path, exec: Exec) -> Result<Manifest> {
    let hand = default_hand(&cfg.hand)?;
    let (objects, records) = generate(&hand, &cfg.dataset, &cfg.constraints, &cfg.eval, cfg.seed, exec)?;
    log::info!("generated {} grasps on {} objects", records.len(), objects.len());
    let manifest = write_dataset(out, &objects, &records, hand.pose_dim(), cfg.dataset.cloud_points)?;
    echo_config(cfg, out)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub final_loss: Option<f64>,
    pub checkpoint_sha256: String,
}

/// Trains a model on the training split of `dataset`, or continues the run
/// in `resume`. Writes the checkpoint and the loss curve to `out`.
pub fn train_cmd(cfg: &RunConfig, dataset: &Path, resume: Option<&Path>, out: &Path, exec: Exec) -> Result<TrainSummary> {
    let ds = Dataset::load(dataset)?;
    if ds.manifest.pose_dim != cfg.hand.pose_dim() {
        return Err(Error::DimensionMismatch {
            what: "dataset pose",
            expected: cfg.hand.pose_dim(),
            got: ds.manifest.pose_dim,
        });
    }
    let set = train_set(ds.objects_in(Split::Train), &ds.records, cfg.train.loss_points)?;
    let (mut state, mut csv) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let state = TrainState::from_checkpoint(&ck)?;
            if state.model.hand != cfg.hand {
                return Err(Error::InvalidConfig("the checkpoint was trained for a different hand".into()));
            }
            let prior = std::fs::read_to_string(path.with_file_name(LOSS_FILE)).unwrap_or_default();
            (state, prior)
        }
        None => {
            let rows: Vec<Vec<f64>> = set.samples.iter().map(|s| s.pose.clone()).collect();
            let model = GraspModel::new(
                cfg.hand.clone(),
                cfg.diffusion,
                cfg.net.clone(),
                cfg.encoder_points,
                Normalizer::fit(&rows)?,
                cfg.train.seed,
            )?;
            (TrainState::fresh(model, &cfg.train), String::new())
        }
    };
    let start = state.iteration;
    train(&mut state, &set, &cfg.train, &cfg.constraints, exec, |r| {
        if r.iteration % 100 == 0 {
            log::info!("iteration {} loss {:.4}", r.iteration, r.loss.total);
        }
    })?;
    csv.push_str(&curve_csv(&state.curve, csv.is_empty()));
    let json = state.checkpoint(&cfg.train, &cfg.constraints).to_json()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_atomic(&out.join(LOSS_FILE), csv.as_bytes())?;
    write_atomic(&out.join(CHECKPOINT_FILE), json.as_bytes())?;
    echo_config(cfg, out)?;
    log::info!("trained iterations {start}..{}", state.iteration);
    Ok(TrainSummary {
        iterations: state.iteration,
        final_loss: state.curve.last().map(|r| r.loss.total),
        checkpoint_sha256: sha256_hex(json.as_bytes()),
    })
}

/// One sampled pose with its energies at the final estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub object_id: String,
    pub pose: Vec<f64>,
    pub seed: u64,
    pub chain: usize,
    pub guidance: GuidanceMode,
    pub diagnostics: Option<PoseDiagnostics>,
}

/// Sampling seed of one object under a run seed.
pub fn object_seed(run_seed: u64, object_id: &str) -> u64 {
    seed_for(&format!("{run_seed}/{object_id}"))
}

fn select_objects<'a>(ds: &'a Dataset, ids: &[String], split: Split) -> Result<Vec<&'a ToyObject>> {
    if ids.is_empty() {
        return Ok(ds.objects_in(split));
    }
    ids.iter()
        .map(|id| ds.objects.get(id).ok_or_else(|| Error::InvalidConfig(format!("unknown object id `{id}`"))))
        .collect()
}

/// Draws `cfg.sample.count` poses per selected object.
pub fn sample_cmd(cfg: &RunConfig, checkpoint: &Path, dataset: &Path, out: &Path, exec: Exec) -> Result<Vec<SampleRecord>> {
    cfg.guidance.validate()?;
    let model = Checkpoint::load(checkpoint)?.sampling_model()?;
    if model.pose_dim() != cfg.hand.pose_dim() {
        return Err(Error::DimensionMismatch {
            what: "checkpoint pose",
            expected: cfg.hand.pose_dim(),
            got: model.pose_dim(),
        });
    }
    let hand = model.hand_model()?;
    let ds = Dataset::load(dataset)?;
    let objects = select_objects(&ds, &cfg.sample.objects, cfg.sample.split)?;
    let mut records = Vec::new();
    for obj in objects {
        let seed = object_seed(cfg.seed, &obj.id);
        let samples = sample(&model, &hand, &obj.cloud, cfg.sample.count, &cfg.guidance, &cfg.constraints, seed, exec)?;
        records.extend(samples.into_iter().enumerate().map(|(chain, s)| SampleRecord {
            object_id: obj.id.clone(),
            pose: s.pose,
            seed,
            chain,
            guidance: cfg.guidance.mode,
            diagnostics: s.diagnostics,
        }));
    }
    write_file(&out.join(POSES_FILE), to_jsonl(&records)?.as_bytes())?;
    echo_config(cfg, out)?;
    Ok(records)
}

/// The fields every pose file shares; other keys are ignored.
#[derive(Debug, Clone, Deserialize)]
struct PoseLine {
    object_id: String,
    pose: Vec<f64>,
}

#[derive(Debug, Clone)]
struct ParsedPose {
    line: usize,
    raw: String,
    object_id: String,
    pose: HandPose,
}

fn read_poses(path: &Path, hand: &KinematicHandModel) -> Result<Vec<ParsedPose>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let p: PoseLine = serde_json::from_str(raw).map_err(|e| bad(e.to_string()))?;
        if p.pose.iter().any(|v| !v.is_finite()) {
            return Err(bad("pose has non-finite entries".into()));
        }
        let mut pose = HandPose::from_slice(&p.pose, hand.num_joints()).map_err(|e| bad(e.to_string()))?;
        pose.rotation().map_err(|e| bad(e.to_string()))?;
        pose.canonicalize().map_err(|e| bad(e.to_string()))?;
        out.push(ParsedPose {
            line: i + 1,
            raw: raw.to_string(),
            object_id: p.object_id,
            pose,
        });
    }
    Ok(out)
}

fn object_indices(ds: &Dataset, ids: impl Iterator<Item = String>) -> Result<BTreeMap<String, SpatialIndex>> {
    let wanted: BTreeSet<String> = ids.filter(|id| ds.objects.contains_key(id)).collect();
    wanted
        .into_iter()
        .map(|id| {
            let index = SpatialIndex::build(ds.objects[&id].cloud.clone())?;
            Ok((id, index))
        })
        .collect()
}

fn evaluate_all(
    poses: &[ParsedPose],
    hand: &KinematicHandModel,
    indices: &BTreeMap<String, SpatialIndex>,
    cfg: &RunConfig,
    exec: Exec,
) -> Result<Vec<Option<EvalReport>>> {
    try_map_indexed(exec, poses.len(), |i| {
        let p = &poses[i];
        match indices.get(&p.object_id) {
            Some(index) => Ok(Some(filter_grasp(&p.pose, hand, index, &cfg.eval)?.1)),
            None => Ok(None),
        }
    })
}

/// Aggregate metrics of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub evaluated: usize,
    pub skipped: usize,
    pub suc6_rate: f64,
    pub suc1_rate: f64,
    pub accepted_rate: f64,
    pub mean_pen_mm: f64,
    pub max_pen_mm: f64,
    pub mean_pen_cyl_mm: f64,
    pub max_pen_cyl_mm: f64,
    /// Mean per-dimension standard deviation over six-direction successes.
    pub diversity: f64,
}

impl EvalSummary {
    pub fn from_reports(reports: &[EvalReport], poses: &[Vec<f64>], skipped: usize) -> Self {
        let n = reports.len();
        let mean = |f: &dyn Fn(&EvalReport) -> f64| if n == 0 { 0.0 } else { reports.iter().map(f).sum::<f64>() / n as f64 };
        let max = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).fold(0.0, f64::max);
        let suc6: Vec<bool> = reports.iter().map(|r| r.suc6).collect();
        EvalSummary {
            evaluated: n,
            skipped,
            suc6_rate: mean(&|r| r.suc6 as u8 as f64),
            suc1_rate: mean(&|r| r.suc1 as u8 as f64),
            accepted_rate: mean(&|r| r.accepted as u8 as f64),
            mean_pen_mm: mean(&|r| r.pen_mm),
            max_pen_mm: max(&|r| r.pen_mm),
            mean_pen_cyl_mm: mean(&|r| r.pen_cyl_mm),
            max_pen_cyl_mm: max(&|r| r.pen_cyl_mm),
            diversity: if suc6.iter().filter(|s| **s).count() >= 2 { diversity(poses, &suc6) } else { 0.0 },
        }
    }
}

fn reason_codes(reasons: &[RejectReason]) -> String {
    reasons.iter().map(|r| r.code()).collect::<Vec<_>>().join("|")
}

/// Scores every pose; poses of unknown objects are skipped and counted.
pub fn eval_cmd(cfg: &RunConfig, poses_path: &Path, dataset: &Path, out: &Path, exec: Exec) -> Result<EvalSummary> {
    let hand = default_hand(&cfg.hand)?;
    let poses = read_poses(poses_path, &hand)?;
    let ds = Dataset::load(dataset)?;
    let indices = object_indices(&ds, poses.iter().map(|p| p.object_id.clone()))?;
    let reports = evaluate_all(&poses, &hand, &indices, cfg, exec)?;
    let mut csv = String::from("line,object_id,pen_mm,pen_cyl_mm,suc6,suc1,accepted,reasons\n");
    let (mut kept, mut kept_poses, mut skipped) = (Vec::new(), Vec::new(), 0);
    for (p, r) in poses.iter().zip(reports) {
        match r {
            Some(r) => {
                csv.push_str(&format!(
                    "{},{},{:.6},{:.6},{},{},{},{}\n",
                    p.line,
                    p.object_id,
                    r.pen_mm,
                    r.pen_cyl_mm,
                    r.suc6 as u8,
                    r.suc1 as u8,
                    r.accepted as u8,
                    reason_codes(&r.reasons)
                ));
                kept_poses.push(p.pose.to_vec());
                kept.push(r);
            }
            None => {
                log::warn!("line {}: unknown object `{}`, skipped", p.line, p.object_id);
                skipped += 1;
            }
        }
    }
    let summary = EvalSummary::from_reports(&kept, &kept_poses, skipped);
    write_file(&out.join(EVAL_CSV), csv.as_bytes())?;
    write_json(&out.join(EVAL_SUMMARY), &summary)?;
    echo_config(cfg, out)?;
    Ok(summary)
}

/// Why a pose was rejected, with the measurements behind the decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub line: usize,
    pub object_id: String,
    pub reasons: Vec<RejectReason>,
    pub pen_mm: f64,
    pub pen_cyl_mm: f64,
    pub suc6: bool,
    pub suc1: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSummary {
    pub input: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// Rejections per reason code; a pose can carry several.
    pub reasons: BTreeMap<String, usize>,
}

/// Splits a pose file into accepted lines (copied verbatim) and a rejection log.
pub fn filter_cmd(cfg: &RunConfig, poses_path: &Path, dataset: &Path, out: &Path, exec: Exec) -> Result<FilterSummary> {
    let hand = default_hand(&cfg.hand)?;
    let poses = read_poses(poses_path, &hand)?;
    let ds = Dataset::load(dataset)?;
    if let Some(p) = poses.iter().find(|p| !ds.objects.contains_key(&p.object_id)) {
        return Err(Error::Record {
            path: poses_path.to_path_buf(),
            line: p.line,
            msg: format!("unknown object `{}`", p.object_id),
        });
    }
    let indices = object_indices(&ds, poses.iter().map(|p| p.object_id.clone()))?;
    let reports = evaluate_all(&poses, &hand, &indices, cfg, exec)?;
    let mut accepted = String::new();
    let mut rejected = Vec::new();
    let mut reasons = BTreeMap::new();
    for (p, r) in poses.iter().zip(reports) {
        let r = r.expect("every object was checked above");
        if r.accepted {
            accepted.push_str(&p.raw);
            accepted.push('\n');
        } else {
            for reason in &r.reasons {
                *reasons.entry(reason.code().to_string()).or_insert(0) += 1;
            }
            rejected.push(Rejection {
                line: p.line,
                object_id: p.object_id.clone(),
                reasons: r.reasons,
                pen_mm: r.pen_mm,
                pen_cyl_mm: r.pen_cyl_mm,
                suc6: r.suc6,
                suc1: r.suc1,
            });
        }
    }
    let summary = FilterSummary {
        input: poses.len(),
        accepted: poses.len() - rejected.len(),
        rejected: rejected.len(),
        reasons,
    };
    write_file(&out.join(ACCEPTED_FILE), accepted.as_bytes())?;
    write_file(&out.join(REJECTED_FILE), to_jsonl(&rejected)?.as_bytes())?;
    write_json(&out.join(FILTER_SUMMARY), &summary)?;
    echo_config(cfg, out)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    #[default]
    Ply,
    Obj,
}

impl ExportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ExportFormat::Ply => "ply",
            ExportFormat::Obj => "obj",
        }
    }
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ply" => Ok(ExportFormat::Ply),
            "obj" => Ok(ExportFormat::Obj),
            other => Err(Error::InvalidConfig(format!("unknown export format `{other}` (expected ply or obj)"))),
        }
    }
}

/// Segments around each exported cylinder.
const EXPORT_SEGMENTS: u32 = 16;

/// Hand cylinders of a posed hand as named meshes, in link order.
pub fn hand_bodies(hand: &KinematicHandModel, pose: &HandPose) -> Result<Vec<(String, TriMesh)>> {
    let fk = forward_kinematics(hand, pose, false)?;
    Ok(fk
        .world_cylinders
        .iter()
        .zip(&fk.cylinder_links)
        .map(|(c, &l)| (hand.links()[l].name.clone(), TriMesh::cylinder(c, EXPORT_SEGMENTS)))
        .collect())
}

fn export_bytes(bodies: &[(String, TriMesh)], format: ExportFormat) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    match format {
        ExportFormat::Obj => {
            let refs: Vec<(&str, &TriMesh)> = bodies.iter().map(|(n, m)| (n.as_str(), m)).collect();
            write_obj(&mut bytes, &refs).map_err(|e| Error::io("<obj>", e))?;
        }
        ExportFormat::Ply => {
            // one combined mesh; the header comments record each body's vertex range
            let mut all = TriMesh::default();
            let mut comment = String::new();
            for (name, mesh) in bodies {
                comment.push_str(&format!("body {name} {} {}\n", all.vertices.len(), mesh.vertices.len()));
                all.append(mesh);
            }
            write_mesh(&mut bytes, &all, PlyFormat::Ascii, Some(comment.trim_end())).map_err(|e| Error::io("<ply>", e))?;
        }
    }
    Ok(bytes)
}

/// Writes one mesh file per pose: the hand cylinders plus the object.
pub fn export_cmd(cfg: &RunConfig, poses_path: &Path, dataset: &Path, format: ExportFormat, out: &Path, exec: Exec) -> Result<Vec<PathBuf>> {
    let hand = default_hand(&cfg.hand)?;
    let poses = read_poses(poses_path, &hand)?;
    let ds = Dataset::load(dataset)?;
    let files = map_indexed(exec, poses.len(), |i| -> Result<(PathBuf, Vec<u8>)> {
        let p = &poses[i];
        let obj = ds.objects.get(&p.object_id).ok_or_else(|| Error::Record {
            path: poses_path.to_path_buf(),
            line: p.line,
            msg: format!("unknown object `{}`", p.object_id),
        })?;
        let mut bodies = hand_bodies(&hand, &p.pose)?;
        bodies.push((format!("object_{}", obj.id), obj.mesh.clone()));
        let name = format!("pose_{:05}_{}.{}", p.line, p.object_id, format.extension());
        Ok((out.join(name), export_bytes(&bodies, format)?))
    });
    let mut written = Vec::new();
    for f in files {
        let (path, bytes) = f?;
        write_file(&path, &bytes)?;
        written.push(path);
    }
    echo_config(cfg, out)?;
    Ok(written)
}

#[cfg(test)]
mod tests;
