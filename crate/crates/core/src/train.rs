//! Physics-aware denoiser training: the noise-regression loss plus weighted
//! contact energies evaluated on the one-shot clean estimate.

use std::collections::BTreeMap;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{estimate_h0, forward_corrupt, standard_normal, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, SpatialIndex};
use crate::kinematics::{forward_kinematics, HandPose, KinematicHandModel};
use crate::model::{model_tensors, Checkpoint, GraspModel, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
use crate::objectives::{evaluate_on_fk, ConstraintConfig, ConstraintWeights};
use crate::parallel::{try_map_indexed, Exec};

/// Total loss above which a run is declared diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Total iteration count; resuming continues up to this number.
    pub iterations: usize,
    /// Physics weights used during training; `None` uses the global constraint weights.
    pub weights: Option<ConstraintWeights>,
    /// Decay of the exponential moving average kept for sampling (0 disables).
    pub ema_decay: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip (0 disables).
    pub grad_clip: f64,
    /// Object points kept for the physics terms (fixed per object).
    pub loss_points: usize,
    /// Only apply physics terms at steps `t <= physics_max_t` (all steps when unset).
    pub physics_max_t: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            iterations: 2000,
            weights: None,
            ema_decay: 0.995,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            grad_clip: 1.0,
            loss_points: 1024,
            physics_max_t: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning_rate must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::InvalidConfig("ema_decay must lie in [0, 1)".into()));
        }
        if !(self.grad_clip >= 0.0) || self.loss_points == 0 {
            return Err(Error::InvalidConfig("grad_clip must be >= 0 and loss_points > 0".into()));
        }
        if let Some(w) = &self.weights {
            w.validate()?;
        }
        Ok(())
    }

    pub fn constraints(&self, global: &ConstraintConfig) -> ConstraintConfig {
        match self.weights {
            Some(w) => global.with_weights(w),
            None => *global,
        }
    }
}

/// An object as seen by the trainer: the full cloud for the encoder and a
/// fixed subsample indexed for the physics terms.
#[derive(Debug, Clone)]
pub struct TrainObject {
    pub id: String,
    pub cloud: PointCloud,
    pub loss_index: SpatialIndex,
}

impl TrainObject {
    pub fn new(id: impl Into<String>, cloud: PointCloud, loss_points: usize, seed: u64) -> Result<Self> {
        let loss_index = SpatialIndex::build(cloud.subsample(loss_points, seed))?;
        Ok(TrainObject {
            id: id.into(),
            cloud,
            loss_index,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub object: usize,
    /// Physical-unit pose vector.
    pub pose: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainSet {
    pub objects: Vec<TrainObject>,
    pub samples: Vec<TrainSample>,
}

/// One fully specified training example: which object, which pose, and the
/// diffusion step and noise drawn for it.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub object: usize,
    pub pose: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
}

/// A batch with every random draw fixed, so the loss is a deterministic
/// function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
    /// Encoder input per object appearing in `items`.
    pub encoder_inputs: BTreeMap<usize, Vec<[f64; 3]>>,
}

/// Batch means of the loss terms. Physics entries are `None` when the term
/// was not evaluated (zero weight or no eligible sample).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub simple: f64,
    pub spf: Option<f64>,
    pub erf: Option<f64>,
    pub srf: Option<f64>,
    pub total: f64,
    /// Samples whose clean estimate had a degenerate rotation (physics skipped).
    pub skipped: usize,
}

/// Items processed together by one worker; fixed so reductions do not depend
/// on the thread count.
const CHUNK: usize = 4;

#[derive(Default)]
struct ChunkAcc {
    grad_denoiser: Vec<f64>,
    grad_features: BTreeMap<usize, Vec<f64>>,
    simple: f64,
    phys: f64,
    terms: [f64; 3],
    counted: usize,
    skipped: usize,
}

/// Evaluates the physics-aware loss on a fixed batch and returns the
/// gradient over all parameters (encoder first, then denoiser).
pub fn loss_padg(
    model: &GraspModel,
    hand: &KinematicHandModel,
    schedule: &NoiseSchedule,
    objects: &[TrainObject],
    batch: &Batch,
    constraints: &ConstraintConfig,
    physics_max_t: Option<usize>,
    exec: Exec,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let b = batch.items.len();
    if b == 0 {
        return Err(Error::InvalidConfig("empty training batch".into()));
    }
    let slots: Vec<usize> = batch.encoder_inputs.keys().copied().collect();
    let encoded = try_map_indexed(exec, slots.len(), |i| model.encoder.forward_traced(&batch.encoder_inputs[&slots[i]]))?;
    let features: BTreeMap<usize, usize> = slots.iter().enumerate().map(|(i, s)| (*s, i)).collect();
    let w = constraints.weights;
    let physics_on = !w.is_zero();
    let inv_b = 1.0 / b as f64;
    let n_den = model.denoiser.mlp.params.len();
    let n_chunks = b.div_ceil(CHUNK);

    let chunks = try_map_indexed(exec, n_chunks, |c| -> Result<ChunkAcc> {
        let mut acc = ChunkAcc {
            grad_denoiser: vec![0.0; n_den],
            ..ChunkAcc::default()
        };
        for item in &batch.items[c * CHUNK..((c + 1) * CHUNK).min(b)] {
            let fi = *features.get(&item.object).ok_or_else(|| {
                Error::InvalidConfig(format!("batch lacks encoder input for object {}", item.object))
            })?;
            let feature = &encoded[fi].0;
            let z0 = model.normalizer.normalize(&item.pose);
            let h_t = forward_corrupt(&z0, item.t, schedule, &item.eps)?;
            let (eps_hat, trace) = model.denoiser.forward_traced(&h_t, item.t, feature, None)?;
            let mut g_eps: Vec<f64> = item.eps.iter().zip(&eps_hat).map(|(e, p)| -2.0 * (e - p) * inv_b).collect();
            let simple: f64 = item.eps.iter().zip(&eps_hat).map(|(e, p)| (e - p) * (e - p)).sum();
            if !simple.is_finite() {
                return Err(Error::NonFinite("L_simple".into()));
            }
            acc.simple += simple * inv_b;
            if physics_on && physics_max_t.is_none_or(|m| item.t <= m) {
                let h0 = estimate_h0(&h_t, &eps_hat, item.t, schedule)?;
                let x0 = model.normalizer.denormalize(&h0);
                let pose = HandPose::from_slice(&x0, hand.num_joints())?;
                match forward_kinematics(hand, &pose, false) {
                    Ok(fk) => {
                        let obj = &objects[item.object];
                        let br = evaluate_on_fk(&fk, hand, &obj.loss_index, constraints, false)?;
                        let factor = schedule.h0_eps_factor(item.t) * inv_b;
                        for ((g, gp), s) in g_eps.iter_mut().zip(&br.combined.grad_pose).zip(&model.normalizer.std) {
                            *g += factor * gp * s;
                        }
                        acc.phys += br.combined.value * inv_b;
                        acc.terms[0] += br.spf;
                        acc.terms[1] += br.erf;
                        acc.terms[2] += br.srf;
                        acc.counted += 1;
                    }
                    Err(Error::DegenerateRotation(_)) => acc.skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            let gin = model.denoiser.backward(&trace, &g_eps, Some(&mut acc.grad_denoiser));
            let entry = acc.grad_features.entry(item.object).or_insert_with(|| vec![0.0; gin.feature.len()]);
            for (a, g) in entry.iter_mut().zip(&gin.feature) {
                *a += g;
            }
        }
        Ok(acc)
    })?;

    let n_enc = model.encoder.mlp.params.len();
    let mut grad = vec![0.0; n_enc + n_den];
    let mut feat_grads: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut out = LossBreakdown::default();
    let (mut terms, mut counted, mut phys) = ([0.0; 3], 0usize, 0.0);
    for acc in chunks {
        for (g, a) in grad[n_enc..].iter_mut().zip(&acc.grad_denoiser) {
            *g += a;
        }
        for (obj, fg) in acc.grad_features {
            let e = feat_grads.entry(obj).or_insert_with(|| vec![0.0; fg.len()]);
            for (a, g) in e.iter_mut().zip(&fg) {
                *a += g;
            }
        }
        out.simple += acc.simple;
        phys += acc.phys;
        for k in 0..3 {
            terms[k] += acc.terms[k];
        }
        counted += acc.counted;
        out.skipped += acc.skipped;
    }
    let enc_grads = try_map_indexed(exec, slots.len(), |i| -> Result<Vec<f64>> {
        let mut g = vec![0.0; n_enc];
        if let Some(fg) = feat_grads.get(&slots[i]) {
            model.encoder.backward(&encoded[i].1, fg, &mut g);
        }
        Ok(g)
    })?;
    for g in enc_grads {
        for (a, v) in grad[..n_enc].iter_mut().zip(&g) {
            *a += v;
        }
    }
    if counted > 0 {
        let mean = |k: usize, wk: f64| (wk != 0.0).then(|| terms[k] / counted as f64);
        out.spf = mean(0, w.spf);
        out.erf = mean(1, w.erf);
        out.srf = mean(2, w.srf);
    }
    out.total = out.simple + phys;
    if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
        let what = if bad < n_enc { "encoder" } else { "denoiser" };
        return Err(Error::NonFinite(format!("{what} parameter gradient")));
    }
    Ok((out, grad))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptimizerState {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (vec![0.0; n], vec![0.0; n]),
        };
        OptimizerState { kind, step: 0, m, v }
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - ADAM_B1.powf(self.step as f64);
                let c2 = 1.0 - ADAM_B2.powf(self.step as f64);
                for i in 0..params.len() {
                    self.m[i] = ADAM_B1 * self.m[i] + (1.0 - ADAM_B1) * grad[i];
                    self.v[i] = ADAM_B2 * self.v[i] + (1.0 - ADAM_B2) * grad[i] * grad[i];
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: GraspModel,
    pub ema: Vec<f64>,
    pub optimizer: OptimizerState,
    pub iteration: usize,
    pub curve: Vec<LossRecord>,
}

impl TrainState {
    pub fn fresh(model: GraspModel, cfg: &TrainConfig) -> Self {
        let ema = model.flat_params();
        let optimizer = OptimizerState::new(cfg.optimizer, ema.len());
        TrainState {
            model,
            ema,
            optimizer,
            iteration: 0,
            curve: Vec::new(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.skeleton()?;
        model.validate()?;
        let ema = match &ck.ema {
            Some(t) => crate::model::params_from_tensors(&model, t)?,
            None => model.flat_params(),
        };
        let n = model.param_count();
        if ck.optimizer.kind == OptimizerKind::Adam && (ck.optimizer.m.len() != n || ck.optimizer.v.len() != n) {
            return Err(Error::Checkpoint("optimizer state does not match the parameter count".into()));
        }
        Ok(TrainState {
            model,
            ema,
            optimizer: ck.optimizer.clone(),
            iteration: ck.iteration,
            curve: Vec::new(),
        })
    }

    pub fn checkpoint(&self, cfg: &TrainConfig, constraints: &ConstraintConfig) -> Checkpoint {
        let echo = serde_json::json!({ "train": cfg, "constraints": constraints });
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            hand: self.model.hand.clone(),
            schedule: self.model.schedule,
            net: self.model.net.clone(),
            encoder_points: self.model.encoder_points,
            normalizer: self.model.normalizer.clone(),
            train_config: echo,
            iteration: self.iteration,
            params: model_tensors(&self.model, &self.model.flat_params()),
            ema: Some(model_tensors(&self.model, &self.ema)),
            optimizer: self.optimizer.clone(),
        }
    }

    /// Model carrying the averaged weights.
    pub fn ema_model(&self) -> GraspModel {
        let mut m = self.model.clone();
        m.set_flat_params(&self.ema);
        m
    }
}

/// Draws the batch for one iteration. The stream depends only on the seed
/// and the iteration number, so interrupted runs resume identically.
pub fn draw_batch(model: &GraspModel, set: &TrainSet, schedule: &NoiseSchedule, cfg: &TrainConfig, iteration: usize) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(iteration as u64);
    let dim = model.pose_dim();
    let items: Vec<BatchItem> = (0..cfg.batch_size)
        .map(|_| {
            let s = &set.samples[rng.random_range(0..set.samples.len())];
            let t = rng.random_range(1..=schedule.steps());
            BatchItem {
                object: s.object,
                pose: s.pose.clone(),
                t,
                eps: standard_normal(&mut rng, dim),
            }
        })
        .collect();
    let mut encoder_inputs = BTreeMap::new();
    for item in &items {
        if !encoder_inputs.contains_key(&item.object) {
            let seed = rng.next_u64();
            encoder_inputs.insert(item.object, model.encoder_input(&set.objects[item.object].cloud, seed));
        }
    }
    Batch { items, encoder_inputs }
}

fn clip(grad: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

/// Runs iterations until `cfg.iterations` is reached. `on_iter` sees every
/// record as it is produced.
pub fn train(
    state: &mut TrainState,
    set: &TrainSet,
    cfg: &TrainConfig,
    constraints: &ConstraintConfig,
    exec: Exec,
    mut on_iter: impl FnMut(&LossRecord),
) -> Result<()> {
    cfg.validate()?;
    constraints.validate()?;
    if set.samples.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    if let Some(s) = set.samples.iter().find(|s| s.pose.len() != state.model.pose_dim()) {
        return Err(Error::DimensionMismatch {
            what: "training pose",
            expected: state.model.pose_dim(),
            got: s.pose.len(),
        });
    }
    if state.optimizer.kind != cfg.optimizer {
        return Err(Error::InvalidConfig("optimizer differs from the one the run started with".into()));
    }
    let hand = state.model.hand_model()?;
    let schedule = state.model.noise_schedule()?;
    let physics = cfg.constraints(constraints);
    while state.iteration < cfg.iterations {
        let batch = draw_batch(&state.model, set, &schedule, cfg, state.iteration);
        let (loss, mut grad) = loss_padg(&state.model, &hand, &schedule, &set.objects, &batch, &physics, cfg.physics_max_t, exec)?;
        if !loss.total.is_finite() || loss.total > DIVERGENCE_LIMIT {
            return Err(Error::Diverged {
                iteration: state.iteration,
                loss: loss.total,
            });
        }
        clip(&mut grad, cfg.grad_clip);
        let mut params = state.model.flat_params();
        state.optimizer.apply(&mut params, &grad, cfg.learning_rate);
        state.model.set_flat_params(&params);
        let d = cfg.ema_decay;
        for (e, p) in state.ema.iter_mut().zip(&params) {
            *e = d * *e + (1.0 - d) * p;
        }
        let record = LossRecord {
            iteration: state.iteration,
            loss,
        };
        on_iter(&record);
        state.curve.push(record);
        state.iteration += 1;
    }
    Ok(())
}

/// CSV rendering of a loss curve (`iteration,L_simple,L_SPF,L_ERF,L_SRF,total`).
pub fn curve_csv(records: &[LossRecord], header: bool) -> String {
    let mut s = String::new();
    if header {
        s.push_str("iteration,L_simple,L_SPF,L_ERF,L_SRF,total\n");
    }
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
    for r in records {
        s.push_str(&format!(
            "{},{:.9e},{},{},{},{:.9e}\n",
            r.iteration,
            r.loss.simple,
            opt(r.loss.spf),
            opt(r.loss.erf),
            opt(r.loss.srf),
            r.loss.total
        ));
    }
    s
}
