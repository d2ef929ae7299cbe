//! The trainable pair (object encoder + denoiser) together with everything
//! needed to use it: hand, schedule, normalization statistics.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, Normalizer, ScheduleConfig};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::kinematics::{default_hand, HandSpec, KinematicHandModel};
use crate::net::{DenoiserMlp, NetConfig, ObjectEncoder};

pub const CHECKPOINT_FORMAT: &str = "dgforge-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct GraspModel {
    pub hand: HandSpec,
    pub schedule: ScheduleConfig,
    pub net: NetConfig,
    /// Number of object points fed to the encoder.
    pub encoder_points: usize,
    pub encoder: ObjectEncoder,
    pub denoiser: DenoiserMlp,
    pub normalizer: Normalizer,
}

impl GraspModel {
    pub fn new(
        hand: HandSpec,
        schedule: ScheduleConfig,
        net: NetConfig,
        encoder_points: usize,
        normalizer: Normalizer,
        seed: u64,
    ) -> Result<Self> {
        hand.validate()?;
        net.validate()?;
        schedule.build()?;
        if encoder_points == 0 {
            return Err(Error::InvalidConfig("encoder_points must be positive".into()));
        }
        if normalizer.dim() != hand.pose_dim() {
            return Err(Error::DimensionMismatch {
                what: "normalizer",
                expected: hand.pose_dim(),
                got: normalizer.dim(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = ObjectEncoder::new(&net.encoder_widths, &mut rng)?;
        let denoiser = DenoiserMlp::new(hand.pose_dim(), encoder.feature_dim(), &net, &mut rng)?;
        Ok(GraspModel {
            hand,
            schedule,
            net,
            encoder_points,
            encoder,
            denoiser,
            normalizer,
        })
    }

    pub fn pose_dim(&self) -> usize {
        self.denoiser.pose_dim
    }

    pub fn hand_model(&self) -> Result<KinematicHandModel> {
        default_hand(&self.hand)
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    /// Encoder input for an object: a seeded subsample as plain arrays.
    pub fn encoder_input(&self, cloud: &PointCloud, seed: u64) -> Vec<[f64; 3]> {
        cloud
            .subsample(self.encoder_points, seed)
            .points()
            .iter()
            .map(|p| [p.x, p.y, p.z])
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.mlp.validate()?;
        self.denoiser.validate()?;
        self.normalizer.validate()?;
        if self.denoiser.cond_dim != self.encoder.feature_dim() {
            return Err(Error::Checkpoint("encoder output does not match denoiser conditioning".into()));
        }
        if self.normalizer.dim() != self.pose_dim() || self.hand.pose_dim() != self.pose_dim() {
            return Err(Error::Checkpoint(format!(
                "pose dimension mismatch: hand {}, denoiser {}, normalizer {}",
                self.hand.pose_dim(),
                self.pose_dim(),
                self.normalizer.dim()
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.encoder.mlp.params.len() + self.denoiser.mlp.params.len()
    }

    /// Encoder parameters followed by denoiser parameters.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = self.encoder.mlp.params.clone();
        v.extend_from_slice(&self.denoiser.mlp.params);
        v
    }

    pub fn set_flat_params(&mut self, p: &[f64]) {
        let n = self.encoder.mlp.params.len();
        self.encoder.mlp.params.copy_from_slice(&p[..n]);
        self.denoiser.mlp.params.copy_from_slice(&p[n..]);
    }
}

/// A named flat array with its logical shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn mlp_tensors(prefix: &str, sizes: &[usize], params: &[f64]) -> Vec<Tensor> {
    let mut out = Vec::new();
    let mut off = 0;
    for (l, w) in sizes.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        out.push(Tensor {
            name: format!("{prefix}.{l}.weight"),
            shape: vec![n_out, n_in],
            data: params[off..off + n_in * n_out].to_vec(),
        });
        off += n_in * n_out;
        out.push(Tensor {
            name: format!("{prefix}.{l}.bias"),
            shape: vec![n_out],
            data: params[off..off + n_out].to_vec(),
        });
        off += n_out;
    }
    out
}

fn tensors_to_params(prefix: &str, sizes: &[usize], tensors: &[Tensor]) -> Result<Vec<f64>> {
    let expected = mlp_tensors(prefix, sizes, &vec![0.0; crate::net::Mlp::param_count(sizes)]);
    let mut out = Vec::new();
    for e in expected {
        let t = tensors
            .iter()
            .find(|t| t.name == e.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", e.name)))?;
        if t.shape != e.shape || t.data.len() != e.shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, expected {:?}",
                t.name, t.shape, e.shape
            )));
        }
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("tensor {} holds non-finite values", t.name)));
        }
        out.extend_from_slice(&t.data);
    }
    Ok(out)
}

pub(crate) fn model_tensors(model: &GraspModel, flat: &[f64]) -> Vec<Tensor> {
    let n = model.encoder.mlp.params.len();
    let mut t = mlp_tensors("encoder", &model.encoder.mlp.sizes, &flat[..n]);
    t.extend(mlp_tensors("denoiser", &model.denoiser.mlp.sizes, &flat[n..]));
    t
}

pub(crate) fn params_from_tensors(model: &GraspModel, tensors: &[Tensor]) -> Result<Vec<f64>> {
    let mut p = tensors_to_params("encoder", &model.encoder.mlp.sizes, tensors)?;
    p.extend(tensors_to_params("denoiser", &model.denoiser.mlp.sizes, tensors)?);
    Ok(p)
}

/// On-disk checkpoint. `params` are the raw training weights; `ema` (when
/// present) are the averaged weights used for sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub hand: HandSpec,
    pub schedule: ScheduleConfig,
    pub net: NetConfig,
    pub encoder_points: usize,
    pub normalizer: Normalizer,
    /// Echo of the training configuration that produced the weights.
    pub train_config: serde_json::Value,
    pub iteration: usize,
    pub params: Vec<Tensor>,
    pub ema: Option<Vec<Tensor>>,
    pub optimizer: crate::train::OptimizerState,
}

impl Checkpoint {
    pub fn skeleton(&self) -> Result<GraspModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format {:?})", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", self.version)));
        }
        let mut model = GraspModel::new(
            self.hand.clone(),
            self.schedule,
            self.net.clone(),
            self.encoder_points,
            self.normalizer.clone(),
            0,
        )?;
        let p = params_from_tensors(&model, &self.params)?;
        model.set_flat_params(&p);
        Ok(model)
    }

    /// Model with the weights intended for sampling (EMA when available).
    pub fn sampling_model(&self) -> Result<GraspModel> {
        let mut model = self.skeleton()?;
        if let Some(ema) = &self.ema {
            let p = params_from_tensors(&model, ema)?;
            model.set_flat_params(&p);
        }
        model.validate()?;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}
