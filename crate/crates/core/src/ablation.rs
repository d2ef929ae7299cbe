//! The physics-constraint ablation on the toy benchmark: a baseline model,
//! the same model trained with physics terms, and the physics model sampled
//! with spherical guidance, all scored on held-out objects.

use serde::{Deserialize, Serialize};

use crate::dataset::{generate, seed_for, train_set, DatasetConfig, GraspRecord, Split, ToyObject};
use crate::diffusion::{Normalizer, ScheduleConfig};
use crate::error::Result;
use crate::eval::{filter_grasp, EvalConfig};
use crate::geometry::SpatialIndex;
use crate::kinematics::{default_hand, HandPose, HandSpec, KinematicHandModel};
use crate::model::GraspModel;
use crate::net::NetConfig;
use crate::objectives::{ConstraintConfig, ConstraintWeights};
use crate::parallel::{try_map_indexed, Exec};
use crate::sampler::{sample, GuidanceConfig, GuidanceMode};
use crate::train::{train, OptimizerKind, TrainConfig, TrainSet, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub hand: HandSpec,
    pub dataset: DatasetConfig,
    pub dataset_seed: u64,
    pub schedule: ScheduleConfig,
    pub net: NetConfig,
    pub encoder_points: usize,
    pub constraints: ConstraintConfig,
    /// Shared trainer settings; `weights` is overridden per variant.
    pub train: TrainConfig,
    /// Physics weights of the physics-aware model.
    pub physics_weights: ConstraintWeights,
    /// Train the physics-aware model with the penetration energy clamped at
    /// zero, so clear poses are not pushed away from the object.
    pub physics_erf_hinge: bool,
    /// Guidance of the full method.
    pub guidance: GuidanceConfig,
    pub eval: EvalConfig,
    pub test_objects: usize,
    pub samples_per_object: usize,
    /// Each seed trains its own pair of models and draws its own samples.
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        let mut dataset = DatasetConfig {
            objects: 150,
            grasps_per_object: 8,
            ..Default::default()
        };
        dataset.synth.steps = 30;
        AblationConfig {
            hand: HandSpec::default(),
            dataset,
            dataset_seed: 7,
            schedule: ScheduleConfig::default(),
            net: NetConfig {
                encoder_widths: vec![32, 64],
                hidden: vec![256, 256],
                time_dim: 32,
                semantic_dim: 0,
            },
            encoder_points: 256,
            constraints: ConstraintConfig::default(),
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 32,
                iterations: 10_000,
                optimizer: OptimizerKind::Adam,
                ema_decay: 0.999,
                loss_points: 1024,
                physics_max_t: Some(30),
                ..Default::default()
            },
            physics_weights: ConstraintWeights::new(10.0, 10.0, 5.0),
            physics_erf_hinge: true,
            guidance: GuidanceConfig {
                mode: GuidanceMode::Dsg,
                rate: 0.3,
                weights: Some(ConstraintWeights::new(1.0, 1.5, 0.5)),
                max_t: Some(30),
                erf_hinge: true,
                ..Default::default()
            },
            eval: EvalConfig::default(),
            test_objects: 30,
            samples_per_object: 64,
            seeds: vec![0, 1, 2],
        }
    }
}

/// Aggregates over every sample of one variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub samples: usize,
    pub suc6_rate: f64,
    pub suc1_rate: f64,
    pub mean_pen_mm: f64,
    /// Six-direction successes that were not also one-direction successes.
    pub suc6_without_suc1: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Plain training, unguided sampling.
    pub baseline: VariantMetrics,
    /// Physics-aware training, unguided sampling.
    pub training_only: VariantMetrics,
    /// Physics-aware training with guided sampling.
    pub full: VariantMetrics,
}

impl SeedResult {
    pub fn suc6_gain(&self) -> f64 {
        self.full.suc6_rate - self.baseline.suc6_rate
    }

    /// Relative drop in mean penetration from the baseline to the full method.
    pub fn pen_reduction(&self) -> f64 {
        if self.baseline.mean_pen_mm > 0.0 {
            1.0 - self.full.mean_pen_mm / self.baseline.mean_pen_mm
        } else {
            0.0
        }
    }

    /// Improvement of at least `min_gain` in Suc.6, a relative penetration
    /// drop of at least `min_reduction`, and strict ordering of the three
    /// variants on Suc.6.
    pub fn holds(&self, min_gain: f64, min_reduction: f64) -> bool {
        self.suc6_gain() >= min_gain
            && self.pen_reduction() >= min_reduction
            && self.baseline.suc6_rate < self.training_only.suc6_rate
            && self.training_only.suc6_rate < self.full.suc6_rate
    }
}

/// Objects and reference grasps shared by every seed.
pub struct Benchmark {
    pub hand: KinematicHandModel,
    pub train: TrainSet,
    pub normalizer: Normalizer,
    pub test: Vec<ToyObject>,
}

impl Benchmark {
    pub fn build(cfg: &AblationConfig, exec: Exec) -> Result<Self> {
        let hand = default_hand(&cfg.hand)?;
        let (objects, records): (Vec<ToyObject>, Vec<GraspRecord>) =
            generate(&hand, &cfg.dataset, &cfg.constraints, &cfg.eval, cfg.dataset_seed, exec)?;
        let train = train_set(objects.iter().filter(|o| o.split == Split::Train), &records, cfg.train.loss_points)?;
        let rows: Vec<Vec<f64>> = train.samples.iter().map(|s| s.pose.clone()).collect();
        let normalizer = Normalizer::fit(&rows)?;
        let mut test: Vec<ToyObject> = objects.into_iter().filter(|o| o.split == Split::Test).collect();
        test.sort_by(|a, b| a.id.cmp(&b.id));
        test.truncate(cfg.test_objects);
        Ok(Benchmark {
            hand,
            train,
            normalizer,
            test,
        })
    }

    pub fn train_model(&self, cfg: &AblationConfig, weights: ConstraintWeights, seed: u64, exec: Exec) -> Result<GraspModel> {
        let model = GraspModel::new(
            cfg.hand.clone(),
            cfg.schedule,
            cfg.net.clone(),
            cfg.encoder_points,
            self.normalizer.clone(),
            seed,
        )?;
        let tcfg = TrainConfig {
            seed,
            weights: Some(weights),
            ..cfg.train.clone()
        };
        let constraints = ConstraintConfig {
            erf_hinge: cfg.physics_erf_hinge,
            ..cfg.constraints
        };
        let mut state = TrainState::fresh(model, &tcfg);
        train(&mut state, &self.train, &tcfg, &constraints, exec, |_| {})?;
        Ok(state.ema_model())
    }

    pub fn score(&self, cfg: &AblationConfig, model: &GraspModel, guidance: &GuidanceConfig, seed: u64, exec: Exec) -> Result<VariantMetrics> {
        let (mut n, mut s6, mut s1, mut pen, mut odd) = (0usize, 0usize, 0usize, 0.0, 0usize);
        for obj in &self.test {
            let index = SpatialIndex::build(obj.cloud.clone())?;
            let chain_seed = seed_for(&format!("{seed}/{}", obj.id));
            let samples = sample(model, &self.hand, &obj.cloud, cfg.samples_per_object, guidance, &cfg.constraints, chain_seed, exec)?;
            let reports = try_map_indexed(exec, samples.len(), |i| {
                let pose = HandPose::from_slice(&samples[i].pose, self.hand.num_joints())?;
                filter_grasp(&pose, &self.hand, &index, &cfg.eval).map(|(_, r)| r)
            })?;
            for r in reports {
                n += 1;
                s6 += r.suc6 as usize;
                s1 += r.suc1 as usize;
                odd += (r.suc6 && !r.suc1) as usize;
                pen += r.pen_mm;
            }
        }
        let d = n.max(1) as f64;
        Ok(VariantMetrics {
            samples: n,
            suc6_rate: s6 as f64 / d,
            suc1_rate: s1 as f64 / d,
            mean_pen_mm: pen / d,
            suc6_without_suc1: odd,
        })
    }

    /// Trains both models for `seed` and scores the three variants.
    pub fn run_seed(&self, cfg: &AblationConfig, seed: u64, exec: Exec) -> Result<SeedResult> {
        let plain = self.train_model(cfg, ConstraintWeights::ZERO, seed, exec)?;
        let physics = self.train_model(cfg, cfg.physics_weights, seed, exec)?;
        let unguided = GuidanceConfig {
            mode: GuidanceMode::None,
            ..cfg.guidance
        };
        Ok(SeedResult {
            seed,
            baseline: self.score(cfg, &plain, &unguided, seed, exec)?,
            training_only: self.score(cfg, &physics, &unguided, seed, exec)?,
            full: self.score(cfg, &physics, &cfg.guidance, seed, exec)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn metrics(suc6: f64, pen: f64) -> VariantMetrics {
        VariantMetrics {
            samples: 10,
            suc6_rate: suc6,
            suc1_rate: suc6,
            mean_pen_mm: pen,
            suc6_without_suc1: 0,
        }
    }

    #[test]
    fn decision_rule() {
        let r = SeedResult {
            seed: 0,
            baseline: metrics(0.30, 20.0),
            training_only: metrics(0.32, 21.0),
            full: metrics(0.40, 14.0),
        };
        assert!((r.suc6_gain() - 0.10).abs() < 1e-12);
        assert!((r.pen_reduction() - 0.30).abs() < 1e-12);
        assert!(r.holds(0.099, 0.299));
        assert!(!r.holds(0.11, 0.3));
        let flat = SeedResult {
            training_only: metrics(0.30, 20.0),
            ..r
        };
        assert!(!flat.holds(0.0, 0.0));
    }

    #[test]
    fn tiny_run_is_deterministic() {
        let mut cfg = AblationConfig {
            test_objects: 2,
            samples_per_object: 4,
            encoder_points: 32,
            schedule: ScheduleConfig {
                steps: 10,
                ..Default::default()
            },
            net: NetConfig {
                encoder_widths: vec![8],
                hidden: vec![16],
                time_dim: 4,
                semantic_dim: 0,
            },
            ..Default::default()
        };
        // 13 objects leave one held out
        cfg.dataset.objects = 13;
        cfg.dataset.grasps_per_object = 1;
        cfg.dataset.cloud_points = 256;
        cfg.dataset.synth.steps = 10;
        cfg.train.iterations = 5;
        cfg.train.batch_size = 4;
        cfg.train.loss_points = 64;
        let b = Benchmark::build(&cfg, Exec::Parallel).unwrap();
        assert_eq!(b.test.len(), 1);
        let r1 = b.run_seed(&cfg, 1, Exec::Parallel).unwrap();
        let r2 = b.run_seed(&cfg, 1, Exec::Sequential).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.full.samples, 4);
        assert_eq!(r1.baseline.suc6_without_suc1, 0);
    }
}
