//! Desk-scale training: seeded initialization, the 0.5/0.5 pair-sampling
//! mixture, gradients by central differences or the analytic backward, Adam
//! with decoupled weight decay and linear warmup, and loss-curve logging.
//!
//! Every run is a pure function of its config: same config, same bits.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::encode_stub;
use crate::error::{Error, Result};
use crate::grad::{pipeline_grads, pipeline_loss, TrainExample};
use crate::interact::example_tokens;
use crate::losses::{GroundTruthSet, InstanceTarget, LossBreakdown, LossWeights};
use crate::params::{ModelConfig, ModelParams};
use crate::rngutil::DetRng;
use crate::synth::{pair_same_category, pair_same_image, Scene, SceneConfig, TrainingPair};
use crate::tensor::{self, finite_diff_grad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    FiniteDiff,
    Analytic,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub scene: SceneConfig,
    /// Scenes synthesized for the training pool.
    #[serde(default = "default_dataset_scenes")]
    pub dataset_scenes: usize,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Probability of the two-views-of-one-scene regime (vs. same-category).
    #[serde(default = "default_pair_prob")]
    pub pair_same_image_prob: f64,
    pub seed: u64,
    pub gradient_mode: GradientMode,
    #[serde(default = "default_fd_epsilon")]
    pub fd_epsilon: f64,
    #[serde(default)]
    pub deep_supervision: bool,
    #[serde(default)]
    pub loss: LossWeights,
}

fn default_dataset_scenes() -> usize {
    32
}
fn default_batch() -> usize {
    1
}
fn default_warmup() -> usize {
    100
}
fn default_weight_decay() -> f64 {
    0.05
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_pair_prob() -> f64 {
    0.5
}
fn default_fd_epsilon() -> f64 {
    1e-5
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.scene.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".to_string()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".to_string()));
        }
        if !(0.0..=1.0).contains(&self.pair_same_image_prob) {
            return Err(Error::Config(
                "pair_same_image_prob must lie in [0, 1]".to_string(),
            ));
        }
        if self.dataset_scenes < 2 {
            return Err(Error::Config("dataset needs at least 2 scenes".to_string()));
        }
        if self.scene.max_shapes > self.model.instance_queries {
            return Err(Error::Config(format!(
                "scene max_shapes {} exceeds instance queries {}",
                self.scene.max_shapes, self.model.instance_queries
            )));
        }
        if self.scene.width % self.model.patch != 0 || self.scene.height % self.model.patch != 0 {
            return Err(Error::Config("patch must divide the canvas".to_string()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<TrainConfig> {
        let cfg: TrainConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Seeded parameter initialization (weights ~ N(0, 1/fan_in), biases zero).
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    ModelParams::init(config, seed)
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
}

impl AdamState {
    pub fn new(n: usize) -> AdamState {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        tensor::sint_save(&dir.join("opt_m.sint"), &Tensor::from_vec(&[self.m.len()], self.m.clone())?)?;
        tensor::sint_save(&dir.join("opt_v.sint"), &Tensor::from_vec(&[self.v.len()], self.v.clone())?)?;
        tensor::sint_save(
            &dir.join("opt_step.sint"),
            &Tensor::from_vec(&[1], vec![self.step as f64])?,
        )?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<AdamState> {
        let m = tensor::sint_load(&dir.join("opt_m.sint"))?.into_data();
        let v = tensor::sint_load(&dir.join("opt_v.sint"))?.into_data();
        let step = tensor::sint_load(&dir.join("opt_step.sint"))?.data()[0] as usize;
        if m.len() != v.len() {
            return Err(Error::Config("optimizer moment sizes differ".to_string()));
        }
        Ok(AdamState { m, v, step })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamOptions {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// Linear warmup multiplier applied to the base learning rate at `step`
/// (1-indexed).
pub fn warmup_factor(step: usize, warmup_steps: usize) -> f64 {
    if warmup_steps == 0 {
        1.0
    } else {
        (step as f64 / warmup_steps as f64).min(1.0)
    }
}

/// One bias-corrected Adam update with decoupled weight decay; both terms
/// use the old parameter values and the warmup-scaled learning rate.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    opts: &AdamOptions,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam_step sizes differ: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient at parameter index {i}")));
    }
    state.step += 1;
    let t = state.step;
    let lr = opts.learning_rate * warmup_factor(t, opts.warmup_steps);
    let bc1 = 1.0 - opts.beta1.powi(t as i32);
    let bc2 = 1.0 - opts.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = opts.beta1 * state.m[i] + (1.0 - opts.beta1) * g;
        state.v[i] = opts.beta2 * state.v[i] + (1.0 - opts.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        let old = params[i];
        params[i] = old - lr * (mhat / (vhat.sqrt() + opts.epsilon) + opts.weight_decay * old);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub hungarian: f64,
    pub id: f64,
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub curve: Vec<CurvePoint>,
    pub optimizer: AdamState,
}

/// Turn an image-resolution pair into a feature-resolution training example.
pub fn build_example(pair: &TrainingPair, model: &ModelConfig) -> Result<TrainExample> {
    let f_r = encode_stub(&pair.reference.image, model.patch, model.channels, model.encoder_seed)?;
    let f_t = encode_stub(&pair.target_image, model.patch, model.channels, model.encoder_seed)?;
    let (t_id, t_sem, grouped) = example_tokens(&f_r, &pair.reference)?;
    let grid = (f_t.height(), f_t.width());
    let mut instances = Vec::with_capacity(pair.target_instances.len());
    for ann in &pair.target_instances {
        let class_index = grouped
            .sem_categories
            .iter()
            .position(|&c| c == ann.category)
            .ok_or_else(|| {
                Error::Contract(format!(
                    "target category {} missing from the reference",
                    ann.category
                ))
            })?;
        instances.push(InstanceTarget {
            class_index,
            mask: ann.mask.downsample_majority(grid.0, grid.1)?,
        });
    }
    let id_targets = pair
        .id_targets
        .iter()
        .map(|t| {
            t.as_ref()
                .map(|m| m.downsample_majority(grid.0, grid.1))
                .transpose()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainExample {
        t_id,
        t_sem,
        feat_t: f_t,
        gt: GroundTruthSet {
            instances,
            id_targets,
        },
    })
}

fn sample_pair(
    cfg: &TrainConfig,
    scenes: &[Scene],
    rng: &mut DetRng,
) -> Result<TrainingPair> {
    let same_image = rng.chance(cfg.pair_same_image_prob);
    if same_image {
        for _ in 0..20 {
            let scene = &scenes[rng.below(scenes.len())];
            match pair_same_image(scene, rng) {
                Ok(pair) => return Ok(pair),
                Err(Error::Sampling(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(Error::Sampling(
            "same-image pairing failed for 20 scenes in a row".to_string(),
        ))
    } else {
        pair_same_category(scenes, rng, false)
    }
}

/// Generate the training scene pool from the config.
pub fn build_dataset(cfg: &TrainConfig) -> Result<Vec<Scene>> {
    (0..cfg.dataset_scenes)
        .map(|i| crate::synth::gen_scene(&cfg.scene, cfg.seed.wrapping_add(i as u64)))
        .collect()
}

/// Run the training loop over a scene pool.
pub fn train(cfg: &TrainConfig, scenes: &[Scene]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::Config("training dataset is empty".to_string()));
    }
    let mut params = ModelParams::init(&cfg.model, cfg.seed)?;
    let mut flat = params.flatten();
    let mut state = AdamState::new(flat.len());
    let opts = AdamOptions {
        learning_rate: cfg.learning_rate,
        warmup_steps: cfg.warmup_steps,
        weight_decay: cfg.weight_decay,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        epsilon: cfg.epsilon,
    };
    let mut name_table = Vec::new();
    params.for_each_named(&mut |name, t| name_table.push((name, t.numel())));
    let mut data_rng = DetRng::new(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut scratch = params.clone();

    for step in 1..=cfg.steps {
        let mut grad_sum = vec![0.0; flat.len()];
        let mut loss_sum = LossBreakdown {
            hungarian: 0.0,
            id: 0.0,
            total: 0.0,
        };
        for _ in 0..cfg.batch_size {
            let pair = sample_pair(cfg, scenes, &mut data_rng)?;
            let ex = build_example(&pair, &cfg.model)?;
            let (loss, grads) = match cfg.gradient_mode {
                GradientMode::Analytic => {
                    let (loss, g) = pipeline_grads(&params, &ex, &cfg.loss, cfg.deep_supervision)?;
                    (loss, g.flatten())
                }
                GradientMode::FiniteDiff => {
                    let loss = pipeline_loss(&params, &ex, &cfg.loss, cfg.deep_supervision)?;
                    let g = finite_diff_grad(
                        |probe| {
                            scratch.set_from_flat(probe)?;
                            Ok(pipeline_loss(&scratch, &ex, &cfg.loss, cfg.deep_supervision)?
                                .total)
                        },
                        &flat,
                        cfg.fd_epsilon,
                    )?;
                    (loss, g)
                }
            };
            if !loss.total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at step {step} (seed {})",
                    cfg.seed
                )));
            }
            loss_sum.hungarian += loss.hungarian;
            loss_sum.id += loss.id;
            loss_sum.total += loss.total;
            for (a, b) in grad_sum.iter_mut().zip(&grads) {
                *a += b;
            }
        }
        let inv = 1.0 / cfg.batch_size as f64;
        for g in grad_sum.iter_mut() {
            *g *= inv;
        }
        if let Some(bad) = grad_sum.iter().position(|g| !g.is_finite()) {
            let mut offset = 0;
            let mut owner = "?".to_string();
            for (name, len) in &name_table {
                if bad < offset + len {
                    owner = name.clone();
                    break;
                }
                offset += len;
            }
            return Err(Error::NonFinite(format!(
                "gradient for parameter {owner} at step {step}"
            )));
        }
        adam_step(&mut flat, &grad_sum, &mut state, &opts)?;
        params.set_from_flat(&flat)?;
        curve.push(CurvePoint {
            step,
            loss: loss_sum.total * inv,
            hungarian: loss_sum.hungarian * inv,
            id: loss_sum.id * inv,
        });
    }
    Ok(TrainOutcome {
        params,
        curve,
        optimizer: state,
    })
}

pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("step,loss,l_hungarian,l_id\n");
    for p in curve {
        out.push_str(&format!("{},{},{},{}\n", p.step, p.loss, p.hungarian, p.id));
    }
    out
}

/// Write checkpoint directory: parameters, optimizer state, loss curve.
pub fn save_checkpoint(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    outcome.params.save_dir(dir)?;
    outcome.optimizer.save_dir(dir)?;
    std::fs::write(dir.join("loss_curve.csv"), curve_to_csv(&outcome.curve))?;
    Ok(())
}
