//! Loss, optimizer, checkpoints and the two-stage training procedure.

mod checkpoint;
mod data;
mod loss;
mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Var};
use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{config_hash, Checkpoint, NamedTensor, TensorData, CHECKPOINT_VERSION};
pub use data::{FrameId, FrameSet, LabeledFrame, PreparedSet};
pub use loss::{cross_entropy, log_softmax, one_hot};
pub use optim::{AdamConfig, AdamW, Moments};

use crate::eval::{evaluate, RegionMask};
use crate::model::{Fastc, ModelConfig, ModelError, Pass, FUSION_PREFIX, NET_PREFIX, PILLAR_PREFIX};
use crate::nn::{ops::scalar, NnError};
use crate::rng::{derive_seed, rng};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] crate::dataset::DatasetError),
    #[error(transparent)]
    Map(#[from] crate::tmap::MapError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("invalid target: {0}")]
    Target(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("loss became {loss} at step {step}; lower the learning rate or check the inputs")]
    Diverged { step: u64, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("tensor {name}: checkpoint has shape {stored:?}, model expects {expected:?}")]
    TensorShape {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("tensor {0} is missing from the checkpoint")]
    MissingTensor(String),
    #[error("checkpoint tensor {0} has no counterpart in the model")]
    UnexpectedTensor(String),
    #[error("{0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Model(ModelError::Nn(e))
    }
}

impl From<candle_core::Error> for TrainError {
    fn from(e: candle_core::Error) -> Self {
        TrainError::Model(ModelError::from(e))
    }
}

impl From<crate::pillar::PillarError> for TrainError {
    fn from(e: crate::pillar::PillarError) -> Self {
        TrainError::Model(ModelError::Pillar(e))
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Step cap of the single-frame stage.
    pub stage1_steps: u64,
    /// Step cap of the fusion stage.
    pub stage2_steps: u64,
    /// Validation period in steps; 0 disables validation.
    pub eval_every: u64,
    /// Validations without improvement before stopping.
    pub patience: usize,
    /// Stop as soon as validation mIoU reaches this value.
    pub target_miou: Option<f64>,
    pub seed: u64,
    /// K: frames per fusion sample.
    pub frames: usize,
    /// Scan offsets of the fused frames, current frame first.
    pub offsets: Vec<i64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2.0e-4,
            weight_decay: 0.01,
            batch_size: 2,
            stage1_steps: 2000,
            stage2_steps: 1000,
            eval_every: 100,
            patience: 5,
            target_miou: None,
            seed: 0,
            frames: 3,
            offsets: vec![0, -5, -10],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 || self.patience == 0 {
            return bad("batch_size and patience must be positive");
        }
        if self.frames == 0 {
            return bad("frames must be at least 1");
        }
        if self.offsets.len() < self.frames || self.offsets.first() != Some(&0) {
            return bad("offsets must start at 0 and list at least one offset per frame");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    StepCap,
    Plateau,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    /// (step, validation mIoU) pairs.
    pub validations: Vec<(u64, f64)>,
    pub steps: u64,
    pub stop: StopReason,
    /// Step whose parameters were kept.
    pub kept_step: u64,
}

impl TrainReport {
    pub fn write_loss_csv(&self, path: &Path) -> Result<()> {
        let io = |e| TrainError::Io(path.to_path_buf(), e);
        let mut out = Vec::new();
        writeln!(out, "step,loss,lr").map_err(io)?;
        for r in &self.losses {
            writeln!(out, "{},{},{}", r.step, r.loss, r.lr).map_err(io)?;
        }
        crate::tmap::write_atomic(path, &out).map_err(io)
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Fastc,
    pub optimizer: AdamW,
    pub report: TrainReport,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(&self.model, Some(&self.optimizer), self.report.kept_step)
    }
}

/// Gradients of the mean cross-entropy over `samples`.
pub fn gradients(model: &Fastc, batch: &Batch<'_>, pass: Pass) -> Result<(f64, GradStore)> {
    let logits = model.forward(&batch.samples, pass)?;
    let loss = cross_entropy(&logits, &batch.targets)?;
    let value = scalar(&loss)?;
    Ok((value, loss.backward()?))
}

/// Samples with their targets.
pub struct Batch<'a> {
    pub samples: Vec<crate::model::Sample>,
    pub targets: Vec<&'a crate::tmap::TraversabilityMap>,
}

impl<'a> Batch<'a> {
    pub fn gather(data: &'a PreparedSet<'_>, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| data.sample(i)).collect(),
            targets: indices.iter().map(|&i| data.target(i)).collect(),
        }
    }
}

/// Parameters updated in a stage.
fn trainable<'a>(model: &'a Fastc, prefixes: &'a [&'a str]) -> Vec<&'a (String, Var)> {
    model.store.params_with_prefix(prefixes).collect()
}

struct Stage<'a> {
    pass: Pass,
    prefixes: &'a [&'a str],
    max_steps: u64,
    /// Stream label keeping the two stages' shuffles independent.
    stream: u64,
}

fn fit(
    model: Fastc,
    mut optimizer: AdamW,
    train: &FrameSet,
    val: Option<&FrameSet>,
    cfg: &TrainConfig,
    stage: Stage<'_>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let pillar_seed = derive_seed(cfg.seed, 2);
    let data = train.prepare(&model.cfg, &cfg.offsets, pillar_seed)?;
    let val_data = match val {
        Some(v) if cfg.eval_every > 0 => Some(v.prepare(&model.cfg, &cfg.offsets, pillar_seed)?),
        _ => None,
    };
    let params = trainable(&model, stage.prefixes);
    info!(
        "training {} of {} parameters on {} samples for at most {} steps",
        params.iter().map(|(_, v)| v.elem_count()).sum::<usize>(),
        model.store.num_parameters(),
        data.len(),
        stage.max_steps
    );

    let shuffle_seed = derive_seed(cfg.seed, stage.stream);
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut losses = Vec::new();
    let mut validations = Vec::new();
    let mut best: Option<(f64, u64, Checkpoint)> = None;
    let mut stale = 0usize;
    let mut stop = StopReason::StepCap;
    let mut step = 0u64;
    while step < stage.max_steps {
        if order.len() < cfg.batch_size.min(data.len()) {
            let mut fresh: Vec<usize> = (0..data.len()).collect();
            fresh.shuffle(&mut rng(shuffle_seed, epoch));
            epoch += 1;
            order.extend(fresh);
        }
        let take = cfg.batch_size.min(order.len());
        let indices: Vec<usize> = order.drain(..take).collect();
        let batch = Batch::gather(&data, &indices);
        let (loss, grads) = gradients(&model, &batch, stage.pass)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step, loss });
        }
        optimizer.step(params.iter().copied(), &grads)?;
        losses.push(LossRecord {
            step,
            loss,
            lr: cfg.learning_rate,
        });
        step += 1;
        if step.is_multiple_of(25) || step == 1 {
            info!("step {step}: loss {loss:.4}");
        }
        if let Some(v) = &val_data {
            if step.is_multiple_of(cfg.eval_every) || step == stage.max_steps {
                let miou = evaluate(&model, v, cfg.batch_size, &RegionMask::All)?.miou();
                info!("step {step}: validation mIoU {miou:.4}");
                validations.push((step, miou));
                if best.as_ref().is_none_or(|(b, _, _)| miou > *b || b.is_nan()) {
                    best = Some((miou, step, Checkpoint::capture(&model, Some(&optimizer), step)?));
                    stale = 0;
                    if cfg.target_miou.is_some_and(|t| miou >= t) {
                        stop = StopReason::Target;
                        break;
                    }
                } else {
                    stale += 1;
                    if stale >= cfg.patience {
                        stop = StopReason::Plateau;
                        break;
                    }
                }
            }
        }
    }
    let mut kept_step = step;
    if let Some((miou, at, ckpt)) = best {
        if at != step {
            info!("restoring parameters from step {at} (validation mIoU {miou:.4})");
            ckpt.restore(&model, &[])?;
            optimizer = ckpt.optimizer()?.unwrap_or(optimizer);
        }
        kept_step = at;
    }
    if losses.is_empty() {
        warn!("no optimizer steps were taken");
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        report: TrainReport {
            losses,
            validations,
            steps: step,
            stop,
            kept_step,
        },
    })
}

/// Single-frame training of the pillar encoder and completion network.
pub fn train_stage1(model_cfg: &ModelConfig, train: &FrameSet, val: Option<&FrameSet>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = Fastc::new(model_cfg.single_frame(), derive_seed(cfg.seed, 1), DType::F32)?;
    fit(
        model,
        AdamW::new(cfg.adam()),
        train,
        val,
        cfg,
        Stage {
            pass: Pass::TRAIN,
            prefixes: &[PILLAR_PREFIX, NET_PREFIX],
            max_steps: cfg.stage1_steps,
            stream: 3,
        },
    )
}

/// Adds the fusion module to a stage-1 model and trains it jointly with the
/// completion network while the pillar encoder stays frozen.
pub fn train_stage2(
    stage1: &Checkpoint,
    strategy: crate::model::FusionStrategy,
    train: &FrameSet,
    val: Option<&FrameSet>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = build_stage2(stage1, strategy, cfg)?;
    fit(
        model,
        AdamW::new(cfg.adam()),
        train,
        val,
        cfg,
        Stage {
            pass: Pass::TRAIN_FROZEN,
            prefixes: &[FUSION_PREFIX, NET_PREFIX],
            max_steps: cfg.stage2_steps,
            stream: 4,
        },
    )
}

/// Stage-1 weights in a K-frame model with a freshly initialized fusion module.
pub fn build_stage2(stage1: &Checkpoint, strategy: crate::model::FusionStrategy, cfg: &TrainConfig) -> Result<Fastc> {
    if stage1.model.frames != 1 {
        return Err(TrainError::Config(format!(
            "stage-1 checkpoint has {} frames, expected a single-frame model",
            stage1.model.frames
        )));
    }
    let model_cfg = ModelConfig {
        frames: cfg.frames,
        strategy,
        ..stage1.model.clone()
    };
    let model = Fastc::new(model_cfg, derive_seed(cfg.seed, 5), DType::F32)?;
    stage1.restore(&model, &[FUSION_PREFIX])?;
    Ok(model)
}
