//! The full network: pillar encoder, optional multi-frame fusion and the
//! completion encoder-decoder, with the three fusion placements.

pub use candle_core::DType;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cloud::{PointCloud, Pose};
use crate::completion::{BackboneSpec, CompletionNet};
use crate::fusion::{relative_transform, warp, Fusion, FusionError};
use crate::grid::GridSpec;
use crate::nn::{Mode, NnError, ParamStore};
use crate::pillar::{pillarize, pseudo_images, PillarBatch, PillarEncoder, PillarEncoderConfig, PillarError};
use crate::tmap::TraversabilityMap;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Pillar(#[from] PillarError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("sample has {got} frames, model expects {expected}")]
    Frames { expected: usize, got: usize },
}

impl From<candle_core::Error> for ModelError {
    fn from(e: candle_core::Error) -> Self {
        ModelError::Nn(NnError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Where past frames are aligned and merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    /// Align and fuse pseudo-images, then complete once.
    Pre,
    /// Align pseudo-images, complete each frame, fuse decoder features.
    In,
    /// Complete each frame, then align and fuse decoder features.
    Post,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] = [FusionStrategy::Pre, FusionStrategy::In, FusionStrategy::Post];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Pre => "pre",
            FusionStrategy::In => "in",
            FusionStrategy::Post => "post",
        }
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "pre" => Ok(Self::Pre),
            "in" => Ok(Self::In),
            "post" => Ok(Self::Post),
            other => Err(format!("unknown fusion strategy {other:?} (pre, in, post)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub grid: GridSpec,
    /// P: pillars kept per scan.
    pub max_pillars: usize,
    /// N: points kept per pillar.
    pub max_points: usize,
    /// C: pseudo-image channels.
    pub channels: usize,
    /// Divides every backbone width; 1 is the standard network.
    pub width_divisor: usize,
    /// K: frames per sample; 1 disables fusion.
    pub frames: usize,
    pub strategy: FusionStrategy,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::desk_scale(),
            max_pillars: 4096,
            max_points: 32,
            channels: 128,
            width_divisor: 1,
            frames: 1,
            strategy: FusionStrategy::Pre,
        }
    }
}

impl ModelConfig {
    /// Full-size constants on the 512×512 grid.
    pub fn full_scale() -> Self {
        Self {
            grid: GridSpec::full_scale(),
            max_pillars: 80_000,
            max_points: 55,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate().map_err(|e| ModelError::Config(e.to_string()))?;
        if !self.grid.height.is_multiple_of(16) || !self.grid.width.is_multiple_of(16) {
            return Err(ModelError::Config(format!(
                "grid {}x{} must be divisible by 16",
                self.grid.height, self.grid.width
            )));
        }
        if self.max_pillars == 0 || self.max_points == 0 || self.channels == 0 || self.frames == 0 || self.width_divisor == 0 {
            return Err(ModelError::Config("P, N, C, K and width_divisor must be positive".into()));
        }
        Ok(())
    }

    pub fn backbone(&self) -> BackboneSpec {
        BackboneSpec::scaled(self.channels, self.width_divisor)
    }

    /// Same architecture without fusion.
    pub fn single_frame(&self) -> Self {
        Self {
            frames: 1,
            ..self.clone()
        }
    }
}

/// One pillarized scan and its pose.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameInput {
    pub pillars: PillarBatch,
    pub pose: Pose,
}

impl FrameInput {
    pub fn from_cloud(cloud: &PointCloud, pose: Pose, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            pillars: pillarize(cloud, &cfg.grid, cfg.max_pillars, cfg.max_points, seed)?,
            pose,
        })
    }
}

/// Frames of one sample, current frame first.
pub type Sample = Vec<FrameInput>;

/// How a forward pass treats the pillar encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pass {
    pub mode: Mode,
    /// Run the pillar encoder in inference mode and cut its gradients.
    pub freeze_pillars: bool,
}

impl Pass {
    pub const TRAIN: Pass = Pass {
        mode: Mode::Train,
        freeze_pillars: false,
    };
    pub const TRAIN_FROZEN: Pass = Pass {
        mode: Mode::Train,
        freeze_pillars: true,
    };
    pub const EVAL: Pass = Pass {
        mode: Mode::Eval,
        freeze_pillars: true,
    };
}

pub const PILLAR_PREFIX: &str = "pillar.";
pub const FUSION_PREFIX: &str = "fusion.";
pub const NET_PREFIX: &str = "net.";

pub struct Fastc {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub pillars: PillarEncoder,
    pub net: CompletionNet,
    pub fusion: Option<Fusion>,
}

impl std::fmt::Debug for Fastc {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fastc")
            .field("cfg", &self.cfg)
            .field("parameters", &self.store.num_parameters())
            .finish()
    }
}

impl Fastc {
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, dtype);
        let pillars = PillarEncoder::new(
            &mut store,
            "pillar",
            PillarEncoderConfig {
                channels: cfg.channels,
                normalize: true,
            },
        )?;
        let spec = cfg.backbone();
        let net = CompletionNet::new(&mut store, "net", &spec)?;
        let fusion = if cfg.frames > 1 {
            let width = match cfg.strategy {
                FusionStrategy::Pre => cfg.channels,
                FusionStrategy::In | FusionStrategy::Post => spec.decoder_head,
            };
            Some(Fusion::new(&mut store, "fusion", cfg.frames, width)?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            store,
            pillars,
            net,
            fusion,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Pseudo-images `(B·K, C, H, W)` ordered sample-major.
    fn encode(&self, samples: &[Sample], pass: Pass) -> Result<Tensor> {
        let batches: Vec<PillarBatch> = samples
            .iter()
            .flat_map(|s| s.iter().map(|f| f.pillars.clone()))
            .collect();
        let mode = if pass.freeze_pillars { Mode::Eval } else { pass.mode };
        let maps = pseudo_images(&self.pillars, &batches, &self.cfg.grid, self.dtype(), mode)?;
        Ok(if pass.freeze_pillars { maps.detach() } else { maps })
    }

    /// Pseudo-images of every frame, exposed for feature caching.
    pub fn pseudo_images(&self, samples: &[Sample], pass: Pass) -> Result<Tensor> {
        self.encode(samples, pass)
    }

    /// Logits `(B, 5, H/4, W/4)`.
    pub fn forward(&self, samples: &[Sample], pass: Pass) -> Result<Tensor> {
        for s in samples {
            if s.len() != self.cfg.frames {
                return Err(ModelError::Frames {
                    expected: self.cfg.frames,
                    got: s.len(),
                });
            }
        }
        let maps = self.encode(samples, pass)?;
        let poses: Vec<Vec<Pose>> = samples.iter().map(|s| s.iter().map(|f| f.pose).collect()).collect();
        self.forward_maps(&maps, &poses, pass.mode)
    }

    /// Logits from precomputed pseudo-images `(B·K, C, H, W)`.
    pub fn forward_maps(&self, maps: &Tensor, poses: &[Vec<Pose>], mode: Mode) -> Result<Tensor> {
        let k = self.cfg.frames;
        let b = poses.len();
        let Some(fusion) = &self.fusion else {
            return Ok(self.net.forward(maps, mode)?);
        };
        let grid = self.cfg.grid;
        let align = |x: &Tensor, g: &GridSpec| -> Result<Vec<Tensor>> {
            // Per frame index, a (B, C, h, w) stack aligned to the current frame.
            let mut per_frame = vec![Vec::with_capacity(b); k];
            for (bi, sample_poses) in poses.iter().enumerate() {
                for (ki, pose) in sample_poses.iter().enumerate() {
                    let h = relative_transform(pose, &sample_poses[0], g)?;
                    per_frame[ki].push(warp(&x.get(bi * k + ki)?, &h)?);
                }
            }
            per_frame
                .into_iter()
                .map(|v| Tensor::stack(&v, 0).map_err(ModelError::from))
                .collect()
        };
        let split = |x: &Tensor| -> Result<Vec<Tensor>> {
            let (_, c, h, w) = x.dims4()?;
            let r = x.reshape((b, k, c, h, w))?;
            (0..k).map(|ki| Ok(r.narrow(1, ki, 1)?.squeeze(1)?)).collect()
        };
        match self.cfg.strategy {
            FusionStrategy::Pre => {
                let fused = fusion.forward(&align(maps, &grid)?)?;
                Ok(self.net.forward(&fused, mode)?)
            }
            FusionStrategy::In => {
                let stacks = align(maps, &grid)?;
                // Back to sample-major order for one batched completion pass.
                let aligned = Tensor::stack(&stacks, 1)?.flatten_to(1)?;
                let taps = self.net.encoder.forward(&aligned, mode)?;
                let feats = self.net.decoder.features(&taps, mode)?;
                let fused = fusion.forward(&split(&feats)?)?;
                Ok(self.net.decoder.classify(&fused)?)
            }
            FusionStrategy::Post => {
                let taps = self.net.encoder.forward(maps, mode)?;
                let feats = self.net.decoder.features(&taps, mode)?;
                let quarter = grid.coarsened(4).map_err(|e| ModelError::Config(e.to_string()))?;
                let fused = fusion.forward(&align(&feats, &quarter)?)?;
                Ok(self.net.decoder.classify(&fused)?)
            }
        }
    }

    /// Class maps at grid resolution.
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<TraversabilityMap>> {
        let logits = self.forward(samples, Pass::EVAL)?;
        Ok(crate::completion::predict(&logits, &self.cfg.grid)?)
    }
}
