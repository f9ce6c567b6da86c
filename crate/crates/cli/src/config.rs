use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fastc::dataset::AggregationConfig;
use fastc::grid::GridSpec;
use fastc::model::{FusionStrategy, ModelConfig};
use fastc::synth::{EgoPath, LidarModel, SceneParams};
use fastc::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Overrides `output_dir`.
pub const ENV_OUTPUT_DIR: &str = "FASTC_OUTPUT_DIR";
/// Worker threads for the data-parallel stages.
pub const ENV_THREADS: &str = "FASTC_THREADS";

/// Square BEV grid centred on the sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    /// The grid spans `[-half_extent, half_extent)` on both axes.
    pub half_extent: f64,
    pub cell_size: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = GridSpec::desk_scale();
        Self {
            half_extent: g.x_max,
            cell_size: g.cell_size,
            z_min: g.z_min,
            z_max: g.z_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// P: pillars kept per scan.
    pub max_pillars: usize,
    /// N: points kept per pillar.
    pub max_points: usize,
    /// C: pillar feature width.
    pub channels: usize,
    /// Divides every backbone width; 1 is the full network.
    pub width_divisor: usize,
    pub strategy: FusionStrategy,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            max_pillars: m.max_pillars,
            max_points: m.max_points,
            channels: m.channels,
            width_divisor: m.width_divisor,
            strategy: m.strategy,
        }
    }
}

/// Dataset directories: synthetic sequences or generated datasets.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
    /// Label-to-cost table; the shipped table when absent.
    pub ontology: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub frames: usize,
    pub scene: SceneParams,
    pub ego: EgoPath,
    pub lidar: LidarModel,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            frames: 20,
            scene: SceneParams::default(),
            ego: EgoPath::default(),
            lidar: LidarModel::default(),
        }
    }
}

/// Everything a run needs. Every section and key is optional; unknown keys
/// are rejected. `seed` is the single root of all randomness and replaces
/// `train.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub grid: GridSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub synth: SynthSection,
    pub aggregation: AggregationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            grid: GridSection::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            data: DataSection::default(),
            synth: SynthSection::default(),
            aggregation: AggregationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path` (or the defaults), applies the seed and environment
    /// overrides, and validates the result.
    pub fn resolve(path: Option<&Path>, seed: Option<u64>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("--config {}", p.display()))?;
                Self::parse(&text).with_context(|| format!("--config {}", p.display()))?
            }
            None => Self::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        if let Ok(dir) = std::env::var(ENV_OUTPUT_DIR) {
            if !dir.is_empty() {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        if cfg.train.seed != 0 && cfg.train.seed != cfg.seed {
            log::warn!("train.seed {} is replaced by the root seed {}", cfg.train.seed, cfg.seed);
        }
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid()?;
        self.model_config()?.validate()?;
        self.train.validate()?;
        self.aggregation.validate()?;
        self.synth.lidar.validate()?;
        if self.synth.frames == 0 {
            bail!("synth.frames must be at least 1");
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec> {
        let g = &self.grid;
        Ok(GridSpec::centered(g.half_extent, (g.z_min, g.z_max), g.cell_size)?)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        Ok(ModelConfig {
            grid: self.grid()?,
            max_pillars: m.max_pillars,
            max_points: m.max_points,
            channels: m.channels,
            width_divisor: m.width_divisor,
            frames: self.train.frames,
            strategy: m.strategy,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = RunConfig::parse("seed = 3\n[model]\nchannels = 64\n[train]\nbatch_size = 4\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model.channels, 64);
        assert_eq!(cfg.model.max_points, ModelSection::default().max_points);
        assert_eq!(cfg.train.batch_size, 4);
        assert_eq!(cfg.train.learning_rate, 2.0e-4);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("colour = 1\n").is_err());
        assert!(RunConfig::parse("[model]\nchanels = 64\n").is_err());
        assert!(RunConfig::parse("[synth.lidar]\nrange = 3\n").is_err());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn grid_must_suit_the_network() {
        let mut cfg = RunConfig::default();
        cfg.grid.half_extent = 13.0;
        assert!(cfg.validate().is_err());
    }
}
