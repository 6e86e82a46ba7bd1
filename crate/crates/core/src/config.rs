//! Run configuration: one TOML document with a section per stage, layered
//! over the defaults of a named profile.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::SplitSpec;
use crate::field::{FieldConfig, SamplingConfig};
use crate::infer::InferConfig;
use crate::partition::PartitionParams;
use crate::simlidar::{BeamPattern, BoxworldSpec};
use crate::train::{LossConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Small network and sample budget for a single desktop core.
    Desk,
    /// Full-size network, sample counts and learning rate.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?} (desk or paper)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory: `velodyne/`, `poses.txt`, `scene.toml`, `labels/`.
    pub dataset: PathBuf,
    /// Output directory for the scene graph, checkpoints and reports.
    pub output: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub world: BoxworldSpec,
    pub beams: BeamPattern,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferMode {
    OneStep,
    TwoStep,
    Raycast,
}

impl InferMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            InferMode::OneStep => "one_step",
            InferMode::TwoStep => "two_step",
            InferMode::Raycast => "raycast",
        }
    }
}

impl std::str::FromStr for InferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_step" => Ok(InferMode::OneStep),
            "two_step" => Ok(InferMode::TwoStep),
            "raycast" => Ok(InferMode::Raycast),
            other => Err(Error::Config(format!(
                "unknown inference mode {other:?} (one_step, two_step or raycast)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub modes: Vec<InferMode>,
    /// Voxel edge of the ray-casting baseline map.
    pub voxel_size: f64,
    /// Evaluate every n-th test ray.
    pub ray_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub data: DataConfig,
    pub sim: SimConfig,
    pub split: SplitSpec,
    pub partition: PartitionParams,
    pub field: FieldConfig,
    pub sampling: SamplingConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let paper = profile == Profile::Paper;
        Self {
            profile,
            seed: 0,
            data: DataConfig {
                dataset: PathBuf::from("data/boxworld"),
                output: PathBuf::from("runs/boxworld"),
            },
            sim: SimConfig {
                world: BoxworldSpec::default(),
                beams: BeamPattern::default(),
            },
            split: SplitSpec::default(),
            partition: PartitionParams::default(),
            field: if paper { FieldConfig::paper() } else { FieldConfig::desk() },
            sampling: SamplingConfig {
                n_coarse: if paper { 768 } else { 48 },
                n_fine: if paper { 1536 } else { 48 },
                lambda_in: 0.1,
            },
            loss: LossConfig::default(),
            train: TrainConfig {
                lr: if paper { 4e-5 } else { 2e-3 },
                milestones: vec![5, 10, 20],
                decay: 0.1,
                batch_rays: if paper { 1024 } else { 128 },
                epochs: 1,
                ray_stride: if paper { 1 } else { 2 },
            },
            infer: if paper {
                InferConfig::default()
            } else {
                InferConfig {
                    n_coarse: 64,
                    n_fine: 64,
                    ..InferConfig::default()
                }
            },
            eval: EvalConfig {
                modes: vec![InferMode::OneStep, InferMode::TwoStep, InferMode::Raycast],
                voxel_size: 0.5,
                ray_stride: if paper { 1 } else { 2 },
            },
        }
    }

    /// Parses `text` layered over the defaults of its profile. `profile`
    /// overrides the document's own `profile` key.
    pub fn from_toml_str(text: &str, profile: Option<Profile>) -> Result<Self> {
        let user: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let named = match user.get("profile") {
            Some(toml::Value::String(s)) => Some(s.parse::<Profile>()?),
            Some(_) => return Err(Error::Config("profile must be a string".into())),
            None => None,
        };
        let chosen = profile.or(named).unwrap_or(Profile::Desk);
        let mut merged = toml::Value::try_from(Self::profile(chosen))
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, user);
        if let Some(table) = merged.as_table_mut() {
            table.insert("profile".into(), toml::Value::try_from(chosen).unwrap());
        }
        let cfg: RunConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Option<Profile>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, profile).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.beams.validate()?;
        self.split.validate()?;
        self.field.validate()?;
        self.sampling.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.infer.validate()?;
        let w = &self.sim.world;
        if w.n_scans == 0 || w.min_boxes > w.max_boxes || !(w.min_side <= w.max_side) {
            return Err(Error::Config("sim.world bounds are inconsistent".into()));
        }
        if !(self.partition.max_range > 0.0) {
            return Err(Error::Config("max_range must be positive".into()));
        }
        if !(self.partition.cluster_radius > 0.0) || self.partition.max_scans == 0 {
            return Err(Error::Config(
                "partition.cluster_radius and partition.max_scans must be positive".into(),
            ));
        }
        if self.eval.ray_stride == 0 {
            return Err(Error::Config("ray_stride must be at least 1".into()));
        }
        if !(self.eval.voxel_size > 0.0) {
            return Err(Error::Config("eval.voxel_size must be positive".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
