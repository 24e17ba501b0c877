//! Named hyperparameter profiles.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{SubjectId, SynthConfig};
use crate::error::{Error, Result};
use crate::models::{GeneratorConfig, ModelConfig};
use crate::pipeline::StageConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small synthetic benchmark that trains in minutes on a laptop.
    #[default]
    Desk,
    /// Full-size widths and schedule (40 classes, 128 channels, 160 steps).
    Paper,
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::invalid("profile", format!("unknown profile `{other}` (desk, paper)"))),
        }
    }
}

/// Everything a profile fixes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileSettings {
    pub synth: SynthConfig,
    /// `[start, end)` timestep window applied after synthesis.
    pub crop: Option<(usize, usize)>,
    pub model: ModelConfig,
    pub generator: GeneratorConfig,
    pub stage: StageConfig,
}

impl Profile {
    pub fn settings(self) -> ProfileSettings {
        match self {
            Profile::Desk => {
                let model = ModelConfig { d_in: 16, t_len: 32, d_enc: 32, d_emb: 32, n_classes: 10 };
                ProfileSettings {
                    synth: SynthConfig {
                        n_subjects: 6,
                        n_classes: 10,
                        per_class: 48,
                        t_len: 32,
                        d_in: 16,
                        noise: 0.875,
                        seed: 0,
                    },
                    crop: None,
                    model,
                    generator: GeneratorConfig::for_model(&model),
                    stage: StageConfig {
                        epochs: 60,
                        batch_size: 64,
                        target: SubjectId(5),
                        ..StageConfig::default()
                    },
                }
            }
            Profile::Paper => {
                let model = ModelConfig::default();
                ProfileSettings {
                    synth: SynthConfig {
                        n_subjects: 6,
                        n_classes: 40,
                        per_class: 48,
                        t_len: 480,
                        d_in: 128,
                        noise: 0.5,
                        seed: 0,
                    },
                    crop: Some((320, 480)),
                    model,
                    generator: GeneratorConfig::for_model(&model),
                    stage: StageConfig { target: SubjectId(5), ..StageConfig::default() },
                }
            }
        }
    }
}
