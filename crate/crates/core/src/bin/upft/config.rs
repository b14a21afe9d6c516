use std::path::Path;

use serde::{Deserialize, Serialize};
use upft::bounds::{AnswerLikelihood, Truncation};
use upft::consistency::RolloutSpec;
use upft::experiment::ExperimentConfig;
use upft::pipeline::PipelineConfig;
use upft::sampler::SamplerSpec;
use upft::toy_model::TrainHyper;
use upft::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSection {
    pub n_questions: usize,
    pub n_steps: usize,
    pub modulus: u32,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            n_questions: 100,
            n_steps: 1,
            modulus: 10,
            seed: 0,
            id_prefix: "q".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleSection {
    pub n_per_question: usize,
    pub seed: u64,
    pub template: bool,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection {
            n_per_question: 8,
            seed: 0,
            template: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoundsSection {
    pub max_len: usize,
    pub t_grid: Option<Vec<usize>>,
    pub likelihood: AnswerLikelihood,
    pub reader: String,
    pub truncation: Truncation,
    pub temperature: f64,
}

impl Default for BoundsSection {
    fn default() -> Self {
        BoundsSection {
            max_len: 4,
            t_grid: None,
            likelihood: AnswerLikelihood::Indicator,
            reader: "synthetic".into(),
            truncation: Truncation::KeepTruncated,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoverageSection {
    pub t_grid: Vec<usize>,
}

impl Default for CoverageSection {
    fn default() -> Self {
        CoverageSection {
            t_grid: vec![0, 1, 2, 4, 8, 16, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub max_len: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { max_len: 16 }
    }
}

/// Declarative config file: one section per module.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub synth: SynthSection,
    pub sampler: SamplerSpec,
    pub sample: SampleSection,
    pub pipeline: PipelineConfig,
    pub train: TrainHyper,
    pub rollout: RolloutSpec,
    pub coverage: CoverageSection,
    pub bounds: BoundsSection,
    pub eval: EvalSection,
    pub experiment: ExperimentConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::validation(format!("config {}: {e}", path.display())))
    }
}
