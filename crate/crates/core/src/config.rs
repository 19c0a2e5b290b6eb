//! Whole-pipeline configuration, read from TOML (or JSON).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::AlignConfig;
use crate::diffusion::toy::ToyConfig;
use crate::error::{Error, Result};
use crate::guidance::{NegativePromptSet, DEFAULT_NEGATIVES};
use crate::stage1::Stage1Config;
use crate::stage2::Stage2Config;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub negatives: Vec<String>,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub align: AlignConfig,
    pub toy: ToyConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            negatives: DEFAULT_NEGATIVES.iter().map(|s| s.to_string()).collect(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            align: AlignConfig::default(),
            toy: ToyConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Both stages sized for the toy backend.
    pub fn toy_demo() -> Self {
        Self { stage1: Stage1Config::toy(), stage2: Stage2Config::toy(), ..Self::default() }
    }

    /// Parses TOML, falling back to JSON.
    pub fn parse(text: &str) -> Result<Self> {
        match toml::from_str::<Self>(text) {
            Ok(cfg) => Ok(cfg),
            Err(toml_err) => serde_json::from_str(text)
                .map_err(|json_err| Error::Config(format!("not valid TOML ({toml_err}) or JSON ({json_err})"))),
        }
    }

    /// Reads a config file. `.json` files are parsed as JSON only.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            return serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())));
        }
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Sets the training and sampling seeds of both stages.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.stage1.seed = seed;
        self.stage2.seed = seed;
        self.stage2.reconstruction_seed = seed;
        self
    }

    pub fn negative_set(&self) -> Result<NegativePromptSet> {
        NegativePromptSet::new(self.negatives.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.negatives.is_empty() {
            return Err(Error::EmptyNegatives);
        }
        Ok(())
    }

    /// Pretty JSON, which round-trips every field exactly.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
