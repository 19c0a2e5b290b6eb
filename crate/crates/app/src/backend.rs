//! Backend selection through `DIFFCOLOR_BACKEND`.

use diffcolor::diffusion::toy::{self, ToyModels};
use diffcolor::{Error, PipelineConfig, Result};

pub const ENV_VAR: &str = "DIFFCOLOR_BACKEND";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendKind {
    Toy,
    /// A named adapter around external pre-trained weights.
    Adapter(String),
}

impl BackendKind {
    /// Reads `DIFFCOLOR_BACKEND`; unset or empty means `toy`.
    pub fn from_env() -> Self {
        Self::parse(&std::env::var(ENV_VAR).unwrap_or_default())
    }

    pub fn parse(value: &str) -> Self {
        match value.trim() {
            "" | "toy" => BackendKind::Toy,
            other => BackendKind::Adapter(other.to_string()),
        }
    }
}

/// Loads (pre-training on first use) the models for `kind`.
pub fn load_models(kind: &BackendKind, config: &PipelineConfig) -> Result<ToyModels> {
    match kind {
        BackendKind::Toy => toy::pretrained(&config.toy),
        BackendKind::Adapter(name) => Err(Error::Config(format!(
            "backend {name:?} is not available in this build; set {ENV_VAR}=toy or leave it unset"
        ))),
    }
}
