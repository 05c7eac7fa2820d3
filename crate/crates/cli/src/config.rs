//! Optional TOML configuration file.
//!
//! ```toml
//! seed = 7
//!
//! [decompose]
//! tau = 0.9
//! r_min = 1
//! r_max = 8
//! gap = "log"
//!
//! [bench]
//! trials = 21
//!
//! [train]
//! steps = 500
//! lr = 0.1
//! methods = ["soka", "lora"]
//! batch_size = 64
//! momentum = 0.9
//! ```
//!
//! Unknown keys are rejected so that typos do not silently fall back to
//! defaults.

use std::path::Path;

use serde::Deserialize;

use crate::{CliError, CliResult};

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub decompose: DecomposeConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub train: TrainFileConfig,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposeConfig {
    pub tau: Option<f64>,
    pub r_min: Option<usize>,
    pub r_max: Option<usize>,
    pub gap: Option<String>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub trials: Option<usize>,
}

#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFileConfig {
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub methods: Option<Vec<String>>,
    pub batch_size: Option<usize>,
    pub momentum: Option<f64>,
    pub tau: Option<f64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::from(kronadapt::Error::io(path, e)))?;
        toml::from_str(&text)
            .map_err(|e| CliError::argument(format!("config {}: {}", path.display(), e.message())))
    }
}
