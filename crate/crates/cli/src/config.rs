//! `--config` takes a JSON document holding the same settings as the
//! flags; an explicit flag always wins over the file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::errors::{require_file, usage, CliError};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub prompt: Option<Vec<u32>>,
    pub prompt_file: Option<PathBuf>,
    pub bos_id: Option<u32>,
    pub mode: Option<String>,
    pub schedule: Option<String>,
    pub k: Option<usize>,
    pub offset: Option<usize>,
    pub layers: Option<Vec<usize>>,
    pub alpha_kind: Option<String>,
    pub alpha: Option<f32>,
    pub alpha_start: Option<f32>,
    pub alpha_end: Option<f32>,
    pub source_form: Option<String>,
    pub info_span: Option<String>,
    pub info_file: Option<PathBuf>,
    pub max_new_tokens: Option<usize>,
    pub trace: Option<PathBuf>,
    pub format: Option<String>,
    pub toy: Option<ToyParams>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyParams {
    pub layers: Option<usize>,
    pub d_model: Option<usize>,
    pub heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub vocab: Option<usize>,
    pub max_seq: Option<usize>,
    pub ln_eps: Option<f32>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        require_file(path, "config file")?;
        let raw = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&raw)
            .map_err(|e| usage(format!("config {} is not valid: {e}", path.display())))
    }
}
