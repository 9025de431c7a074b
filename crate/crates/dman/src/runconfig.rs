//! Flat key=value run configuration files. Unknown keys are rejected with
//! their line number; anything omitted falls back to the reference
//! defaults.

use std::path::{Path, PathBuf};

use crate::error::{DmanError, Result};
use crate::model::{ModelConfig, Variant};

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data_path: Option<PathBuf>,
    pub out_path: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            data_path: None,
            out_path: PathBuf::from("checkpoint.dman"),
        }
    }
}

pub fn parse_file(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_str(&text)
}

pub fn parse_str(text: &str) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| DmanError::Config {
            key: line.to_string(),
            line: line_no,
            msg: "expected key=value".into(),
        })?;
        let key = key.trim();
        let value = value.trim();
        let bad = |msg: String| DmanError::Config {
            key: key.to_string(),
            line: line_no,
            msg,
        };
        let parse_usize =
            |v: &str| -> Result<usize> { v.parse().map_err(|_| bad(format!("bad count `{v}`"))) };
        match key {
            "embed_dim" => rc.model.embed_dim = parse_usize(value)?,
            "window_t" => rc.model.window = parse_usize(value)?,
            "memory_slots" => rc.model.memory_slots = parse_usize(value)?,
            "layers" => rc.model.layers = parse_usize(value)?,
            "neg_samples" => rc.model.neg_samples = parse_usize(value)?,
            "routing_iters" => rc.model.routing_iters = parse_usize(value)?,
            "batch_size" => rc.model.batch_size = parse_usize(value)?,
            "epochs" => rc.model.epochs = parse_usize(value)?,
            "attention_scale" => {
                rc.model.attention_scale = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(bad(format!("bad flag `{value}`"))),
                }
            }
            "variant" => rc.model.variant = Variant::parse(value)?,
            "lr" => {
                rc.model.lr = value.parse().map_err(|_| bad(format!("bad rate `{value}`")))?
            }
            "seed" => {
                rc.model.seed = value.parse().map_err(|_| bad(format!("bad seed `{value}`")))?
            }
            "data_path" => rc.data_path = Some(PathBuf::from(value)),
            "out_path" => rc.out_path = PathBuf::from(value),
            _ => {
                return Err(DmanError::Config {
                    key: key.to_string(),
                    line: line_no,
                    msg: "unknown key".into(),
                })
            }
        }
    }
    rc.model.validate()?;
    Ok(rc)
}
