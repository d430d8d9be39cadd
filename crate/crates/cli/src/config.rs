//! JSON configuration: a flat object of hyperparameters. Omitted keys take
//! their defaults; unknown keys and invalid values are rejected with the
//! full list of accepted keys and their defaults.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use seqcomm_core::trainer::TrainConfig;
use serde_json::{Map, Value};

/// Parses a configuration document, merging defaults.
pub fn parse(text: &str) -> Result<TrainConfig> {
    let value: Value = serde_json::from_str(text).context("configuration is not valid JSON")?;
    if !value.is_object() {
        return Err(anyhow!("configuration must be a JSON object\n{}", defaults_listing()));
    }
    let cfg: TrainConfig =
        serde_json::from_value(value).map_err(|e| anyhow!("invalid configuration: {}\n{}", e, defaults_listing()))?;
    cfg.validate().map_err(|e| anyhow!("{}\n{}", e, defaults_listing()))?;
    Ok(cfg)
}

/// Reads and parses a configuration file; `None` gives the defaults.
pub fn load(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse(&text).with_context(|| format!("loading {}", p.display()))
        }
    }
}

/// The effective configuration as pretty JSON with every key present.
pub fn to_json(cfg: &TrainConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("configuration serializes")
}

/// Every accepted key with its default value.
pub fn defaults_listing() -> String {
    let value = serde_json::to_value(TrainConfig::default()).expect("defaults serialize");
    let map: Map<String, Value> = value.as_object().cloned().unwrap_or_default();
    let mut out = String::from("accepted keys (defaults):");
    for (k, v) in map {
        out.push_str(&format!("\n  {} = {}", k, v));
    }
    out
}
