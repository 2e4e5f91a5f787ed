//! Run configuration files: TOML with one `profile` key selecting the base
//! defaults and optional `[train]`, `[model]`, `[distortion]`, `[loss]`
//! sections overriding individual values.
//!
//! ```toml
//! profile = "desk"
//!
//! [train]
//! iterations = 300
//! seed = 7
//!
//! [model]
//! coupling_blocks = 3
//! fusion_enabled = false
//!
//! [distortion]
//! enabled = true
//! noise_sigma = 0.05
//! ```

use crate::error::{Error, Result};
use crate::trainer::TrainConfig;
use std::path::Path;

const TRAIN_KEYS: &[&str] = &[
    "seed", "iterations", "batch_size", "lr_initial", "lr_decay", "lr_floor", "adam_betas",
    "weight_decay", "grad_clip", "checkpoint_every", "log_every",
];
const MODEL_KEYS: &[&str] = &[
    "image_side", "patch_size", "token_dim", "mlp_dim", "tokenizer_depth", "heads",
    "coupling_blocks", "transition_blocks", "transition_width", "detok_conv_width", "qr_version",
    "transition_enabled", "fusion_enabled", "cross_attention_enabled",
    "shared_conditioning_tokenizer",
];

pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let file: toml::Value = text
        .parse()
        .map_err(|e| Error::Config(format!("TOML parse error: {e}")))?;
    let table = file
        .as_table()
        .ok_or_else(|| Error::Config("config root must be a table".into()))?;

    let profile = match table.get("profile") {
        None => "paper".to_string(),
        Some(v) => v
            .as_str()
            .ok_or_else(|| Error::Config("profile must be a string".into()))?
            .to_string(),
    };
    let base = TrainConfig::by_profile(&profile)?;
    let mut flat = toml::Value::try_from(&base)
        .map_err(|e| Error::Config(format!("config encode error: {e}")))?;

    for (section, value) in table {
        match section.as_str() {
            "profile" => {}
            "train" | "model" => {
                let keys: &[&str] = if section == "train" { TRAIN_KEYS } else { MODEL_KEYS };
                let sect = value.as_table().ok_or_else(|| {
                    Error::Config(format!("[{section}] must be a table"))
                })?;
                for (k, v) in sect {
                    if !keys.contains(&k.as_str()) {
                        return Err(Error::Config(format!(
                            "unknown key {k:?} in [{section}]"
                        )));
                    }
                    flat.as_table_mut().unwrap().insert(k.clone(), v.clone());
                }
            }
            "distortion" => {
                let sect = value.as_table().ok_or_else(|| {
                    Error::Config("[distortion] must be a table".into())
                })?;
                for (k, v) in sect {
                    if k == "enabled" {
                        flat.as_table_mut()
                            .unwrap()
                            .insert("distortion_enabled".into(), v.clone());
                        continue;
                    }
                    let dist = flat
                        .as_table_mut()
                        .unwrap()
                        .get_mut("distortion")
                        .and_then(|d| d.as_table_mut())
                        .expect("distortion table");
                    if !dist.contains_key(k) {
                        return Err(Error::Config(format!(
                            "unknown key {k:?} in [distortion]"
                        )));
                    }
                    dist.insert(k.clone(), v.clone());
                }
            }
            "loss" => {
                let sect = value
                    .as_table()
                    .ok_or_else(|| Error::Config("[loss] must be a table".into()))?;
                for (k, v) in sect {
                    let lw = flat
                        .as_table_mut()
                        .unwrap()
                        .get_mut("loss_weights")
                        .and_then(|d| d.as_table_mut())
                        .expect("loss table");
                    if !lw.contains_key(k) {
                        return Err(Error::Config(format!("unknown key {k:?} in [loss]")));
                    }
                    lw.insert(k.clone(), v.clone());
                }
            }
            other => {
                return Err(Error::Config(format!("unknown section [{other}]")));
            }
        }
    }

    let cfg: TrainConfig = flat
        .try_into()
        .map_err(|e| Error::Config(format!("config decode error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}
