//! Flat `key = value` config files for the train command.
//!
//! One assignment per line; `#` starts a comment. Values are bools, numbers,
//! comma-separated number lists, or bare strings. Keys map 1:1 onto the
//! model configuration, which rejects unknown keys, so typos fail loudly:
//!
//! ```text
//! lr = 0.1
//! channels = 8, 16, 32, 64, 128
//! use_wega = true
//! ```

use serde_json::{Map, Value};
use wavseg::model::ModelConfig;

use crate::CliError;

fn scalar(raw: &str) -> Value {
    match raw {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => {
            if let Ok(i) = raw.parse::<i64>() {
                Value::from(i)
            } else if let Ok(f) = raw.parse::<f64>() {
                Value::from(f)
            } else {
                Value::from(raw)
            }
        }
    }
}

/// Parse config text into a JSON object, without interpreting keys.
pub fn parse_flat(text: &str) -> Result<Map<String, Value>, CliError> {
    let mut map = Map::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, raw) = line.split_once('=').ok_or_else(|| {
            CliError::user(format!("config line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim();
        let raw = raw.trim();
        if key.is_empty() || raw.is_empty() {
            return Err(CliError::user(format!("config line {}: empty key or value", lineno + 1)));
        }
        let value = if raw.contains(',') {
            Value::Array(raw.split(',').map(|p| scalar(p.trim())).collect())
        } else {
            scalar(raw)
        };
        if map.insert(key.to_string(), value).is_some() {
            return Err(CliError::user(format!("config line {}: duplicate key {key}", lineno + 1)));
        }
    }
    Ok(map)
}

/// Assemble a model config from an optional file plus CLI overrides, then
/// validate it.
pub fn build_config(
    file_text: Option<&str>,
    overrides: &[(&str, Value)],
) -> Result<ModelConfig, CliError> {
    let mut map = match file_text {
        Some(t) => parse_flat(t)?,
        None => Map::new(),
    };
    for (k, v) in overrides {
        map.insert(k.to_string(), v.clone());
    }
    if !map.contains_key("lr") {
        return Err(CliError::user(
            "learning rate is required: set lr in the config file or pass --lr".into(),
        ));
    }
    let cfg: ModelConfig = serde_json::from_value(Value::Object(map))
        .map_err(|e| CliError::user(format!("bad config: {e}")))?;
    cfg.validate().map_err(CliError::from)?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_scalars_lists_and_comments() {
        let m = parse_flat(
            "# a comment\n\
             lr = 0.1\n\
             channels = 2, 2,2,2 , 2\n\
             use_wega = false # trailing comment\n\
             seed=7\n",
        )
        .unwrap();
        assert_eq!(m["lr"], Value::from(0.1));
        assert_eq!(m["seed"], Value::from(7));
        assert_eq!(m["use_wega"], Value::Bool(false));
        assert_eq!(m["channels"].as_array().unwrap().len(), 5);
    }

    #[test]
    fn rejects_malformed_lines() {
        assert!(parse_flat("just words\n").is_err());
        assert!(parse_flat("lr = \n").is_err());
        assert!(parse_flat("lr = 0.1\nlr = 0.2\n").is_err());
    }

    #[test]
    fn requires_lr_and_rejects_unknown_keys() {
        assert!(build_config(Some("seed = 1\n"), &[]).is_err());
        let cfg = build_config(Some("lr = 0.1\n"), &[]).unwrap();
        assert_eq!(cfg.input_size, 64);
        assert!(build_config(Some("lr = 0.1\nlearning_rate = 0.2\n"), &[]).is_err());
        // Overrides win over the file.
        let cfg = build_config(Some("lr = 0.1\nseed = 1\n"), &[("seed", Value::from(9))]).unwrap();
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn validation_errors_surface() {
        let r = build_config(Some("lr = 0.1\nchannels = 2,2\n"), &[]);
        assert!(r.is_err());
    }
}
