//! Problem files (TOML, or JSON by extension) and `ADVSEL_*` overrides of the numerics table.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{NumericConfig, RawProblem};

pub const ENV_PREFIX: &str = "ADVSEL_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("environment override {var}: {message}")]
    Env { var: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    pub fn of(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Toml,
        }
    }
}

pub fn parse_problem(text: &str, format: Format) -> Result<RawProblem, String> {
    match format {
        Format::Toml => toml::from_str(text).map_err(|e| e.to_string()),
        Format::Json => serde_json::from_str(text).map_err(|e| e.to_string()),
    }
}

pub fn read_text(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })
}

/// Read a problem file and apply overrides from `env`.
pub fn load_problem<I>(path: &Path, env: I) -> Result<RawProblem, ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let text = read_text(path)?;
    let mut raw = parse_problem(&text, Format::of(path))
        .map_err(|message| ConfigError::Parse { path: path.to_path_buf(), message })?;
    apply_env_overrides(&mut raw.numerics, env)?;
    Ok(raw)
}

/// `ADVSEL_<FIELD>=value` replaces `numerics.<field>`; unknown fields are rejected.
pub fn apply_env_overrides<I>(numerics: &mut NumericConfig, env: I) -> Result<(), ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut table = match serde_json::to_value(*numerics) {
        Ok(serde_json::Value::Object(map)) => map,
        _ => unreachable!("numerics serialize to an object"),
    };
    let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    if vars.is_empty() {
        return Ok(());
    }
    vars.sort();
    for (var, value) in vars {
        let key = var[ENV_PREFIX.len()..].to_ascii_lowercase();
        let bad = |message: String| ConfigError::Env { var: var.clone(), message };
        let Some(slot) = table.get_mut(&key) else {
            return Err(bad(format!("no numerics field named `{key}`")));
        };
        let v = value.trim();
        *slot = if slot.is_u64() {
            serde_json::Value::from(v.parse::<u64>().map_err(|e| bad(format!("`{v}`: {e}")))?)
        } else {
            let x = v.parse::<f64>().map_err(|e| bad(format!("`{v}`: {e}")))?;
            serde_json::Number::from_f64(x).map(serde_json::Value::Number).ok_or_else(|| bad(format!("`{v}` is not finite")))?
        };
    }
    *numerics = serde_json::from_value(serde_json::Value::Object(table))
        .map_err(|e| ConfigError::Env { var: ENV_PREFIX.into(), message: e.to_string() })?;
    Ok(())
}
