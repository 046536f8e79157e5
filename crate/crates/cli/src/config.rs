//! Strict JSON config loading.

use std::path::{Path, PathBuf};

use p3o_core::trainer::RunConfig;
use serde_json::error::Category;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("config file not found: {}", .0.display())]
    Missing(PathBuf),
    #[error("cannot read config {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed JSON at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("unknown key `{key}` at `{path}`")]
    UnknownKey { path: String, key: String },
    #[error("invalid value at `{path}`: {message}")]
    InvalidValue { path: String, message: String },
    #[error("invalid config: {0}")]
    Invariant(String),
}

fn unknown_key(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

/// Parses and validates a config from JSON text. Omitted keys take their defaults.
pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let mut de = serde_json::Deserializer::from_str(text);
    let config: RunConfig = serde_path_to_error::deserialize(&mut de).map_err(|err| {
        let path = err.path().to_string();
        let inner = err.into_inner();
        match inner.classify() {
            Category::Syntax | Category::Eof | Category::Io => ConfigError::Syntax {
                line: inner.line(),
                column: inner.column(),
                message: inner.to_string(),
            },
            Category::Data => {
                let message = inner.to_string();
                match unknown_key(&message) {
                    Some(key) => ConfigError::UnknownKey { path, key },
                    None => ConfigError::InvalidValue { path, message },
                }
            }
        }
    })?;
    de.end().map_err(|e| ConfigError::Syntax {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    config.validate().map_err(|e| ConfigError::Invariant(e.to_string()))?;
    Ok(config)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            ConfigError::Missing(path.to_path_buf())
        } else {
            ConfigError::Io { path: path.to_path_buf(), source }
        }
    })?;
    parse_config_str(&text)
}

/// Pretty JSON with every key present, suitable for re-parsing.
pub fn render_config(config: &RunConfig) -> String {
    let mut text = serde_json::to_string_pretty(config).expect("configs serialize");
    text.push('\n');
    text
}
