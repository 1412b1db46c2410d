use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use wegen::generator::GeneratorConfig;
use wegen::guider::GuiderConfig;
use wegen::train::TrainConfig;
use wegen::WegenError;

use crate::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub vocab_cap: usize,
    /// Width of the random embeddings used when no vector file is given.
    pub embedding_dim: usize,
    pub embedding_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            vocab_cap: wegen::data::DEFAULT_VOCAB_CAP,
            embedding_dim: 300,
            embedding_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub vocab: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub triplets: Option<PathBuf>,
    pub guider: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

/// Everything a run needs. Loaded from one JSON document, then patched by
/// command-line flags.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub guider: GuiderConfig,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub paths: Paths,
}

/// A dotted config key and the JSON value it should take.
pub type Override = (String, Value);

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| WegenError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            WegenError::Parse {
                path: path.to_path_buf(),
                line: e.line(),
                message: e.to_string(),
            }
            .into()
        })
    }

    pub fn apply(self, overrides: &[Override]) -> Result<Self, CliError> {
        let mut root = serde_json::to_value(&self).expect("config serializes");
        for (key, value) in overrides {
            let mut node = &mut root;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let Value::Object(map) = node else {
                    return Err(CliError::Usage(format!("unknown config key {key:?}")));
                };
                if !map.contains_key(*part) {
                    return Err(CliError::Usage(format!("unknown config key {key:?}")));
                }
                if i + 1 == parts.len() {
                    map.insert(part.to_string(), value.clone());
                    break;
                }
                node = map.get_mut(*part).expect("checked above");
            }
        }
        serde_json::from_value(root).map_err(|e| CliError::Usage(format!("bad config value: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let p = &self.paths;
        for path in [&p.vocab, &p.embeddings, &p.train, &p.dev, &p.test, &p.triplets, &p.guider, &p.checkpoint]
            .into_iter()
            .flatten()
        {
            if !path.exists() {
                return Err(WegenError::io(path, std::io::ErrorKind::NotFound.into()).into());
            }
        }
        self.guider.validate()?;
        self.generator.validate()?;
        self.train.validate()?;
        if self.data.embedding_dim == 0 || self.data.vocab_cap == 0 {
            return Err(CliError::Usage("data.embedding_dim and data.vocab_cap must be positive".into()));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        require(&self.paths.out_dir, "out_dir", "--out-dir")
    }
}

/// Fetches a path that a subcommand cannot run without.
pub fn require<'a>(path: &'a Option<PathBuf>, key: &str, flag: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing paths.{key} (set it in the config or pass {flag})")))
}

/// Parses `section.key=value`; the value is read as JSON and falls back to
/// a plain string.
pub fn parse_set(s: &str) -> Result<Override, String> {
    let (key, raw) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}
