// SPDX-License-Identifier: MIT OR Apache-2.0

//! `--config` overrides. A config file is a JSON object whose keys are flag
//! names (`max-new` and `max_new` are both accepted). An explicit flag beats
//! the config, which beats the built-in default.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

#[derive(Debug, Default)]
pub struct Resolver {
    config: Map<String, Value>,
    /// Every value handed out, for the run manifest.
    resolved: Map<String, Value>,
}

impl Resolver {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = langconf::io::read_text(path)?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let Value::Object(raw) = value else {
            return Err(CliError::Config(format!(
                "{}: expected a JSON object",
                path.display()
            )));
        };
        let config = raw.into_iter().map(|(k, v)| (k.replace('-', "_"), v)).collect();
        Ok(Self {
            config,
            resolved: Map::new(),
        })
    }

    /// Flag, else config, else `None`.
    pub fn opt<T: DeserializeOwned + Serialize>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> CliResult<Option<T>> {
        let key = key.replace('-', "_");
        let value = match flag {
            Some(v) => Some(v),
            None => match self.config.get(&key) {
                Some(v) => Some(serde_json::from_value(v.clone()).map_err(|e| {
                    CliError::Config(format!("key `{key}`: {e}"))
                })?),
                None => None,
            },
        };
        if let Some(v) = &value {
            let json = serde_json::to_value(v).map_err(|e| CliError::Config(e.to_string()))?;
            self.resolved.insert(key, json);
        }
        Ok(value)
    }

    /// Flag, else config, else `default`.
    pub fn get<T: DeserializeOwned + Serialize>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> CliResult<T> {
        match self.opt(key, flag)? {
            Some(v) => Ok(v),
            None => {
                let json =
                    serde_json::to_value(&default).map_err(|e| CliError::Config(e.to_string()))?;
                self.resolved.insert(key.replace('-', "_"), json);
                Ok(default)
            }
        }
    }

    /// Required value; missing is a usage error.
    pub fn req<T: DeserializeOwned + Serialize>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> CliResult<T> {
        self.opt(key, flag)?
            .ok_or_else(|| CliError::Usage(format!("missing required option --{}", key.replace('_', "-"))))
    }

    pub fn resolved(&self) -> &Map<String, Value> {
        &self.resolved
    }
}
