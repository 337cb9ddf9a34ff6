//! Config files and flag overrides. Flags win over the file, the file wins
//! over built-in defaults.

use std::fs;
use std::path::Path;

use feasflow_core::{Error, Result};
use serde::de::DeserializeOwned;

/// Parses a TOML config file into `T`; unknown keys are rejected.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, toml::Table)> {
    let Some(path) = path else {
        return Ok((T::default(), toml::Table::new()));
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", path.display(), e.message())))?;
    let value = T::deserialize(toml::Value::Table(table.clone()))
        .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
    Ok((value, table))
}

/// Whether `keys` names a value present in the parsed file.
pub fn has_key(table: &toml::Table, keys: &[&str]) -> bool {
    let mut t = table;
    for (i, k) in keys.iter().enumerate() {
        match t.get(*k) {
            Some(toml::Value::Table(inner)) if i + 1 < keys.len() => t = inner,
            Some(_) if i + 1 == keys.len() => return true,
            _ => return false,
        }
    }
    false
}

pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

/// Serializes a resolved config so it can be passed back with `--config`.
pub fn to_toml<T: serde::Serialize>(value: &T) -> Result<String> {
    toml::to_string_pretty(value).map_err(|e| Error::Data(format!("config serialization: {e}")))
}
