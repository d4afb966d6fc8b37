//! JSON configuration files and dotted-path `--set` overrides.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

/// Parses `KEY=VALUE`. The value is read as JSON when possible and as a
/// bare string otherwise, so `loss.kind=EXP` and `loss.alpha=1e-9` both work.
pub fn parse_override(raw: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{raw}` is not KEY=VALUE")))?;
    let path: Vec<String> = key.split('.').map(str::to_owned).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("override key `{key}` has an empty segment")));
    }
    let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_owned()));
    Ok((path, value))
}

/// Replaces the value at `path`, which must already exist in `root`.
pub fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<(), CliError> {
    let mut node = root;
    for (depth, seg) in path.iter().enumerate() {
        let missing = || CliError::Usage(format!("unknown config key `{}`", path[..=depth].join(".")));
        node = match node {
            Value::Object(map) => map.get_mut(seg).ok_or_else(missing)?,
            Value::Array(items) => {
                let i: usize = seg.parse().map_err(|_| missing())?;
                items.get_mut(i).ok_or_else(missing)?
            }
            _ => return Err(missing()),
        };
    }
    *node = value;
    Ok(())
}

/// Applies overrides to `base` through its JSON form and parses the result.
///
/// The base is serialized first, so every field (defaults included) is a
/// valid override target.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(base: &T, overrides: &[String]) -> Result<T, CliError> {
    let mut v = serde_json::to_value(base).map_err(|e| CliError::Usage(e.to_string()))?;
    for raw in overrides {
        let (path, value) = parse_override(raw)?;
        set_path(&mut v, &path, value)?;
    }
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("overrides give an invalid config: {e}")))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}
