//! Merging of JSON config files with command-line flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

/// Overlays the non-null fields of `cli` onto the JSON object in `file`.
///
/// Both sides use the same field names, so a config file may supply any flag
/// (with dashes written as underscores) and the command line wins.
pub fn merge<T: Serialize + DeserializeOwned>(cli: &T, file: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = file else {
        return Ok(serde_json::from_value(serde_json::to_value(cli)?)?);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut base: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    let Value::Object(base_map) = &mut base else {
        return Err(CliError::Usage(format!("config {} must hold a JSON object", path.display())));
    };
    let known = match serde_json::to_value(cli)? {
        Value::Object(map) => map,
        _ => unreachable!("argument structs serialize to objects"),
    };
    if let Some(key) = base_map.keys().find(|k| !known.contains_key(*k)) {
        return Err(CliError::Usage(format!("config {}: unknown key `{key}`", path.display())));
    }
    for (key, value) in known {
        if !value.is_null() {
            base_map.insert(key, value);
        }
    }
    serde_json::from_value(base).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

/// Seed from the flags or config file, else `DYNCS_SEED`, else 0.
pub fn resolve_seed(seed: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = seed {
        return Ok(s);
    }
    match std::env::var("DYNCS_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Usage(format!("DYNCS_SEED={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}
