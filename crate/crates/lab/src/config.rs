//! JSON run configuration with `key.path=value` overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::{Map, Value};

use crate::error::{self, LabError, Result};

/// Reads a config file, or an empty object when no file is given.
pub fn load(path: Option<&Path>) -> Result<Value> {
    let Some(path) = path else {
        return Ok(Value::Object(Map::new()));
    };
    let text = error::read_to_string(path)?;
    let v: Value = serde_json::from_str(&text).map_err(|e| LabError::config(format!("{}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(LabError::config(format!("{}: config must be a JSON object", path.display())));
    }
    Ok(v)
}

/// Applies `a.b.c=value`; the value is parsed as JSON and otherwise taken
/// as a string.
pub fn set(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| LabError::config(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    set_path(root, key, value)
}

pub fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(LabError::config(format!("malformed key {key:?}")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| LabError::config(format!("{key}: {part} is not inside an object")))?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    let obj = node
        .as_object_mut()
        .ok_or_else(|| LabError::config(format!("{key}: parent is not an object")))?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn typed<T: DeserializeOwned>(v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| LabError::config(e.to_string()))
}

pub fn to_value<T: serde::Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_overrides() {
        let mut v = load(None).unwrap();
        set(&mut v, "diffusion.lr=0.5").unwrap();
        set(&mut v, "diffusion.hidden=[4,4]").unwrap();
        set(&mut v, "name=plain").unwrap();
        assert_eq!(v["diffusion"]["lr"], 0.5);
        assert_eq!(v["diffusion"]["hidden"][1], 4);
        assert_eq!(v["name"], "plain");
        assert!(set(&mut v, "novalue").is_err());
        assert!(set(&mut v, "name.inner=1").is_err());
    }
}
