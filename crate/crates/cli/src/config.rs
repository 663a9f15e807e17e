//! Layered JSON configuration: defaults, then a config file, then
//! `--set key=value` overrides, then dedicated flags.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// User-supplied layers, applied in order on top of a command's defaults.
#[derive(Debug, Default, Clone)]
pub struct Layers {
    values: Vec<Value>,
}

impl Layers {
    pub fn from_file(path: Option<&Path>) -> Result<Self, CliError> {
        let mut layers = Layers::default();
        if let Some(path) = path {
            let raw = fs::read_to_string(path)
                .map_err(|e| CliError::new("io", format!("cannot read config {}: {e}", path.display())))?;
            let v: Value = serde_json::from_str(&raw)
                .map_err(|e| CliError::new("invalid_config", format!("{}: {e}", path.display())))?;
            if !v.is_object() {
                return Err(CliError::new("invalid_config", format!("{} must hold a JSON object", path.display())));
            }
            layers.values.push(v);
        }
        Ok(layers)
    }

    /// Adds `key=value` assignments. Values that parse as JSON are taken as
    /// JSON, anything else as a string.
    pub fn set_all(&mut self, assignments: &[String]) -> Result<(), CliError> {
        let mut problems = Vec::new();
        for a in assignments {
            match a.split_once('=') {
                Some((k, v)) if !k.trim().is_empty() => self.set(k.trim(), parse_scalar(v)),
                _ => problems.push(format!("--set expects KEY=VALUE, got `{a}`")),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::new("invalid_config", problems.join("; ")))
        }
    }

    pub fn set(&mut self, key: &str, value: Value) {
        let mut root = Value::Object(Map::new());
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .expect("intermediate nodes are objects")
                .entry(part.to_string())
                .or_insert(Value::Object(Map::new()));
        }
        *slot = value;
        self.values.push(root);
    }

    pub fn set_opt<T: Serialize>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.set(key, serde_json::to_value(v).expect("flag values serialize"));
        }
    }

    /// The user layers merged together, without defaults.
    pub fn merged(&self) -> Value {
        let mut out = Value::Object(Map::new());
        for v in &self.values {
            merge(&mut out, v);
        }
        out
    }

    /// Applies the layers to `defaults`. Unknown keys and type errors are
    /// reported together.
    pub fn resolve<T: Serialize + DeserializeOwned>(&self, defaults: &T) -> Result<T, CliError> {
        let mut value = serde_json::to_value(defaults).expect("defaults serialize");
        let user = self.merged();
        merge(&mut value, &user);
        let mut problems = Vec::new();
        unknown_keys(&user, &value_shape(defaults), "", &mut problems);
        if !problems.is_empty() {
            return Err(CliError::new("invalid_config", problems.join("; ")));
        }
        serde_json::from_value(value).map_err(|e| CliError::new("invalid_config", e.to_string()))
    }
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn merge(into: &mut Value, from: &Value) {
    match (into, from) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                match a.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        a.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

fn value_shape<T: Serialize>(defaults: &T) -> Value {
    serde_json::to_value(defaults).expect("defaults serialize")
}

/// Keys in `user` that the schema (given by the serialized defaults) does
/// not have. Optional fields that default to `null` accept any sub-keys.
fn unknown_keys(user: &Value, shape: &Value, prefix: &str, problems: &mut Vec<String>) {
    let (Value::Object(u), Value::Object(s)) = (user, shape) else {
        return;
    };
    for (k, v) in u {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match s.get(k) {
            None => problems.push(format!("unknown config key `{path}`")),
            Some(inner) => unknown_keys(v, inner, &path, problems),
        }
    }
}
