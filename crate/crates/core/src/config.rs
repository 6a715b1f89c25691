//! JSON configuration with dotted-path `key=value` overrides.

use std::path::Path;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::pipeline::PipelineConfig;

/// Applies `a.b.c=value`; the value is read as JSON when it parses, otherwise as a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::invalid(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::invalid(format!("bad override key `{key}`")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            *node = Value::Object(Map::new());
        }
        let map = node.as_object_mut().expect("object ensured above");
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("key has at least one segment")
}

pub fn build_config(file: Option<&Path>, overrides: &[String]) -> Result<PipelineConfig> {
    let mut root = match file {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => Value::Object(Map::new()),
    };
    for o in overrides {
        apply_override(&mut root, o)?;
    }
    let cfg: PipelineConfig = serde_json::from_value(root)?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_overrides() {
        let cfg = build_config(
            None,
            &["ep.damping=0.5".into(), "ep.structure=diagonal".into(), "experts=[0,3]".into()],
        )
        .unwrap();
        assert_eq!(cfg.ep.damping, 0.5);
        assert_eq!(cfg.experts, Some(vec![0, 3]));
        assert!(build_config(None, &["ep.dampin=0.5".into()]).is_err());
        assert!(build_config(None, &["noequals".into()]).is_err());
    }
}
