//! Merging of defaults, a JSON config file, and command-line flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::failure::Failure;

/// Overlays the keys of `file` and then every flag that was given on top of `defaults`.
///
/// `flags` must serialize to an object whose keys are a subset of the
/// defaults' keys, with unset flags as `null`. Unknown keys in the config
/// file are rejected.
pub fn resolve<T, F>(defaults: &T, file: Option<&Path>, flags: &F) -> Result<T, Failure>
where
    T: Serialize + DeserializeOwned,
    F: Serialize,
{
    let Value::Object(mut merged) = serde_json::to_value(defaults)? else {
        unreachable!("configs serialize to objects");
    };
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Failure::Validation(format!("invalid config {}: {e}", path.display())))?;
        let Value::Object(entries) = value else {
            return Err(Failure::Validation(format!("config {} must hold a JSON object", path.display())));
        };
        overlay(&mut merged, entries, &format!("config {}", path.display()))?;
    }
    let Value::Object(given) = serde_json::to_value(flags)? else {
        unreachable!("flag sets serialize to objects");
    };
    let given: Map<String, Value> = given.into_iter().filter(|(_, v)| !v.is_null()).collect();
    overlay(&mut merged, given, "flags")?;
    serde_json::from_value(Value::Object(merged)).map_err(|e| Failure::Validation(format!("invalid configuration: {e}")))
}

fn overlay(base: &mut Map<String, Value>, entries: Map<String, Value>, source: &str) -> Result<(), Failure> {
    for (key, value) in entries {
        match base.get_mut(&key) {
            Some(slot) => *slot = value,
            None => return Err(Failure::Validation(format!("unknown key {key:?} in {source}"))),
        }
    }
    Ok(())
}

/// Parses a snake_case enum name the way the config file spells it.
pub fn parse_name<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unrecognised value {s:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;
    use std::io::Write;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Cfg {
        a: u32,
        b: String,
        c: Option<f64>,
    }

    #[derive(Serialize)]
    struct Flags {
        a: Option<u32>,
        c: Option<f64>,
    }

    fn defaults() -> Cfg {
        Cfg { a: 1, b: "x".into(), c: None }
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, r#"{{"a": 5, "b": "file"}}"#).unwrap();
        let got = resolve(&defaults(), Some(f.path()), &Flags { a: Some(9), c: None }).unwrap();
        assert_eq!(got, Cfg { a: 9, b: "file".into(), c: None });
        let got = resolve(&defaults(), Some(f.path()), &Flags { a: None, c: Some(0.5) }).unwrap();
        assert_eq!(got, Cfg { a: 5, b: "file".into(), c: Some(0.5) });
        let got = resolve(&defaults(), None, &Flags { a: None, c: None }).unwrap();
        assert_eq!(got, defaults());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_types() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, r#"{{"zzz": 1}}"#).unwrap();
        assert!(resolve(&defaults(), Some(f.path()), &Flags { a: None, c: None }).is_err());
        let mut g = tempfile::NamedTempFile::new().unwrap();
        write!(g, r#"{{"a": "many"}}"#).unwrap();
        assert!(resolve(&defaults(), Some(g.path()), &Flags { a: None, c: None }).is_err());
        let mut h = tempfile::NamedTempFile::new().unwrap();
        write!(h, "[1, 2]").unwrap();
        assert!(resolve(&defaults(), Some(h.path()), &Flags { a: None, c: None }).is_err());
    }
}
