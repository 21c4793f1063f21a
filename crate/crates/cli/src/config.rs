//! Layered configuration: built-in defaults, then a JSON file, then flags.

use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Flag overrides as a sparse JSON object. Dotted keys address nested
/// fields; `None` values are skipped.
#[derive(Default)]
pub struct Overrides(Map<String, Value>);

impl Overrides {
    pub fn set<T: Serialize>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            let v = serde_json::to_value(v).expect("serializable flag");
            let mut parts = key.split('.').peekable();
            let mut node = &mut self.0;
            while let Some(p) = parts.next() {
                if parts.peek().is_none() {
                    node.insert(p.to_string(), v);
                    break;
                }
                node = node
                    .entry(p.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("object path");
            }
        }
        self
    }

    pub fn flag(&mut self, key: &str, on: bool) -> &mut Self {
        self.set(key, on.then_some(true))
    }
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Defaults < file < flags.
pub fn resolve<C: Default + Serialize + DeserializeOwned>(file: Option<&Path>, flags: Overrides) -> Result<C> {
    let mut v = serde_json::to_value(C::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let parsed: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        merge(&mut v, parsed);
    }
    merge(&mut v, Value::Object(flags.0));
    serde_json::from_value(v).context("invalid configuration")
}

/// Canonical single-line JSON: keys sorted at every level.
pub fn canonical<C: Serialize>(cfg: &C) -> String {
    serde_json::to_string(&serde_json::to_value(cfg).expect("serializable config")).expect("json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Inner {
        a: u32,
        b: String,
    }

    #[derive(Debug, Default, PartialEq, Serialize, Deserialize)]
    #[serde(default, deny_unknown_fields)]
    struct Outer {
        z: u32,
        inner: Inner,
    }

    #[test]
    fn precedence_and_nesting() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"z": 4, "inner": {"a": 1, "b": "file"}}"#).unwrap();
        let mut o = Overrides::default();
        o.set("inner.b", Some("flag")).set("z", None::<u32>);
        let c: Outer = resolve(Some(&path), o).unwrap();
        assert_eq!(c, Outer { z: 4, inner: Inner { a: 1, b: "flag".into() } });
        assert_eq!(canonical(&c), r#"{"inner":{"a":1,"b":"flag"},"z":4}"#);
        std::fs::write(&path, r#"{"bogus": 1}"#).unwrap();
        assert!(resolve::<Outer>(Some(&path), Overrides::default()).is_err());
    }
}
