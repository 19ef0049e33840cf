//! Shared test helpers: a small JSON-Schema checker covering the subset the
//! shipped schemas use (type, required, properties, additionalProperties,
//! items, enum, numeric bounds, array length bounds, $ref to sibling files
//! and #/definitions).

use std::path::{Path, PathBuf};

use serde_json::Value;

pub struct SchemaStore {
    dir: PathBuf,
}

impl SchemaStore {
    pub fn new() -> Self {
        SchemaStore {
            dir: Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas"),
        }
    }

    pub fn load(&self, name: &str) -> Value {
        let path = self.dir.join(name);
        let text = std::fs::read_to_string(&path)
            .unwrap_or_else(|e| panic!("cannot read schema {}: {e}", path.display()));
        serde_json::from_str(&text).unwrap()
    }

    /// Validate `value` against the named schema file; panics with a path
    /// trail on the first violation.
    pub fn validate(&self, schema_name: &str, value: &Value) {
        let root = self.load(schema_name);
        self.check(&root, &root, value, schema_name);
    }

    fn check(&self, doc_root: &Value, schema: &Value, value: &Value, at: &str) {
        if let Some(reference) = schema.get("$ref").and_then(Value::as_str) {
            if let Some(pointer) = reference.strip_prefix("#/") {
                let target = doc_root
                    .pointer(&format!("/{pointer}"))
                    .unwrap_or_else(|| panic!("{at}: dangling $ref {reference}"));
                return self.check(doc_root, target, value, at);
            }
            let other = self.load(reference);
            return self.check(&other, &other, value, &format!("{at}->{reference}"));
        }

        if let Some(ty) = schema.get("type").and_then(Value::as_str) {
            let ok = match ty {
                "object" => value.is_object(),
                "array" => value.is_array(),
                "string" => value.is_string(),
                "boolean" => value.is_boolean(),
                "integer" => value.as_i64().is_some() || value.as_u64().is_some(),
                "number" => value.is_number(),
                other => panic!("{at}: unhandled schema type {other}"),
            };
            assert!(ok, "{at}: expected {ty}, got {value}");
        }

        if let Some(allowed) = schema.get("enum").and_then(Value::as_array) {
            assert!(
                allowed.contains(value),
                "{at}: {value} not in enum {allowed:?}"
            );
        }
        if let Some(min) = schema.get("minimum").and_then(Value::as_f64) {
            let v = value.as_f64().unwrap_or(f64::NAN);
            assert!(v >= min, "{at}: {v} below minimum {min}");
        }
        if let Some(max) = schema.get("maximum").and_then(Value::as_f64) {
            let v = value.as_f64().unwrap_or(f64::NAN);
            assert!(v <= max, "{at}: {v} above maximum {max}");
        }

        if let Some(obj) = value.as_object() {
            if let Some(required) = schema.get("required").and_then(Value::as_array) {
                for key in required {
                    let key = key.as_str().unwrap();
                    assert!(obj.contains_key(key), "{at}: missing required key '{key}'");
                }
            }
            let props = schema.get("properties").and_then(Value::as_object);
            if let Some(props) = props {
                for (key, sub) in props {
                    if let Some(v) = obj.get(key) {
                        self.check(doc_root, sub, v, &format!("{at}.{key}"));
                    }
                }
            }
            if schema.get("additionalProperties") == Some(&Value::Bool(false)) {
                let props = props.expect("additionalProperties=false needs properties");
                for key in obj.keys() {
                    assert!(props.contains_key(key), "{at}: unexpected key '{key}'");
                }
            }
        }

        if let Some(arr) = value.as_array() {
            if let Some(min) = schema.get("minItems").and_then(Value::as_u64) {
                assert!(arr.len() as u64 >= min, "{at}: fewer than {min} items");
            }
            if let Some(max) = schema.get("maxItems").and_then(Value::as_u64) {
                assert!(arr.len() as u64 <= max, "{at}: more than {max} items");
            }
            if let Some(items) = schema.get("items") {
                for (i, v) in arr.iter().enumerate() {
                    self.check(doc_root, items, v, &format!("{at}[{i}]"));
                }
            }
        }
    }
}
