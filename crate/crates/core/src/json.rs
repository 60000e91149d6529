//! JSON helpers for forward-compatible reading.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// Drops every object key of `value` that does not appear at the same place
/// in `template`, recursing into objects present in both. Returns the dotted
/// paths of the removed keys.
pub fn prune_unknown(value: &mut Value, template: &Value) -> Vec<String> {
    let mut removed = Vec::new();
    prune_at(value, template, "", &mut removed);
    removed
}

fn prune_at(value: &mut Value, template: &Value, path: &str, removed: &mut Vec<String>) {
    let (Value::Object(map), Value::Object(tmpl)) = (value, template) else {
        return;
    };
    map.retain(|k, _| {
        let keep = tmpl.contains_key(k);
        if !keep {
            removed.push(join(path, k));
        }
        keep
    });
    for (k, v) in map.iter_mut() {
        prune_at(v, &tmpl[k], &join(path, k), removed);
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

/// Deserializes `value` into `T` after pruning keys unknown to `T::default()`.
pub fn from_value_lenient<T: Serialize + DeserializeOwned + Default>(mut value: Value) -> serde_json::Result<T> {
    let template = serde_json::to_value(T::default())?;
    prune_unknown(&mut value, &template);
    serde_json::from_value(value)
}
