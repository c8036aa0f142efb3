//! Flat report rendering.

use serde_json::{Map, Value};

/// Collapses nested objects into one level, joining keys with `_`.
pub fn flatten(value: &Value) -> Value {
    fn walk(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
        match v {
            Value::Object(map) => {
                for (k, inner) in map {
                    let key = if prefix.is_empty() {
                        k.clone()
                    } else {
                        format!("{prefix}_{k}")
                    };
                    walk(&key, inner, out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.clone());
            }
        }
    }
    let mut out = Map::new();
    walk("", value, &mut out);
    Value::Object(out)
}

fn csv_cell(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One JSON line, or a two-line CSV (header, values) of the flattened
/// object.
pub fn render(value: &Value, csv: bool) -> String {
    if !csv {
        return format!("{value}\n");
    }
    let Value::Object(map) = flatten(value) else {
        return format!("{}\n", csv_cell(value));
    };
    let header: Vec<&str> = map.keys().map(String::as_str).collect();
    let row: Vec<String> = map.values().map(csv_cell).collect();
    format!("{}\n{}\n", header.join(","), row.join(","))
}
