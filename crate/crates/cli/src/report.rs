//! Key/value reports in text, JSON or CSV.

use serde_json::{Map, Value};

use crate::config::Format;
use crate::Failure;

/// Ordered `(key, value)` pairs.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Report {
    rows: Vec<(String, Value)>,
}

impl Report {
    pub fn push(&mut self, key: impl Into<String>, value: impl Into<Value>) {
        self.rows.push((key.into(), value.into()));
    }

    /// Adds every field of a serializable struct under `prefix.`.
    pub fn push_fields(&mut self, prefix: &str, value: &impl serde::Serialize) {
        match serde_json::to_value(value).expect("plain data serializes") {
            Value::Object(m) => {
                for (k, v) in m {
                    self.push(format!("{prefix}.{k}"), v);
                }
            }
            v => self.push(prefix, v),
        }
    }

    pub fn to_json(&self) -> Value {
        Value::Object(self.rows.iter().cloned().collect::<Map<_, _>>())
    }

    pub fn render(&self, format: Format) -> Result<String, Failure> {
        match format {
            Format::Text => {
                let width = self.rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
                Ok(self
                    .rows
                    .iter()
                    .map(|(k, v)| format!("{k:width$}  {}\n", plain(v)))
                    .collect())
            }
            Format::Json => Ok(serde_json::to_string_pretty(&self.to_json()).expect("json") + "\n"),
            Format::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                let io = |e: csv::Error| Failure::config(format!("csv: {e}"));
                w.write_record(["key", "value"]).map_err(io)?;
                for (k, v) in &self.rows {
                    w.write_record([k.as_str(), &plain(v)]).map_err(io)?;
                }
                let bytes = w.into_inner().map_err(|e| Failure::config(format!("csv: {e}")))?;
                Ok(String::from_utf8(bytes).expect("utf-8"))
            }
        }
    }
}

/// Scalars without JSON quoting; `null` becomes empty.
pub fn plain(v: &Value) -> String {
    match v {
        Value::Null => String::new(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
