//! Newline-delimited JSON records: datasets, query streams and results.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::ImageRef;
use crate::pipeline::QueryResult;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: malformed record at line {line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One image of a dataset or query stream. `gt` is only consumed by
/// anchor construction and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub id: String,
    pub payload: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<f64>,
}

impl StreamRecord {
    pub fn image_ref(&self) -> ImageRef {
        ImageRef::new(self.id.clone(), self.payload.clone())
    }
}

/// One row of a results file; exactly one of `error` and `result` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<QueryResult>,
}

impl ResultRecord {
    pub fn new<E: std::fmt::Display>(record: &StreamRecord, outcome: Result<QueryResult, E>) -> Self {
        let (result, error) = match outcome {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Self { id: record.id.clone(), gt: record.gt, error, result }
    }
}

pub fn parse_jsonl<T: DeserializeOwned>(text: &str, path: &str) -> Result<Vec<T>, RecordError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| RecordError::Malformed {
            path: path.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, RecordError> {
    let path = path.as_ref();
    let name = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| RecordError::Io { path: name.clone(), source })?;
    parse_jsonl(&text, &name)
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("records serialize");
        out.push(b'\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<(), RecordError> {
    let path = path.as_ref();
    let io = |source| RecordError::Io { path: path.display().to_string(), source };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&to_jsonl(records)).map_err(io)?;
    f.sync_all().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_record_gt_is_optional() {
        let r: StreamRecord = serde_json::from_str(r#"{"id":"a","payload":"p"}"#).unwrap();
        assert_eq!(r.gt, None);
        assert_eq!(serde_json::to_string(&r).unwrap(), r#"{"id":"a","payload":"p"}"#);
        let r: StreamRecord = serde_json::from_str(r#"{"id":"a","payload":"p","gt":3.25}"#).unwrap();
        assert_eq!(r.gt, Some(3.25));
    }

    #[test]
    fn malformed_line_is_reported_with_its_number() {
        let text = "{\"id\":\"a\",\"payload\":\"p\"}\n\n{\"id\":\"b\"}\n";
        match parse_jsonl::<StreamRecord>(text, "s.jsonl") {
            Err(RecordError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn floats_survive_a_round_trip() {
        let recs: Vec<StreamRecord> = [0.1, 1.0 / 3.0, 4.999_999_999_999_999, 1e-300]
            .iter()
            .enumerate()
            .map(|(i, &g)| StreamRecord { id: format!("i{i}"), payload: "x".into(), gt: Some(g) })
            .collect();
        let back: Vec<StreamRecord> = parse_jsonl(std::str::from_utf8(&to_jsonl(&recs)).unwrap(), "-").unwrap();
        assert_eq!(back, recs);
    }
}
