//! Locating and validating the fenced structured block in a model response.

use std::collections::BTreeMap;

use serde_json::{Map, Value};
use thiserror::Error;

use super::lenient;
use super::template::OutputShape;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExtractError {
    #[error("no fenced block in response")]
    NoFencedBlock,
    #[error("unterminated fenced block starting at character {offset}")]
    UnterminatedFence { offset: usize },
    #[error("parse error at character {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("expected {expected} at top level")]
    WrongShape { expected: &'static str },
    #[error("record {record}: not an object")]
    NotAnObject { record: usize },
    #[error("record {record}: missing field {field}")]
    MissingField { record: usize, field: &'static str },
    #[error("record {record}: field {field} must be {expected}")]
    FieldType {
        record: usize,
        field: &'static str,
        expected: &'static str,
    },
    #[error("role for {label} must be a string")]
    RoleNotString { label: String },
}

/// `{'id': .., 'content': ..}` from the correction prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrectionRecord {
    pub id: i64,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviourRecord {
    pub behaviour_id: i64,
    pub start_id: i64,
    pub end_id: i64,
    pub description: String,
    /// "Parent Behavior"; optional in responses.
    pub parent_utterance: String,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConflictRecord {
    pub scene_id: i64,
    pub start_id: i64,
    pub end_id: i64,
    pub trigger: String,
    pub process: String,
    pub parent_behavior: String,
    pub child_behavior: String,
    pub conflict_type: String,
    pub severity: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StructuredBlock {
    Records(Vec<CorrectionRecord>),
    RoleMap(BTreeMap<String, String>),
    Behaviours(Vec<BehaviourRecord>),
    Conflicts(Vec<ConflictRecord>),
}

/// Returns the fenced block body and its character offset in `raw`.
fn fenced_body(raw: &str) -> Result<(&str, usize), ExtractError> {
    let open = raw.find("```").ok_or(ExtractError::NoFencedBlock)?;
    let after_ticks = open + 3;
    // skip the info string (```json, ```python, ...)
    let body_start = match raw[after_ticks..].find('\n') {
        Some(nl) => after_ticks + nl + 1,
        None => {
            return Err(ExtractError::UnterminatedFence {
                offset: raw[..open].chars().count(),
            })
        }
    };
    let close = raw[body_start..].find("```").ok_or(ExtractError::UnterminatedFence {
        offset: raw[..open].chars().count(),
    })?;
    Ok((&raw[body_start..body_start + close], raw[..body_start].chars().count()))
}

pub fn extract_structured_block(raw_response: &str, shape: OutputShape) -> Result<StructuredBlock, ExtractError> {
    let (body, body_offset) = fenced_body(raw_response)?;
    let value = lenient::parse(body).map_err(|e| ExtractError::Parse {
        offset: body_offset + e.offset,
        message: e.message,
    })?;
    match shape {
        OutputShape::RoleMap => {
            let Value::Object(map) = value else {
                return Err(ExtractError::WrongShape { expected: "an object" });
            };
            let mut roles = BTreeMap::new();
            for (label, role) in map {
                match role {
                    Value::String(r) => {
                        roles.insert(label, r);
                    }
                    _ => return Err(ExtractError::RoleNotString { label }),
                }
            }
            Ok(StructuredBlock::RoleMap(roles))
        }
        OutputShape::RecordList => records(value, |r| {
            Ok(CorrectionRecord {
                id: r.int("id")?,
                content: r.text("content")?,
            })
        })
        .map(StructuredBlock::Records),
        OutputShape::BehaviourList => records(value, |r| {
            Ok(BehaviourRecord {
                behaviour_id: r.int("behaviour_id")?,
                start_id: r.int("Start ID")?,
                end_id: r.int("End ID")?,
                description: r.text("Description of behavior")?,
                parent_utterance: r.optional_text("Parent Behavior")?,
                code: r.text("code")?,
            })
        })
        .map(StructuredBlock::Behaviours),
        OutputShape::ConflictList => records(value, |r| {
            Ok(ConflictRecord {
                scene_id: r.int("scene_id")?,
                start_id: r.int("Start ID")?,
                end_id: r.int("End ID")?,
                trigger: r.text("trigger")?,
                process: r.text("process")?,
                parent_behavior: r.text("parent_behavior")?,
                child_behavior: r.text("child_behavior")?,
                conflict_type: r.text("conflict_type")?,
                severity: r.text("severity")?,
            })
        })
        .map(StructuredBlock::Conflicts),
    }
}

struct Rec<'a> {
    index: usize,
    map: &'a Map<String, Value>,
}

impl Rec<'_> {
    fn get(&self, field: &'static str) -> Result<&Value, ExtractError> {
        self.map.get(field).ok_or(ExtractError::MissingField {
            record: self.index,
            field,
        })
    }

    fn int(&self, field: &'static str) -> Result<i64, ExtractError> {
        let bad = ExtractError::FieldType {
            record: self.index,
            field,
            expected: "an integer",
        };
        match self.get(field)? {
            Value::Number(n) => match (n.as_i64(), n.as_f64()) {
                (Some(i), _) => Ok(i),
                (None, Some(f)) if f.fract() == 0.0 && f.abs() < 9.0e15 => Ok(f as i64),
                _ => Err(bad),
            },
            Value::String(s) => s.trim().parse().map_err(|_| bad),
            _ => Err(bad),
        }
    }

    fn text(&self, field: &'static str) -> Result<String, ExtractError> {
        match self.get(field)? {
            Value::String(s) => Ok(s.clone()),
            _ => Err(ExtractError::FieldType {
                record: self.index,
                field,
                expected: "a string",
            }),
        }
    }

    fn optional_text(&self, field: &'static str) -> Result<String, ExtractError> {
        match self.map.get(field) {
            None | Some(Value::Null) => Ok(String::new()),
            Some(_) => self.text(field),
        }
    }
}

fn records<T>(value: Value, mut convert: impl FnMut(&Rec<'_>) -> Result<T, ExtractError>) -> Result<Vec<T>, ExtractError> {
    let Value::Array(items) = value else {
        return Err(ExtractError::WrongShape { expected: "a list of records" });
    };
    items
        .iter()
        .enumerate()
        .map(|(i, item)| {
            // records are numbered from 1 in messages
            let index = i + 1;
            match item {
                Value::Object(map) => convert(&Rec { index, map }),
                _ => Err(ExtractError::NotAnObject { record: index }),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const TWO_BEHAVIOURS: &str = r#"Here is the analysis.

```json
[
    {
        "behaviour_id": 1,
        "Start ID": 1,
        "End ID": 2,
        "Description of behavior": "The parent gave clear positive feedback.",
        "Parent Behavior": "You did a great job on your math today!",
        "code": "Labelled Praise (LP)",
    },
    {
        "behaviour_id": 2,
        "Start ID": "3",
        "End ID": 3,
        "Description of behavior": "Encouraged the child.",
        "code": "Encouragement (ENC)"
    }
]
```
"#;

    #[test]
    fn two_behaviour_records() {
        let block = extract_structured_block(TWO_BEHAVIOURS, OutputShape::BehaviourList).unwrap();
        let StructuredBlock::Behaviours(records) = block else { panic!("wrong variant") };
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].code, "Labelled Praise (LP)");
        assert_eq!(records[1].start_id, 3);
        assert_eq!(records[1].parent_utterance, "");
    }

    #[test]
    fn missing_fences() {
        assert_eq!(
            extract_structured_block("[{\"id\": 1, \"content\": \"x\"}]", OutputShape::RecordList),
            Err(ExtractError::NoFencedBlock)
        );
        assert!(matches!(
            extract_structured_block("```json\n[]", OutputShape::RecordList),
            Err(ExtractError::UnterminatedFence { offset: 0 })
        ));
    }

    #[test]
    fn missing_code_is_named() {
        let raw = "```json\n[{\"behaviour_id\": 1, \"Start ID\": 1, \"End ID\": 2, \"Description of behavior\": \"d\"}]\n```";
        let err = extract_structured_block(raw, OutputShape::BehaviourList).unwrap_err();
        assert_eq!(err.to_string(), "record 1: missing field code");
    }

    #[test]
    fn parse_error_offset_is_relative_to_response() {
        let raw = "ok\n```json\n[1, }\n```";
        let err = extract_structured_block(raw, OutputShape::RecordList).unwrap_err();
        // body starts after "ok\n```json\n" (11 chars); '}' is the 5th body char
        assert_eq!(
            err,
            ExtractError::Parse {
                offset: 15,
                message: "unexpected character '}'".into()
            }
        );
    }

    #[test]
    fn python_record_list_and_role_map() {
        let raw = "```python\n[\n    {'id': 1, 'content': '今天先写数学'},\n    {'id': 2, 'content': '好的'},\n]\n```";
        let StructuredBlock::Records(r) = extract_structured_block(raw, OutputShape::RecordList).unwrap() else {
            panic!()
        };
        assert_eq!(r[1], CorrectionRecord { id: 2, content: "好的".into() });

        let raw = "```python\n{\n    \"Speaker 1\": \"parent\",\n    \"Speaker 2\": \"child\"\n}\n```";
        let StructuredBlock::RoleMap(m) = extract_structured_block(raw, OutputShape::RoleMap).unwrap() else {
            panic!()
        };
        assert_eq!(m["Speaker 2"], "child");
    }

    #[test]
    fn conflict_fields_are_all_required() {
        let raw = "```json\n[{\"scene_id\": 1, \"Start ID\": 1, \"End ID\": 2, \"trigger\": \"t\", \"process\": \"p\", \"parent_behavior\": \"pb\", \"child_behavior\": \"cb\", \"conflict_type\": \"Focus Conflict (FC)\"}]\n```";
        let err = extract_structured_block(raw, OutputShape::ConflictList).unwrap_err();
        assert_eq!(err.to_string(), "record 1: missing field severity");
    }

    #[test]
    fn shape_mismatch() {
        let err = extract_structured_block("```json\n{\"a\": 1}\n```", OutputShape::ConflictList).unwrap_err();
        assert_eq!(err, ExtractError::WrongShape { expected: "a list of records" });
        let err = extract_structured_block("```json\n[{\"id\": \"x\", \"content\": \"c\"}]\n```", OutputShape::RecordList).unwrap_err();
        assert_eq!(err.to_string(), "record 1: field id must be an integer");
    }
}
