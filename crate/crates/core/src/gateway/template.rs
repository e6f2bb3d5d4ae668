//! Golden prompt templates and `{{name}}` placeholder rendering.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::transcript::Utterance;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("unbound placeholder: {0}")]
    Unbound(String),
    #[error("placeholder {0} appears in the body but is not declared")]
    Undeclared(String),
    #[error("declared placeholder {0} does not appear in the body")]
    Unused(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateName {
    TranscriptionFix,
    RoleRecognition,
    BehaviourCoding,
    ConflictCoding,
}

impl TemplateName {
    pub const ALL: [TemplateName; 4] = [
        TemplateName::TranscriptionFix,
        TemplateName::RoleRecognition,
        TemplateName::BehaviourCoding,
        TemplateName::ConflictCoding,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateName::TranscriptionFix => "transcription_fix",
            TemplateName::RoleRecognition => "role_recognition",
            TemplateName::BehaviourCoding => "behaviour_coding",
            TemplateName::ConflictCoding => "conflict_coding",
        }
    }

    fn golden_body(self) -> &'static str {
        match self {
            TemplateName::TranscriptionFix => include_str!("../../data/templates/transcription_fix.txt"),
            TemplateName::RoleRecognition => include_str!("../../data/templates/role_recognition.txt"),
            TemplateName::BehaviourCoding => include_str!("../../data/templates/behaviour_coding.txt"),
            TemplateName::ConflictCoding => include_str!("../../data/templates/conflict_coding.txt"),
        }
    }

    pub fn expected_output_shape(self) -> OutputShape {
        match self {
            TemplateName::TranscriptionFix => OutputShape::RecordList,
            TemplateName::RoleRecognition => OutputShape::RoleMap,
            TemplateName::BehaviourCoding => OutputShape::BehaviourList,
            TemplateName::ConflictCoding => OutputShape::ConflictList,
        }
    }
}

impl fmt::Display for TemplateName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputShape {
    RecordList,
    RoleMap,
    BehaviourList,
    ConflictList,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: TemplateName,
    pub body: String,
    pub placeholders: Vec<String>,
    pub expected_output_shape: OutputShape,
}

/// The placeholder holding the serialized dialogue in every golden template.
pub const TRANSCRIPT_PLACEHOLDER: &str = "transcript";

impl PromptTemplate {
    pub fn new(
        name: TemplateName,
        body: impl Into<String>,
        placeholders: Vec<String>,
        expected_output_shape: OutputShape,
    ) -> Result<Self, TemplateError> {
        let body = body.into();
        let found = placeholders_in(&body);
        if let Some(p) = found.iter().find(|p| !placeholders.contains(p)) {
            return Err(TemplateError::Undeclared(p.clone()));
        }
        if let Some(p) = placeholders.iter().find(|p| !found.contains(p)) {
            return Err(TemplateError::Unused(p.clone()));
        }
        Ok(Self {
            name,
            body,
            placeholders,
            expected_output_shape,
        })
    }

    pub fn golden(name: TemplateName) -> Self {
        Self::new(
            name,
            name.golden_body(),
            vec![TRANSCRIPT_PLACEHOLDER.to_string()],
            name.expected_output_shape(),
        )
        .expect("golden templates declare their placeholders")
    }

    /// Short content hash identifying this exact body.
    pub fn version(&self) -> String {
        let digest = Sha256::digest(self.body.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..16].to_string()
    }
}

enum Piece<'a> {
    Text(&'a str),
    Placeholder(&'a str),
}

fn is_ident(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn pieces(body: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find("{{") {
        let after = &rest[open + 2..];
        match after.find("}}") {
            Some(close) if is_ident(&after[..close]) => {
                if open > 0 {
                    out.push(Piece::Text(&rest[..open]));
                }
                out.push(Piece::Placeholder(&after[..close]));
                rest = &after[close + 2..];
            }
            _ => {
                out.push(Piece::Text(&rest[..open + 2]));
                rest = after;
            }
        }
    }
    if !rest.is_empty() {
        out.push(Piece::Text(rest));
    }
    out
}

/// Distinct placeholder names in order of first appearance.
pub fn placeholders_in(body: &str) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for piece in pieces(body) {
        if let Piece::Placeholder(p) = piece {
            if !names.iter().any(|n| n == p) {
                names.push(p.to_string());
            }
        }
    }
    names
}

/// Substitutes every placeholder in a single pass; substituted values are not
/// rescanned.
pub fn render_prompt(template: &PromptTemplate, context: &BTreeMap<String, String>) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.body.len());
    for piece in pieces(&template.body) {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Placeholder(p) => {
                let value = context.get(p).ok_or_else(|| TemplateError::Unbound(p.to_string()))?;
                out.push_str(value);
            }
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct DialogueRecord<'a> {
    id: u32,
    speaker: &'a str,
    content: &'a str,
}

/// Serializes utterances as the `id`/`speaker`/`content` record list the
/// templates describe, one record per line. `speaker` maps each utterance to
/// the label shown to the model.
pub fn dialogue_records<'a>(utterances: impl IntoIterator<Item = &'a Utterance>, speaker: impl Fn(&Utterance) -> &str) -> String {
    let lines: Vec<String> = utterances
        .into_iter()
        .map(|u| {
            serde_json::to_string(&DialogueRecord {
                id: u.id,
                speaker: speaker(u),
                content: &u.content,
            })
            .expect("record serializes")
        })
        .collect();
    if lines.is_empty() {
        return "[]".to_string();
    }
    format!("[\n    {}\n]", lines.join(",\n    "))
}

/// Context binding only the transcript placeholder.
pub fn transcript_context(records: String) -> BTreeMap<String, String> {
    BTreeMap::from([(TRANSCRIPT_PLACEHOLDER.to_string(), records)])
}
