//! Findings produced by the non-throwing validators.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Warning,
    Error,
}

/// Where a finding applies. Ordering is the report ordering.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "at", rename_all = "snake_case")]
pub enum Locus {
    Corpus,
    Session(String),
    Recording(usize),
    Transcript,
    /// Zero-based position in the utterance list.
    Utterance(usize),
    Chunk(usize),
    Behaviour(u32),
    Conflict(u32),
}

impl fmt::Display for Locus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Locus::Corpus => write!(f, "corpus"),
            Locus::Session(s) => write!(f, "session {s}"),
            Locus::Recording(i) => write!(f, "recording {i}"),
            Locus::Transcript => write!(f, "transcript"),
            Locus::Utterance(i) => write!(f, "utterance #{i}"),
            Locus::Chunk(i) => write!(f, "chunk {i}"),
            Locus::Behaviour(id) => write!(f, "behaviour_id {id}"),
            Locus::Conflict(id) => write!(f, "scene_id {id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub message: String,
    pub locus: Locus,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let level = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        write!(f, "{level} at {}: {}", self.locus, self.message)
    }
}

/// An ordered list of findings. Findings are kept sorted by locus; findings
/// sharing a locus keep their insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, severity: Severity, locus: Locus, message: impl Into<String>) {
        let finding = Finding {
            severity,
            message: message.into(),
            locus,
        };
        // insert after the last finding whose locus is <= the new one
        let at = self.findings.partition_point(|f| f.locus <= finding.locus);
        self.findings.insert(at, finding);
    }

    pub fn warn(&mut self, locus: Locus, message: impl Into<String>) {
        self.push(Severity::Warning, locus, message);
    }

    pub fn error(&mut self, locus: Locus, message: impl Into<String>) {
        self.push(Severity::Error, locus, message);
    }

    pub fn extend(&mut self, other: ValidationReport) {
        for f in other.findings {
            self.push(f.severity, f.locus, f.message);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn len(&self) -> usize {
        self.findings.len()
    }

    pub fn warnings(&self) -> usize {
        self.count(Severity::Warning)
    }

    pub fn errors(&self) -> usize {
        self.count(Severity::Error)
    }

    pub fn has_errors(&self) -> bool {
        self.errors() > 0
    }

    fn count(&self, severity: Severity) -> usize {
        self.findings.iter().filter(|f| f.severity == severity).count()
    }

    pub fn messages(&self) -> Vec<String> {
        self.findings.iter().map(|f| f.message.clone()).collect()
    }
}
