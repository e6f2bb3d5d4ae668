//! Behaviour codes, conflict types and the intensity scale, plus resolution of
//! free-text labels (as written by a model or a human coder) to canonical keys.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BEHAVIOUR_COUNT: usize = 18;
pub const CONFLICT_COUNT: usize = 7;
pub const PER_VALENCE_COUNT: usize = 6;

const SHIPPED_CODEBOOK: &str = include_str!("../data/codebook.json");

#[derive(Debug, Error)]
pub enum CodebookError {
    #[error("cannot read codebook {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed codebook: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("expected {expected} {what}, found {found}")]
    Cardinality {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("expected {expected} {valence} behaviour codes, found {found}")]
    ValencePartition {
        valence: Valence,
        expected: usize,
        found: usize,
    },
    #[error("duplicate {namespace} abbreviation {abbrev}")]
    DuplicateAbbrev { namespace: Namespace, abbrev: String },
    #[error("duplicate {namespace} name {name}")]
    DuplicateName { namespace: Namespace, name: String },
    #[error("key {key} does not match abbreviation {abbrev} in namespace {namespace}")]
    KeyMismatch {
        namespace: Namespace,
        key: String,
        abbrev: String,
    },
    #[error("unknown {namespace} code: {text}")]
    UnknownCode { namespace: Namespace, text: String },
    #[error("{key} is not a behaviour code")]
    NotABehaviour { key: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Namespace {
    Behaviour,
    Conflict,
}

impl Namespace {
    pub fn prefix(self) -> &'static str {
        match self {
            Namespace::Behaviour => "behaviour",
            Namespace::Conflict => "conflict",
        }
    }
}

impl fmt::Display for Namespace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Valence {
    Positive,
    Neutral,
    Negative,
}

impl Valence {
    pub const ALL: [Valence; 3] = [Valence::Positive, Valence::Neutral, Valence::Negative];
}

impl fmt::Display for Valence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Valence::Positive => "positive",
            Valence::Neutral => "neutral",
            Valence::Negative => "negative",
        })
    }
}

/// Namespaced code identifier such as `behaviour.LP` or `conflict.EC`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CodeKey(String);

impl CodeKey {
    pub fn new(namespace: Namespace, abbrev: &str) -> Self {
        CodeKey(format!("{}.{abbrev}", namespace.prefix()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn namespace(&self) -> Option<Namespace> {
        match self.0.split_once('.') {
            Some(("behaviour", _)) => Some(Namespace::Behaviour),
            Some(("conflict", _)) => Some(Namespace::Conflict),
            _ => None,
        }
    }

    pub fn abbrev(&self) -> &str {
        self.0.split_once('.').map_or(&self.0, |(_, a)| a)
    }
}

impl fmt::Display for CodeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviourCode {
    pub key: CodeKey,
    pub abbrev: String,
    pub display_name: String,
    pub valence: Valence,
    /// Alternative spellings of the display name (the coding prompt writes
    /// "Criticism & Blame" where the code table writes "Criticism and Blame").
    #[serde(default)]
    pub aliases: Vec<String>,
    pub definition: String,
    pub guideline: String,
    pub examples: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictType {
    pub key: CodeKey,
    pub abbrev: String,
    pub display_name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    pub definition: String,
    pub guideline: String,
    pub examples: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Intensity {
    High,
    Medium,
    Low,
}

impl Intensity {
    pub const ALL: [Intensity; 3] = [Intensity::High, Intensity::Medium, Intensity::Low];

    /// Case- and whitespace-insensitive parse of a severity label.
    pub fn parse(text: &str) -> Option<Intensity> {
        match normalize(text).as_str() {
            "high" => Some(Intensity::High),
            "medium" => Some(Intensity::Medium),
            "low" => Some(Intensity::Low),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Intensity::High => "High",
            Intensity::Medium => "Medium",
            Intensity::Low => "Low",
        }
    }
}

impl fmt::Display for Intensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntensityLevel {
    pub value: Intensity,
    pub criteria: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CodebookFile {
    version: String,
    behaviours: Vec<BehaviourCode>,
    conflicts: Vec<ConflictType>,
    intensities: Vec<IntensityLevel>,
}

/// A validated, immutable codebook with lookup tables for label resolution.
#[derive(Debug, Clone)]
pub struct Codebook {
    pub version: String,
    pub behaviours: Vec<BehaviourCode>,
    pub conflicts: Vec<ConflictType>,
    pub intensities: Vec<IntensityLevel>,
    // normalized abbrev/name/alias -> key, per namespace
    behaviour_index: BTreeMap<String, CodeKey>,
    conflict_index: BTreeMap<String, CodeKey>,
}

impl PartialEq for Codebook {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version
            && self.behaviours == other.behaviours
            && self.conflicts == other.conflicts
            && self.intensities == other.intensities
    }
}

/// Lowercases and collapses runs of whitespace.
fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Splits "Labelled Praise (LP)" into ("Labelled Praise", "LP").
fn split_combined(text: &str) -> Option<(&str, &str)> {
    let trimmed = text.trim();
    let inner = trimmed.strip_suffix(')')?;
    let open = inner.rfind('(')?;
    let name = inner[..open].trim();
    let abbrev = inner[open + 1..].trim();
    if name.is_empty() || abbrev.is_empty() {
        return None;
    }
    Some((name, abbrev))
}

impl Codebook {
    /// The codebook shipped with this crate.
    pub fn shipped() -> Codebook {
        Codebook::from_json(SHIPPED_CODEBOOK).expect("shipped codebook is valid")
    }

    pub fn from_json(text: &str) -> Result<Codebook, CodebookError> {
        let file: CodebookFile = serde_json::from_str(text)?;
        Codebook::build(file)
    }

    pub fn to_json(&self) -> String {
        let file = CodebookFile {
            version: self.version.clone(),
            behaviours: self.behaviours.clone(),
            conflicts: self.conflicts.clone(),
            intensities: self.intensities.clone(),
        };
        serde_json::to_string_pretty(&file).expect("codebook serializes") + "\n"
    }

    fn build(file: CodebookFile) -> Result<Codebook, CodebookError> {
        check_count("behaviour codes", BEHAVIOUR_COUNT, file.behaviours.len())?;
        check_count("conflict types", CONFLICT_COUNT, file.conflicts.len())?;
        check_count("intensity levels", Intensity::ALL.len(), file.intensities.len())?;
        for valence in Valence::ALL {
            let found = file.behaviours.iter().filter(|b| b.valence == valence).count();
            if found != PER_VALENCE_COUNT {
                return Err(CodebookError::ValencePartition {
                    valence,
                    expected: PER_VALENCE_COUNT,
                    found,
                });
            }
        }
        for level in Intensity::ALL {
            if !file.intensities.iter().any(|i| i.value == level) {
                return Err(CodebookError::Cardinality {
                    what: "distinct intensity levels",
                    expected: Intensity::ALL.len(),
                    found: file.intensities.len() - 1,
                });
            }
        }

        let behaviour_index = build_index(
            Namespace::Behaviour,
            file.behaviours
                .iter()
                .map(|b| (&b.key, b.abbrev.as_str(), b.display_name.as_str(), b.aliases.as_slice())),
        )?;
        let conflict_index = build_index(
            Namespace::Conflict,
            file.conflicts
                .iter()
                .map(|c| (&c.key, c.abbrev.as_str(), c.display_name.as_str(), c.aliases.as_slice())),
        )?;

        Ok(Codebook {
            version: file.version,
            behaviours: file.behaviours,
            conflicts: file.conflicts,
            intensities: file.intensities,
            behaviour_index,
            conflict_index,
        })
    }

    fn index(&self, namespace: Namespace) -> &BTreeMap<String, CodeKey> {
        match namespace {
            Namespace::Behaviour => &self.behaviour_index,
            Namespace::Conflict => &self.conflict_index,
        }
    }

    /// Resolves a bare abbreviation, a display name, or the combined
    /// "Name (ABBR)" form to a canonical key. Matching ignores case and
    /// whitespace runs only.
    pub fn resolve_code(&self, label_text: &str, namespace: Namespace) -> Result<CodeKey, CodebookError> {
        let index = self.index(namespace);
        let unknown = || CodebookError::UnknownCode {
            namespace,
            text: label_text.to_string(),
        };
        if let Some(key) = index.get(&normalize(label_text)) {
            return Ok(key.clone());
        }
        let (name, abbrev) = split_combined(label_text).ok_or_else(unknown)?;
        let by_abbrev = index.get(&normalize(abbrev)).ok_or_else(unknown)?;
        let by_name = index.get(&normalize(name)).ok_or_else(unknown)?;
        if by_abbrev == by_name {
            Ok(by_abbrev.clone())
        } else {
            Err(unknown())
        }
    }

    pub fn valence_of(&self, key: &CodeKey) -> Result<Valence, CodebookError> {
        self.behaviours
            .iter()
            .find(|b| &b.key == key)
            .map(|b| b.valence)
            .ok_or_else(|| CodebookError::NotABehaviour { key: key.to_string() })
    }

    pub fn behaviour(&self, key: &CodeKey) -> Option<&BehaviourCode> {
        self.behaviours.iter().find(|b| &b.key == key)
    }

    pub fn conflict(&self, key: &CodeKey) -> Option<&ConflictType> {
        self.conflicts.iter().find(|c| &c.key == key)
    }

    pub fn contains(&self, key: &CodeKey) -> bool {
        self.behaviour(key).is_some() || self.conflict(key).is_some()
    }

    /// Keys of a namespace in codebook order.
    pub fn keys(&self, namespace: Namespace) -> Vec<CodeKey> {
        match namespace {
            Namespace::Behaviour => self.behaviours.iter().map(|b| b.key.clone()).collect(),
            Namespace::Conflict => self.conflicts.iter().map(|c| c.key.clone()).collect(),
        }
    }
}

fn check_count(what: &'static str, expected: usize, found: usize) -> Result<(), CodebookError> {
    if expected == found {
        Ok(())
    } else {
        Err(CodebookError::Cardinality { what, expected, found })
    }
}

fn build_index<'a>(
    namespace: Namespace,
    entries: impl Iterator<Item = (&'a CodeKey, &'a str, &'a str, &'a [String])>,
) -> Result<BTreeMap<String, CodeKey>, CodebookError> {
    let mut index = BTreeMap::new();
    let mut abbrevs = BTreeMap::new();
    let mut names = BTreeMap::new();
    for (key, abbrev, name, aliases) in entries {
        if key != &CodeKey::new(namespace, abbrev) {
            return Err(CodebookError::KeyMismatch {
                namespace,
                key: key.to_string(),
                abbrev: abbrev.to_string(),
            });
        }
        if abbrevs.insert(normalize(abbrev), ()).is_some() {
            return Err(CodebookError::DuplicateAbbrev {
                namespace,
                abbrev: abbrev.to_string(),
            });
        }
        if names.insert(normalize(name), ()).is_some() {
            return Err(CodebookError::DuplicateName {
                namespace,
                name: name.to_string(),
            });
        }
        for label in std::iter::once(abbrev).chain(std::iter::once(name)).chain(aliases.iter().map(String::as_str)) {
            if let Some(existing) = index.insert(normalize(label), key.clone()) {
                if &existing != key {
                    return Err(CodebookError::DuplicateName {
                        namespace,
                        name: label.to_string(),
                    });
                }
            }
        }
    }
    Ok(index)
}

pub fn load_codebook(path: impl AsRef<Path>) -> Result<Codebook, CodebookError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| CodebookError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Codebook::from_json(&text)
}
