//! On-disk session directories.
//!
//! A session directory holds `manifest.json`, `transcript.json` and, when
//! present, `survey.json`, `roles.json`, `behaviours.json` and
//! `conflicts.json`. Input corpora may carry `recordings.json` (raw timed
//! segments) instead of a transcript, and `scores.csv` with sentence scores.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{BehaviourAnnotation, ConflictAnnotation, RoleMap};
use crate::stats::SurveyResponse;
use crate::transcript::{
    merge_recordings, segment_by_pause, PlacedTranscript, RawSegment, SegmentationConfig, Transcript, TranscriptError, Utterance,
};
use crate::validation::ValidationReport;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRANSCRIPT_FILE: &str = "transcript.json";
pub const SURVEY_FILE: &str = "survey.json";
pub const ROLES_FILE: &str = "roles.json";
pub const BEHAVIOURS_FILE: &str = "behaviours.json";
pub const CONFLICTS_FILE: &str = "conflicts.json";
pub const RECORDINGS_FILE: &str = "recordings.json";
pub const SCORES_FILE: &str = "scores.csv";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: parse error at line {line}, column {column} (byte {offset}): {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        offset: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Transcript {
        path: PathBuf,
        #[source]
        source: TranscriptError,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Byte offset of a 1-based line/column position.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let line_start: usize = text.split_inclusive('\n').take(line.saturating_sub(1)).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| StoreError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        offset: byte_offset(&text, e.line(), e.column()),
        message: e.to_string(),
    })
}

fn read_optional_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, StoreError> {
    if path.exists() {
        read_json(path).map(Some)
    } else {
        Ok(None)
    }
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut text = serde_json::to_string_pretty(value).expect("store types serialize");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn write_optional_json<T: Serialize>(path: &Path, value: Option<&T>) -> Result<(), StoreError> {
    match value {
        Some(v) => write_json(path, v),
        None if path.exists() => fs::remove_file(path).map_err(io_err(path)),
        None => Ok(()),
    }
}

/// Which model, prompts and codebook produced a session's annotations.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub backend_kind: String,
    pub model_name: String,
    pub template_versions: BTreeMap<String, String>,
    pub codebook_version: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub participant_id: String,
    pub session_date: NaiveDate,
    #[serde(default)]
    pub source_recording_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
    /// Pipeline stages already applied to this directory.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub stages_completed: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionRecord {
    pub participant_id: String,
    pub session_date: NaiveDate,
    pub transcript: Transcript,
    pub survey: Option<SurveyResponse>,
    pub role_map: Option<RoleMap>,
}

impl SessionRecord {
    /// Directory name used for this session in a corpus.
    pub fn session_id(&self) -> String {
        session_id(&self.participant_id, self.session_date)
    }
}

pub fn session_id(participant_id: &str, date: NaiveDate) -> String {
    format!("{participant_id}_{date}")
}

pub fn load_manifest(dir: &Path) -> Result<SessionManifest, StoreError> {
    let path = dir.join(MANIFEST_FILE);
    let m: SessionManifest = read_json(&path)?;
    if m.participant_id.trim().is_empty() {
        return Err(StoreError::Invalid {
            path,
            message: "participant_id is empty".into(),
        });
    }
    Ok(m)
}

pub fn store_manifest(dir: &Path, manifest: &SessionManifest) -> Result<(), StoreError> {
    write_json(&dir.join(MANIFEST_FILE), manifest)
}

fn load_survey(dir: &Path) -> Result<Option<SurveyResponse>, StoreError> {
    let path = dir.join(SURVEY_FILE);
    let survey: Option<SurveyResponse> = read_optional_json(&path)?;
    if let Some(s) = &survey {
        s.validate().map_err(|e| StoreError::Invalid {
            path,
            message: e.to_string(),
        })?;
    }
    Ok(survey)
}

pub fn load_transcript(dir: &Path, source_recording_ids: Vec<String>) -> Result<Transcript, StoreError> {
    let utterances: Vec<Utterance> = read_json(&dir.join(TRANSCRIPT_FILE))?;
    let mut t = Transcript::new(utterances);
    t.source_recording_ids = source_recording_ids;
    Ok(t)
}

/// Reads a session directory. A missing survey or role file leaves the field
/// absent.
pub fn load_session(dir: impl AsRef<Path>) -> Result<SessionRecord, StoreError> {
    let dir = dir.as_ref();
    let manifest = load_manifest(dir)?;
    Ok(SessionRecord {
        transcript: load_transcript(dir, manifest.source_recording_ids)?,
        survey: load_survey(dir)?,
        role_map: read_optional_json(&dir.join(ROLES_FILE))?,
        participant_id: manifest.participant_id,
        session_date: manifest.session_date,
    })
}

/// Writes a session directory, creating it if needed. Provenance and stage
/// marks already in the manifest are kept. Absent optional fields remove
/// their files so that loading gives back the same record.
pub fn store_session(record: &SessionRecord, dir: impl AsRef<Path>) -> Result<(), StoreError> {
    let dir = dir.as_ref();
    if record.participant_id.trim().is_empty() {
        return Err(StoreError::Invalid {
            path: dir.to_path_buf(),
            message: "participant_id is empty".into(),
        });
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let previous = load_manifest(dir).ok();
    let manifest = SessionManifest {
        participant_id: record.participant_id.clone(),
        session_date: record.session_date,
        source_recording_ids: record.transcript.source_recording_ids.clone(),
        provenance: previous.as_ref().and_then(|m| m.provenance.clone()),
        stages_completed: previous.map(|m| m.stages_completed).unwrap_or_default(),
    };
    write_json(&dir.join(TRANSCRIPT_FILE), &record.transcript.utterances)?;
    write_optional_json(&dir.join(SURVEY_FILE), record.survey.as_ref())?;
    write_optional_json(&dir.join(ROLES_FILE), record.role_map.as_ref())?;
    store_manifest(dir, &manifest)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StoredAnnotations {
    pub behaviours: Vec<BehaviourAnnotation>,
    pub conflicts: Vec<ConflictAnnotation>,
}

/// `None` unless both annotation files exist.
pub fn load_annotations(dir: impl AsRef<Path>) -> Result<Option<StoredAnnotations>, StoreError> {
    let dir = dir.as_ref();
    let behaviours = read_optional_json(&dir.join(BEHAVIOURS_FILE))?;
    let conflicts = read_optional_json(&dir.join(CONFLICTS_FILE))?;
    Ok(match (behaviours, conflicts) {
        (Some(behaviours), Some(conflicts)) => Some(StoredAnnotations { behaviours, conflicts }),
        _ => None,
    })
}

pub fn store_annotations(dir: impl AsRef<Path>, annotations: &StoredAnnotations) -> Result<(), StoreError> {
    let dir = dir.as_ref();
    write_json(&dir.join(BEHAVIOURS_FILE), &annotations.behaviours)?;
    write_json(&dir.join(CONFLICTS_FILE), &annotations.conflicts)
}

/// One recording's raw segments with its absolute start offset.
#[derive(Debug, Clone, Deserialize)]
pub struct RawRecording {
    pub recording_id: String,
    pub offset_ms: i64,
    pub segments: Vec<RawSegment>,
}

/// Segments each recording with the pause rule and merges them onto one
/// time axis.
pub fn ingest_recordings(
    recordings: Vec<RawRecording>,
    config: &SegmentationConfig,
) -> Result<(Transcript, ValidationReport), TranscriptError> {
    let mut placed = Vec::with_capacity(recordings.len());
    for rec in recordings {
        let timed = rec
            .segments
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.into_timed(i))
            .collect::<Result<Vec<_>, _>>()?;
        let mut transcript = segment_by_pause(&timed, config)?;
        transcript.source_recording_ids = vec![rec.recording_id];
        placed.push(PlacedTranscript {
            offset_ms: rec.offset_ms,
            transcript,
        });
    }
    merge_recordings(&placed)
}

/// Loads an input session: `transcript.json` when present, otherwise the
/// segmented and merged `recordings.json`.
pub fn load_input_session(dir: &Path, config: &SegmentationConfig) -> Result<(SessionRecord, ValidationReport), StoreError> {
    if dir.join(TRANSCRIPT_FILE).exists() {
        return Ok((load_session(dir)?, ValidationReport::new()));
    }
    let manifest = load_manifest(dir)?;
    let path = dir.join(RECORDINGS_FILE);
    let raw: Vec<RawRecording> = read_json(&path)?;
    let (transcript, report) = ingest_recordings(raw, config).map_err(|source| StoreError::Transcript { path, source })?;
    let record = SessionRecord {
        participant_id: manifest.participant_id,
        session_date: manifest.session_date,
        transcript,
        survey: load_survey(dir)?,
        role_map: read_optional_json(&dir.join(ROLES_FILE))?,
    };
    Ok((record, report))
}

/// Session directories directly under `root`, sorted by name. A directory
/// counts when it has a manifest.
pub fn list_session_dirs(root: &Path) -> Result<Vec<PathBuf>, StoreError> {
    if !root.exists() {
        return Ok(Vec::new());
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let path = entry.map_err(io_err(root))?.path();
        if path.join(MANIFEST_FILE).is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}
