//! Role recognition and behaviour/conflict coding through the gateway, and
//! re-validation of stored annotations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{CodeKey, Codebook, Intensity, Namespace};
use crate::gateway::correction::{plan_ranges, ChunkPlan};
use crate::gateway::extract::{extract_structured_block, BehaviourRecord, ConflictRecord, ExtractError, StructuredBlock};
use crate::gateway::template::{dialogue_records, render_prompt, transcript_context, PromptTemplate, TemplateError, TemplateName};
use crate::gateway::{Gateway, GatewayError};
use crate::transcript::{Transcript, Utterance};
use crate::validation::{Locus, ValidationReport};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnnotationError {
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{template} response: {source}")]
    Extract {
        template: TemplateName,
        #[source]
        source: ExtractError,
    },
    #[error("invalid role: {0}")]
    InvalidRole(String),
    #[error("no role assigned to {0}")]
    MissingRole(String),
    #[error("role \"others\" needs at least 3 speakers, transcript has {0}")]
    OthersWithFewSpeakers(usize),
    #[error("role map has no {0}")]
    MissingRoleKind(Role),
    #[error("transcript has {len} utterances, role recognition limit is {limit}")]
    TooLong { len: usize, limit: usize },
    #[error("{label} is {first} in one chunk and {second} in another")]
    InconsistentRole { label: String, first: Role, second: Role },
    #[error("invalid chunk plan: {0}")]
    Plan(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Parent,
    Child,
    Others,
}

impl Role {
    pub fn parse(text: &str) -> Option<Role> {
        match text.trim().to_lowercase().as_str() {
            "parent" => Some(Role::Parent),
            "child" => Some(Role::Child),
            "others" => Some(Role::Others),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Parent => "parent",
            Role::Child => "child",
            Role::Others => "others",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Speaker label to role. Serialized as a plain `{label: role}` object.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RoleMap {
    pub assignments: BTreeMap<String, Role>,
}

fn normalize_label(label: &str) -> String {
    label.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl RoleMap {
    pub fn role_of(&self, label: &str) -> Option<Role> {
        self.assignments.get(label).copied()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    /// Builds a role map for `labels` from a model response. Response labels
    /// match case- and whitespace-insensitively; labels absent from the
    /// transcript are ignored.
    pub fn from_response(labels: &[&str], response: &BTreeMap<String, String>) -> Result<RoleMap, AnnotationError> {
        let mut by_label = BTreeMap::new();
        for (label, role) in response {
            let role = Role::parse(role).ok_or_else(|| AnnotationError::InvalidRole(role.clone()))?;
            by_label.insert(normalize_label(label), role);
        }
        let mut assignments = BTreeMap::new();
        for label in labels {
            let role = by_label
                .get(&normalize_label(label))
                .ok_or_else(|| AnnotationError::MissingRole(label.to_string()))?;
            assignments.insert(label.to_string(), *role);
        }
        let map = RoleMap { assignments };
        map.check()?;
        Ok(map)
    }

    /// Every role rule except label coverage.
    pub fn check(&self) -> Result<(), AnnotationError> {
        let roles: BTreeSet<Role> = self.assignments.values().copied().collect();
        if roles.contains(&Role::Others) && self.assignments.len() < 3 {
            return Err(AnnotationError::OthersWithFewSpeakers(self.assignments.len()));
        }
        for needed in [Role::Parent, Role::Child] {
            if !roles.contains(&needed) {
                return Err(AnnotationError::MissingRoleKind(needed));
            }
        }
        Ok(())
    }

    /// Checks the map against a transcript's speakers.
    pub fn check_covers(&self, t: &Transcript) -> Result<(), AnnotationError> {
        for label in t.speaker_labels() {
            if !self.assignments.contains_key(label) {
                return Err(AnnotationError::MissingRole(label.to_string()));
            }
        }
        self.check()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoleOptions {
    /// Longest transcript sent in one request.
    pub max_utterances: usize,
    /// Split the transcript into chunks instead of refusing long input.
    pub chunking: Option<ChunkPlan>,
}

impl Default for RoleOptions {
    fn default() -> Self {
        Self {
            max_utterances: 2000,
            chunking: None,
        }
    }
}

/// Sends the prompt and extracts the expected block, retrying once when the
/// response cannot be used.
fn complete_and_extract(gateway: &Gateway, template: TemplateName, prompt: &str) -> Result<StructuredBlock, AnnotationError> {
    let mut last = None;
    for _ in 0..2 {
        let exchange = gateway.complete(prompt)?;
        match extract_structured_block(&exchange.raw_response, template.expected_output_shape()) {
            Ok(block) => return Ok(block),
            Err(e) => {
                log::debug!("{template} response rejected: {e}");
                last = Some(e);
            }
        }
    }
    Err(AnnotationError::Extract {
        template,
        source: last.expect("two attempts made"),
    })
}

pub fn role_prompt(utterances: &[Utterance]) -> Result<String, TemplateError> {
    let template = PromptTemplate::golden(TemplateName::RoleRecognition);
    let records = dialogue_records(utterances.iter(), |u| u.speaker_label.as_str());
    render_prompt(&template, &transcript_context(records))
}

fn role_response(gateway: &Gateway, utterances: &[Utterance]) -> Result<BTreeMap<String, String>, AnnotationError> {
    match complete_and_extract(gateway, TemplateName::RoleRecognition, &role_prompt(utterances)?)? {
        StructuredBlock::RoleMap(m) => Ok(m),
        _ => unreachable!("role map shape"),
    }
}

pub fn infer_roles(t: &Transcript, gateway: &Gateway, options: &RoleOptions) -> Result<RoleMap, AnnotationError> {
    let labels = t.speaker_labels();
    let Some(plan) = options.chunking else {
        if t.len() > options.max_utterances {
            return Err(AnnotationError::TooLong {
                len: t.len(),
                limit: options.max_utterances,
            });
        }
        return RoleMap::from_response(&labels, &role_response(gateway, &t.utterances)?);
    };

    plan.validate().map_err(|e| AnnotationError::Plan(e.to_string()))?;
    let mut merged: BTreeMap<String, Role> = BTreeMap::new();
    for range in plan_ranges(t.len(), &plan) {
        let chunk = &t.utterances[range.start() - 1..*range.end()];
        let chunk_labels: Vec<&str> = {
            let mut seen = Vec::new();
            for u in chunk {
                if !seen.contains(&u.speaker_label.as_str()) {
                    seen.push(u.speaker_label.as_str());
                }
            }
            seen
        };
        let response = role_response(gateway, chunk)?;
        let mut by_label = BTreeMap::new();
        for (label, role) in &response {
            let role = Role::parse(role).ok_or_else(|| AnnotationError::InvalidRole(role.clone()))?;
            by_label.insert(normalize_label(label), role);
        }
        for label in chunk_labels {
            let role = *by_label
                .get(&normalize_label(label))
                .ok_or_else(|| AnnotationError::MissingRole(label.to_string()))?;
            match merged.get(label) {
                Some(&first) if first != role => {
                    return Err(AnnotationError::InconsistentRole {
                        label: label.to_string(),
                        first,
                        second: role,
                    })
                }
                _ => {
                    merged.insert(label.to_string(), role);
                }
            }
        }
    }
    let map = RoleMap { assignments: merged };
    map.check_covers(t)?;
    Ok(map)
}

/// One coded parent behaviour. Field names on disk follow the coding
/// prompt's output contract.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviourAnnotation {
    pub behaviour_id: u32,
    #[serde(rename = "Start ID")]
    pub start_id: u32,
    #[serde(rename = "End ID")]
    pub end_id: u32,
    #[serde(rename = "Description of behavior")]
    pub description: String,
    #[serde(rename = "Parent Behavior", default)]
    pub parent_utterance: String,
    /// The label text as returned.
    #[serde(rename = "code")]
    pub code_text: String,
    #[serde(rename = "resolved_codes")]
    pub codes: Vec<CodeKey>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unresolved_codes: Vec<String>,
}

impl BehaviourAnnotation {
    /// The code used where a single label per record is required.
    pub fn primary_code(&self) -> Option<&CodeKey> {
        self.codes.first()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConflictAnnotation {
    pub scene_id: u32,
    #[serde(rename = "Start ID")]
    pub start_id: u32,
    #[serde(rename = "End ID")]
    pub end_id: u32,
    pub trigger: String,
    pub process: String,
    pub parent_behavior: String,
    pub child_behavior: String,
    #[serde(rename = "conflict_type")]
    pub conflict_type_text: String,
    pub severity: Intensity,
    /// Empty when the conflict type did not resolve; otherwise one key.
    #[serde(rename = "resolved_codes")]
    pub codes: Vec<CodeKey>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unresolved_codes: Vec<String>,
}

impl ConflictAnnotation {
    pub fn conflict_type(&self) -> Option<&CodeKey> {
        self.codes.first()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodingOutcome<A> {
    pub annotations: Vec<A>,
    pub report: ValidationReport,
}

/// Renders a coding prompt with speakers shown as their roles.
pub fn coding_prompt(template: TemplateName, t: &Transcript, roles: &RoleMap) -> Result<String, TemplateError> {
    let records = dialogue_records(t.utterances.iter(), |u| {
        roles.role_of(&u.speaker_label).map_or(u.speaker_label.as_str(), |r| r.as_str())
    });
    render_prompt(&PromptTemplate::golden(template), &transcript_context(records))
}

/// Splits a multi-code label such as "SR, CB".
fn split_codes(text: &str) -> Vec<&str> {
    text.split([',', '，', '、'])
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

/// Converts record ids and span; returns the finding message on failure.
fn checked_span(
    kind: &str,
    id: i64,
    start: i64,
    end: i64,
    n: u32,
) -> Result<(u32, u32, u32), String> {
    let id = u32::try_from(id).ok().filter(|&i| i >= 1).ok_or(format!("invalid {kind} {id}"))?;
    if start > end {
        return Err(format!("span reversed at {kind} {id} ({start} > {end})"));
    }
    if start < 1 || end > n as i64 {
        return Err(format!("span {start}..{end} outside transcript at {kind} {id} (ids 1..{n})"));
    }
    Ok((id, start as u32, end as u32))
}

fn behaviour_from_record(
    r: BehaviourRecord,
    n: u32,
    codebook: &Codebook,
    report: &mut ValidationReport,
) -> Option<BehaviourAnnotation> {
    let locus = Locus::Behaviour(u32::try_from(r.behaviour_id).unwrap_or(0));
    let (id, start_id, end_id) = match checked_span("behaviour_id", r.behaviour_id, r.start_id, r.end_id, n) {
        Ok(v) => v,
        Err(msg) => {
            report.error(locus, msg);
            return None;
        }
    };
    let mut codes = Vec::new();
    let mut unresolved = Vec::new();
    for part in split_codes(&r.code) {
        match codebook.resolve_code(part, Namespace::Behaviour) {
            Ok(key) if !codes.contains(&key) => codes.push(key),
            Ok(_) => {}
            Err(_) => {
                report.warn(locus.clone(), format!("unknown behaviour code \"{part}\" at behaviour_id {id}"));
                unresolved.push(part.to_string());
            }
        }
    }
    if codes.is_empty() && unresolved.is_empty() {
        report.warn(locus, format!("empty code at behaviour_id {id}"));
    }
    Some(BehaviourAnnotation {
        behaviour_id: id,
        start_id,
        end_id,
        description: r.description,
        parent_utterance: r.parent_utterance,
        code_text: r.code,
        codes,
        unresolved_codes: unresolved,
    })
}

fn conflict_from_record(
    r: ConflictRecord,
    n: u32,
    codebook: &Codebook,
    report: &mut ValidationReport,
) -> Option<ConflictAnnotation> {
    let locus = Locus::Conflict(u32::try_from(r.scene_id).unwrap_or(0));
    let (id, start_id, end_id) = match checked_span("scene_id", r.scene_id, r.start_id, r.end_id, n) {
        Ok(v) => v,
        Err(msg) => {
            report.error(locus, msg);
            return None;
        }
    };
    let Some(severity) = Intensity::parse(&r.severity) else {
        report.error(locus, format!("invalid severity: {}", r.severity.trim()));
        return None;
    };
    let mut codes = Vec::new();
    let mut unresolved = Vec::new();
    match codebook.resolve_code(&r.conflict_type, Namespace::Conflict) {
        Ok(key) => codes.push(key),
        Err(_) => {
            report.warn(locus, format!("unknown conflict type \"{}\" at scene_id {id}", r.conflict_type.trim()));
            unresolved.push(r.conflict_type.trim().to_string());
        }
    }
    Some(ConflictAnnotation {
        scene_id: id,
        start_id,
        end_id,
        trigger: r.trigger,
        process: r.process,
        parent_behavior: r.parent_behavior,
        child_behavior: r.child_behavior,
        conflict_type_text: r.conflict_type,
        severity,
        codes,
        unresolved_codes: unresolved,
    })
}

/// Codes parent behaviours. Records with unusable spans are dropped with an
/// error finding; unknown labels stay on the record and are reported.
pub fn code_behaviours(
    t: &Transcript,
    roles: &RoleMap,
    codebook: &Codebook,
    gateway: &Gateway,
) -> Result<CodingOutcome<BehaviourAnnotation>, AnnotationError> {
    if !roles.assignments.values().any(|&r| r == Role::Parent) {
        return Err(AnnotationError::MissingRoleKind(Role::Parent));
    }
    let prompt = coding_prompt(TemplateName::BehaviourCoding, t, roles)?;
    let StructuredBlock::Behaviours(records) = complete_and_extract(gateway, TemplateName::BehaviourCoding, &prompt)? else {
        unreachable!("behaviour list shape")
    };
    let n = t.max_id();
    let mut report = ValidationReport::new();
    let mut annotations: Vec<_> = records
        .into_iter()
        .filter_map(|r| behaviour_from_record(r, n, codebook, &mut report))
        .collect();
    annotations.sort_by_key(|a| (a.start_id, a.behaviour_id));
    Ok(CodingOutcome { annotations, report })
}

pub fn code_conflicts(
    t: &Transcript,
    roles: &RoleMap,
    codebook: &Codebook,
    gateway: &Gateway,
) -> Result<CodingOutcome<ConflictAnnotation>, AnnotationError> {
    if !roles.assignments.values().any(|&r| r == Role::Parent) {
        return Err(AnnotationError::MissingRoleKind(Role::Parent));
    }
    let prompt = coding_prompt(TemplateName::ConflictCoding, t, roles)?;
    let StructuredBlock::Conflicts(records) = complete_and_extract(gateway, TemplateName::ConflictCoding, &prompt)? else {
        unreachable!("conflict list shape")
    };
    let n = t.max_id();
    let mut report = ValidationReport::new();
    let mut annotations: Vec<_> = records
        .into_iter()
        .filter_map(|r| conflict_from_record(r, n, codebook, &mut report))
        .collect();
    annotations.sort_by_key(|a| (a.start_id, a.scene_id));
    Ok(CodingOutcome { annotations, report })
}

struct Span<'a> {
    kind: &'static str,
    id: u32,
    start: u32,
    end: u32,
    codes: &'a [CodeKey],
    unresolved: &'a [String],
    locus: Locus,
}

fn validate_spans(spans: &[Span<'_>], namespace: Namespace, t: &Transcript, codebook: &Codebook, report: &mut ValidationReport) {
    let n = t.max_id();
    let mut seen = BTreeSet::new();
    for (i, s) in spans.iter().enumerate() {
        if !seen.insert(s.id) {
            report.warn(s.locus.clone(), format!("duplicate {} {}", s.kind, s.id));
        }
        if s.start > s.end {
            report.error(s.locus.clone(), format!("span reversed at {} {} ({} > {})", s.kind, s.id, s.start, s.end));
        }
        if s.start < 1 {
            report.error(s.locus.clone(), format!("start_id {} below 1 at {} {}", s.start, s.kind, s.id));
        }
        if s.end > n {
            report.error(
                s.locus.clone(),
                format!("end_id {} beyond transcript length {n} at {} {}", s.end, s.kind, s.id),
            );
        }
        if i > 0 {
            let prev = &spans[i - 1];
            if (prev.start, prev.id) > (s.start, s.id) {
                report.warn(
                    s.locus.clone(),
                    format!("{} {} out of order after {} {}", s.kind, s.id, s.kind, prev.id),
                );
            }
        }
        for key in s.codes {
            let known = match namespace {
                Namespace::Behaviour => codebook.behaviour(key).is_some(),
                Namespace::Conflict => codebook.conflict(key).is_some(),
            };
            if !known {
                report.error(s.locus.clone(), format!("code {key} is not a {namespace} code"));
            }
        }
        for text in s.unresolved {
            report.warn(s.locus.clone(), format!("unresolved {namespace} code \"{text}\" at {} {}", s.kind, s.id));
        }
        if s.codes.is_empty() && s.unresolved.is_empty() {
            report.error(s.locus.clone(), format!("no code at {} {}", s.kind, s.id));
        }
    }
}

/// Re-checks annotations against a transcript and codebook: spans, id
/// uniqueness and ordering, and code resolvability. Never fails.
pub fn validate_annotations(
    behaviours: &[BehaviourAnnotation],
    conflicts: &[ConflictAnnotation],
    t: &Transcript,
    codebook: &Codebook,
) -> ValidationReport {
    let mut report = ValidationReport::new();
    let b: Vec<Span> = behaviours
        .iter()
        .map(|a| Span {
            kind: "behaviour_id",
            id: a.behaviour_id,
            start: a.start_id,
            end: a.end_id,
            codes: &a.codes,
            unresolved: &a.unresolved_codes,
            locus: Locus::Behaviour(a.behaviour_id),
        })
        .collect();
    validate_spans(&b, Namespace::Behaviour, t, codebook, &mut report);
    let c: Vec<Span> = conflicts
        .iter()
        .map(|a| Span {
            kind: "scene_id",
            id: a.scene_id,
            start: a.start_id,
            end: a.end_id,
            codes: &a.codes,
            unresolved: &a.unresolved_codes,
            locus: Locus::Conflict(a.scene_id),
        })
        .collect();
    validate_spans(&c, Namespace::Conflict, t, codebook, &mut report);
    report
}
