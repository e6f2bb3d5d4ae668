//! Configuration, staged per-session processing over the session store, and
//! the run manifest.
//!
//! Layout under the output directory:
//!
//! ```text
//! sessions/<participant>_<date>/   session store plus status.json, features.json, scores.csv
//! reports/                         report files
//! run_manifest.json
//! ```
//!
//! Each per-session stage marks itself complete in the session manifest and
//! is skipped on later runs, so an interrupted run resumes without repeating
//! model calls.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agreement::{read_arbitration_csv, read_labels_csv};
use crate::annotation::{code_behaviours, code_conflicts, infer_roles, validate_annotations, RoleOptions};
use crate::codebook::{load_codebook, Codebook, Namespace};
use crate::emotion::{filter_scorable, read_scores_csv, session_curve, EmotionConfig};
use crate::gateway::template::{PromptTemplate, TemplateName};
use crate::gateway::{correct_transcript, BackendConfig, BackendKind, ChunkPlan, Gateway};
use crate::report::{compute_agreement, compute_band, compute_statistics, emit_reports, AgreementInput, AgreementResults, CorpusResults, SessionResult};
use crate::stats::{session_feature_counts, SessionFeatures, SessionKey};
use crate::store::{
    load_annotations, load_input_session, load_manifest, load_session, read_json, session_id, store_annotations, store_manifest,
    store_session, write_json, Provenance, StoreError, StoredAnnotations, SCORES_FILE,
};
use crate::transcript::{validate_transcript, SegmentationConfig};
use crate::validation::{Locus, Severity, ValidationReport};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";
pub const STATUS_FILE: &str = "status.json";
pub const FEATURES_FILE: &str = "features.json";
pub const SESSIONS_DIR: &str = "sessions";
pub const REPORTS_DIR: &str = "reports";
pub const AGREEMENT_DIR: &str = "agreement";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("no sessions found")]
    NoSessions,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Report(#[from] crate::report::ReportError),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisToggles {
    pub correction: bool,
    pub agreement: bool,
    pub emotions: bool,
    pub statistics: bool,
}

impl Default for AnalysisToggles {
    fn default() -> Self {
        Self {
            correction: true,
            agreement: true,
            emotions: true,
            statistics: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub corpus_root: PathBuf,
    pub out_dir: PathBuf,
    /// Shipped codebook when absent.
    pub codebook: Option<PathBuf>,
    pub backend: BackendConfig,
    pub mock_fixtures: Option<PathBuf>,
    pub segmentation: SegmentationConfig,
    pub correction: ChunkPlan,
    pub roles: RoleOptions,
    pub emotion: EmotionConfig,
    pub analyses: AnalysisToggles,
    /// Coder id under which model labels enter the agreement tables.
    pub model_coder: String,
    /// Sessions processed at once.
    pub concurrency: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus_root: PathBuf::new(),
            out_dir: PathBuf::from("out"),
            codebook: None,
            backend: BackendConfig::default(),
            mock_fixtures: None,
            segmentation: SegmentationConfig::default(),
            correction: ChunkPlan::default(),
            roles: RoleOptions::default(),
            emotion: EmotionConfig::default(),
            analyses: AnalysisToggles::default(),
            model_coder: "model".to_string(),
            concurrency: 4,
        }
    }
}

fn config_err(e: impl fmt::Display) -> PipelineError {
    PipelineError::Config(e.to_string())
}

impl PipelineConfig {
    /// Parses TOML (by `.toml` extension) or JSON. Relative paths are taken
    /// relative to the config file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut config: PipelineConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.corpus_root);
        resolve(&mut config.out_dir);
        config.codebook.as_mut().map(resolve);
        config.mock_fixtures.as_mut().map(resolve);
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.corpus_root.as_os_str().is_empty() {
            return Err(config_err("corpus_root is not set"));
        }
        if !self.corpus_root.is_dir() {
            return Err(config_err(format!("corpus_root {} is not a directory", self.corpus_root.display())));
        }
        if let Some(p) = &self.codebook {
            if !p.is_file() {
                return Err(config_err(format!("codebook {} does not exist", p.display())));
            }
        }
        self.backend.validate().map_err(config_err)?;
        if self.backend.backend_kind == BackendKind::Mock {
            match &self.mock_fixtures {
                Some(p) if p.is_dir() => {}
                Some(p) => return Err(config_err(format!("mock_fixtures {} is not a directory", p.display()))),
                None => return Err(config_err("mock backend needs mock_fixtures")),
            }
        }
        self.segmentation.validate().map_err(config_err)?;
        self.correction.validate().map_err(config_err)?;
        if self.roles.max_utterances == 0 {
            return Err(config_err("roles.max_utterances must be >= 1"));
        }
        if let Some(plan) = &self.roles.chunking {
            plan.validate().map_err(config_err)?;
        }
        self.emotion.validate().map_err(config_err)?;
        if self.concurrency == 0 {
            return Err(config_err("concurrency must be >= 1"));
        }
        if self.model_coder.trim().is_empty() {
            return Err(config_err("model_coder is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Ingest,
    Correct,
    Roles,
    Code,
    Agree,
    Emotions,
    Stats,
    Report,
    Run,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Correct,
        Stage::Roles,
        Stage::Code,
        Stage::Agree,
        Stage::Emotions,
        Stage::Stats,
        Stage::Report,
        Stage::Run,
    ];
    const SESSION: [Stage; 4] = [Stage::Ingest, Stage::Correct, Stage::Roles, Stage::Code];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Correct => "correct",
            Stage::Roles => "roles",
            Stage::Code => "code",
            Stage::Agree => "agree",
            Stage::Emotions => "emotions",
            Stage::Stats => "stats",
            Stage::Report => "report",
            Stage::Run => "run",
        }
    }

    fn session_stages(self) -> &'static [Stage] {
        match self {
            Stage::Run => &Self::SESSION,
            Stage::Ingest => &Self::SESSION[0..1],
            Stage::Correct => &Self::SESSION[1..2],
            Stage::Roles => &Self::SESSION[2..3],
            Stage::Code => &Self::SESSION[3..4],
            _ => &[],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL.into_iter().find(|st| st.as_str() == s).ok_or_else(|| format!("unknown stage {s}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SessionStatus {
    Ok,
    Warning,
    Error,
}

/// Per-session findings by stage, and the failure that stopped the session.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub findings: BTreeMap<String, ValidationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<StageFailure>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub status: SessionStatus,
    pub warnings: usize,
    pub errors: usize,
    pub stages_completed: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<StageFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_at: String,
    pub total_ms: u128,
    pub session_ms: BTreeMap<String, u128>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: Stage,
    pub config: PipelineConfig,
    pub template_versions: BTreeMap<String, String>,
    pub codebook_version: String,
    pub sessions: Vec<SessionSummary>,
    pub corpus_findings: ValidationReport,
    pub reports: Vec<String>,
    /// Excluded when comparing runs.
    pub timing: Timing,
}

impl RunManifest {
    pub fn count(&self, status: SessionStatus) -> usize {
        self.sessions.iter().filter(|s| s.status == status).count()
    }

    /// 0 when at least one session survived, 3 when all failed.
    pub fn exit_code(&self) -> i32 {
        if !self.sessions.is_empty() && self.count(SessionStatus::Error) == self.sessions.len() {
            3
        } else {
            0
        }
    }
}

pub fn template_versions() -> BTreeMap<String, String> {
    TemplateName::ALL
        .iter()
        .map(|&n| (n.as_str().to_string(), PromptTemplate::golden(n).version()))
        .collect()
}

struct Context {
    config: PipelineConfig,
    codebook: Codebook,
    gateway: Gateway,
    sessions_root: PathBuf,
}

/// A corpus session directory and the working directory it maps to.
struct SessionEntry {
    input: PathBuf,
    id: String,
    work: PathBuf,
}

fn discover(ctx: &Context, stage: Stage) -> Result<(Vec<SessionEntry>, Vec<SessionSummary>), PipelineError> {
    let mut entries = Vec::new();
    let mut broken = Vec::new();
    let mut seen = BTreeSet::new();
    let source = if stage == Stage::Run || stage == Stage::Ingest {
        ctx.config.corpus_root.join(SESSIONS_DIR)
    } else {
        ctx.sessions_root.clone()
    };
    let dirs: Vec<PathBuf> = if source.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(&source)
            .map_err(|e| StoreError::Io { path: source.clone(), source: e })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        v.sort();
        v
    } else {
        Vec::new()
    };
    for dir in dirs {
        let dir_name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match load_manifest(&dir) {
            Ok(m) => {
                let id = session_id(&m.participant_id, m.session_date);
                if !seen.insert(id.clone()) {
                    broken.push(failed_summary(dir_name, "discover", format!("duplicate session {id}")));
                    continue;
                }
                entries.push(SessionEntry {
                    work: ctx.sessions_root.join(&id),
                    input: dir,
                    id,
                });
            }
            Err(e) => broken.push(failed_summary(dir_name, "discover", e.to_string())),
        }
    }
    if entries.is_empty() && broken.is_empty() {
        return Err(PipelineError::NoSessions);
    }
    Ok((entries, broken))
}

fn failed_summary(session_id: String, stage: &str, message: String) -> SessionSummary {
    SessionSummary {
        session_id,
        status: SessionStatus::Error,
        warnings: 0,
        errors: 1,
        stages_completed: Vec::new(),
        failure: Some(StageFailure {
            stage: stage.to_string(),
            message,
        }),
    }
}

fn load_state(work: &Path) -> SessionState {
    read_json(&work.join(STATUS_FILE)).unwrap_or_default()
}

fn run_stage(ctx: &Context, entry: &SessionEntry, stage: Stage) -> Result<Option<ValidationReport>, String> {
    let work = &entry.work;
    let err = |e: &dyn fmt::Display| e.to_string();
    match stage {
        Stage::Ingest => {
            let (record, mut report) = load_input_session(&entry.input, &ctx.config.segmentation).map_err(|e| err(&e))?;
            report.extend(validate_transcript(&record.transcript));
            if report.has_errors() {
                return Err(format!("invalid transcript: {}", report.findings.iter().find(|f| f.severity == Severity::Error).expect("has errors")));
            }
            store_session(&record, work).map_err(|e| err(&e))?;
            let scores = entry.input.join(SCORES_FILE);
            if scores.is_file() {
                fs::copy(&scores, work.join(SCORES_FILE)).map_err(|e| err(&e))?;
            }
            Ok(Some(report))
        }
        Stage::Correct => {
            if !ctx.config.analyses.correction {
                return Ok(None);
            }
            let mut record = load_session(work).map_err(|e| err(&e))?;
            let outcome = correct_transcript(&record.transcript, &ctx.gateway, &ctx.config.correction).map_err(|e| err(&e))?;
            record.transcript = outcome.transcript;
            store_session(&record, work).map_err(|e| err(&e))?;
            Ok(Some(outcome.report))
        }
        Stage::Roles => {
            let mut record = load_session(work).map_err(|e| err(&e))?;
            let roles = match record.role_map.take() {
                Some(given) => {
                    given.check_covers(&record.transcript).map_err(|e| err(&e))?;
                    given
                }
                None => infer_roles(&record.transcript, &ctx.gateway, &ctx.config.roles).map_err(|e| err(&e))?,
            };
            record.role_map = Some(roles);
            store_session(&record, work).map_err(|e| err(&e))?;
            Ok(Some(ValidationReport::new()))
        }
        Stage::Code => {
            let record = load_session(work).map_err(|e| err(&e))?;
            let roles = record.role_map.as_ref().ok_or("no role map; run the roles stage first")?;
            let b = code_behaviours(&record.transcript, roles, &ctx.codebook, &ctx.gateway).map_err(|e| err(&e))?;
            let c = code_conflicts(&record.transcript, roles, &ctx.codebook, &ctx.gateway).map_err(|e| err(&e))?;
            let mut report = b.report;
            report.extend(c.report);
            report.extend(validate_annotations(&b.annotations, &c.annotations, &record.transcript, &ctx.codebook));
            let annotations = StoredAnnotations {
                behaviours: b.annotations,
                conflicts: c.annotations,
            };
            store_annotations(work, &annotations).map_err(|e| err(&e))?;
            let features = features_of(&annotations, &record, &ctx.codebook, &mut report).map_err(|e| err(&e))?;
            write_json(&work.join(FEATURES_FILE), &features).map_err(|e| err(&e))?;
            let mut manifest = load_manifest(work).map_err(|e| err(&e))?;
            manifest.provenance = Some(Provenance {
                backend_kind: match ctx.gateway.config().backend_kind {
                    BackendKind::Mock => "mock".to_string(),
                    BackendKind::HttpChat => "http_chat".to_string(),
                },
                model_name: ctx.gateway.config().model_name.clone(),
                template_versions: template_versions(),
                codebook_version: ctx.codebook.version.clone(),
            });
            store_manifest(work, &manifest).map_err(|e| err(&e))?;
            Ok(Some(report))
        }
        _ => Ok(None),
    }
}

/// Counts codes, leaving out records whose codes did not resolve.
fn features_of(
    a: &StoredAnnotations,
    record: &crate::store::SessionRecord,
    codebook: &Codebook,
    report: &mut ValidationReport,
) -> Result<SessionFeatures, crate::stats::StatsError> {
    let behaviours: Vec<_> = a
        .behaviours
        .iter()
        .filter(|b| {
            let keep = !b.codes.is_empty() && b.unresolved_codes.is_empty();
            if !keep {
                report.warn(Locus::Behaviour(b.behaviour_id), format!("behaviour_id {} left out of counts", b.behaviour_id));
            }
            keep
        })
        .cloned()
        .collect();
    let conflicts: Vec<_> = a
        .conflicts
        .iter()
        .filter(|c| {
            let keep = c.conflict_type().is_some() && c.unresolved_codes.is_empty();
            if !keep {
                report.warn(Locus::Conflict(c.scene_id), format!("scene_id {} left out of counts", c.scene_id));
            }
            keep
        })
        .cloned()
        .collect();
    session_feature_counts(&behaviours, &conflicts, codebook, record.survey.as_ref())
}

fn process_session(ctx: &Context, entry: &SessionEntry, stage: Stage) -> SessionSummary {
    let mut state = load_state(&entry.work);
    let mut completed: BTreeSet<String> = load_manifest(&entry.work).map(|m| m.stages_completed).unwrap_or_default();
    for &st in stage.session_stages() {
        let name = st.as_str().to_string();
        if completed.contains(&name) {
            continue;
        }
        match run_stage(ctx, entry, st) {
            Ok(Some(report)) => {
                state.findings.insert(name.clone(), report);
                state.failure = None;
                if let Ok(mut m) = load_manifest(&entry.work) {
                    m.stages_completed.insert(name.clone());
                    completed = m.stages_completed.clone();
                    if let Err(e) = store_manifest(&entry.work, &m) {
                        state.failure = Some(StageFailure { stage: name, message: e.to_string() });
                        break;
                    }
                }
            }
            Ok(None) => {}
            Err(message) => {
                log::warn!("session {}: {st} failed: {message}", entry.id);
                state.failure = Some(StageFailure { stage: name, message });
                break;
            }
        }
    }
    if fs::create_dir_all(&entry.work).is_ok() {
        if let Err(e) = write_json(&entry.work.join(STATUS_FILE), &state) {
            log::warn!("session {}: {e}", entry.id);
        }
    }
    summarize(&entry.id, &state, completed)
}

fn summarize(id: &str, state: &SessionState, completed: BTreeSet<String>) -> SessionSummary {
    let all = state.findings.values().flat_map(|r| &r.findings);
    let (mut warnings, mut errors) = (0, 0);
    for f in all {
        match f.severity {
            Severity::Warning => warnings += 1,
            Severity::Error => errors += 1,
        }
    }
    let status = if state.failure.is_some() {
        SessionStatus::Error
    } else if warnings + errors > 0 {
        SessionStatus::Warning
    } else {
        SessionStatus::Ok
    };
    // stage order rather than name order
    let mut stages_completed: Vec<String> = completed.into_iter().collect();
    stages_completed.sort_by_key(|s| Stage::from_str(s).map_or(usize::MAX, |st| st as usize));
    SessionSummary {
        session_id: id.to_string(),
        status,
        warnings,
        errors,
        stages_completed,
        failure: state.failure.clone(),
    }
}

fn collect_results(ctx: &Context, summaries: &[SessionSummary]) -> Vec<SessionResult> {
    summaries
        .iter()
        .filter(|s| s.status != SessionStatus::Error)
        .filter_map(|s| {
            let work = ctx.sessions_root.join(&s.session_id);
            let features: SessionFeatures = read_json(&work.join(FEATURES_FILE)).ok()?;
            let m = load_manifest(&work).ok()?;
            let record = load_session(&work).ok()?;
            Some(SessionResult {
                key: SessionKey {
                    participant_id: m.participant_id,
                    session_date: m.session_date,
                },
                session_id: s.session_id.clone(),
                survey: record.survey,
                features,
            })
        })
        .collect()
}

fn agreement_inputs(ctx: &Context, sessions: &[SessionResult], ns: Namespace) -> Result<Option<AgreementInput>, String> {
    let dir = ctx.config.corpus_root.join(AGREEMENT_DIR);
    let labels = dir.join(format!("{}_labels.csv", ns.prefix()));
    if !labels.is_file() {
        return Ok(None);
    }
    let open = |p: &Path| fs::File::open(p).map_err(|e| format!("{}: {e}", p.display()));
    let expert_rows = read_labels_csv(open(&labels)?).map_err(|e| format!("{}: {e}", labels.display()))?;
    let arb = dir.join(format!("{}_arbitration.csv", ns.prefix()));
    let arbitration = if arb.is_file() {
        Some(read_arbitration_csv(open(&arb)?).map_err(|e| format!("{}: {e}", arb.display()))?)
    } else {
        None
    };
    let mut model_labels = BTreeMap::new();
    for s in sessions {
        let Ok(Some(a)) = load_annotations(ctx.sessions_root.join(&s.session_id)) else {
            continue;
        };
        match ns {
            Namespace::Behaviour => {
                for b in &a.behaviours {
                    if let Some(code) = b.primary_code() {
                        if b.codes.len() > 1 {
                            log::info!("{}#b{}: multi-code record reduced to {}", s.session_id, b.behaviour_id, code.abbrev());
                        }
                        model_labels.insert(format!("{}#b{}", s.session_id, b.behaviour_id), code.abbrev().to_string());
                    }
                }
            }
            Namespace::Conflict => {
                for c in &a.conflicts {
                    if let Some(code) = c.conflict_type() {
                        model_labels.insert(format!("{}#c{}", s.session_id, c.scene_id), code.abbrev().to_string());
                    }
                }
            }
        }
    }
    Ok(Some(AgreementInput {
        expert_rows,
        model_labels,
        arbitration,
    }))
}

fn run_agreement(ctx: &Context, sessions: &[SessionResult], findings: &mut ValidationReport) -> Option<AgreementResults> {
    let mut results = AgreementResults::default();
    let mut any = false;
    for ns in [Namespace::Behaviour, Namespace::Conflict] {
        match agreement_inputs(ctx, sessions, ns) {
            Ok(Some(input)) => {
                any = true;
                let report = compute_agreement(ns, &input, &ctx.config.model_coder, &ctx.codebook, &mut results.notes);
                match ns {
                    Namespace::Behaviour => results.behaviour = report,
                    Namespace::Conflict => results.conflict = report,
                }
            }
            Ok(None) => results.notes.push(format!("no {} label file", ns.prefix())),
            Err(e) => {
                findings.error(Locus::Corpus, e.clone());
                results.notes.push(e);
            }
        }
    }
    any.then_some(results)
}

fn run_emotions(ctx: &Context, sessions: &[SessionResult], findings: &mut ValidationReport) -> Option<crate::report::EmotionResults> {
    let cfg = &ctx.config.emotion;
    let mut curves = Vec::new();
    for s in sessions {
        let work = ctx.sessions_root.join(&s.session_id);
        let path = work.join(SCORES_FILE);
        if !path.is_file() {
            continue;
        }
        let locus = Locus::Session(s.session_id.clone());
        let scores = match fs::File::open(&path).map_err(|e| e.to_string()).and_then(|f| read_scores_csv(f).map_err(|e| e.to_string())) {
            Ok(v) => v,
            Err(e) => {
                findings.warn(locus, format!("scores unreadable: {e}"));
                continue;
            }
        };
        let Ok(record) = load_session(&work) else { continue };
        let scorable: BTreeSet<u32> = filter_scorable(&record.transcript.utterances, cfg.min_content_chars).iter().map(|u| u.id).collect();
        let kept: Vec<_> = scores.into_iter().filter(|e| scorable.contains(&e.utterance_id)).collect();
        match session_curve(&s.session_id, &kept, cfg) {
            Ok((_, curve)) => curves.push(curve),
            Err(e) => findings.warn(locus, format!("emotion curve skipped: {e}")),
        }
    }
    if curves.is_empty() {
        return None;
    }
    Some(compute_band(curves, cfg.bin_width_ms as f64))
}

/// Runs one stage, or everything for [`Stage::Run`], and writes the run
/// manifest.
pub fn run_pipeline(config: &PipelineConfig, stage: Stage) -> Result<RunManifest, PipelineError> {
    let started = Instant::now();
    let started_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
    config.validate()?;
    let codebook = match &config.codebook {
        Some(p) => load_codebook(p).map_err(config_err)?,
        None => Codebook::shipped(),
    };
    let gateway = Gateway::from_config(config.backend.clone(), config.mock_fixtures.as_deref()).map_err(config_err)?;
    let ctx = Context {
        sessions_root: config.out_dir.join(SESSIONS_DIR),
        config: config.clone(),
        codebook,
        gateway,
    };
    let (entries, broken) = discover(&ctx, stage)?;
    fs::create_dir_all(&ctx.sessions_root).map_err(|e| StoreError::Io { path: ctx.sessions_root.clone(), source: e })?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.concurrency)
        .build()
        .map_err(config_err)?;
    let timed: Vec<(SessionSummary, u128)> = pool.install(|| {
        entries
            .par_iter()
            .map(|e| {
                let t = Instant::now();
                (process_session(&ctx, e, stage), t.elapsed().as_millis())
            })
            .collect()
    });
    let mut session_ms = BTreeMap::new();
    let mut sessions = broken;
    for (s, ms) in timed {
        session_ms.insert(s.session_id.clone(), ms);
        sessions.push(s);
    }
    sessions.sort_by(|a, b| a.session_id.cmp(&b.session_id));

    let mut corpus_findings = ValidationReport::new();
    let mut reports = Vec::new();
    let corpus = matches!(stage, Stage::Run | Stage::Agree | Stage::Emotions | Stage::Stats | Stage::Report);
    if corpus {
        let all = matches!(stage, Stage::Run | Stage::Report);
        let session_results = collect_results(&ctx, &sessions);
        let toggles = config.analyses;
        let mut results = CorpusResults::default();
        if toggles.statistics && (all || stage == Stage::Stats) {
            results.statistics = compute_statistics(&session_results, &ctx.codebook, &mut corpus_findings);
        }
        if toggles.agreement && (all || stage == Stage::Agree) {
            results.agreement = run_agreement(&ctx, &session_results, &mut corpus_findings);
        }
        if toggles.emotions && (all || stage == Stage::Emotions) {
            results.emotion = run_emotions(&ctx, &session_results, &mut corpus_findings);
        }
        results.sessions = session_results;
        reports = emit_reports(&results, &ctx.codebook, &config.out_dir.join(REPORTS_DIR))?
            .into_iter()
            .map(|p| format!("{REPORTS_DIR}/{p}"))
            .collect();
    }

    let manifest = RunManifest {
        stage,
        config: config.clone(),
        template_versions: template_versions(),
        codebook_version: ctx.codebook.version.clone(),
        sessions,
        corpus_findings,
        reports,
        timing: Timing {
            started_at,
            total_ms: started.elapsed().as_millis(),
            session_ms,
        },
    };
    write_json(&config.out_dir.join(RUN_MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}
