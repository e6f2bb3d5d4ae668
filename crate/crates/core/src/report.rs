//! Corpus-level analyses over stored sessions and the report files written
//! from them. Reports are plot data (CSV/JSON); nothing is rendered.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::agreement::{agreement_report, group_labels, write_kappa_table_csv, AgreementReport, ConsensusPolicy};
use crate::codebook::{Codebook, Namespace, Valence};
use crate::emotion::{band_across_sessions, uniform_grid, write_band_csv, BandSeries, SmoothedSeries};
use crate::stats::{
    correlation_matrix, distribution_summary, participant_shift_tests, participant_summaries, write_correlation_csv,
    write_features_csv, write_p_value_csv, CorrelationMatrix, DistributionSummary, Feature, ParticipantSurvey, SessionFeatures,
    SessionKey, ShiftAnalysis, SurveyResponse,
};
use crate::validation::{Locus, ValidationReport};

pub const BEHAVIOUR_DISTRIBUTION: &str = "behaviour_distribution.csv";
pub const CONFLICT_DISTRIBUTION: &str = "conflict_distribution.csv";
pub const PARENT_DISTRIBUTION: &str = "parent_distribution.csv";
pub const BEHAVIOUR_CORRELATIONS: &str = "correlations_behaviours.csv";
pub const CONFLICT_CORRELATIONS: &str = "correlations_conflicts.csv";
pub const AGREEMENT: &str = "agreement.json";
pub const EMOTION_BAND: &str = "emotion_band.csv";

/// The report files.
pub const REPORT_FILES: [&str; 7] = [
    BEHAVIOUR_DISTRIBUTION,
    CONFLICT_DISTRIBUTION,
    PARENT_DISTRIBUTION,
    BEHAVIOUR_CORRELATIONS,
    CONFLICT_CORRELATIONS,
    AGREEMENT,
    EMOTION_BAND,
];

/// Companion files (p-value grids, kappa grids, features, summaries) go in
/// this subdirectory of the report directory.
pub const SUPPLEMENTARY_DIR: &str = "supplementary";

const CORRELATION_CAVEAT: &str = "Pearson correlations pool session-level observations; sessions from the same family are not independent, and correlation does not establish causation.";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionResult {
    pub key: SessionKey,
    pub session_id: String,
    pub survey: Option<SurveyResponse>,
    pub features: SessionFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatisticsResults {
    pub distribution: DistributionSummary,
    pub participants: BTreeMap<String, DistributionSummary>,
    pub shift: ShiftAnalysis,
    pub sessions_with_survey: usize,
    pub sessions_without_survey: usize,
    pub behaviour_correlations: Option<CorrelationMatrix>,
    pub conflict_correlations: Option<CorrelationMatrix>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AgreementResults {
    pub behaviour: Option<AgreementReport>,
    pub conflict: Option<AgreementReport>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmotionResults {
    pub curves: Vec<SmoothedSeries>,
    pub band: BandSeries,
}

/// Everything the report writer needs. Absent parts produce no files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusResults {
    pub sessions: Vec<SessionResult>,
    pub statistics: Option<StatisticsResults>,
    pub agreement: Option<AgreementResults>,
    pub emotion: Option<EmotionResults>,
}

const SHIFT_NAMES: [&str; 3] = ["d_pleasure", "d_arousal", "d_dominance"];

fn counts_of(f: &SessionFeatures, ns: Namespace) -> &BTreeMap<crate::codebook::CodeKey, u32> {
    match ns {
        Namespace::Behaviour => &f.behaviour_counts,
        Namespace::Conflict => &f.conflict_counts,
    }
}

/// Distributions over all sessions, per-parent summaries, survey shift
/// tests and the two correlation grids. Sessions without a survey are left
/// out of shift tests and correlations.
pub fn compute_statistics(sessions: &[SessionResult], codebook: &Codebook, findings: &mut ValidationReport) -> Option<StatisticsResults> {
    let features: Vec<SessionFeatures> = sessions.iter().map(|s| s.features.clone()).collect();
    let distribution = match distribution_summary(&features, codebook) {
        Ok(d) => d,
        Err(e) => {
            findings.error(Locus::Corpus, format!("statistics skipped: {e}"));
            return None;
        }
    };
    let by_participant: Vec<(String, SessionFeatures)> =
        sessions.iter().map(|s| (s.key.participant_id.clone(), s.features.clone())).collect();
    let participants = participant_summaries(&by_participant, codebook);

    let surveyed: Vec<(&SessionResult, SurveyResponse)> = sessions.iter().filter_map(|s| s.survey.map(|v| (s, v))).collect();
    let without = sessions.len() - surveyed.len();
    let mut notes = vec![CORRELATION_CAVEAT.to_string()];
    if without > 0 {
        notes.push(format!("{without} session(s) without a survey excluded from shift tests and correlations"));
    }
    let shift = participant_shift_tests(
        &surveyed
            .iter()
            .map(|(s, survey)| ParticipantSurvey {
                participant_id: s.key.participant_id.clone(),
                survey: *survey,
            })
            .collect::<Vec<_>>(),
    );

    let shift_cols: Vec<Feature> = (0..3)
        .map(|d| {
            let v = surveyed
                .iter()
                .map(|(s, _)| s.features.shift.map_or(0.0, |x| x.as_array()[d] as f64))
                .collect();
            (SHIFT_NAMES[d].to_string(), v)
        })
        .collect();
    let mut grid = |ns: Namespace| {
        let rows: Vec<Feature> = codebook
            .keys(ns)
            .into_iter()
            .map(|k| {
                let v = surveyed.iter().map(|(s, _)| counts_of(&s.features, ns).get(&k).copied().unwrap_or(0) as f64).collect();
                (k.abbrev().to_string(), v)
            })
            .collect();
        match correlation_matrix(&rows, &shift_cols) {
            Ok(m) => Some(m),
            Err(e) => {
                findings.warn(Locus::Corpus, format!("{ns} correlations skipped: {e}"));
                None
            }
        }
    };
    let behaviour_correlations = grid(Namespace::Behaviour);
    let conflict_correlations = grid(Namespace::Conflict);
    if surveyed.len() < 3 {
        findings.warn(
            Locus::Corpus,
            format!("{} session(s) with a survey; correlations need at least 3", surveyed.len()),
        );
    }

    Some(StatisticsResults {
        distribution,
        participants,
        shift,
        sessions_with_survey: surveyed.len(),
        sessions_without_survey: without,
        behaviour_correlations,
        conflict_correlations,
        notes,
    })
}

/// Inputs for one namespace's agreement report.
#[derive(Debug, Clone, Default)]
pub struct AgreementInput {
    /// `(instance_id, coder_id, label)` rows from the expert label file.
    pub expert_rows: Vec<(String, String, String)>,
    /// Model labels by instance id, already canonical abbreviations.
    pub model_labels: BTreeMap<String, String>,
    /// Arbitration decisions by instance id, when available.
    pub arbitration: Option<BTreeMap<String, String>>,
}

/// Canonical abbreviation for a free-text label, or the trimmed text when
/// it does not resolve.
fn canonical_label(codebook: &Codebook, text: &str, ns: Namespace) -> Result<String, String> {
    codebook
        .resolve_code(text, ns)
        .map(|k| k.abbrev().to_string())
        .map_err(|_| text.trim().to_string())
}

/// Compares the model coder with the expert coders on the instances the
/// experts labelled.
pub fn compute_agreement(
    ns: Namespace,
    input: &AgreementInput,
    model_coder: &str,
    codebook: &Codebook,
    notes: &mut Vec<String>,
) -> Option<AgreementReport> {
    let mut rows = Vec::new();
    let mut unresolved = BTreeSet::new();
    let mut labelled = BTreeSet::new();
    for (instance, coder, label) in &input.expert_rows {
        if coder == model_coder {
            notes.push(format!("{ns}: expert file uses the reserved coder id {model_coder}; rows ignored"));
            continue;
        }
        let label = canonical_label(codebook, label, ns).unwrap_or_else(|raw| {
            unresolved.insert(raw.clone());
            raw
        });
        labelled.insert(instance.clone());
        rows.push((instance.clone(), coder.clone(), label));
    }
    if !unresolved.is_empty() {
        notes.push(format!(
            "{ns}: expert labels outside the codebook kept verbatim: {}",
            unresolved.into_iter().collect::<Vec<_>>().join(", ")
        ));
    }
    let mut missing = 0;
    for instance in &labelled {
        match input.model_labels.get(instance) {
            Some(label) => rows.push((instance.clone(), model_coder.to_string(), label.clone())),
            None => missing += 1,
        }
    }
    if missing > 0 {
        notes.push(format!("{ns}: {missing} expert-labelled instance(s) have no model label"));
    }
    let result = group_labels(&rows).and_then(|(instances, _)| {
        let mut policy = match &input.arbitration {
            Some(table) => ConsensusPolicy::from_table(table),
            None => ConsensusPolicy::strict(),
        };
        agreement_report(ns.prefix(), &instances, model_coder, &mut policy)
    });
    match result {
        Ok(r) => Some(r),
        Err(e) => {
            notes.push(format!("{ns}: agreement not computed: {e}"));
            None
        }
    }
}

/// Cross-session band on a grid from 0 to the latest curve point.
pub fn compute_band(curves: Vec<SmoothedSeries>, step_ms: f64) -> EmotionResults {
    let end = curves.iter().filter_map(|c| c.points.last().map(|p| p.0)).fold(0.0, f64::max);
    let band = band_across_sessions(&curves, &uniform_grid(0.0, end, step_ms));
    EmotionResults { curves, band }
}

struct Writer {
    dir: PathBuf,
    written: Vec<String>,
}

impl Writer {
    fn file(&mut self, name: &str) -> Result<(PathBuf, fs::File), ReportError> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| ReportError::Io { path: parent.to_path_buf(), source })?;
        }
        let f = fs::File::create(&path).map_err(|source| ReportError::Io { path: path.clone(), source })?;
        self.written.push(name.to_string());
        Ok((path, f))
    }

    fn csv(&mut self, name: &str, write: impl FnOnce(fs::File) -> Result<(), csv::Error>) -> Result<(), ReportError> {
        let (path, f) = self.file(name)?;
        write(f).map_err(|source| ReportError::Csv { path, source })
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), ReportError> {
        let (path, f) = self.file(name)?;
        let mut text = serde_json::to_string_pretty(value).expect("report types serialize");
        text.push('\n');
        io::Write::write_all(&mut io::BufWriter::new(f), text.as_bytes()).map_err(|source| ReportError::Io { path, source })
    }
}

fn fmt6(x: f64) -> String {
    format!("{x:.6}")
}

fn write_distributions(w: &mut Writer, results: &CorpusResults, stats: &StatisticsResults, codebook: &Codebook) -> Result<(), ReportError> {
    let total = |ns: Namespace, key| -> u32 {
        results.sessions.iter().map(|s| counts_of(&s.features, ns).get(key).copied().unwrap_or(0)).sum()
    };
    let mean = |key| stats.distribution.mean_count(key).unwrap_or(0.0);
    w.csv(BEHAVIOUR_DISTRIBUTION, |f| {
        let mut out = csv::Writer::from_writer(f);
        out.write_record(["code", "name", "valence", "total", "mean_per_session"])?;
        for b in &codebook.behaviours {
            out.write_record([
                b.abbrev.clone(),
                b.display_name.clone(),
                b.valence.to_string(),
                total(Namespace::Behaviour, &b.key).to_string(),
                fmt6(mean(&b.key)),
            ])?;
        }
        out.flush()?;
        Ok(())
    })?;
    w.csv(CONFLICT_DISTRIBUTION, |f| {
        let mut out = csv::Writer::from_writer(f);
        out.write_record(["code", "name", "total", "mean_per_session"])?;
        for c in &codebook.conflicts {
            out.write_record([
                c.abbrev.clone(),
                c.display_name.clone(),
                total(Namespace::Conflict, &c.key).to_string(),
                fmt6(mean(&c.key)),
            ])?;
        }
        out.flush()?;
        Ok(())
    })?;
    w.csv(PARENT_DISTRIBUTION, |f| {
        let mut out = csv::Writer::from_writer(f);
        out.write_record(["participant_id", "n_sessions", "category", "code", "mean_per_session"])?;
        for (pid, summary) in &stats.participants {
            let n = summary.n_sessions.to_string();
            for (key, m) in &summary.mean_counts {
                let category = key.namespace().map_or("", Namespace::prefix);
                out.write_record([pid.as_str(), &n, category, key.abbrev(), &fmt6(*m)])?;
            }
            for (v, m) in Valence::ALL.iter().zip(summary.mean_valence_per_session) {
                out.write_record([pid.clone(), n.clone(), "valence".into(), v.to_string(), fmt6(m)])?;
            }
        }
        out.flush()?;
        Ok(())
    })
}

/// Writes every report whose analysis is present and returns the written
/// paths relative to `out_dir`, sorted.
pub fn emit_reports(results: &CorpusResults, codebook: &Codebook, out_dir: &Path) -> Result<Vec<String>, ReportError> {
    fs::create_dir_all(out_dir).map_err(|source| ReportError::Io { path: out_dir.to_path_buf(), source })?;
    let mut w = Writer {
        dir: out_dir.to_path_buf(),
        written: Vec::new(),
    };
    let sup = |name: &str| format!("{SUPPLEMENTARY_DIR}/{name}");

    if let Some(stats) = &results.statistics {
        write_distributions(&mut w, results, stats, codebook)?;
        for (name, m) in [(BEHAVIOUR_CORRELATIONS, &stats.behaviour_correlations), (CONFLICT_CORRELATIONS, &stats.conflict_correlations)] {
            if let Some(m) = m {
                w.csv(name, |f| write_correlation_csv(f, m))?;
                w.csv(&sup(&name.replace(".csv", "_p.csv")), |f| write_p_value_csv(f, m))?;
            }
        }
        let rows: Vec<(SessionKey, SessionFeatures)> = results.sessions.iter().map(|s| (s.key.clone(), s.features.clone())).collect();
        w.csv(&sup("features.csv"), |f| write_features_csv(f, &rows, codebook))?;
        w.json(&sup("statistics.json"), stats)?;
    }

    if let Some(agreement) = &results.agreement {
        w.json(AGREEMENT, agreement)?;
        for r in [&agreement.behaviour, &agreement.conflict].into_iter().flatten() {
            w.csv(&sup(&format!("kappa_{}.csv", r.namespace)), |f| write_kappa_table_csv(f, &r.kappa))?;
        }
    }

    if let Some(emotion) = &results.emotion {
        w.csv(EMOTION_BAND, |f| write_band_csv(f, &emotion.band))?;
        w.csv(&sup("emotion_curves.csv"), |f| {
            let mut out = csv::Writer::from_writer(f);
            out.write_record(["session_id", "t_ms", "smoothed"])?;
            for c in &emotion.curves {
                for (t, y) in &c.points {
                    out.write_record([c.session_id.clone(), t.to_string(), fmt6(*y)])?;
                }
            }
            out.flush()?;
            Ok(())
        })?;
    }

    let mut written = w.written;
    written.sort();
    Ok(written)
}
