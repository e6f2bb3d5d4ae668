//! Survey emotion shifts, paired t-tests, per-session code counts and their
//! distributions, and Pearson correlation grids with significance stars.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{BehaviourAnnotation, ConflictAnnotation};
use crate::codebook::{CodeKey, Codebook, Namespace, Valence};
use crate::special::student_t_two_tailed;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} observations, found {found}")]
    TooFew { needed: usize, found: usize },
    #[error("differences have zero variance; t statistic undefined")]
    ZeroVariance,
    #[error("{0} is constant; correlation undefined")]
    Constant(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("survey {field} = {value} is outside 1..=5")]
    SurveyOutOfRange { field: &'static str, value: u8 },
    #[error("unresolved code in {kind} {id}")]
    Unresolved { kind: &'static str, id: u32 },
    #[error("{key} is not a {namespace} code")]
    WrongNamespace { key: String, namespace: Namespace },
    #[error("no sessions")]
    NoSessions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pad {
    pub pleasure: u8,
    pub arousal: u8,
    pub dominance: u8,
}

/// Self-reported PAD before and after a homework session, each on 1..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyResponse {
    pub pre: Pad,
    pub post: Pad,
}

impl SurveyResponse {
    pub fn validate(&self) -> Result<(), StatsError> {
        let fields = [
            ("pre.pleasure", self.pre.pleasure),
            ("pre.arousal", self.pre.arousal),
            ("pre.dominance", self.pre.dominance),
            ("post.pleasure", self.post.pleasure),
            ("post.arousal", self.post.arousal),
            ("post.dominance", self.post.dominance),
        ];
        for (field, value) in fields {
            if !(1..=5).contains(&value) {
                return Err(StatsError::SurveyOutOfRange { field, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmotionShift {
    pub d_pleasure: i8,
    pub d_arousal: i8,
    pub d_dominance: i8,
}

impl EmotionShift {
    pub fn as_array(&self) -> [i8; 3] {
        [self.d_pleasure, self.d_arousal, self.d_dominance]
    }
}

/// Post minus pre, per dimension.
pub fn emotion_shift(s: &SurveyResponse) -> EmotionShift {
    let d = |pre: u8, post: u8| post as i8 - pre as i8;
    EmotionShift {
        d_pleasure: d(s.pre.pleasure, s.post.pleasure),
        d_arousal: d(s.pre.arousal, s.post.arousal),
        d_dominance: d(s.pre.dominance, s.post.dominance),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub t_statistic: f64,
    pub degrees_of_freedom: usize,
    /// Two-tailed.
    pub p_value: f64,
    pub mean_difference: f64,
}

fn check_finite(xs: &[f64], what: &'static str) -> Result<(), StatsError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite(what))
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sum of squared deviations from the mean.
fn sum_sq_dev(xs: &[f64], m: f64) -> f64 {
    xs.iter().map(|x| (x - m) * (x - m)).sum()
}

/// True when the spread is zero up to rounding relative to the data's scale.
fn negligible_spread(ss: f64, xs: &[f64]) -> bool {
    let scale = xs.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    ss <= (1e-12 * scale).powi(2) * xs.len() as f64
}

/// Paired-sample t-test on `post - pre`.
pub fn paired_t_test(pre: &[f64], post: &[f64]) -> Result<TTestResult, StatsError> {
    if pre.len() != post.len() {
        return Err(StatsError::LengthMismatch(pre.len(), post.len()));
    }
    if pre.len() < 2 {
        return Err(StatsError::TooFew { needed: 2, found: pre.len() });
    }
    check_finite(pre, "pre")?;
    check_finite(post, "post")?;
    let d: Vec<f64> = pre.iter().zip(post).map(|(a, b)| b - a).collect();
    let n = d.len() as f64;
    let m = mean(&d);
    let ss = sum_sq_dev(&d, m);
    if ss == 0.0 || negligible_spread(ss, &d) {
        return Err(StatsError::ZeroVariance);
    }
    let sd = (ss / (n - 1.0)).sqrt();
    let t = m / (sd / n.sqrt());
    let df = d.len() - 1;
    Ok(TTestResult {
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: student_t_two_tailed(t, df as f64),
        mean_difference: m,
    })
}

/// One session's survey, tagged with its participant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParticipantSurvey {
    pub participant_id: String,
    pub survey: SurveyResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DimensionTest {
    pub dimension: &'static str,
    pub pre_mean: f64,
    pub post_mean: f64,
    /// Mean of per-participant (post - pre).
    pub mean_shift: f64,
    pub test: Option<TTestResult>,
    /// Why `test` is absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftAnalysis {
    pub n_participants: usize,
    pub n_sessions: usize,
    pub dimensions: Vec<DimensionTest>,
}

/// Averages each participant's sessions first, then runs a paired t-test of
/// the per-participant pre and post means for each PAD dimension.
pub fn participant_shift_tests(surveys: &[ParticipantSurvey]) -> ShiftAnalysis {
    let mut by_participant: BTreeMap<&str, Vec<&SurveyResponse>> = BTreeMap::new();
    for s in surveys {
        by_participant.entry(&s.participant_id).or_default().push(&s.survey);
    }
    type Dimension = (&'static str, fn(&Pad) -> u8);
    let dims: [Dimension; 3] =
        [("pleasure", |p| p.pleasure), ("arousal", |p| p.arousal), ("dominance", |p| p.dominance)];
    let dimensions = dims
        .iter()
        .map(|(name, get)| {
            let mut pre = Vec::new();
            let mut post = Vec::new();
            for sessions in by_participant.values() {
                let n = sessions.len() as f64;
                pre.push(sessions.iter().map(|s| get(&s.pre) as f64).sum::<f64>() / n);
                post.push(sessions.iter().map(|s| get(&s.post) as f64).sum::<f64>() / n);
            }
            let (pre_mean, post_mean) = if pre.is_empty() { (f64::NAN, f64::NAN) } else { (mean(&pre), mean(&post)) };
            let (test, note) = match paired_t_test(&pre, &post) {
                Ok(t) => (Some(t), None),
                Err(e) => (None, Some(e.to_string())),
            };
            DimensionTest {
                dimension: name,
                pre_mean,
                post_mean,
                mean_shift: post_mean - pre_mean,
                test,
                note,
            }
        })
        .collect();
    ShiftAnalysis {
        n_participants: by_participant.len(),
        n_sessions: surveys.len(),
        dimensions,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValenceTotals {
    pub positive: u32,
    pub neutral: u32,
    pub negative: u32,
}

impl ValenceTotals {
    pub fn total(&self) -> u32 {
        self.positive + self.neutral + self.negative
    }

    fn add(&mut self, v: Valence, n: u32) {
        match v {
            Valence::Positive => self.positive += n,
            Valence::Neutral => self.neutral += n,
            Valence::Negative => self.negative += n,
        }
    }

    pub fn get(&self, v: Valence) -> u32 {
        match v {
            Valence::Positive => self.positive,
            Valence::Neutral => self.neutral,
            Valence::Negative => self.negative,
        }
    }
}

/// Code counts for one session. Every codebook key is present, zeros
/// included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionFeatures {
    pub behaviour_counts: BTreeMap<CodeKey, u32>,
    pub conflict_counts: BTreeMap<CodeKey, u32>,
    pub valence_totals: ValenceTotals,
    pub shift: Option<EmotionShift>,
}

impl SessionFeatures {
    pub fn total_behaviours(&self) -> u32 {
        self.behaviour_counts.values().sum()
    }

    pub fn total_conflicts(&self) -> u32 {
        self.conflict_counts.values().sum()
    }
}

/// Counts one occurrence per (annotation, code) pair. Annotations must be
/// fully resolved.
pub fn session_feature_counts(
    behaviours: &[BehaviourAnnotation],
    conflicts: &[ConflictAnnotation],
    codebook: &Codebook,
    survey: Option<&SurveyResponse>,
) -> Result<SessionFeatures, StatsError> {
    let mut behaviour_counts: BTreeMap<CodeKey, u32> = codebook.keys(Namespace::Behaviour).into_iter().map(|k| (k, 0)).collect();
    let mut conflict_counts: BTreeMap<CodeKey, u32> = codebook.keys(Namespace::Conflict).into_iter().map(|k| (k, 0)).collect();
    let mut valence_totals = ValenceTotals::default();
    for a in behaviours {
        if a.codes.is_empty() || !a.unresolved_codes.is_empty() {
            return Err(StatsError::Unresolved { kind: "behaviour_id", id: a.behaviour_id });
        }
        for key in &a.codes {
            let slot = behaviour_counts.get_mut(key).ok_or_else(|| StatsError::WrongNamespace {
                key: key.to_string(),
                namespace: Namespace::Behaviour,
            })?;
            *slot += 1;
            let v = codebook.valence_of(key).expect("behaviour keys have a valence");
            valence_totals.add(v, 1);
        }
    }
    for c in conflicts {
        let (Some(key), true) = (c.conflict_type(), c.unresolved_codes.is_empty()) else {
            return Err(StatsError::Unresolved { kind: "scene_id", id: c.scene_id });
        };
        let slot = conflict_counts.get_mut(key).ok_or_else(|| StatsError::WrongNamespace {
            key: key.to_string(),
            namespace: Namespace::Conflict,
        })?;
        *slot += 1;
    }
    Ok(SessionFeatures {
        behaviour_counts,
        conflict_counts,
        valence_totals,
        shift: survey.map(emotion_shift),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValenceShares {
    pub positive: f64,
    pub neutral: f64,
    pub negative: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistributionSummary {
    pub n_sessions: usize,
    /// Mean per-session count of each code, behaviours then conflicts, in
    /// codebook order.
    pub mean_counts: Vec<(CodeKey, f64)>,
    pub mean_valence_per_session: [f64; 3],
    pub valence_totals: ValenceTotals,
    /// Absent when no behaviours were coded at all.
    pub valence_shares: Option<ValenceShares>,
    pub mean_behaviours_per_session: f64,
    pub mean_conflicts_per_session: f64,
}

impl DistributionSummary {
    pub fn mean_count(&self, key: &CodeKey) -> Option<f64> {
        self.mean_counts.iter().find(|(k, _)| k == key).map(|(_, m)| *m)
    }
}

pub fn distribution_summary(sessions: &[SessionFeatures], codebook: &Codebook) -> Result<DistributionSummary, StatsError> {
    if sessions.is_empty() {
        return Err(StatsError::NoSessions);
    }
    let n = sessions.len() as f64;
    let mean_of = |f: &dyn Fn(&SessionFeatures) -> u32| sessions.iter().map(|s| f(s) as f64).sum::<f64>() / n;
    let mut mean_counts = Vec::new();
    for key in codebook.keys(Namespace::Behaviour) {
        mean_counts.push((key.clone(), mean_of(&|s| s.behaviour_counts.get(&key).copied().unwrap_or(0))));
    }
    for key in codebook.keys(Namespace::Conflict) {
        mean_counts.push((key.clone(), mean_of(&|s| s.conflict_counts.get(&key).copied().unwrap_or(0))));
    }
    let mut valence_totals = ValenceTotals::default();
    for s in sessions {
        for v in Valence::ALL {
            valence_totals.add(v, s.valence_totals.get(v));
        }
    }
    let total = valence_totals.total();
    let valence_shares = (total > 0).then(|| ValenceShares {
        positive: valence_totals.positive as f64 / total as f64,
        neutral: valence_totals.neutral as f64 / total as f64,
        negative: valence_totals.negative as f64 / total as f64,
    });
    Ok(DistributionSummary {
        n_sessions: sessions.len(),
        mean_counts,
        mean_valence_per_session: Valence::ALL.map(|v| mean_of(&|s| s.valence_totals.get(v))),
        valence_totals,
        valence_shares,
        mean_behaviours_per_session: mean_of(&|s| s.total_behaviours()),
        mean_conflicts_per_session: mean_of(&|s| s.total_conflicts()),
    })
}

/// Summaries per participant, keyed by participant id.
pub fn participant_summaries(
    sessions: &[(String, SessionFeatures)],
    codebook: &Codebook,
) -> BTreeMap<String, DistributionSummary> {
    let mut grouped: BTreeMap<String, Vec<SessionFeatures>> = BTreeMap::new();
    for (pid, f) in sessions {
        grouped.entry(pid.clone()).or_default().push(f.clone());
    }
    grouped
        .into_iter()
        .map(|(pid, fs)| {
            let summary = distribution_summary(&fs, codebook).expect("groups are non-empty");
            (pid, summary)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PearsonResult {
    pub r: f64,
    /// Two-tailed, from Student's t with n - 2 degrees of freedom.
    pub p_value: f64,
    pub n: usize,
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<PearsonResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooFew { needed: 3, found: x.len() });
    }
    check_finite(x, "x")?;
    check_finite(y, "y")?;
    let (mx, my) = (mean(x), mean(y));
    let sxx = sum_sq_dev(x, mx);
    let syy = sum_sq_dev(y, my);
    if sxx == 0.0 || negligible_spread(sxx, x) {
        return Err(StatsError::Constant("x"));
    }
    if syy == 0.0 || negligible_spread(syy, y) {
        return Err(StatsError::Constant("y"));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let r = (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0);
    let n = x.len();
    let df = (n - 2) as f64;
    let p_value = if r.abs() == 1.0 {
        0.0
    } else {
        student_t_two_tailed(r * (df / (1.0 - r * r)).sqrt(), df)
    };
    Ok(PearsonResult { r, p_value, n })
}

/// "***" for p < 0.001, "**" for p < 0.01, "*" for p < 0.05, else "".
pub fn significance_stars(p: f64) -> &'static str {
    if p < 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationCell {
    /// Absent when the correlation is undefined (a constant vector).
    pub r: Option<f64>,
    pub p_value: Option<f64>,
    pub stars: &'static str,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationMatrix {
    pub row_names: Vec<String>,
    pub col_names: Vec<String>,
    pub cells: Vec<Vec<CorrelationCell>>,
}

/// Named feature vector over a shared session index.
pub type Feature = (String, Vec<f64>);

/// Pearson correlation of every row feature with every column feature.
/// Undefined cells are flagged rather than filled in.
pub fn correlation_matrix(rows: &[Feature], cols: &[Feature]) -> Result<CorrelationMatrix, StatsError> {
    let n = rows.first().or(cols.first()).map_or(0, |(_, v)| v.len());
    for (_, v) in rows.iter().chain(cols) {
        if v.len() != n {
            return Err(StatsError::LengthMismatch(n, v.len()));
        }
    }
    let cells = rows
        .iter()
        .map(|(_, x)| {
            cols.iter()
                .map(|(_, y)| match pearson(x, y) {
                    Ok(p) => CorrelationCell {
                        r: Some(p.r),
                        p_value: Some(p.p_value),
                        stars: significance_stars(p.p_value),
                        n,
                        note: None,
                    },
                    Err(e) => CorrelationCell {
                        r: None,
                        p_value: None,
                        stars: "",
                        n,
                        note: Some(match e {
                            StatsError::Constant("x") => "row feature is constant".to_string(),
                            StatsError::Constant(_) => "column feature is constant".to_string(),
                            other => other.to_string(),
                        }),
                    },
                })
                .collect()
        })
        .collect();
    Ok(CorrelationMatrix {
        row_names: rows.iter().map(|(n, _)| n.clone()).collect(),
        col_names: cols.iter().map(|(n, _)| n.clone()).collect(),
        cells,
    })
}

/// Identifies a session in feature tables.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SessionKey {
    pub participant_id: String,
    pub session_date: chrono::NaiveDate,
}

/// Writes one row per session: participant, date, behaviour counts,
/// conflict counts and the survey shift (blank when absent).
pub fn write_features_csv<W: io::Write>(
    w: W,
    rows: &[(SessionKey, SessionFeatures)],
    codebook: &Codebook,
) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    let bkeys = codebook.keys(Namespace::Behaviour);
    let ckeys = codebook.keys(Namespace::Conflict);
    let mut header = vec!["participant_id".to_string(), "date".to_string()];
    header.extend(bkeys.iter().chain(&ckeys).map(|k| k.to_string()));
    header.extend(["d_pleasure", "d_arousal", "d_dominance"].map(String::from));
    out.write_record(&header)?;
    for (key, f) in rows {
        let mut rec = vec![key.participant_id.clone(), key.session_date.to_string()];
        rec.extend(bkeys.iter().map(|k| f.behaviour_counts.get(k).copied().unwrap_or(0).to_string()));
        rec.extend(ckeys.iter().map(|k| f.conflict_counts.get(k).copied().unwrap_or(0).to_string()));
        match f.shift {
            Some(s) => rec.extend(s.as_array().map(|d| d.to_string())),
            None => rec.extend([String::new(), String::new(), String::new()]),
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Correlation grid with "r|stars" cells; undefined cells read "NA".
pub fn write_correlation_csv<W: io::Write>(w: W, m: &CorrelationMatrix) -> Result<(), csv::Error> {
    write_grid(w, m, |c| match c.r {
        Some(r) => format!("{r:.4}|{}", c.stars),
        None => "NA".to_string(),
    })
}

/// Companion grid of p-values.
pub fn write_p_value_csv<W: io::Write>(w: W, m: &CorrelationMatrix) -> Result<(), csv::Error> {
    write_grid(w, m, |c| c.p_value.map_or("NA".to_string(), |p| format!("{p:.6}")))
}

fn write_grid<W: io::Write>(w: W, m: &CorrelationMatrix, cell: impl Fn(&CorrelationCell) -> String) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec![String::new()];
    header.extend(m.col_names.iter().cloned());
    out.write_record(&header)?;
    for (name, row) in m.row_names.iter().zip(&m.cells) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(&cell));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
