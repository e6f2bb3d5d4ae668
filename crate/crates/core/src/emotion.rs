//! Sentence-level pleasure scores: filtering, binning, windowing, LOESS
//! smoothing and cross-session bands.

use std::collections::BTreeMap;
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transcript::Utterance;

pub const DEFAULT_MIN_CONTENT_CHARS: usize = 4;
pub const DEFAULT_BIN_WIDTH_MS: i64 = 15_000;
pub const DEFAULT_WINDOW_MS: i64 = 600_000;

#[derive(Debug, Error, PartialEq)]
pub enum EmotionError {
    #[error("scorer returned {returned} scores for {expected} sentences")]
    ContractViolation { expected: usize, returned: usize },
    #[error("no fixture score for sentence \"{0}\"")]
    NoFixtureScore(String),
    #[error("scorer failed: {0}")]
    Scorer(String),
    #[error("non-finite pleasure for utterance {0}")]
    NonFinite(u32),
    #[error("bin width must be positive, got {0}")]
    BinWidth(i64),
    #[error("frac must be in (0, 1], got {0}")]
    Frac(f64),
    #[error("only local linear smoothing is supported, got degree {0}")]
    Degree(u32),
    #[error("smoothing needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("smoothing window of {window} points out of {n} is too small; need at least 2")]
    WindowTooSmall { window: usize, n: usize },
    #[error("scores file: {0}")]
    Csv(String),
}

impl From<csv::Error> for EmotionError {
    fn from(e: csv::Error) -> Self {
        EmotionError::Csv(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmotionScore {
    pub pleasure: f64,
    pub arousal: Option<f64>,
    pub dominance: Option<f64>,
}

impl EmotionScore {
    pub fn pleasure(p: f64) -> Self {
        Self {
            pleasure: p,
            arousal: None,
            dominance: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentenceEmotion {
    pub utterance_id: u32,
    /// Midpoint of the utterance span.
    pub time_ms: i64,
    pub pleasure: f64,
    pub arousal: Option<f64>,
    pub dominance: Option<f64>,
}

/// Maps sentence texts to scores, one per text, in order.
pub trait EmotionScorer: Send + Sync {
    fn score(&self, texts: &[&str]) -> Result<Vec<EmotionScore>, EmotionError>;
}

/// Scores every sentence the same.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer(pub f64);

impl EmotionScorer for ConstantScorer {
    fn score(&self, texts: &[&str]) -> Result<Vec<EmotionScore>, EmotionError> {
        Ok(texts.iter().map(|_| EmotionScore::pleasure(self.0)).collect())
    }
}

/// Looks scores up by exact sentence text.
#[derive(Debug, Clone, Default)]
pub struct FixtureScorer {
    pub table: BTreeMap<String, EmotionScore>,
}

impl EmotionScorer for FixtureScorer {
    fn score(&self, texts: &[&str]) -> Result<Vec<EmotionScore>, EmotionError> {
        texts
            .iter()
            .map(|t| self.table.get(*t).copied().ok_or_else(|| EmotionError::NoFixtureScore(t.to_string())))
            .collect()
    }
}

/// Keeps utterances whose trimmed content has at least `min_content_chars`
/// characters.
pub fn filter_scorable(utterances: &[Utterance], min_content_chars: usize) -> Vec<&Utterance> {
    utterances
        .iter()
        .filter(|u| u.content.trim().chars().count() >= min_content_chars)
        .collect()
}

pub fn score_sentences(utterances: &[&Utterance], scorer: &dyn EmotionScorer) -> Result<Vec<SentenceEmotion>, EmotionError> {
    let texts: Vec<&str> = utterances.iter().map(|u| u.content.as_str()).collect();
    let scores = scorer.score(&texts)?;
    if scores.len() != utterances.len() {
        return Err(EmotionError::ContractViolation {
            expected: utterances.len(),
            returned: scores.len(),
        });
    }
    utterances
        .iter()
        .zip(scores)
        .map(|(u, s)| {
            if !s.pleasure.is_finite() {
                return Err(EmotionError::NonFinite(u.id));
            }
            Ok(SentenceEmotion {
                utterance_id: u.id,
                time_ms: u.start_ms + (u.end_ms - u.start_ms) / 2,
                pleasure: s.pleasure,
                arousal: s.arousal,
                dominance: s.dominance,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub bin_index: i64,
    pub mean: f64,
    pub count: usize,
}

/// Mean pleasure per fixed-width time bin. Empty bins are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedSeries {
    pub session_id: String,
    pub bin_width_ms: i64,
    pub values: Vec<Bin>,
}

impl BinnedSeries {
    /// Start of a bin, which is the time each bin is plotted at.
    pub fn bin_time_ms(&self, bin: &Bin) -> i64 {
        bin.bin_index * self.bin_width_ms
    }

    /// `(bin start, mean)` pairs.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.values.iter().map(|b| (self.bin_time_ms(b) as f64, b.mean)).collect()
    }
}

pub fn bin_series(session_id: &str, scores: &[SentenceEmotion], bin_width_ms: i64) -> Result<BinnedSeries, EmotionError> {
    if bin_width_ms <= 0 {
        return Err(EmotionError::BinWidth(bin_width_ms));
    }
    let mut bins: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    for s in scores {
        let slot = bins.entry(s.time_ms.div_euclid(bin_width_ms)).or_default();
        slot.0 += s.pleasure;
        slot.1 += 1;
    }
    Ok(BinnedSeries {
        session_id: session_id.to_string(),
        bin_width_ms,
        values: bins
            .into_iter()
            .map(|(bin_index, (sum, count))| Bin {
                bin_index,
                mean: sum / count as f64,
                count,
            })
            .collect(),
    })
}

/// Keeps bins whose start time is before `duration_ms`.
pub fn window_first(series: &BinnedSeries, duration_ms: i64) -> BinnedSeries {
    BinnedSeries {
        session_id: series.session_id.clone(),
        bin_width_ms: series.bin_width_ms,
        values: series.values.iter().filter(|b| series.bin_time_ms(b) < duration_ms).copied().collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothConfig {
    pub frac: f64,
    pub degree: u32,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        Self { frac: 0.1, degree: 1 }
    }
}

impl SmoothConfig {
    pub fn validate(&self) -> Result<(), EmotionError> {
        if !(self.frac > 0.0 && self.frac <= 1.0) {
            return Err(EmotionError::Frac(self.frac));
        }
        if self.degree != 1 {
            return Err(EmotionError::Degree(self.degree));
        }
        Ok(())
    }

    /// Neighbourhood size for `n` points.
    pub fn window(&self, n: usize) -> usize {
        ((self.frac * n as f64).ceil() as usize).min(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothedSeries {
    pub session_id: String,
    /// `(t, fitted)` sorted by `t`.
    pub points: Vec<(f64, f64)>,
}

fn tricube(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        let v = 1.0 - u * u * u;
        v * v * v
    }
}

/// LOESS fitted value at `x0`.
fn fit_at(x0: f64, pts: &[(f64, f64)], k: usize, dist: &mut Vec<f64>) -> f64 {
    dist.clear();
    dist.extend(pts.iter().map(|(x, _)| (x - x0).abs()));
    let h = *dist.clone().select_nth_unstable_by(k - 1, f64::total_cmp).1;
    let weight = |d: f64| if h > 0.0 { tricube(d / h) } else if d == 0.0 { 1.0 } else { 0.0 };
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (&(x, y), &d) in pts.iter().zip(dist.iter()) {
        let w = weight(d);
        sw += w;
        sx += w * x;
        sy += w * y;
    }
    let (mx, my) = (sx / sw, sy / sw);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (&(x, y), &d) in pts.iter().zip(dist.iter()) {
        let w = weight(d);
        sxx += w * (x - mx) * (x - mx);
        sxy += w * (x - mx) * (y - my);
    }
    // one distinct abscissa carries all the weight: the local fit is flat
    let spread = h.max(mx.abs()).max(1.0);
    if sxx <= 1e-12 * sw * spread * spread {
        return my;
    }
    my + sxy / sxx * (x0 - mx)
}

/// Local linear regression with tricube weights over the `⌈frac·n⌉`
/// nearest points, evaluated at every input abscissa. Points at exactly the
/// neighbourhood radius get weight zero.
pub fn loess_smooth(points: &[(f64, f64)], config: &SmoothConfig) -> Result<Vec<(f64, f64)>, EmotionError> {
    config.validate()?;
    let n = points.len();
    if n < 2 {
        return Err(EmotionError::TooFewPoints(n));
    }
    let k = config.window(n);
    if k < 2 {
        return Err(EmotionError::WindowTooSmall { window: k, n });
    }
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut dist = Vec::with_capacity(n);
    Ok(sorted.iter().map(|&(x, _)| (x, fit_at(x, &sorted, k, &mut dist))).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub t_ms: f64,
    pub mean: f64,
    /// Sample standard deviation over sessions divided by √n; absent for a
    /// single session.
    pub standard_error: Option<f64>,
    pub n_sessions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSeries {
    pub points: Vec<BandPoint>,
}

/// Linear interpolation of a sorted curve at `t`; `None` outside its range.
pub fn interpolate(curve: &[(f64, f64)], t: f64) -> Option<f64> {
    let (first, last) = (curve.first()?, curve.last()?);
    if t < first.0 || t > last.0 {
        return None;
    }
    let i = curve.partition_point(|p| p.0 < t);
    let hi = curve[i];
    if hi.0 == t {
        return Some(hi.1);
    }
    let lo = curve[i - 1];
    Some(lo.1 + (hi.1 - lo.1) * (t - lo.0) / (hi.0 - lo.0))
}

/// `start, start + step, …` up to and including `end`.
pub fn uniform_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let mut grid = Vec::new();
    let mut i = 0u32;
    loop {
        let t = start + step * i as f64;
        if t > end {
            return grid;
        }
        grid.push(t);
        i += 1;
    }
}

/// Mean and standard error of the session curves at each grid point. Each
/// curve contributes only inside its own time range; points nobody covers
/// are omitted.
pub fn band_across_sessions(curves: &[SmoothedSeries], grid: &[f64]) -> BandSeries {
    let mut points = Vec::new();
    for &t in grid {
        let values: Vec<f64> = curves.iter().filter_map(|c| interpolate(&c.points, t)).collect();
        if values.is_empty() {
            continue;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let standard_error = (values.len() > 1).then(|| {
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            var.sqrt() / n.sqrt()
        });
        points.push(BandPoint {
            t_ms: t,
            mean,
            standard_error,
            n_sessions: values.len(),
        });
    }
    BandSeries { points }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmotionConfig {
    pub min_content_chars: usize,
    pub bin_width_ms: i64,
    /// `None` keeps whole sessions.
    pub window_ms: Option<i64>,
    pub smooth: SmoothConfig,
}

impl Default for EmotionConfig {
    fn default() -> Self {
        Self {
            min_content_chars: DEFAULT_MIN_CONTENT_CHARS,
            bin_width_ms: DEFAULT_BIN_WIDTH_MS,
            window_ms: Some(DEFAULT_WINDOW_MS),
            smooth: SmoothConfig::default(),
        }
    }
}

impl EmotionConfig {
    pub fn validate(&self) -> Result<(), EmotionError> {
        if self.bin_width_ms <= 0 {
            return Err(EmotionError::BinWidth(self.bin_width_ms));
        }
        self.smooth.validate()
    }
}

/// Bins, windows and smooths one session's scores.
pub fn session_curve(session_id: &str, scores: &[SentenceEmotion], config: &EmotionConfig) -> Result<(BinnedSeries, SmoothedSeries), EmotionError> {
    let binned = bin_series(session_id, scores, config.bin_width_ms)?;
    let binned = match config.window_ms {
        Some(w) => window_first(&binned, w),
        None => binned,
    };
    let points = loess_smooth(&binned.points(), &config.smooth)?;
    let smoothed = SmoothedSeries {
        session_id: session_id.to_string(),
        points,
    };
    Ok((binned, smoothed))
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    utterance_id: u32,
    time_ms: i64,
    pleasure: f64,
    arousal: Option<f64>,
    dominance: Option<f64>,
}

pub fn write_scores_csv<W: io::Write>(w: W, scores: &[SentenceEmotion]) -> Result<(), EmotionError> {
    let mut out = csv::Writer::from_writer(w);
    for s in scores {
        out.serialize(ScoreRow {
            utterance_id: s.utterance_id,
            time_ms: s.time_ms,
            pleasure: s.pleasure,
            arousal: s.arousal,
            dominance: s.dominance,
        })?;
    }
    out.flush().map_err(|e| EmotionError::Csv(e.to_string()))
}

/// Reads `utterance_id,time_ms,pleasure[,arousal,dominance]` rows.
pub fn read_scores_csv<R: io::Read>(r: R) -> Result<Vec<SentenceEmotion>, EmotionError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(r);
    reader
        .deserialize::<ScoreRow>()
        .map(|row| {
            let r = row?;
            if !r.pleasure.is_finite() {
                return Err(EmotionError::NonFinite(r.utterance_id));
            }
            Ok(SentenceEmotion {
                utterance_id: r.utterance_id,
                time_ms: r.time_ms,
                pleasure: r.pleasure,
                arousal: r.arousal,
                dominance: r.dominance,
            })
        })
        .collect()
}

/// `t_ms,mean,se,n` rows for a band.
pub fn write_band_csv<W: io::Write>(w: W, band: &BandSeries) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t_ms", "mean", "se", "n"])?;
    for p in &band.points {
        out.write_record([
            format!("{}", p.t_ms),
            format!("{:.6}", p.mean),
            p.standard_error.map_or(String::new(), |se| format!("{se:.6}")),
            p.n_sessions.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
