//! Sessions, transcripts and pause-based utterance segmentation.
//!
//! Raw ASR output arrives as [`TimedSegment`]s. Consecutive segments from the
//! same speaker separated by a pause of at most the configured threshold are
//! joined into one [`Utterance`]; a longer pause or a change of speaker starts
//! a new one.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::validation::{Locus, ValidationReport};

pub const DEFAULT_PAUSE_THRESHOLD_MS: i64 = 2_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TranscriptError {
    #[error("segments out of order: segment {index} starts at {start_ms} ms, before its predecessor at {previous_start_ms} ms")]
    Unordered {
        index: usize,
        start_ms: i64,
        previous_start_ms: i64,
    },
    #[error("segment {index} ends before it starts ({start_ms} > {end_ms})")]
    NegativeSpan { index: usize, start_ms: i64, end_ms: i64 },
    #[error("segment {index} has empty text")]
    EmptyText { index: usize },
    #[error("segment {index} has no timestamps; segmentation needs timed input")]
    MissingTimestamp { index: usize },
    #[error("pause threshold must be positive, got {0} ms")]
    InvalidThreshold(i64),
    #[error("recordings {first} and {second} share the start offset {offset_ms} ms")]
    DuplicateOffset {
        first: usize,
        second: usize,
        offset_ms: i64,
    },
}

/// One raw transcription unit as produced by the ASR/diarization tool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimedSegment {
    pub start_ms: i64,
    pub end_ms: i64,
    #[serde(rename = "speaker")]
    pub speaker_label: String,
    pub text: String,
}

impl TimedSegment {
    pub fn new(start_ms: i64, end_ms: i64, speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            start_ms,
            end_ms,
            speaker_label: speaker.into(),
            text: text.into(),
        }
    }
}

/// A segment as read from disk, where timestamps may be absent.
#[derive(Debug, Clone, Deserialize)]
pub struct RawSegment {
    pub start_ms: Option<i64>,
    pub end_ms: Option<i64>,
    pub speaker: String,
    pub text: String,
}

impl RawSegment {
    pub fn into_timed(self, index: usize) -> Result<TimedSegment, TranscriptError> {
        match (self.start_ms, self.end_ms) {
            (Some(start_ms), Some(end_ms)) => Ok(TimedSegment {
                start_ms,
                end_ms,
                speaker_label: self.speaker,
                text: self.text,
            }),
            _ => Err(TranscriptError::MissingTimestamp { index }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: u32,
    #[serde(rename = "speaker")]
    pub speaker_label: String,
    pub start_ms: i64,
    pub end_ms: i64,
    pub content: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub utterances: Vec<Utterance>,
    pub source_recording_ids: Vec<String>,
}

impl Transcript {
    pub fn new(utterances: Vec<Utterance>) -> Self {
        Self {
            utterances,
            source_recording_ids: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Distinct speaker labels in order of first appearance.
    pub fn speaker_labels(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for u in &self.utterances {
            if !seen.contains(&u.speaker_label.as_str()) {
                seen.push(&u.speaker_label);
            }
        }
        seen
    }

    pub fn get(&self, id: u32) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.id == id)
    }

    /// Largest utterance id, or 0 for an empty transcript.
    pub fn max_id(&self) -> u32 {
        self.utterances.iter().map(|u| u.id).max().unwrap_or(0)
    }

    fn renumber(&mut self) {
        for (i, u) in self.utterances.iter_mut().enumerate() {
            u.id = i as u32 + 1;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    pub pause_threshold_ms: i64,
}

impl SegmentationConfig {
    pub fn new(pause_threshold_ms: i64) -> Result<Self, TranscriptError> {
        if pause_threshold_ms <= 0 {
            return Err(TranscriptError::InvalidThreshold(pause_threshold_ms));
        }
        Ok(Self { pause_threshold_ms })
    }

    pub fn validate(&self) -> Result<(), TranscriptError> {
        Self::new(self.pause_threshold_ms).map(|_| ())
    }
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            pause_threshold_ms: DEFAULT_PAUSE_THRESHOLD_MS,
        }
    }
}

/// Joins timed segments into utterances with the pause rule.
///
/// A segment extends the current utterance when it has the same speaker label
/// and starts no more than `pause_threshold_ms` after the current utterance's
/// last segment ended. Joined texts are separated by a single space.
pub fn segment_by_pause(
    segments: &[TimedSegment],
    config: &SegmentationConfig,
) -> Result<Transcript, TranscriptError> {
    config.validate()?;
    for (index, seg) in segments.iter().enumerate() {
        if seg.end_ms < seg.start_ms {
            return Err(TranscriptError::NegativeSpan {
                index,
                start_ms: seg.start_ms,
                end_ms: seg.end_ms,
            });
        }
        if seg.text.trim().is_empty() {
            return Err(TranscriptError::EmptyText { index });
        }
        if index > 0 && seg.start_ms < segments[index - 1].start_ms {
            return Err(TranscriptError::Unordered {
                index,
                start_ms: seg.start_ms,
                previous_start_ms: segments[index - 1].start_ms,
            });
        }
    }

    let mut utterances: Vec<Utterance> = Vec::new();
    // end of the previous segment, not of the utterance: the gap is measured
    // segment to segment
    let mut previous_end = i64::MIN;
    for seg in segments {
        let joins = match utterances.last() {
            Some(current) => {
                current.speaker_label == seg.speaker_label
                    && seg.start_ms - previous_end <= config.pause_threshold_ms
            }
            None => false,
        };
        if joins {
            let current = utterances.last_mut().expect("checked above");
            current.content.push(' ');
            current.content.push_str(&seg.text);
            current.end_ms = current.end_ms.max(seg.end_ms);
        } else {
            utterances.push(Utterance {
                id: 0,
                speaker_label: seg.speaker_label.clone(),
                start_ms: seg.start_ms,
                end_ms: seg.end_ms,
                content: seg.text.clone(),
            });
        }
        previous_end = seg.end_ms;
    }

    let mut transcript = Transcript::new(utterances);
    transcript.renumber();
    Ok(transcript)
}

/// A transcript together with the absolute start of its recording.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlacedTranscript {
    pub offset_ms: i64,
    pub transcript: Transcript,
}

/// Merges several recordings of one session into a single transcript on an
/// absolute time axis. Overlapping recordings are ordered by start time and
/// reported as warnings.
pub fn merge_recordings(
    recordings: &[PlacedTranscript],
) -> Result<(Transcript, ValidationReport), TranscriptError> {
    let mut report = ValidationReport::new();
    for (i, a) in recordings.iter().enumerate() {
        for (j, b) in recordings.iter().enumerate().skip(i + 1) {
            if a.offset_ms == b.offset_ms {
                return Err(TranscriptError::DuplicateOffset {
                    first: i,
                    second: j,
                    offset_ms: a.offset_ms,
                });
            }
        }
    }

    let mut order: Vec<usize> = (0..recordings.len()).collect();
    order.sort_by_key(|&i| recordings[i].offset_ms);
    let mut latest_end: Option<(usize, i64)> = None;
    for &i in &order {
        let rec = &recordings[i];
        let start = rec.offset_ms + rec.transcript.utterances.iter().map(|u| u.start_ms).min().unwrap_or(0);
        let end = rec.offset_ms + rec.transcript.utterances.iter().map(|u| u.end_ms).max().unwrap_or(0);
        if let Some((prev, prev_end)) = latest_end {
            if start < prev_end {
                report.warn(
                    Locus::Recording(i),
                    format!("recording {i} starts at {start} ms, before recording {prev} ends at {prev_end} ms"),
                );
            }
        }
        if latest_end.is_none_or(|(_, e)| end > e) {
            latest_end = Some((i, end));
        }
    }

    let mut keyed: Vec<(i64, usize, usize, Utterance)> = Vec::new();
    let mut source_recording_ids = Vec::new();
    for (rec_index, rec) in recordings.iter().enumerate() {
        source_recording_ids.extend(rec.transcript.source_recording_ids.iter().cloned());
        for (pos, u) in rec.transcript.utterances.iter().enumerate() {
            let mut u = u.clone();
            u.start_ms += rec.offset_ms;
            u.end_ms += rec.offset_ms;
            keyed.push((u.start_ms, rec_index, pos, u));
        }
    }
    keyed.sort_by_key(|(start, rec, pos, _)| (*start, *rec, *pos));

    let mut merged = Transcript {
        utterances: keyed.into_iter().map(|(_, _, _, u)| u).collect(),
        source_recording_ids,
    };
    merged.renumber();
    Ok((merged, report))
}

/// Reports every violated transcript invariant. Never fails.
pub fn validate_transcript(t: &Transcript) -> ValidationReport {
    let mut report = ValidationReport::new();
    let mut previous_id = 0u32;
    let mut previous_start: Option<i64> = None;
    for (i, u) in t.utterances.iter().enumerate() {
        if u.id == previous_id + 1 {
            // contiguous
        } else if u.id > previous_id {
            if previous_id == 0 {
                report.error(Locus::Utterance(i), format!("ids start at {}, expected 1", u.id));
            } else {
                report.error(Locus::Utterance(i), format!("id gap after {previous_id}"));
            }
        } else {
            report.error(
                Locus::Utterance(i),
                format!("id {} is not greater than preceding id {previous_id}", u.id),
            );
        }
        previous_id = previous_id.max(u.id);

        if u.end_ms < u.start_ms {
            report.error(
                Locus::Utterance(i),
                format!("utterance {} ends before it starts ({} > {})", u.id, u.start_ms, u.end_ms),
            );
        }
        if let Some(prev) = previous_start {
            if u.start_ms < prev {
                report.error(
                    Locus::Utterance(i),
                    format!("utterance {} starts at {} ms, before its predecessor at {prev} ms", u.id, u.start_ms),
                );
            }
        }
        previous_start = Some(u.start_ms);
        if u.content.trim().is_empty() {
            report.error(Locus::Utterance(i), format!("utterance {} has empty content", u.id));
        }
    }
    report
}
