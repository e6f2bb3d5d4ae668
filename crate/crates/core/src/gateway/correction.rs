//! Chunked transcription repair.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::backend::{Gateway, GatewayError};
use super::extract::{extract_structured_block, StructuredBlock};
use super::template::{dialogue_records, render_prompt, transcript_context, PromptTemplate, TemplateError, TemplateName};
use crate::transcript::Transcript;
use crate::validation::{Locus, ValidationReport};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorrectionError {
    #[error("invalid chunk plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub max_utterances_per_chunk: usize,
    pub overlap_utterances: usize,
}

impl Default for ChunkPlan {
    fn default() -> Self {
        Self {
            max_utterances_per_chunk: 50,
            overlap_utterances: 1,
        }
    }
}

impl ChunkPlan {
    pub fn new(max_utterances_per_chunk: usize, overlap_utterances: usize) -> Result<Self, CorrectionError> {
        let plan = Self {
            max_utterances_per_chunk,
            overlap_utterances,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<(), CorrectionError> {
        if self.max_utterances_per_chunk == 0 {
            return Err(CorrectionError::Plan("max_utterances_per_chunk must be >= 1".into()));
        }
        if self.overlap_utterances >= self.max_utterances_per_chunk {
            return Err(CorrectionError::Plan(format!(
                "overlap_utterances ({}) must be less than max_utterances_per_chunk ({})",
                self.overlap_utterances, self.max_utterances_per_chunk
            )));
        }
        Ok(())
    }
}

/// Inclusive 1-based position ranges over `n` utterances. Positions equal ids
/// in a valid transcript.
pub fn plan_ranges(n: usize, plan: &ChunkPlan) -> Vec<RangeInclusive<usize>> {
    let mut ranges = Vec::new();
    if n == 0 {
        return ranges;
    }
    let step = plan.max_utterances_per_chunk - plan.overlap_utterances;
    let mut start = 1;
    loop {
        let end = (start + plan.max_utterances_per_chunk - 1).min(n);
        ranges.push(start..=end);
        if end == n {
            return ranges;
        }
        start += step;
    }
}

/// Utterance-id ranges for each chunk.
pub fn plan_chunks(t: &Transcript, plan: &ChunkPlan) -> Vec<RangeInclusive<u32>> {
    plan_ranges(t.len(), plan)
        .into_iter()
        .map(|r| t.utterances[r.start() - 1].id..=t.utterances[r.end() - 1].id)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionOutcome {
    pub transcript: Transcript,
    pub report: ValidationReport,
    /// Chat calls made, including retries after a rejected response.
    pub requests: usize,
}

/// Renders the transcription-fix prompt for a slice of utterances.
pub fn correction_prompt(utterances: &[crate::transcript::Utterance]) -> Result<String, TemplateError> {
    let template = PromptTemplate::golden(TemplateName::TranscriptionFix);
    let records = dialogue_records(utterances.iter(), |u| u.speaker_label.as_str());
    render_prompt(&template, &transcript_context(records))
}

/// Why a chunk response was rejected.
fn check_response(raw: &str, expected_ids: &[u32], chunk: usize) -> Result<BTreeMap<u32, String>, String> {
    let block = extract_structured_block(raw, TemplateName::TranscriptionFix.expected_output_shape())
        .map_err(|e| format!("unusable response chunk {chunk}: {e}"))?;
    let StructuredBlock::Records(records) = block else {
        unreachable!("record list shape yields records")
    };
    if records.len() != expected_ids.len() {
        return Err(format!("length mismatch chunk {chunk}"));
    }
    let mut out = BTreeMap::new();
    for r in records {
        let id = u32::try_from(r.id).map_err(|_| format!("id mismatch chunk {chunk}"))?;
        if r.content.trim().is_empty() {
            return Err(format!("empty content for id {id} chunk {chunk}"));
        }
        out.insert(id, r.content);
    }
    if out.len() != expected_ids.len() || !expected_ids.iter().all(|id| out.contains_key(id)) {
        return Err(format!("id mismatch chunk {chunk}"));
    }
    Ok(out)
}

/// Sends each chunk through the transcription-fix prompt and splices the
/// returned contents back. Only `content` can change. A rejected response is
/// retried once; if the retry is also rejected the chunk keeps its original
/// text and a warning is recorded. Backend errors abort the run.
pub fn correct_transcript(t: &Transcript, gateway: &Gateway, plan: &ChunkPlan) -> Result<CorrectionOutcome, CorrectionError> {
    plan.validate()?;
    let mut transcript = t.clone();
    let mut report = ValidationReport::default();
    let mut requests = 0;
    for (k, range) in plan_ranges(t.len(), plan).into_iter().enumerate() {
        let chunk = &t.utterances[range.start() - 1..*range.end()];
        let ids: Vec<u32> = chunk.iter().map(|u| u.id).collect();
        let prompt = correction_prompt(chunk)?;
        let mut accepted = None;
        let mut last_problem = String::new();
        for _ in 0..2 {
            requests += 1;
            let exchange = gateway.complete(&prompt)?;
            match check_response(&exchange.raw_response, &ids, k) {
                Ok(contents) => {
                    accepted = Some(contents);
                    break;
                }
                Err(problem) => {
                    log::debug!("{problem}");
                    last_problem = problem;
                }
            }
        }
        match accepted {
            Some(contents) => {
                // later chunks overwrite the overlap written by earlier ones
                for (pos, u) in (*range.start()..=*range.end()).zip(chunk) {
                    transcript.utterances[pos - 1].content = contents[&u.id].clone();
                }
            }
            // untouched positions still hold the original text; an overlap
            // keeps the earlier chunk's accepted correction
            None => report.warn(Locus::Chunk(k), last_problem),
        }
    }
    Ok(CorrectionOutcome {
        transcript,
        report,
        requests,
    })
}
