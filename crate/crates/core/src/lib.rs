//! Library behind the `hwdyn` pipeline: transcripts, LLM-assisted coding,
//! agreement statistics, emotion dynamics and session statistics.

pub mod agreement;
pub mod annotation;
pub mod codebook;
pub mod emotion;
pub mod gateway;
pub mod special;
pub mod pipeline;
pub mod report;
pub mod stats;
pub mod store;
pub mod transcript;
pub mod validation;
