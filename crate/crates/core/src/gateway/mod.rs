//! Prompt templating, chat backends, response extraction and transcript repair.

pub mod backend;
pub mod correction;
pub mod extract;
pub mod lenient;
pub mod template;

pub use backend::{
    prompt_hash, BackendConfig, BackendKind, ChatBackend, ChatExchange, Gateway, GatewayError, HttpChatBackend, MockBackend,
};
pub use correction::{correct_transcript, plan_chunks, ChunkPlan, CorrectionError, CorrectionOutcome};
pub use extract::{extract_structured_block, BehaviourRecord, ConflictRecord, CorrectionRecord, ExtractError, StructuredBlock};
pub use template::{render_prompt, OutputShape, PromptTemplate, TemplateError, TemplateName};
