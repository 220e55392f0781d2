pub mod embedding;
pub mod ensemble;
pub mod eval;
pub mod fixtures;
pub mod gateway;
pub mod model;
pub mod parser;
pub mod pipeline;
pub mod prompt;
pub mod retrieval;
pub mod store;
pub mod text;
pub mod workflow;

pub use ensemble::{AggregateResult, EnsembleConfig, Variation};
pub use gateway::{Gateway, ProviderConfig, ProviderKind};
pub use model::{DocId, DraftDocument, FmeaDocument, Provenance, StepKind};
pub use parser::ParsedFragment;
pub use prompt::PromptMode;
pub use retrieval::{ExampleCandidate, Retriever};
pub use store::{CorpusSplit, CorpusStore, SplitPart};
pub use workflow::{Session, WorkflowService, WorkflowSettings};
